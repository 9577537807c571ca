//! Conversion between IOB2 label sequences and typed entity spans.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TagScheme;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("invalid BIO sequence at position {0}")]
    InvalidSequence(usize),
    #[error("overlapping spans")]
    OverlappingSpans,
    #[error("span {start}..{end} out of range for length {length}")]
    SpanOutOfRange { start: usize, end: usize, length: usize },
}

/// One BIO tag; the payload is a category index into the scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl Tag {
    /// Label id layout: 0 = O, 1 + 2c = B-c, 2 + 2c = I-c.
    pub fn from_label_id(id: usize) -> Self {
        match id {
            0 => Tag::Outside,
            n if n % 2 == 1 => Tag::Begin((n - 1) / 2),
            n => Tag::Inside((n - 2) / 2),
        }
    }

    pub fn label_id(self) -> usize {
        match self {
            Tag::Outside => 0,
            Tag::Begin(c) => 1 + 2 * c,
            Tag::Inside(c) => 2 + 2 * c,
        }
    }

    pub fn category(self) -> Option<usize> {
        match self {
            Tag::Outside => None,
            Tag::Begin(c) | Tag::Inside(c) => Some(c),
        }
    }

    pub fn to_label(self, scheme: &TagScheme) -> &str {
        scheme.label(self.label_id())
    }
}

/// A typed entity covering tokens `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub category: usize,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(category: usize, start: usize, end: usize) -> Self {
        Self { category, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// True when `tag` at this point would be an orphan I (after start, O, or
/// another category).
fn is_orphan(prev: Option<Tag>, tag: Tag) -> bool {
    match tag {
        Tag::Inside(c) => !matches!(prev, Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == c),
        _ => false,
    }
}

fn collect_spans(tags: &[Tag], strict: bool) -> Result<Vec<EntitySpan>, TagError> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let mut prev = None;
    for (i, &tag) in tags.iter().enumerate() {
        let orphan = is_orphan(prev, tag);
        if orphan && strict {
            return Err(TagError::InvalidSequence(i));
        }
        let starts_new = matches!(tag, Tag::Begin(_)) || orphan;
        if starts_new || tag == Tag::Outside {
            if let Some((c, s)) = open.take() {
                spans.push(EntitySpan::new(c, s, i));
            }
        }
        if starts_new {
            open = tag.category().map(|c| (c, i));
        }
        prev = Some(tag);
    }
    if let Some((c, s)) = open {
        spans.push(EntitySpan::new(c, s, tags.len()));
    }
    Ok(spans)
}

/// Strict IOB2 decoding: every entity must open with B.
pub fn decode_spans(tags: &[Tag]) -> Result<Vec<EntitySpan>, TagError> {
    collect_spans(tags, true)
}

/// Decoding that treats an orphan I-X as B-X (same reading as [`repair_tags`]).
pub fn decode_spans_lenient(tags: &[Tag]) -> Vec<EntitySpan> {
    collect_spans(tags, false).expect("lenient decoding cannot fail")
}

pub fn encode_spans(spans: &[EntitySpan], length: usize) -> Result<Vec<Tag>, TagError> {
    let mut tags = vec![Tag::Outside; length];
    let mut taken = vec![false; length];
    for s in spans {
        if s.start >= s.end || s.end > length {
            return Err(TagError::SpanOutOfRange {
                start: s.start,
                end: s.end,
                length,
            });
        }
        if taken[s.start..s.end].iter().any(|&t| t) {
            return Err(TagError::OverlappingSpans);
        }
        taken[s.start..s.end].fill(true);
        tags[s.start] = Tag::Begin(s.category);
        for t in &mut tags[s.start + 1..s.end] {
            *t = Tag::Inside(s.category);
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fix {
    pub position: usize,
    pub original: Tag,
    pub repaired: Tag,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepairReport {
    pub fixes: Vec<Fix>,
}

impl RepairReport {
    pub fn is_clean(&self) -> bool {
        self.fixes.is_empty()
    }
}

/// Rewrites every orphan I-X to B-X.
pub fn repair_tags(tags: &[Tag]) -> (Vec<Tag>, RepairReport) {
    let mut out = Vec::with_capacity(tags.len());
    let mut report = RepairReport::default();
    let mut prev = None;
    for (i, &tag) in tags.iter().enumerate() {
        let fixed = match tag {
            Tag::Inside(c) if is_orphan(prev, tag) => {
                let repaired = Tag::Begin(c);
                report.fixes.push(Fix {
                    position: i,
                    original: tag,
                    repaired,
                });
                repaired
            }
            _ => tag,
        };
        out.push(fixed);
        prev = Some(fixed);
    }
    (out, report)
}
