#![allow(dead_code)]

use proptest::prelude::*;
use riskner::tagcodec::{decode_spans, EntitySpan, Tag};

pub const CATEGORIES: usize = 6;

/// Any tag, valid or not.
pub fn any_tag() -> impl Strategy<Value = Tag> {
    prop_oneof![
        Just(Tag::Outside),
        (0..CATEGORIES).prop_map(Tag::Begin),
        (0..CATEGORIES).prop_map(Tag::Inside),
    ]
}

/// Arbitrary (often invalid) tag sequences.
pub fn tag_sequence(max_len: usize) -> impl Strategy<Value = Vec<Tag>> {
    prop::collection::vec(any_tag(), 0..=max_len)
}

/// Valid IOB2 sequences: an orphan I is rewritten to B during generation.
pub fn valid_tags(max_len: usize) -> impl Strategy<Value = Vec<Tag>> {
    tag_sequence(max_len).prop_map(|tags| {
        let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
        for t in tags {
            let fixed = match (out.last(), t) {
                (Some(Tag::Begin(p)) | Some(Tag::Inside(p)), Tag::Inside(c)) if *p == c => t,
                (_, Tag::Inside(c)) => Tag::Begin(c),
                _ => t,
            };
            out.push(fixed);
        }
        out
    })
}

/// A sentence length and a valid, sorted, non-overlapping span set.
pub fn span_set(max_len: usize) -> impl Strategy<Value = (usize, Vec<EntitySpan>)> {
    valid_tags(max_len).prop_map(|tags| {
        let spans = decode_spans(&tags).expect("generated tags are valid");
        (tags.len(), spans)
    })
}

/// Valid span sets of a fixed length with at most `max_entities` entities.
pub fn limited_spans(len: usize, max_entities: usize) -> impl Strategy<Value = Vec<EntitySpan>> {
    prop::collection::vec((0..CATEGORIES, 0..len, 1..=len), 0..=max_entities).prop_map(move |raw| {
        let mut taken = vec![false; len];
        let mut out = Vec::new();
        for (c, start, width) in raw {
            let end = (start + width).min(len);
            if taken[start..end].iter().any(|&t| t) {
                continue;
            }
            taken[start..end].fill(true);
            out.push(EntitySpan::new(c, start, end));
        }
        out.sort();
        out
    })
}

/// Brute-force exact matcher: every gold/pred pair is compared.
pub fn brute_force_counts(gold: &[EntitySpan], pred: &[EntitySpan], categories: usize) -> Vec<(u64, u64, u64)> {
    (0..categories)
        .map(|c| {
            let g: Vec<&EntitySpan> = gold.iter().filter(|s| s.category == c).collect();
            let p: Vec<&EntitySpan> = pred.iter().filter(|s| s.category == c).collect();
            let mut tp = 0;
            for a in &p {
                for b in &g {
                    if a.start == b.start && a.end == b.end {
                        tp += 1;
                    }
                }
            }
            (tp, p.len() as u64 - tp, g.len() as u64 - tp)
        })
        .collect()
}
