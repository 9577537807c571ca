//! BIO-annotated corpora: CoNLL-style parsing, seeded splitting,
//! vocabulary construction and fixed-length model encoding.

use std::collections::HashMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tagcodec::{self, EntitySpan, Tag};

/// Label id used on positions excluded from loss and evaluation.
pub const IGNORE: i64 = -1;

/// The six construction-supply-chain risk categories.
pub const DEFAULT_ENTITY_TYPES: [&str; 6] = ["PER", "RRE", "PNR", "OSC", "GPU", "CMS"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: malformed line, expected \"surface<TAB>label\"")]
    MalformedLine { line: usize },
    #[error("line {line}: empty sentence")]
    EmptySentence { line: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("sentence of {tokens} tokens exceeds max_len {max_len}")]
    Truncation { tokens: usize, max_len: usize },
    #[error("duplicate entity type {0:?}")]
    DuplicateEntityType(String),
}

/// Whether recoverable input problems are errors or warnings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    #[default]
    Lenient,
    Strict,
}

/// Label inventory: `O`, then `B-c`, `I-c` for each category in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    entity_types: Vec<String>,
    labels: Vec<String>,
}

impl TagScheme {
    pub fn new<S: AsRef<str>>(entity_types: &[S]) -> Result<Self, CorpusError> {
        let mut types: Vec<String> = Vec::with_capacity(entity_types.len());
        for t in entity_types {
            let t = t.as_ref().to_string();
            if types.contains(&t) {
                return Err(CorpusError::DuplicateEntityType(t));
            }
            types.push(t);
        }
        let mut labels = vec!["O".to_string()];
        for t in &types {
            labels.push(format!("B-{t}"));
            labels.push(format!("I-{t}"));
        }
        Ok(Self {
            entity_types: types,
            labels,
        })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_categories(&self) -> usize {
        self.entity_types.len()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        if label == "O" {
            return Some(0);
        }
        let (prefix, cat) = label.split_once('-')?;
        let c = self.entity_types.iter().position(|t| t == cat)?;
        match prefix {
            "B" => Some(1 + 2 * c),
            "I" => Some(2 + 2 * c),
            _ => None,
        }
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn category_id(&self, code: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == code)
    }

    pub fn tag(&self, id: usize) -> Tag {
        Tag::from_label_id(id)
    }
}

impl Default for TagScheme {
    fn default() -> Self {
        Self::new(&DEFAULT_ENTITY_TYPES).expect("default scheme has unique categories")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub gold_label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    #[serde(default)]
    pub source_id: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.tokens.iter().map(|t| Tag::from_label_id(t.gold_label)).collect()
    }

    /// Gold entity spans, read leniently so malformed gold never panics.
    pub fn gold_spans(&self) -> Vec<EntitySpan> {
        tagcodec::decode_spans_lenient(&self.tags())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Self { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Entity counts per category, indexed like `scheme.entity_types()`.
    pub fn entity_counts(&self, scheme: &TagScheme) -> Vec<usize> {
        let mut counts = vec![0; scheme.num_categories()];
        for s in &self.sentences {
            for span in s.gold_spans() {
                counts[span.category] += 1;
            }
        }
        counts
    }

    pub fn entity_total(&self, scheme: &TagScheme) -> usize {
        self.entity_counts(scheme).iter().sum()
    }
}

/// Parse result plus non-fatal diagnostics collected in lenient mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    pub warnings: Vec<CorpusError>,
}

fn is_comment(line: &str) -> bool {
    line == "#" || line.starts_with("# ")
}

/// Parses the CoNLL-style column format.
///
/// One `surface<TAB>label` (or `surface label`) per line, a blank line
/// closes a sentence, and lines starting with `# ` are comments. A
/// `# id: <source>` comment sets the source id of the sentences that
/// follow it.
pub fn parse_conll(text: &str, scheme: &TagScheme, strictness: Strictness) -> Result<ParsedCorpus, CorpusError> {
    let mut sentences = Vec::new();
    let mut warnings = Vec::new();
    let mut current = Sentence::default();
    let mut source_id = String::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if current.is_empty() {
                let err = CorpusError::EmptySentence { line: line_no };
                match strictness {
                    Strictness::Strict => return Err(err),
                    Strictness::Lenient => {
                        warn!("{err}; skipped");
                        warnings.push(err);
                    }
                }
            } else {
                sentences.push(std::mem::take(&mut current));
            }
            current.source_id = source_id.clone();
            continue;
        }
        if is_comment(line) {
            if let Some(id) = line.strip_prefix("# id:") {
                source_id = id.trim().to_string();
                if current.is_empty() {
                    current.source_id = source_id.clone();
                }
            }
            continue;
        }
        let (surface, label) = if let Some((s, l)) = line.split_once('\t') {
            (s, l)
        } else {
            line.split_once(' ')
                .ok_or(CorpusError::MalformedLine { line: line_no })?
        };
        let label = label.trim();
        if surface.is_empty()
            || surface.chars().any(char::is_whitespace)
            || label.is_empty()
            || label.chars().any(char::is_whitespace)
        {
            return Err(CorpusError::MalformedLine { line: line_no });
        }
        let gold_label = scheme.label_id(label).ok_or_else(|| CorpusError::UnknownLabel {
            line: line_no,
            label: label.to_string(),
        })?;
        current.tokens.push(Token {
            surface: surface.to_string(),
            gold_label,
        });
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(ParsedCorpus {
        corpus: Corpus { sentences },
        warnings,
    })
}

/// Writes a corpus back to the column format parsed by [`parse_conll`].
pub fn serialize_conll(corpus: &Corpus, scheme: &TagScheme) -> String {
    let mut out = String::new();
    let mut source = "";
    for s in &corpus.sentences {
        if s.source_id != source {
            let _ = writeln!(out, "# id: {}", s.source_id);
            source = &s.source_id;
        }
        for t in &s.tokens {
            let _ = writeln!(out, "{}\t{}", t.surface, scheme.label(t.gold_label));
        }
        out.push('\n');
    }
    out
}

/// Train/validation/test partition of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
    /// Original sentence indices of each part, in part order.
    pub train_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitSet {
    /// Realized entity totals for (train, validation, test).
    pub fn entity_totals(&self, scheme: &TagScheme) -> [usize; 3] {
        [
            self.train.entity_total(scheme),
            self.validation.entity_total(scheme),
            self.test.entity_total(scheme),
        ]
    }
}

/// Shuffles sentence indices with SplitMix64 (Fisher-Yates) and cuts the
/// permutation at the rounded cumulative ratio boundaries.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitSet, CorpusError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);

    let cut1 = ((ratios[0] * n as f64).round() as usize).min(n);
    let cut2 = (((ratios[0] + ratios[1]) * n as f64).round() as usize).clamp(cut1, n);
    let pick = |ids: &[usize]| Corpus::new(ids.iter().map(|&i| corpus.sentences[i].clone()).collect());
    let (train_ids, rest) = order.split_at(cut1);
    let (validation_ids, test_ids) = rest.split_at(cut2 - cut1);
    Ok(SplitSet {
        train: pick(train_ids),
        validation: pick(validation_ids),
        test: pick(test_ids),
        train_ids: train_ids.to_vec(),
        validation_ids: validation_ids.to_vec(),
        test_ids: test_ids.to_vec(),
        seed,
        ratios,
    })
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Dense token-to-id map with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }

    /// Builds from non-reserved tokens in id order (ids start at 4).
    /// Duplicates and reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens after the reserved block, in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

/// Frequency-ranked vocabulary: count >= `min_freq`, most frequent first,
/// ties lexicographic, total size (reserved included) at most `max_size`.
pub fn build_vocab(corpus: &Corpus, min_freq: usize, max_size: usize) -> Vocabulary {
    let min_freq = min_freq.max(1);
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in &corpus.sentences {
        for t in &s.tokens {
            *freq.entry(t.surface.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(tok, c)| c >= min_freq && !RESERVED.contains(&tok))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let room = max_size.saturating_sub(RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
}

/// How surfaces are mapped onto vocabulary entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    #[default]
    Word,
    /// Greedy longest-match pieces with a `##` continuation prefix.
    Subword,
}

/// Splits a word into vocabulary pieces, or returns `[UNK]` when some
/// suffix cannot be matched.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<usize> {
    if let Some(id) = vocab.get(word) {
        return vec![id];
    }
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let from = chars[start].0;
            let to = chars.get(end).map_or(word.len(), |c| c.0);
            let piece = if start == 0 {
                word[from..to].to_string()
            } else {
                format!("##{}", &word[from..to])
            };
            if let Some(id) = vocab.get(&piece) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![UNK_ID],
        }
    }
    pieces
}

/// Fixed-length model input for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelExample {
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<usize>,
    pub label_ids: Vec<i64>,
}

impl ModelExample {
    pub fn max_len(&self) -> usize {
        self.input_ids.len()
    }

    /// Number of leading unpadded positions (CLS .. SEP).
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }
}

/// An encoded sentence plus the bookkeeping needed to map predictions back
/// onto words.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub example: ModelExample,
    /// Sequence position of the first piece of each kept word.
    pub word_positions: Vec<usize>,
    pub truncated: bool,
    /// Gold entities lost because they cross or follow the truncation point.
    pub dropped_entities: usize,
}

impl EncodedSentence {
    pub fn kept_words(&self) -> usize {
        self.word_positions.len()
    }
}

/// Lays out `[CLS] t1..tk [SEP] [PAD]...` with gold labels on the first
/// piece of each kept word and [`IGNORE`] everywhere else.
pub fn encode_sentence(
    sentence: &Sentence,
    vocab: &Vocabulary,
    max_len: usize,
    tokenization: Tokenization,
    strictness: Strictness,
) -> Result<EncodedSentence, CorpusError> {
    if max_len < 3 {
        return Err(CorpusError::MaxLenTooSmall(max_len));
    }
    let budget = max_len - 2;
    let mut input_ids = Vec::with_capacity(max_len);
    let mut label_ids = Vec::with_capacity(max_len);
    let mut word_positions = Vec::new();
    input_ids.push(CLS_ID);
    label_ids.push(IGNORE);

    let mut truncated = false;
    for token in &sentence.tokens {
        let pieces = match tokenization {
            Tokenization::Word => vec![vocab.id(&token.surface)],
            Tokenization::Subword => wordpiece(&token.surface, vocab),
        };
        if input_ids.len() - 1 + pieces.len() > budget {
            truncated = true;
            break;
        }
        word_positions.push(input_ids.len());
        for (i, id) in pieces.into_iter().enumerate() {
            input_ids.push(id);
            label_ids.push(if i == 0 { token.gold_label as i64 } else { IGNORE });
        }
    }
    if truncated && strictness == Strictness::Strict {
        return Err(CorpusError::Truncation {
            tokens: sentence.len(),
            max_len,
        });
    }
    input_ids.push(SEP_ID);
    label_ids.push(IGNORE);
    let active = input_ids.len();
    input_ids.resize(max_len, PAD_ID);
    label_ids.resize(max_len, IGNORE);
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..active].fill(1);

    let kept = word_positions.len();
    let dropped_entities = if truncated {
        sentence.gold_spans().iter().filter(|s| s.end > kept).count()
    } else {
        0
    };
    Ok(EncodedSentence {
        example: ModelExample {
            input_ids,
            attention_mask,
            segment_ids: vec![0; max_len],
            label_ids,
        },
        word_positions,
        truncated,
        dropped_entities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme() -> TagScheme {
        TagScheme::default()
    }

    fn sent<W: AsRef<str>>(words: &[(W, &str)]) -> Sentence {
        let s = scheme();
        Sentence {
            tokens: words
                .iter()
                .map(|(w, l)| Token {
                    surface: w.as_ref().to_string(),
                    gold_label: s.label_id(l).unwrap(),
                })
                .collect(),
            source_id: String::new(),
        }
    }

    #[test]
    fn scheme_has_thirteen_labels() {
        let s = scheme();
        assert_eq!(s.num_labels(), 13);
        assert_eq!(s.labels()[0], "O");
        assert_eq!(s.labels()[1], "B-PER");
        assert_eq!(s.labels()[12], "I-CMS");
        assert_eq!(s.label_id("I-GPU"), Some(10));
        assert_eq!(s.label_id("B-FOO"), None);
        assert_eq!(s.label_id("X-GPU"), None);
    }

    #[test]
    fn parses_single_sentence() {
        let p = parse_conll("Sydney\tB-GPU\n.\tO\n\n", &scheme(), Strictness::Strict).unwrap();
        assert_eq!(p.corpus.len(), 1);
        let s = &p.corpus.sentences[0];
        assert_eq!(s.len(), 2);
        assert_eq!(scheme().label(s.tokens[0].gold_label), "B-GPU");
        assert_eq!(scheme().label(s.tokens[1].gold_label), "O");
    }

    #[test]
    fn parses_two_sentences() {
        let text = "steel\tB-CMS\nprices\tO\n\nRio\tB-OSC\nTinto\tI-OSC\n\n";
        let p = parse_conll(text, &scheme(), Strictness::Strict).unwrap();
        assert_eq!(p.corpus.len(), 2);
        assert!(p.corpus.sentences.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn unknown_label_reports_line() {
        let err = parse_conll("x\tB-FOO\n\n", &scheme(), Strictness::Lenient).unwrap_err();
        assert_eq!(
            err,
            CorpusError::UnknownLabel {
                line: 1,
                label: "B-FOO".into()
            }
        );
    }

    #[test]
    fn space_separator_and_comments() {
        let text = "# id: art-1\nSydney B-GPU\n# note\n. O\n";
        let p = parse_conll(text, &scheme(), Strictness::Strict).unwrap();
        assert_eq!(p.corpus.len(), 1);
        assert_eq!(p.corpus.sentences[0].source_id, "art-1");
        assert_eq!(p.corpus.sentences[0].len(), 2);
    }

    #[test]
    fn malformed_lines() {
        for text in ["lonely\n", "a b c\n", "a\t\n"] {
            let err = parse_conll(text, &scheme(), Strictness::Lenient).unwrap_err();
            assert_eq!(err, CorpusError::MalformedLine { line: 1 }, "{text:?}");
        }
    }

    #[test]
    fn empty_sentence_strict_vs_lenient() {
        let text = "a\tO\n\n\nb\tO\n";
        let err = parse_conll(text, &scheme(), Strictness::Strict).unwrap_err();
        assert_eq!(err, CorpusError::EmptySentence { line: 3 });
        let p = parse_conll(text, &scheme(), Strictness::Lenient).unwrap();
        assert_eq!(p.corpus.len(), 2);
        assert_eq!(p.warnings, vec![CorpusError::EmptySentence { line: 3 }]);
    }

    #[test]
    fn serialize_round_trip() {
        let text = "# id: a1\nsteel\tB-CMS\nprices\tO\n\nRio\tB-OSC\nTinto\tI-OSC\n\n# id: a2\nx\tO\n\n";
        let p = parse_conll(text, &scheme(), Strictness::Strict).unwrap();
        assert_eq!(serialize_conll(&p.corpus, &scheme()), text);
    }

    fn numbered(n: usize) -> Corpus {
        Corpus::new((0..n).map(|i| sent(&[(format!("w{i}"), "O")])).collect())
    }

    #[test]
    fn split_ten_sentences_eight_one_one() {
        for seed in [0, 1, 42, 9999] {
            let s = split_corpus(&numbered(10), [0.8, 0.1, 0.1], seed).unwrap();
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let c = numbered(37);
        let a = split_corpus(&c, [0.8, 0.1, 0.1], 42).unwrap();
        let b = split_corpus(&c, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(a, b);
        let other = split_corpus(&c, [0.8, 0.1, 0.1], 43).unwrap();
        assert_ne!(a.train_ids, other.train_ids);
    }

    #[test]
    fn split_errors() {
        assert_eq!(
            split_corpus(&Corpus::default(), [0.8, 0.1, 0.1], 1).unwrap_err(),
            CorpusError::EmptyCorpus
        );
        assert!(matches!(
            split_corpus(&numbered(3), [0.8, 0.1, 0.2], 1),
            Err(CorpusError::InvalidRatios(_))
        ));
    }

    #[test]
    fn vocab_frequency_threshold() {
        let c = Corpus::new(vec![sent(&[("a", "O"), ("a", "O"), ("b", "O"), ("a", "O")])]);
        let v = build_vocab(&c, 2, 100);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_cap_and_empty() {
        let c = Corpus::new(vec![sent(&[("a", "O"), ("b", "O")])]);
        assert_eq!(build_vocab(&c, 1, 4).len(), 4);
        assert_eq!(build_vocab(&Corpus::default(), 1, 100).len(), 4);
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let c = Corpus::new(vec![sent(&[("c", "O"), ("b", "O"), ("a", "O"), ("c", "O")])]);
        let v = build_vocab(&c, 1, 100);
        assert_eq!(v.regular_tokens(), &["c", "a", "b"]);
    }

    #[test]
    fn encode_layout() {
        let c = Corpus::new(vec![sent(&[("Sydney", "B-GPU"), ("rose", "O")])]);
        let v = build_vocab(&c, 1, 100);
        let e = encode_sentence(&c.sentences[0], &v, 6, Tokenization::Word, Strictness::Strict).unwrap();
        let ex = &e.example;
        assert_eq!(
            ex.input_ids,
            vec![CLS_ID, v.id("Sydney"), v.id("rose"), SEP_ID, PAD_ID, PAD_ID]
        );
        assert_eq!(ex.attention_mask, vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(ex.segment_ids, vec![0; 6]);
        assert_eq!(ex.label_ids, vec![IGNORE, 9, 0, IGNORE, IGNORE, IGNORE]);
        assert_eq!(e.word_positions, vec![1, 2]);
        assert!(!e.truncated);
        assert_eq!(ex.active_len(), 4);
    }

    #[test]
    fn encode_unknown_token_keeps_label() {
        let v = Vocabulary::reserved_only();
        let s = sent(&[("Perth", "B-GPU")]);
        let e = encode_sentence(&s, &v, 4, Tokenization::Word, Strictness::Strict).unwrap();
        assert_eq!(e.example.input_ids[1], UNK_ID);
        assert_eq!(e.example.label_ids[1], 9);
    }

    #[test]
    fn encode_truncates_long_sentence() {
        let words: Vec<(String, &str)> = (0..130).map(|i| (format!("w{i}"), "O")).collect();
        let mut s = sent(&words);
        // entity straddling the cut at 126
        s.tokens[125].gold_label = 1;
        s.tokens[126].gold_label = 2;
        let v = Vocabulary::reserved_only();
        let e = encode_sentence(&s, &v, 128, Tokenization::Word, Strictness::Lenient).unwrap();
        assert!(e.truncated);
        assert_eq!(e.kept_words(), 126);
        assert_eq!(e.dropped_entities, 1);
        assert_eq!(e.example.attention_mask.iter().filter(|&&m| m == 1).count(), 128);
        let err = encode_sentence(&s, &v, 128, Tokenization::Word, Strictness::Strict).unwrap_err();
        assert_eq!(
            err,
            CorpusError::Truncation {
                tokens: 130,
                max_len: 128
            }
        );
    }

    #[test]
    fn encode_rejects_tiny_max_len() {
        let s = sent(&[("a", "O")]);
        assert_eq!(
            encode_sentence(
                &s,
                &Vocabulary::reserved_only(),
                2,
                Tokenization::Word,
                Strictness::Lenient
            )
            .unwrap_err(),
            CorpusError::MaxLenTooSmall(2)
        );
    }

    #[test]
    fn subword_pieces_and_labels() {
        let v = Vocabulary::from_tokens(["steel", "##works", "Rio"]);
        assert_eq!(wordpiece("steelworks", &v), vec![v.id("steel"), v.id("##works")]);
        assert_eq!(wordpiece("steelx", &v), vec![UNK_ID]);
        let s = sent(&[("steelworks", "B-CMS"), ("Rio", "B-OSC")]);
        let e = encode_sentence(&s, &v, 8, Tokenization::Subword, Strictness::Strict).unwrap();
        assert_eq!(e.example.label_ids[..5], [IGNORE, 11, IGNORE, 7, IGNORE]);
        assert_eq!(e.word_positions, vec![1, 3]);
    }
}
