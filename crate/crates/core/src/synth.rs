//! Deterministic synthetic corpus whose labels are a pure function of the
//! surface token. Used for smoke tests, benchmarks and tuning dry runs.

use crate::corpus::{Corpus, Sentence, TagScheme, Token, DEFAULT_ENTITY_TYPES};
use crate::rng::SplitMix64;

/// `(begin words, inside words)` per category, in scheme order.
const LEXICON: [(&[&str], &[&str]); 6] = [
    (&["Alice", "Bruno", "Chen", "Dara", "Emeka"], &["Smith", "Lopez", "Ito"]),
    (
        &["strike", "flood", "bankruptcy", "embargo", "shortfall"],
        &["delay", "crisis", "outage"],
    ),
    (
        &["Unionists", "Nordic", "Catholic", "Labourites", "Andean"],
        &["bloc", "council", "league"],
    ),
    (
        &["Acme", "Boral", "Cemex", "Holcim", "Vinci"],
        &["Holdings", "Group", "Ltd"],
    ),
    (
        &["Chile", "Ghana", "Norway", "Peru", "Vietnam"],
        &["Republic", "Province", "Territory"],
    ),
    (
        &["cement", "rebar", "timber", "gravel", "asphalt"],
        &["slab", "beam", "mix"],
    ),
];

const FILLER: [&str; 16] = [
    "the", "a", "reports", "said", "on", "in", "after", "week", "prices", "new", "site", "market", "rose", "fell",
    "again", "and",
];

/// Gold label of a surface token under the generator.
pub fn synthetic_label(word: &str) -> &'static str {
    const B: [&str; 6] = ["B-PER", "B-RRE", "B-PNR", "B-OSC", "B-GPU", "B-CMS"];
    const I: [&str; 6] = ["I-PER", "I-RRE", "I-PNR", "I-OSC", "I-GPU", "I-CMS"];
    for (c, (begin, inside)) in LEXICON.iter().enumerate() {
        if begin.contains(&word) {
            return B[c];
        }
        if inside.contains(&word) {
            return I[c];
        }
    }
    "O"
}

/// `n` sentences of 1-3 entities separated by filler. The first entity of
/// sentence `i` has category `i mod 6`, so every category is frequent.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let scheme = TagScheme::new(&DEFAULT_ENTITY_TYPES).expect("default scheme");
    let mut rng = SplitMix64::new(seed);
    let pick = |xs: &[&'static str], rng: &mut SplitMix64| xs[rng.next_below(xs.len() as u64) as usize];
    let sentences = (0..n)
        .map(|i| {
            let mut words: Vec<&str> = Vec::new();
            let entities = 1 + rng.next_below(3) as usize;
            for e in 0..entities {
                for _ in 0..1 + rng.next_below(3) {
                    words.push(pick(&FILLER, &mut rng));
                }
                let c = if e == 0 { i % 6 } else { rng.next_below(6) as usize };
                let (begin, inside) = LEXICON[c];
                words.push(pick(begin, &mut rng));
                for _ in 0..rng.next_below(3) {
                    words.push(pick(inside, &mut rng));
                }
            }
            if rng.next_below(2) == 1 {
                words.push(pick(&FILLER, &mut rng));
            }
            Sentence {
                tokens: words
                    .into_iter()
                    .map(|w| Token {
                        surface: w.to_string(),
                        gold_label: scheme.label_id(synthetic_label(w)).expect("label in scheme"),
                    })
                    .collect(),
                source_id: format!("synthetic-{seed}"),
            }
        })
        .collect();
    Corpus::new(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagcodec::decode_spans;

    #[test]
    fn deterministic_and_valid() {
        let a = synthetic_corpus(200, 7);
        assert_eq!(a, synthetic_corpus(200, 7));
        assert_ne!(a, synthetic_corpus(200, 8));
        assert_eq!(a.len(), 200);
        for s in &a.sentences {
            assert!(decode_spans(&s.tags()).is_ok());
            for t in &s.tokens {
                let scheme = TagScheme::default();
                assert_eq!(scheme.label(t.gold_label), synthetic_label(&t.surface));
            }
        }
        let counts = a.entity_counts(&TagScheme::default());
        assert!(counts.iter().all(|&c| c >= 33), "{counts:?}");
    }

    #[test]
    fn lexicon_words_are_unique() {
        let mut all: Vec<&str> = FILLER.to_vec();
        for (b, i) in LEXICON {
            all.extend_from_slice(b);
            all.extend_from_slice(i);
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
