//! Mini-batch training, prediction and evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    encode_sentence, Corpus, CorpusError, EncodedSentence, Strictness, TagScheme, Tokenization, Vocabulary,
};
use crate::encoder::{EncoderConfig, EncoderError, EncoderModel};
use crate::engine::{EngineError, Tape};
use crate::metrics::{count_matches, MetricsError, MetricsTable};
use crate::optim::{adam_step, adamw_step, clip_grad_norm, AdamParams, OptimError, OptimizerKind, OptimizerState};
use crate::rng::SplitMix64;
use crate::tagcodec::{decode_spans, repair_tags, EntitySpan, Tag, TagError};

/// Stream tags mixed into the run seed so shuffling and dropout never share
/// a generator.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;
const DROPOUT_STREAM: u64 = 0x4452_4f50_4f55_5431;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 32,
            epochs: 10,
            epsilon: 1e-8,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            dropout_rate: 0.5,
            max_len: 128,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

pub const CONFIG_KEYS: [&str; 10] = [
    "lr",
    "batch_size",
    "epochs",
    "epsilon",
    "optimizer",
    "weight_decay",
    "dropout_rate",
    "max_len",
    "seed",
    "grad_clip",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.max_len < 3 {
            return bad("max_len must be >= 3");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip must be > 0");
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form. `grad_clip = none` disables clipping.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "grad_clip" => {
                self.grad_clip = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_file(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::ConfigSyntax {
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|message| TrainError::ConfigSyntax { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams::new(self.lr, self.epsilon)
    }
}

/// One encoded sentence with its (possibly truncated) gold spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub encoded: EncodedSentence,
    pub gold: Vec<EntitySpan>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Encodes a corpus leniently; gold spans crossing a truncation point
    /// are dropped.
    pub fn encode(
        corpus: &Corpus,
        vocab: &Vocabulary,
        max_len: usize,
        tokenization: Tokenization,
    ) -> Result<Self, TrainError> {
        let instances = corpus
            .sentences
            .iter()
            .map(|s| {
                let encoded = encode_sentence(s, vocab, max_len, tokenization, Strictness::Lenient)?;
                let kept = encoded.kept_words();
                let gold = s.gold_spans().into_iter().filter(|sp| sp.end <= kept).collect();
                Ok(Instance { encoded, gold })
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(Self { instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dropped_entities(&self) -> usize {
        self.instances.iter().map(|i| i.encoded.dropped_entities).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// A freshly initialized desk-scale model sized for `vocab` and `scheme`,
/// seeded from the config.
pub fn build_model(vocab: &Vocabulary, scheme: &TagScheme, config: &TrainConfig) -> Result<EncoderModel, TrainError> {
    let mut ec = EncoderConfig::desk(vocab.len(), scheme.num_labels());
    ec.max_len = config.max_len;
    ec.dropout_rate = config.dropout_rate;
    Ok(EncoderModel::new(ec, config.seed)?)
}

fn diverged(e: EncoderError, epoch: usize, step: usize) -> TrainError {
    match e {
        EncoderError::Engine(EngineError::NonFiniteValue(_) | EngineError::NonFiniteGradient(_)) => {
            TrainError::DivergedLoss { epoch, step }
        }
        other => TrainError::Encoder(other),
    }
}

/// Runs one optimizer step on `batch`, returning the batch loss.
pub fn train_step(
    model: &mut EncoderModel,
    state: &mut OptimizerState,
    batch: &[&Instance],
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let examples: Vec<_> = batch.iter().map(|i| &i.encoded.example).collect();
    let mut tape = Tape::new(dropout_seed);
    let loss = model
        .batch_loss(&mut tape, &examples, true)
        .map_err(|e| diverged(e, 0, state.t as usize))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::DivergedLoss {
            epoch: 0,
            step: state.t as usize,
        });
    }
    let store = model.store_mut();
    store.zero_grad();
    tape.backward(loss, store)
        .map_err(|e| diverged(e.into(), 0, state.t as usize))?;
    if let Some(c) = config.grad_clip {
        clip_grad_norm(store, c);
    }
    match config.optimizer {
        OptimizerKind::Adam => adam_step(store, state, config.adam_params()),
        OptimizerKind::AdamW => adamw_step(store, state, config.adam_params(), config.weight_decay),
    }
    .map_err(|e| match e {
        OptimError::NonFiniteUpdate(_) => TrainError::DivergedLoss {
            epoch: 0,
            step: state.t as usize,
        },
        other => other.into(),
    })?;
    store.zero_grad();
    Ok(value)
}

/// Trains `model` in place, calling `on_epoch` after every epoch.
pub fn train_with<F>(
    model: &mut EncoderModel,
    train: &Dataset,
    validation: &Dataset,
    scheme: &TagScheme,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory, TrainError>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    model.set_dropout_rate(config.dropout_rate)?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 || train.is_empty() {
        return Ok(history);
    }
    let mut shuffle_rng = SplitMix64::new(config.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = SplitMix64::new(config.seed ^ DROPOUT_STREAM);
    let mut state = OptimizerState::new(model.store());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train.instances[i]).collect();
            let loss = train_step(model, &mut state, &batch, config, dropout_rng.next_u64()).map_err(|e| match e {
                TrainError::DivergedLoss { step, .. } => TrainError::DivergedLoss { epoch, step },
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        let val_macro_f1 = if validation.is_empty() {
            0.0
        } else {
            evaluate(model, validation, scheme)?.macro_f1()
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_macro_f1,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.6} val macro-F1 {:.4} ({:.2}s)",
            record.train_loss,
            record.val_macro_f1,
            record.seconds
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

pub fn train(
    model: &mut EncoderModel,
    train_set: &Dataset,
    validation: &Dataset,
    scheme: &TagScheme,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    train_with(model, train_set, validation, scheme, config, |_| {})
}

/// Argmax label per kept word, with dropout off.
pub fn predict_labels(model: &EncoderModel, instance: &Instance) -> Result<Vec<usize>, TrainError> {
    let mut tape = Tape::no_grad();
    let logits = model.active_logits(&mut tape, &instance.encoded.example, false)?;
    let logits = tape.value(logits);
    Ok(instance
        .encoded
        .word_positions
        .iter()
        .map(|&p| argmax(logits.row(p)))
        .collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted spans per sentence: argmax, repair, strict decode.
pub fn predict(model: &EncoderModel, data: &Dataset) -> Result<Vec<Vec<EntitySpan>>, TrainError> {
    data.instances
        .iter()
        .map(|inst| {
            let tags: Vec<Tag> = predict_labels(model, inst)?
                .into_iter()
                .map(Tag::from_label_id)
                .collect();
            let (repaired, _) = repair_tags(&tags);
            Ok(decode_spans(&repaired)?)
        })
        .collect()
}

pub fn evaluate(model: &EncoderModel, data: &Dataset, scheme: &TagScheme) -> Result<MetricsTable, TrainError> {
    let predicted = predict(model, data)?;
    let gold: Vec<Vec<EntitySpan>> = data.instances.iter().map(|i| i.gold.clone()).collect();
    let counts = count_matches(&gold, &predicted, scheme.num_categories())?;
    Ok(MetricsTable::from_counts(scheme, &counts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Sentence, Token};

    fn sentence(words: &[(&str, &str)]) -> Sentence {
        let s = TagScheme::default();
        Sentence {
            tokens: words
                .iter()
                .map(|(w, l)| Token {
                    surface: w.to_string(),
                    gold_label: s.label_id(l).unwrap(),
                })
                .collect(),
            source_id: String::new(),
        }
    }

    fn small_corpus() -> Corpus {
        Corpus::new(vec![
            sentence(&[("Acme", "B-OSC"), ("Steel", "I-OSC"), ("delays", "O")]),
            sentence(&[("Tariffs", "B-GPU"), ("hit", "O"), ("Lee", "B-PER")]),
            sentence(&[("cement", "B-CMS"), ("shortage", "B-RRE"), ("worsens", "O")]),
        ])
    }

    fn setup(cfg: &TrainConfig) -> (EncoderModel, Dataset, TagScheme) {
        let scheme = TagScheme::default();
        let corpus = small_corpus();
        let vocab = build_vocab(&corpus, 1, 100);
        let data = Dataset::encode(&corpus, &vocab, cfg.max_len, Tokenization::Word).unwrap();
        (build_model(&vocab, &scheme, cfg).unwrap(), data, scheme)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            max_len: 16,
            batch_size: 2,
            epochs: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_reference_table() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lr, c.batch_size, c.epochs, c.max_len, c.dropout_rate),
            (3e-5, 32, 10, 128, 0.5)
        );
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        for f in [
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.lr = -1.0,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.epsilon = 0.0,
            |c: &mut TrainConfig| c.dropout_rate = 1.0,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn config_file_overrides() {
        let mut c = TrainConfig::default();
        c.apply_file("# comment\nlr = 1e-4\n\noptimizer = Adam\ngrad_clip = none\n")
            .unwrap();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.grad_clip, None);
        assert!(matches!(
            c.apply_file("bogus = 1"),
            Err(TrainError::ConfigSyntax { line: 1, .. })
        ));
        assert!(c.apply_file("lr 1").is_err());
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let (mut m, data, scheme) = setup(&cfg);
        let before = m.store().clone();
        let h = train(&mut m, &data, &data, &scheme, &cfg).unwrap();
        assert!(h.is_empty());
        for (a, b) in before.iter().zip(m.store().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn history_length_and_determinism() {
        let cfg = small_config();
        let run = || {
            let (mut m, data, scheme) = setup(&cfg);
            let h = train(&mut m, &data, &data, &scheme, &cfg).unwrap();
            (h, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1.len(), 3);
        assert_eq!(h1.final_loss().unwrap().to_bits(), h2.final_loss().unwrap().to_bits());
        for (a, b) in m1.store().iter().zip(m2.store().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let scheme = TagScheme::default();
        let corpus = small_corpus();
        let gold: Vec<Vec<EntitySpan>> = corpus.sentences.iter().map(|s| s.gold_spans()).collect();
        let c = count_matches(&gold, &gold, 6).unwrap();
        let t = MetricsTable::from_counts(&scheme, &c).unwrap();
        for cat in ["PER", "OSC", "GPU", "CMS", "RRE"] {
            assert_eq!(t.row(cat).unwrap().f1, 1.0);
        }
        let none = vec![vec![]; gold.len()];
        let t = MetricsTable::from_counts(&scheme, &count_matches(&gold, &none, 6).unwrap()).unwrap();
        assert!(t
            .rows
            .iter()
            .all(|r| r.precision == 0.0 && r.recall == 0.0 && r.f1 == 0.0));
    }

    #[test]
    fn truncated_gold_is_restricted_to_kept_words() {
        let corpus = Corpus::new(vec![sentence(&[
            ("a", "O"),
            ("b", "O"),
            ("Acme", "B-OSC"),
            ("Steel", "I-OSC"),
        ])]);
        let vocab = build_vocab(&corpus, 1, 100);
        let d = Dataset::encode(&corpus, &vocab, 5, Tokenization::Word).unwrap();
        assert!(d.instances[0].gold.is_empty());
        assert_eq!(d.dropped_entities(), 1);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
