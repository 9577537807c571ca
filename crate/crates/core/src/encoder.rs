//! Miniature post-norm transformer encoder for token classification.
//!
//! Input embedding is the sum of learned token, position and segment
//! tables. Each layer computes
//!
//! ```text
//! h  = LayerNorm(X + Dropout(MultiHead(X)))
//! X' = LayerNorm(h + Dropout(GELU(h W1 + b1) W2 + b2))
//! ```
//!
//! where every head is `softmax(Q K^T / sqrt(d_k) + mask) V` with
//! `Q = X W_Q`, `K = X W_K`, `V = X W_V` restricted to the head's columns,
//! and the concatenated heads are projected by `W_O`. A linear head maps
//! every position to label logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ModelExample;
use crate::engine::{grad_check, EngineError, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Layer-norm stabilizer; independent of the optimizer epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_labels: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 64-wide, 4 heads, 2 layers, 256 inner, 128 positions.
    pub fn desk(vocab_size: usize, n_labels: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 128,
            n_labels,
            dropout_rate: 0.5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3");
        }
        if self.vocab_size == 0 || self.n_labels == 0 || self.d_ff == 0 {
            return bad("vocab_size, n_labels and d_ff must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    /// Every parameter's name and shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut shapes = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_len, d]),
            ("embeddings.segment".to_string(), vec![2, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            shapes.extend([
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
            ]);
        }
        shapes.push(("classifier.weight".to_string(), vec![d, self.n_labels]));
        shapes.push(("classifier.bias".to_string(), vec![self.n_labels]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    layers: Vec<LayerParams>,
    cls_weight: ParamId,
    cls_bias: ParamId,
}

/// Attention output plus the per-head weight matrices, exposed for tests
/// and inspection.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub head_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    store: ParamStore,
    ids: ParamIds,
    seed: u64,
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2")
}

impl EncoderModel {
    /// Weights ~ N(0, 0.02²), biases 0, layer-norm gains 1.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if is_bias(&name) {
                vec![0.0; n]
            } else {
                (0..n).map(|_| INIT_STD * rng.next_normal()).collect()
            };
            store.add(name, Tensor::new(shape, data)?)?;
        }
        Self::from_store(config, store, seed)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_store(config: EncoderConfig, store: ParamStore, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let id = store
                .id(&name)
                .ok_or_else(|| EncoderError::MissingParameter(name.clone()))?;
            let found = store.get(id).value.shape();
            if found != shape.as_slice() {
                return Err(EncoderError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: found.to_vec(),
                });
            }
        }
        let get = |n: String| store.id(&n).expect("checked above");
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| get(format!("layer{l}.{s}"));
                LayerParams {
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    wo: p("attn.wo"),
                    ln1_gain: p("ln1.gain"),
                    ln1_bias: p("ln1.bias"),
                    w1: p("ffn.w1"),
                    b1: p("ffn.b1"),
                    w2: p("ffn.w2"),
                    b2: p("ffn.b2"),
                    ln2_gain: p("ln2.gain"),
                    ln2_bias: p("ln2.bias"),
                }
            })
            .collect();
        let ids = ParamIds {
            token: get("embeddings.token".into()),
            position: get("embeddings.position".into()),
            segment: get("embeddings.segment".into()),
            layers,
            cls_weight: get("classifier.weight".into()),
            cls_bias: get("classifier.bias".into()),
        };
        Ok(Self {
            config,
            store,
            ids,
            seed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<(), EncoderError> {
        let mut c = self.config.clone();
        c.dropout_rate = rate;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// `X = token[ids] + position[0..L] + segment[segment_ids]`, then dropout.
    pub fn embed(
        &self,
        tape: &mut Tape,
        input_ids: &[usize],
        segment_ids: &[usize],
        training: bool,
    ) -> Result<Var, EncoderError> {
        let len = input_ids.len();
        if len > self.config.max_len {
            return Err(EncoderError::TooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        let positions: Vec<usize> = (0..len).collect();
        let tok = tape.embedding(&self.store, self.ids.token, input_ids)?;
        let pos = tape.embedding(&self.store, self.ids.position, &positions)?;
        let seg = tape.embedding(&self.store, self.ids.segment, segment_ids)?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, seg)?;
        Ok(tape.dropout(x, self.config.dropout_rate, training)?)
    }

    /// Multi-head scaled dot-product attention over valid keys.
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        key_valid: &[bool],
    ) -> Result<AttentionOutput, EncoderError> {
        let p = self.ids.layers[layer];
        let (wq, wk, wv, wo) = (
            tape.param(&self.store, p.wq),
            tape.param(&self.store, p.wk),
            tape.param(&self.store, p.wv),
            tape.param(&self.store, p.wo),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut head_weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores, Some(key_valid))?;
            heads.push(tape.matmul(weights, vh)?);
            head_weights.push(weights);
        }
        let concat = tape.concat_cols(&heads)?;
        let output = tape.matmul(concat, wo)?;
        Ok(AttentionOutput { output, head_weights })
    }

    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        key_valid: &[bool],
        training: bool,
    ) -> Result<Var, EncoderError> {
        let p = self.ids.layers[layer];
        let rate = self.config.dropout_rate;
        let att = self.self_attention(tape, layer, x, key_valid)?.output;
        let att = tape.dropout(att, rate, training)?;
        let res = tape.add(x, att)?;
        let (g1, b1n) = (tape.param(&self.store, p.ln1_gain), tape.param(&self.store, p.ln1_bias));
        let h = tape.layer_norm(res, g1, b1n, LAYER_NORM_EPS)?;

        let (w1, b1, w2, b2) = (
            tape.param(&self.store, p.w1),
            tape.param(&self.store, p.b1),
            tape.param(&self.store, p.w2),
            tape.param(&self.store, p.b2),
        );
        let inner = tape.matmul(h, w1)?;
        let inner = tape.add(inner, b1)?;
        let inner = tape.gelu(inner)?;
        let ff = tape.matmul(inner, w2)?;
        let ff = tape.add(ff, b2)?;
        let ff = tape.dropout(ff, rate, training)?;
        let res = tape.add(h, ff)?;
        let (g2, b2n) = (tape.param(&self.store, p.ln2_gain), tape.param(&self.store, p.ln2_bias));
        Ok(tape.layer_norm(res, g2, b2n, LAYER_NORM_EPS)?)
    }

    /// Logits `[len, n_labels]` for one sequence.
    pub fn logits(
        &self,
        tape: &mut Tape,
        input_ids: &[usize],
        segment_ids: &[usize],
        key_valid: &[bool],
        training: bool,
    ) -> Result<Var, EncoderError> {
        let mut x = self.embed(tape, input_ids, segment_ids, training)?;
        for l in 0..self.config.n_layers {
            x = self.encoder_layer(tape, l, x, key_valid, training)?;
        }
        let w = tape.param(&self.store, self.ids.cls_weight);
        let b = tape.param(&self.store, self.ids.cls_bias);
        let out = tape.matmul(x, w)?;
        Ok(tape.add(out, b)?)
    }

    /// Full-length logits `[max_len, n_labels]`; dropout masks draw from
    /// `dropout_seed` when training.
    pub fn forward_seeded(
        &self,
        example: &ModelExample,
        training: bool,
        dropout_seed: u64,
    ) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new(dropout_seed);
        let valid: Vec<bool> = example.attention_mask.iter().map(|&m| m == 1).collect();
        let out = self.logits(&mut tape, &example.input_ids, &example.segment_ids, &valid, training)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(&self, example: &ModelExample, training: bool) -> Result<Tensor, EncoderError> {
        self.forward_seeded(example, training, 0)
    }

    /// Logits over the unpadded prefix only. Padded keys receive exactly
    /// zero attention, so real positions match [`forward`](Self::forward).
    pub fn active_logits(&self, tape: &mut Tape, example: &ModelExample, training: bool) -> Result<Var, EncoderError> {
        let n = example.active_len();
        let valid = vec![true; n];
        self.logits(
            tape,
            &example.input_ids[..n],
            &example.segment_ids[..n],
            &valid,
            training,
        )
    }

    /// Mean token cross-entropy over a batch, ignoring IGNORE positions.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[&ModelExample], training: bool) -> Result<Var, EncoderError> {
        let mut parts = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for ex in batch {
            let n = ex.active_len();
            parts.push(self.active_logits(tape, ex, training)?);
            targets.extend_from_slice(&ex.label_ids[..n]);
        }
        let all = tape.concat_rows(&parts)?;
        Ok(tape.cross_entropy(all, &targets)?)
    }

    /// Finite-difference check of [`batch_loss`](Self::batch_loss) with
    /// dropout off, at the given parameter coordinates.
    pub fn grad_check(
        &mut self,
        batch: &[&ModelExample],
        coords: &[(ParamId, usize)],
        h: f64,
    ) -> Result<GradCheckReport, EncoderError> {
        for ex in batch {
            if ex.active_len() > self.config.max_len {
                return Err(EncoderError::TooLong {
                    len: ex.active_len(),
                    max_len: self.config.max_len,
                });
            }
        }
        let mut store = std::mem::take(&mut self.store);
        let result = grad_check(&mut store, coords, h, |s, tape| {
            let view = EncoderModel {
                config: self.config.clone(),
                store: s.clone(),
                ids: self.ids.clone(),
                seed: self.seed,
            };
            view.batch_loss(tape, batch, false).map_err(|e| match e {
                EncoderError::Engine(e) => e,
                other => unreachable!("lengths checked before the sweep: {other}"),
            })
        });
        self.store = store;
        Ok(result?)
    }

    /// Overwrites a parameter by name (used by tests and loaders).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), EncoderError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| EncoderError::MissingParameter(name.to_string()))?;
        let p = self.store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(EncoderError::ShapeMismatch {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }
}
