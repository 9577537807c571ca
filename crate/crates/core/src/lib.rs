//! Named-entity recognition for construction supply-chain risk news.
//!
//! The crate covers the whole experimental pipeline: BIO corpora
//! ([`corpus`], [`tagcodec`]), a small transformer token classifier built
//! on a hand-written reverse-mode engine ([`engine`], [`encoder`]),
//! Adam/AdamW training ([`optim`], [`trainer`]), entity-level scoring
//! ([`metrics`]), full-factorial grid search ([`tuner`]), news ingestion
//! ([`ingest`]) and the on-disk formats tying runs together
//! ([`persistence`], [`report`]).

pub mod corpus;
pub mod encoder;
pub mod engine;
pub mod ingest;
pub mod metrics;
pub mod optim;
pub mod persistence;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tagcodec;
pub mod trainer;
pub mod tuner;

pub use corpus::{Corpus, Sentence, TagScheme, Token, Vocabulary};
pub use engine::{ParamStore, Tape, Tensor};
pub use metrics::{MetricsTable, Prf};
pub use tagcodec::{EntitySpan, Tag};
