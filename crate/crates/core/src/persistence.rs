//! On-disk formats: checkpoints, JSON-lines ledgers, run records and split
//! manifests.
//!
//! A checkpoint is `MAGIC`, a little-endian `u64` manifest length, the JSON
//! manifest, then every parameter as little-endian `f64` in manifest order.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{serialize_conll, Corpus, SplitSet, TagScheme, Vocabulary};
use crate::encoder::{EncoderConfig, EncoderError, EncoderModel};
use crate::engine::{ParamStore, Tensor};
use crate::metrics::MetricsTable;
use crate::trainer::{TrainConfig, TrainHistory};

pub const MAGIC: &[u8; 8] = b"RSKNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("parameter {name:?}: manifest shape {manifest:?} disagrees with config shape {config:?}")]
    ShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        config: Vec<usize>,
    },
    #[error("checkpoint truncated: expected {expected} bytes of parameter data, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("ledger {path} line {line} is corrupt: {message}")]
    LedgerCorrupt { path: String, line: usize, message: String },
    #[error("invalid JSON in {path}: {message}")]
    Json { path: String, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistenceError + '_ {
    move |source| PersistenceError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    /// Regular (non-reserved) vocabulary tokens in id order.
    pub vocabulary: Vec<String>,
    pub entity_types: Vec<String>,
}

/// A model together with the vocabulary and scheme it was trained against.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    pub scheme: TagScheme,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistenceError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(
    model: &EncoderModel,
    vocab: &Vocabulary,
    scheme: &TagScheme,
    path: &Path,
) -> Result<(), PersistenceError> {
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        seed: model.seed(),
        params: model
            .store()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        vocabulary: vocab.regular_tokens().to_vec(),
        entity_types: scheme.entity_types().to_vec(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| PersistenceError::Manifest(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * model.num_parameters());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in model.store().iter() {
        for x in p.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PersistenceError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PersistenceError> {
    if bytes.len() < 16 {
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(PersistenceError::BadMagic);
        }
        return Err(PersistenceError::TruncatedFile {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(PersistenceError::BadMagic);
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < mlen {
        return Err(PersistenceError::TruncatedFile {
            expected: mlen,
            found: body.len(),
        });
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| PersistenceError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(PersistenceError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let expected = manifest.config.param_shapes();
    if expected.len() != manifest.params.len() {
        return Err(PersistenceError::Manifest(format!(
            "{} parameters declared, config implies {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in manifest.params.iter().zip(&expected) {
        if &entry.name != name {
            return Err(PersistenceError::Manifest(format!(
                "parameter {:?} where {name:?} was expected",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(PersistenceError::ShapeMismatch {
                name: name.clone(),
                manifest: entry.shape.clone(),
                config: shape.clone(),
            });
        }
    }
    let data = &body[mlen..];
    let need = 8 * manifest.config.param_count();
    if data.len() < need {
        return Err(PersistenceError::TruncatedFile {
            expected: need,
            found: data.len(),
        });
    }
    if data.len() > need {
        return Err(PersistenceError::Manifest(format!(
            "{} trailing bytes after parameter data",
            data.len() - need
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let values = data[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        let tensor = Tensor::new(entry.shape.clone(), values).map_err(|e| PersistenceError::Manifest(e.to_string()))?;
        store
            .add(entry.name.clone(), tensor)
            .map_err(|e| PersistenceError::Manifest(e.to_string()))?;
    }
    let model = EncoderModel::from_store(manifest.config, store, manifest.seed)?;
    let vocab = Vocabulary::from_tokens(manifest.vocabulary);
    let scheme = TagScheme::new(&manifest.entity_types).map_err(|e| PersistenceError::Manifest(e.to_string()))?;
    if vocab.len() != model.config().vocab_size {
        return Err(PersistenceError::Manifest(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok(Checkpoint { model, vocab, scheme })
}

static APPEND_LOCK: Mutex<()> = Mutex::new(());

/// Appends one JSON object as a single line with one `write_all` on an
/// `O_APPEND` handle, serialized within the process by a lock.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), PersistenceError> {
    let mut line = serde_json::to_vec(record).map_err(|e| PersistenceError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    line.push(b'\n');
    let _guard = APPEND_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(&line).map_err(io_err(path))
}

/// Reads every complete line. A missing file is an empty ledger; a final
/// line without a newline is an interrupted append and is ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PersistenceError> {
    let text = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = match text.iter().rposition(|&b| b == b'\n') {
        Some(i) => &text[..=i],
        None => &text[..0],
    };
    let corrupt = |line: usize, message: String| PersistenceError::LedgerCorrupt {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, raw) in complete.split(|&b| b == b'\n').enumerate() {
        if raw.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        let s = std::str::from_utf8(raw).map_err(|e| corrupt(i + 1, e.to_string()))?;
        out.push(serde_json::from_str(s).map_err(|e| corrupt(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistenceError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PersistenceError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PersistenceError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PersistenceError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the corpus in its canonical CoNLL serialization.
pub fn corpus_hash(corpus: &Corpus, scheme: &TagScheme) -> String {
    sha256_hex(serialize_conll(corpus, scheme).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub timestamp: DateTime<Utc>,
    pub config: TrainConfig,
    pub corpus_sha256: String,
    pub artifact_version: String,
    pub history: TrainHistory,
    pub metrics: Option<MetricsTable>,
}

impl RunRecord {
    /// The id combines the timestamp with a digest of config and data.
    pub fn new(
        config: TrainConfig,
        corpus_sha256: String,
        history: TrainHistory,
        metrics: Option<MetricsTable>,
    ) -> Self {
        let timestamp = Utc::now();
        let cfg = serde_json::to_string(&config).expect("config serializes");
        let digest =
            sha256_hex(format!("{cfg}|{corpus_sha256}|{}", timestamp.timestamp_nanos_opt().unwrap_or(0)).as_bytes());
        Self {
            run_id: format!("{}-{}", timestamp.format("%Y%m%dT%H%M%S"), &digest[..12]),
            timestamp,
            config,
            corpus_sha256,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            history,
            metrics,
        }
    }
}

pub fn append_run_record(record: &RunRecord, ledger: &Path) -> Result<(), PersistenceError> {
    append_jsonl(ledger, record)
}

pub fn read_run_records(ledger: &Path) -> Result<Vec<RunRecord>, PersistenceError> {
    read_jsonl(ledger)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub corpus_sha256: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Realized entity counts per part.
    pub entity_totals: [usize; 3],
}

impl SplitManifest {
    pub fn from_split(split: &SplitSet, corpus_sha256: String, scheme: &TagScheme) -> Self {
        Self {
            seed: split.seed,
            ratios: split.ratios,
            corpus_sha256,
            train: split.train_ids.clone(),
            validation: split.validation_ids.clone(),
            test: split.test_ids.clone(),
            entity_totals: split.entity_totals(scheme),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ModelExample;

    fn model() -> (EncoderModel, Vocabulary, TagScheme) {
        let vocab = Vocabulary::from_tokens(["steel", "Acme"]);
        let mut c = EncoderConfig::desk(vocab.len(), 13);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        c.max_len = 8;
        (EncoderModel::new(c, 3).unwrap(), vocab, TagScheme::default())
    }

    fn example() -> ModelExample {
        ModelExample {
            input_ids: vec![2, 4, 5, 3, 0, 0, 0, 0],
            attention_mask: vec![1, 1, 1, 1, 0, 0, 0, 0],
            segment_ids: vec![0; 8],
            label_ids: vec![-1, 7, 8, -1, -1, -1, -1, -1],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, v, s) = model();
        save_checkpoint(&m, &v, &s, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        for (a, b) in m.store().iter().zip(ck.model.store().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u64> = a.value.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(ck.vocab, v);
        assert_eq!(ck.scheme, s);
        let la = m.forward(&example(), false).unwrap();
        let lb = ck.model.forward(&example(), false).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    fn saved_bytes() -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (m, v, s) = model();
        save_checkpoint(&m, &v, &s, &path).unwrap();
        fs::read(path).unwrap()
    }

    fn rewrite_manifest(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        f(&mut manifest);
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + mlen..]);
        out
    }

    #[test]
    fn wrong_manifest_shape_is_rejected() {
        let bytes = rewrite_manifest(&saved_bytes(), |m| {
            m["params"][3]["shape"] = serde_json::json!([8, 9]);
        });
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(PersistenceError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let bytes = rewrite_manifest(&saved_bytes(), |m| m["format_version"] = serde_json::json!(99));
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(PersistenceError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = saved_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 800, 20, 12] {
            assert!(
                matches!(
                    decode_checkpoint(&bytes[..cut]),
                    Err(PersistenceError::TruncatedFile { .. })
                ),
                "cut at {cut}"
            );
        }
        assert!(matches!(
            decode_checkpoint(b"NOTACKPTxxxxxxxxxxxx"),
            Err(PersistenceError::BadMagic)
        ));
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Line {
        n: u32,
    }

    #[test]
    fn jsonl_append_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        assert!(read_jsonl::<Line>(&path).unwrap().is_empty());
        append_jsonl(&path, &Line { n: 1 }).unwrap();
        append_jsonl(&path, &Line { n: 2 }).unwrap();
        assert_eq!(read_jsonl::<Line>(&path).unwrap(), vec![Line { n: 1 }, Line { n: 2 }]);
    }

    #[test]
    fn trailing_partial_line_is_ignored_but_garbage_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        fs::write(&path, "{\"n\":1}\n{\"n\":").unwrap();
        assert_eq!(read_jsonl::<Line>(&path).unwrap(), vec![Line { n: 1 }]);
        fs::write(&path, "{\"n\":1}\nnot json\n").unwrap();
        assert!(matches!(
            read_jsonl::<Line>(&path),
            Err(PersistenceError::LedgerCorrupt { line: 2, .. })
        ));
    }

    #[test]
    fn concurrent_appends_stay_intact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        std::thread::scope(|s| {
            for t in 0..4u32 {
                let path = &path;
                s.spawn(move || {
                    for i in 0..50 {
                        append_jsonl(path, &Line { n: t * 1000 + i }).unwrap();
                    }
                });
            }
        });
        let mut got: Vec<u32> = read_jsonl::<Line>(&path).unwrap().into_iter().map(|l| l.n).collect();
        got.sort_unstable();
        let mut want: Vec<u32> = (0..4).flat_map(|t| (0..50).map(move |i| t * 1000 + i)).collect();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn run_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let r = RunRecord::new(TrainConfig::default(), sha256_hex(b"x"), TrainHistory::default(), None);
        append_run_record(&r, &path).unwrap();
        assert_eq!(read_run_records(&path).unwrap(), vec![r]);
    }

    #[test]
    fn sha256_reference_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
