//! Dataset ingestion: embedding files, manifests, advertisement metadata,
//! and the synthetic generator.
//!
//! A dataset is a line-JSON manifest whose first line names the dataset
//! and split and whose remaining lines are one entry per sample, pointing
//! at per-modality embedding files (see [`memb`]) and an optional
//! metadata JSON document. Paths are resolved relative to the manifest's
//! directory.

pub mod memb;
mod metadata;
mod synthetic;

pub use metadata::parse_metadata;
pub use synthetic::{generate_synthetic, SyntheticCoefficients, SyntheticSpec, SyntheticTruth};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported format version {got}")]
    BadVersion { path: PathBuf, got: u16 },
    #[error("{path}: unsupported dtype tag {got}")]
    BadDtype { path: PathBuf, got: u8 },
    #[error("{path}: unknown modality tag {got}")]
    BadModalityTag { path: PathBuf, got: u8 },
    #[error("{path}: truncated payload (expected {expected} bytes, {got} remain)")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: invalid dimensions L={rows}, d={cols}")]
    BadDims {
        path: PathBuf,
        rows: u32,
        cols: u32,
    },
    #[error("{path}: non-finite value in payload")]
    NonFinitePayload { path: PathBuf },
    #[error("embedding sequence has non-finite entries")]
    NonFiniteSequence,
    #[error("sample {id}: label {label} outside [0, 1]")]
    LabelOutOfRange { id: String, label: f64 },
    #[error("duplicate sample id {id}")]
    DuplicateId { id: String },
    #[error("manifest {path}: missing header line")]
    MissingHeader { path: PathBuf },
    #[error("manifest {path} line {line}: {source}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("metadata is not well-formed JSON: {0}")]
    MetadataParse(#[source] serde_json::Error),
    #[error("synthetic generator: {0}")]
    Synthetic(String),
}

/// The three input channels.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Video => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Video),
            1 => Some(Modality::Audio),
            2 => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's variable-length sequence of fixed-width vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub modality: Modality,
    /// `L × d` row matrix, `L ≥ 1`.
    pub rows: Tensor,
}

impl EmbeddingSequence {
    pub fn new(modality: Modality, rows: Tensor) -> Result<Self, DataError> {
        if !rows.is_finite() {
            return Err(DataError::NonFiniteSequence);
        }
        Ok(Self { modality, rows })
    }

    /// Sequence length L; always ≥ 1 (tensor extents are positive).
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Closed categorical values with an explicit unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Landscape,
    Portrait,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pace {
    Slow,
    Medium,
    Fast,
    Unknown,
}

/// Parsed advertisement metadata (general info plus scene-derived counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub brand: String,
    pub orientation: Orientation,
    pub pace: Pace,
    pub sentiment: String,
    pub scene_count: usize,
    pub distinct_emotion_count: usize,
    pub color_theme_count: usize,
    pub duration_seconds: f64,
}

impl Default for MetaRecord {
    fn default() -> Self {
        Self {
            brand: String::new(),
            orientation: Orientation::Unknown,
            pace: Pace::Unknown,
            sentiment: String::new(),
            scene_count: 0,
            distinct_emotion_count: 0,
            color_theme_count: 0,
            duration_seconds: 0.0,
        }
    }
}

/// One advertisement: id, available embedding sequences, optional label
/// in [0, 1], optional metadata.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub sequences: BTreeMap<Modality, EmbeddingSequence>,
    pub label: Option<f64>,
    pub metadata: Option<MetaRecord>,
}

impl Sample {
    pub fn sequence(&self, modality: Modality) -> Option<&EmbeddingSequence> {
        self.sequences.get(&modality)
    }
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Manifest header: first line of the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub dataset: String,
    pub split: Split,
}

/// One manifest entry. Paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub embeddings: BTreeMap<Modality, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
    /// Candidate sample ids for reranking, if this entry is an original.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

/// Line-JSON manifest: header line, then one entry per line.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory all entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();
        let header_line = match lines.next() {
            Some((_, Ok(line))) if !line.trim().is_empty() => line,
            Some((_, Err(source))) => {
                return Err(DataError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
            _ => {
                return Err(DataError::MissingHeader {
                    path: path.to_path_buf(),
                })
            }
        };
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|source| DataError::ManifestParse {
                path: path.to_path_buf(),
                line: 1,
                source,
            })?;
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, line) in lines {
            let line = line.map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|source| DataError::ManifestParse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    source,
                })?;
            if let Some(label) = entry.label {
                if !(0.0..=1.0).contains(&label) {
                    return Err(DataError::LabelOutOfRange {
                        id: entry.id.clone(),
                        label,
                    });
                }
            }
            if !seen.insert(entry.id.clone()) {
                return Err(DataError::DuplicateId {
                    id: entry.id.clone(),
                });
            }
            entries.push(entry);
        }
        Ok(Self {
            header,
            entries,
            base_dir: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = Vec::new();
        let push_line = |value: String, out: &mut Vec<u8>| {
            out.extend_from_slice(value.as_bytes());
            out.push(b'\n');
        };
        push_line(
            serde_json::to_string(&self.header).expect("header serializes"),
            &mut out,
        );
        for entry in &self.entries {
            push_line(
                serde_json::to_string(entry).expect("entry serializes"),
                &mut out,
            );
        }
        let mut file = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        file.write_all(&out).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Loads every sample referenced by a manifest, preserving entry order.
pub fn load_dataset(manifest: &Manifest) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mut sequences = BTreeMap::new();
        for (&modality, rel) in &entry.embeddings {
            let path = manifest.base_dir.join(rel);
            let seq = memb::read_embedding(&path)?;
            sequences.insert(modality, seq);
        }
        let metadata = match &entry.metadata {
            Some(rel) => {
                let path = manifest.base_dir.join(rel);
                let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
                    path: path.clone(),
                    source,
                })?;
                Some(parse_metadata(&text)?)
            }
            None => None,
        };
        samples.push(Sample {
            id: entry.id.clone(),
            sequences,
            label: entry.label,
            metadata,
        });
    }
    Ok(samples)
}

/// Deterministic in-place shuffle.
pub fn shuffle_samples(samples: &mut [Sample], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
}

/// One modality of one sample, padded to a common length with a validity
/// mask. Padded rows are zero and masked off.
#[derive(Debug, Clone)]
pub struct PaddedSequence {
    pub rows: Tensor,
    pub mask: Vec<bool>,
}

impl PaddedSequence {
    /// Trivial padding: every row valid.
    pub fn from_sequence(seq: &EmbeddingSequence) -> Self {
        Self {
            rows: seq.rows.clone(),
            mask: vec![true; seq.len()],
        }
    }
}

/// A padded mini-batch: per sample, per present modality.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub ids: Vec<String>,
    pub labels: Vec<Option<f64>>,
    pub sequences: Vec<BTreeMap<Modality, PaddedSequence>>,
}

/// Pads each modality to the batch's maximum sequence length, appending
/// zero rows with `false` mask entries. Sample order is preserved.
pub fn pad_batch(samples: &[&Sample]) -> PaddedBatch {
    let mut max_len: BTreeMap<Modality, usize> = BTreeMap::new();
    for sample in samples {
        for (&m, seq) in &sample.sequences {
            let best = max_len.entry(m).or_insert(0);
            *best = (*best).max(seq.len());
        }
    }
    let mut sequences = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut padded = BTreeMap::new();
        for (&m, seq) in &sample.sequences {
            let target = max_len[&m];
            let (l, d) = (seq.len(), seq.dim());
            let mut data = seq.rows.data().to_vec();
            data.resize(target * d, 0.0);
            let mut mask = vec![true; l];
            mask.resize(target, false);
            padded.insert(
                m,
                PaddedSequence {
                    rows: Tensor::from_vec(vec![target, d], data).expect("padded shape"),
                    mask,
                },
            );
        }
        sequences.push(padded);
    }
    PaddedBatch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        sequences,
    }
}
