//! Synthetic dataset generator with a planted cross-modal signal.
//!
//! Each sample draws latent factors `z_v, z_a, z_t ~ N(0,1)` and the
//! interaction `u = z_v · z_t`; the label is
//!
//! ```text
//! label = sigmoid(α_v·z_v + α_a·z_a + α_t·z_t + α_x·u)
//! ```
//!
//! with fixed default coefficients ordered `α_t > α_v > α_a`, `α_x > 0`,
//! so a text-only model beats video-only beats audio-only, pairs beat
//! singles, and the full trimodal model sits on top.
//!
//! Per modality, one row of the sequence carries the signal — the planted
//! unit direction scaled by `z` plus a constant marker direction — while
//! the remaining rows are distractors whose content along the planted
//! direction is pure noise. Mean pooling therefore dilutes the signal by
//! the (varying) sequence length, whereas an attention head that keys on
//! the marker can isolate the signal row exactly; this is what makes the
//! attention-vs-pooling ordering reproducible at small scale. Extra noise
//! of scale `σ` (the `noise` knob) is confined to the subspace orthogonal
//! to both planted directions, so at `σ = 0` the signal row is exact.
//!
//! Metadata is synthesized alongside: pace, scene count, and emotion
//! diversity are planted to correlate with the label; orientation,
//! duration, and color-theme count are independent of it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use super::{
    memb, DataError, EmbeddingSequence, Manifest, ManifestEntry, ManifestHeader, Modality, Split,
};
use crate::tensor::Tensor;

/// Label-formula coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCoefficients {
    pub alpha_video: f64,
    pub alpha_audio: f64,
    pub alpha_text: f64,
    pub alpha_cross: f64,
}

impl Default for SyntheticCoefficients {
    fn default() -> Self {
        Self {
            alpha_video: 0.9,
            alpha_audio: 0.75,
            alpha_text: 1.0,
            alpha_cross: 0.7,
        }
    }
}

/// Generator parameters.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Embedding width per modality; every dim must be ≥ 4.
    pub dims: BTreeMap<Modality, usize>,
    /// Inclusive sequence-length range.
    pub seq_len_range: (usize, usize),
    /// Noise scale σ applied orthogonally to the planted directions.
    pub noise: f64,
    pub seed: u64,
    pub coefficients: SyntheticCoefficients,
}

impl SyntheticSpec {
    pub fn with_defaults(seed: u64) -> Self {
        let mut dims = BTreeMap::new();
        dims.insert(Modality::Video, 12);
        dims.insert(Modality::Audio, 8);
        dims.insert(Modality::Text, 12);
        Self {
            n_train: 2000,
            n_validation: 250,
            n_test: 250,
            dims,
            seq_len_range: (3, 8),
            noise: 0.25,
            seed,
            coefficients: SyntheticCoefficients::default(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let mut problems = Vec::new();
        if self.n_train == 0 {
            problems.push("n_train must be positive".to_string());
        }
        for m in Modality::ALL {
            match self.dims.get(&m) {
                Some(&d) if d >= 4 => {}
                Some(&d) => problems.push(format!("{m} dim {d} is below the minimum of 4")),
                None => problems.push(format!("missing dim for {m}")),
            }
        }
        if self.seq_len_range.0 == 0 || self.seq_len_range.0 > self.seq_len_range.1 {
            problems.push(format!(
                "invalid sequence length range {:?}",
                self.seq_len_range
            ));
        }
        if !(self.noise >= 0.0) {
            problems.push(format!("noise must be ≥ 0, got {}", self.noise));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::Synthetic(problems.join("; ")))
        }
    }
}

/// The planted unit directions of one modality.
#[derive(Debug, Clone)]
pub struct PlantedDirections {
    pub signal: Vec<f64>,
    pub marker: Vec<f64>,
}

/// Ground truth of one generated sample.
#[derive(Debug, Clone)]
pub struct SampleTruth {
    pub id: String,
    pub split: Split,
    pub z_video: f64,
    pub z_audio: f64,
    pub z_text: f64,
    pub interaction: f64,
    pub label: f64,
}

/// Everything the generator planted, for verification tooling.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub directions: BTreeMap<Modality, PlantedDirections>,
    pub samples: Vec<SampleTruth>,
}

// Sequence geometry: the signal row is signal·z + 0.8·marker (+ σ-noise
// orthogonal to both); distractor rows carry N(0, 0.8²) along the signal
// direction, N(0, 0.3²) along the marker, and unit noise elsewhere.
const MARKER_GAIN: f64 = 0.8;
const DISTRACTOR_SIGNAL_SD: f64 = 0.8;
const DISTRACTOR_MARKER_SD: f64 = 0.3;

const EMOTIONS: [&str; 8] = [
    "happy", "tense", "calm", "excited", "nostalgic", "somber", "playful", "urgent",
];
const COLORS: [&str; 8] = [
    "red", "blue", "gold", "green", "white", "black", "orange", "purple",
];
const TONES: [&str; 4] = ["formal", "casual", "dramatic", "upbeat"];
const STYLES: [&str; 4] = ["close-up", "wide shot", "tracking", "static"];
const SENTIMENTS: [&str; 4] = ["positive", "negative", "neutral", ""];

/// Generates the dataset under `out_dir`: one manifest per split plus
/// `embeddings/` and `metadata/` file trees. Returns the manifests and
/// the planted ground truth (which is not written to disk).
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<(BTreeMap<Split, Manifest>, SyntheticTruth), DataError> {
    spec.validate()?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| DataError::Io {
            path: path.clone(),
            source,
        }
    };
    let emb_dir = out_dir.join("embeddings");
    let meta_dir = out_dir.join("metadata");
    fs::create_dir_all(&emb_dir).map_err(io_err(&emb_dir))?;
    fs::create_dir_all(&meta_dir).map_err(io_err(&meta_dir))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut directions = BTreeMap::new();
    for m in Modality::ALL {
        directions.insert(m, plant_directions(spec.dims[&m], &mut rng));
    }

    let splits = [
        (Split::Train, spec.n_train),
        (Split::Validation, spec.n_validation),
        (Split::Test, spec.n_test),
    ];
    let mut manifests = BTreeMap::new();
    let mut truths = Vec::new();
    let mut serial = 0usize;
    for (split, count) in splits {
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id = format!("ad-{serial:05}");
            serial += 1;
            let (entry, truth) =
                generate_sample(spec, &directions, &id, split, out_dir, &mut rng)?;
            entries.push(entry);
            truths.push(truth);
        }
        let manifest = Manifest {
            header: ManifestHeader {
                dataset: "synthetic".to_string(),
                split,
            },
            entries,
            base_dir: out_dir.to_path_buf(),
        };
        manifest.write(&manifest_path(out_dir, split))?;
        manifests.insert(split, manifest);
    }
    Ok((
        manifests,
        SyntheticTruth {
            directions,
            samples: truths,
        },
    ))
}

pub fn manifest_path(out_dir: &Path, split: Split) -> PathBuf {
    let name = match split {
        Split::Train => "train.jsonl",
        Split::Validation => "validation.jsonl",
        Split::Test => "test.jsonl",
    };
    out_dir.join(name)
}

fn plant_directions(dim: usize, rng: &mut ChaCha8Rng) -> PlantedDirections {
    let signal = random_unit(dim, rng);
    // Orthonormalize the marker against the signal direction.
    let mut marker = random_unit(dim, rng);
    let dot: f64 = marker.iter().zip(&signal).map(|(a, b)| a * b).sum();
    for (m, s) in marker.iter_mut().zip(&signal) {
        *m -= dot * s;
    }
    let norm = marker.iter().map(|v| v * v).sum::<f64>().sqrt();
    marker.iter_mut().for_each(|v| *v /= norm);
    PlantedDirections { signal, marker }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gaussian vector with its signal/marker components replaced by the
/// requested amounts.
fn compose_row(
    directions: &PlantedDirections,
    signal_amount: f64,
    marker_amount: f64,
    orth_sd: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let dim = directions.signal.len();
    let mut row: Vec<f64> = (0..dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * orth_sd
        })
        .collect();
    // Project out the planted directions, then add them back at the
    // requested amplitudes.
    for dir in [&directions.signal, &directions.marker] {
        let dot: f64 = row.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
        for (r, d) in row.iter_mut().zip(dir.iter()) {
            *r -= dot * d;
        }
    }
    for (i, r) in row.iter_mut().enumerate() {
        *r += signal_amount * directions.signal[i] + marker_amount * directions.marker[i];
    }
    row
}

fn generate_sample(
    spec: &SyntheticSpec,
    directions: &BTreeMap<Modality, PlantedDirections>,
    id: &str,
    split: Split,
    out_dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<(ManifestEntry, SampleTruth), DataError> {
    let z_video: f64 = StandardNormal.sample(rng);
    let z_audio: f64 = StandardNormal.sample(rng);
    let z_text: f64 = StandardNormal.sample(rng);
    let interaction = z_video * z_text;
    let c = spec.coefficients;
    let logit = c.alpha_video * z_video
        + c.alpha_audio * z_audio
        + c.alpha_text * z_text
        + c.alpha_cross * interaction;
    let label = 1.0 / (1.0 + (-logit).exp());

    let mut embeddings = BTreeMap::new();
    for m in Modality::ALL {
        let z = match m {
            Modality::Video => z_video,
            Modality::Audio => z_audio,
            Modality::Text => z_text,
        };
        let dirs = &directions[&m];
        let len = rng.random_range(spec.seq_len_range.0..=spec.seq_len_range.1);
        let signal_idx = rng.random_range(0..len);
        let mut rows = Vec::with_capacity(len);
        for i in 0..len {
            if i == signal_idx {
                rows.push(compose_row(dirs, z, MARKER_GAIN, spec.noise, rng));
            } else {
                let sig: f64 = StandardNormal.sample(rng);
                let mark: f64 = StandardNormal.sample(rng);
                rows.push(compose_row(
                    dirs,
                    sig * DISTRACTOR_SIGNAL_SD,
                    mark * DISTRACTOR_MARKER_SD,
                    1.0,
                    rng,
                ));
            }
        }
        let seq = EmbeddingSequence::new(m, Tensor::from_rows(&rows).expect("rectangular rows"))?;
        let rel = format!("embeddings/{id}_{m}.memb");
        memb::write_embedding(&seq, &out_dir.join(&rel))?;
        embeddings.insert(m, rel);
    }

    let meta_rel = format!("metadata/{id}.json");
    let metadata_json = synthesize_metadata(id, label, rng);
    fs::write(out_dir.join(&meta_rel), metadata_json).map_err(|source| DataError::Io {
        path: out_dir.join(&meta_rel),
        source,
    })?;

    Ok((
        ManifestEntry {
            id: id.to_string(),
            label: Some(label),
            embeddings,
            metadata: Some(meta_rel),
            candidates: None,
        },
        SampleTruth {
            id: id.to_string(),
            split,
            z_video,
            z_audio,
            z_text,
            interaction,
            label,
        },
    ))
}

/// Builds a metadata document whose planted fields correlate (pace,
/// scenes, emotions) or do not correlate (orientation, duration, colors)
/// with the label.
fn synthesize_metadata(id: &str, label: f64, rng: &mut ChaCha8Rng) -> String {
    let noise: f64 = StandardNormal.sample(rng);
    let pace_latent = 1.2 * (2.0 * label - 1.0) + 0.55 * noise;
    let pace = if pace_latent > 0.25 {
        "fast"
    } else if pace_latent < -0.25 {
        "slow"
    } else {
        "medium"
    };

    let scene_count = 1 + binomial(6, (0.15 + 0.7 * label).clamp(0.05, 0.95), rng);
    let emotion_target =
        (1 + binomial(5, (0.1 + 0.6 * label).clamp(0.05, 0.95), rng)).min(2 * scene_count);
    let color_target = (1 + rng.random_range(0..5usize)).min(2 * scene_count);

    let orientation = if rng.random::<f64>() < 0.5 {
        "landscape"
    } else {
        "portrait"
    };
    let duration = 5.0 + 55.0 * rng.random::<f64>();
    let sentiment = SENTIMENTS[rng.random_range(0..SENTIMENTS.len())];
    let brand = format!("brand-{:02}", rng.random_range(0..20u32));

    let emotions = pick_distinct(&EMOTIONS, emotion_target, rng);
    let colors = pick_distinct(&COLORS, color_target, rng);

    let mut scenes = Vec::with_capacity(scene_count);
    for i in 0..scene_count {
        // Round-robin so every chosen term appears in at least one scene.
        let mood = assigned_terms(&emotions, i, scene_count, rng);
        let scene_colors: Vec<String> = assigned_list(&colors, i, scene_count);
        scenes.push(json!({
            "Scene Number": i + 1,
            "Description": format!("scene {} of {}", i + 1, id),
            "Emotions or Mood": mood,
            "Tags": [TONES[i % TONES.len()]],
            "Colors": scene_colors,
            "Photography Style": STYLES[(i / 2) % STYLES.len()],
            "Text Shown": if i == 0 { brand.clone() } else { String::new() },
            "Tone": TONES[(i + 1) % TONES.len()],
        }));
    }

    let doc = json!({
        "General Video Information": {
            "Brand": brand,
            "Orientation": orientation,
            "Pace": pace,
            "Audio": "voiceover with light music",
            "Sentiment": sentiment,
            "Duration Seconds": (duration * 10.0).round() / 10.0,
        },
        "Scene Analysis": scenes,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("metadata serializes");
    text.push('\n');
    text
}

fn binomial(n: usize, p: f64, rng: &mut ChaCha8Rng) -> usize {
    (0..n).filter(|_| rng.random::<f64>() < p).count()
}

fn pick_distinct(vocab: &[&str], count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let count = count.min(vocab.len());
    let mut indices: Vec<usize> = (0..vocab.len()).collect();
    for i in 0..count {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    indices[..count].iter().map(|&i| vocab[i].to_string()).collect()
}

/// Comma-joined terms for scene `i`, covering all terms across scenes and
/// occasionally varying the letter case to exercise normalization.
fn assigned_terms(terms: &[String], i: usize, scenes: usize, rng: &mut ChaCha8Rng) -> String {
    let picked = assigned_list(terms, i, scenes);
    let styled: Vec<String> = picked
        .into_iter()
        .map(|t| {
            if rng.random::<f64>() < 0.3 {
                let mut chars = t.chars();
                match chars.next() {
                    Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
                    None => t,
                }
            } else {
                t
            }
        })
        .collect();
    styled.join(", ")
}

/// Distributes `terms` over `scenes` slots round-robin (at most two per
/// scene), so each term appears at least once.
fn assigned_list(terms: &[String], i: usize, scenes: usize) -> Vec<String> {
    let mut picked = Vec::new();
    let mut idx = i;
    while idx < terms.len() {
        picked.push(terms[idx].clone());
        idx += scenes;
    }
    if picked.is_empty() {
        picked.push(terms[i % terms.len()].clone());
    }
    picked
}
