//! Advertisement metadata parsing.
//!
//! Input documents follow the two-part shape used by the dataset's
//! description extraction: a "General Video Information" object (brand,
//! orientation, pace, audio, sentiment) and a "Scene Analysis" array with
//! per-scene moods, tags, and colors. Absent fields and empty strings map
//! to `unknown`/zero — the parser only fails on malformed JSON.
//!
//! Derived counts:
//! - `scene_count` — length of the scene array;
//! - `distinct_emotion_count` — distinct normalized values across every
//!   scene's "Emotions or Mood" (lowercased, trimmed, comma-split);
//! - `color_theme_count` — distinct normalized entries across scenes'
//!   "Colors" (same normalization; entries may be arrays or comma-joined
//!   strings).

use std::collections::BTreeSet;

use serde_json::Value;

use super::{DataError, MetaRecord, Orientation, Pace};

pub fn parse_metadata(json_text: &str) -> Result<MetaRecord, DataError> {
    let doc: Value = serde_json::from_str(json_text).map_err(DataError::MetadataParse)?;
    let mut record = MetaRecord::default();

    if let Some(info) = doc.get("General Video Information") {
        record.brand = str_field(info, "Brand");
        record.sentiment = str_field(info, "Sentiment");
        record.orientation = match normalize(&str_field(info, "Orientation")).as_str() {
            "landscape" => Orientation::Landscape,
            "portrait" => Orientation::Portrait,
            _ => Orientation::Unknown,
        };
        record.pace = match normalize(&str_field(info, "Pace")).as_str() {
            "slow" => Pace::Slow,
            "medium" | "moderate" => Pace::Medium,
            "fast" => Pace::Fast,
            _ => Pace::Unknown,
        };
        record.duration_seconds = info
            .get("Duration Seconds")
            .and_then(Value::as_f64)
            .filter(|v| v.is_finite() && *v >= 0.0)
            .unwrap_or(0.0);
    }

    let mut emotions = BTreeSet::new();
    let mut colors = BTreeSet::new();
    if let Some(Value::Array(scenes)) = doc.get("Scene Analysis") {
        record.scene_count = scenes.len();
        for scene in scenes {
            for part in split_terms(scene.get("Emotions or Mood")) {
                emotions.insert(part);
            }
            for part in split_terms(scene.get("Colors")) {
                colors.insert(part);
            }
        }
    }
    record.distinct_emotion_count = emotions.len();
    record.color_theme_count = colors.len();
    Ok(record)
}

fn str_field(obj: &Value, key: &str) -> String {
    obj.get(key)
        .and_then(Value::as_str)
        .unwrap_or("")
        .trim()
        .to_string()
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Splits a string or array-of-strings value into normalized non-empty
/// terms. Each string is further comma-split.
fn split_terms(value: Option<&Value>) -> Vec<String> {
    let mut terms = Vec::new();
    let mut push_str = |s: &str| {
        for part in s.split(',') {
            let norm = normalize(part);
            if !norm.is_empty() {
                terms.push(norm);
            }
        }
    };
    match value {
        Some(Value::String(s)) => push_str(s),
        Some(Value::Array(items)) => {
            for item in items {
                if let Value::String(s) = item {
                    push_str(s);
                }
            }
        }
        _ => {}
    }
    terms
}
