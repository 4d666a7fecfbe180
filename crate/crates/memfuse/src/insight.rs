//! Analysis workflows on top of the predictor: content-factor statistics
//! over predictions, and candidate reranking with per-category
//! improvement reporting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{MetaRecord, Modality, Orientation, Pace, Sample};
use crate::model::{predict, ModelConfig, ModelError, ModelParams};
use crate::stats::{one_way_anova, spearman, t_test, StatsError, TTestVariant};

#[derive(Debug, Error)]
pub enum InsightError {
    #[error("predictions ({predictions}) and samples ({samples}) differ in length")]
    LengthMismatch { predictions: usize, samples: usize },
    #[error("no sample carries metadata; factor analysis needs MetaRecords")]
    NoMetadata,
    #[error("rerank item {id} has no candidates")]
    NoCandidates { id: String },
    #[error("sample {id} is missing {modality} embeddings required by the predictor")]
    MissingModality { id: String, modality: Modality },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub const PERMUTATIONS: usize = 10_000;

/// Content factors under analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Pace,
    SceneCount,
    Orientation,
    EmotionCount,
    Duration,
    ColorThemeCount,
}

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::Pace,
        Factor::SceneCount,
        Factor::Orientation,
        Factor::EmotionCount,
        Factor::Duration,
        Factor::ColorThemeCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Pace => "pace",
            Factor::SceneCount => "scene_count",
            Factor::Orientation => "orientation",
            Factor::EmotionCount => "emotion_count",
            Factor::Duration => "duration",
            Factor::ColorThemeCount => "color_theme_count",
        }
    }
}

/// Mean ± sd of one categorical group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Result for one factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FactorOutcome {
    /// One-way ANOVA across value groups.
    Anova {
        groups: Vec<GroupSummary>,
        f_statistic: f64,
        df_between: usize,
        df_within: usize,
        p_value: f64,
    },
    /// Two-sample t-test (Welch).
    TTest {
        groups: Vec<GroupSummary>,
        t_statistic: f64,
        df: f64,
        p_value: f64,
    },
    /// Spearman correlation with a seeded permutation p-value.
    Correlation { rho: f64, p_value: f64 },
    /// The factor could not be tested (constant data, too few groups).
    Degenerate { reason: String },
    /// The factor was entirely unknown in this dataset.
    Skipped { reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorResult {
    pub factor: Factor,
    pub outcome: FactorOutcome,
    /// Samples with a known value for this factor.
    pub n_used: usize,
    /// Samples excluded because the factor was unknown.
    pub n_unknown: usize,
}

/// Per-factor analysis of predictions against metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorReport {
    pub results: Vec<FactorResult>,
    pub n_samples: usize,
    pub permutation_seed: u64,
}

/// Runs every configured factor against the predictions.
///
/// Pace and scene-count buckets run a one-way ANOVA (pace uses the
/// slow/fast groups; medium is reported but excluded from the test),
/// orientation a Welch t-test, and the count/duration factors Spearman
/// correlation with a seeded 10,000-permutation p-value. Samples with an
/// unknown factor value are excluded per factor and counted.
pub fn factor_analysis(
    samples: &[Sample],
    predictions: &[f64],
    permutation_seed: u64,
) -> Result<FactorReport, InsightError> {
    if samples.len() != predictions.len() {
        return Err(InsightError::LengthMismatch {
            predictions: predictions.len(),
            samples: samples.len(),
        });
    }
    let with_meta: Vec<(&MetaRecord, f64)> = samples
        .iter()
        .zip(predictions)
        .filter_map(|(s, &p)| s.metadata.as_ref().map(|m| (m, p)))
        .collect();
    if with_meta.is_empty() {
        return Err(InsightError::NoMetadata);
    }

    let mut results = Vec::new();
    for factor in Factor::ALL {
        results.push(analyze_factor(factor, &with_meta, permutation_seed));
    }
    Ok(FactorReport {
        results,
        n_samples: with_meta.len(),
        permutation_seed,
    })
}

fn analyze_factor(
    factor: Factor,
    data: &[(&MetaRecord, f64)],
    permutation_seed: u64,
) -> FactorResult {
    match factor {
        Factor::Pace => {
            let known: Vec<(&str, f64)> = data
                .iter()
                .filter_map(|(m, p)| match m.pace {
                    Pace::Slow => Some(("low", *p)),
                    Pace::Medium => Some(("medium", *p)),
                    Pace::Fast => Some(("high", *p)),
                    Pace::Unknown => None,
                })
                .collect();
            let n_unknown = data.len() - known.len();
            // Two-group test on low vs high; medium is summarized only.
            let outcome = categorical_anova(
                &known,
                &["low", "high"],
                &["low", "medium", "high"],
            );
            FactorResult {
                factor,
                outcome,
                n_used: known.len(),
                n_unknown,
            }
        }
        Factor::SceneCount => {
            let known: Vec<(usize, f64)> =
                data.iter().map(|(m, p)| (m.scene_count, *p)).collect();
            let outcome = tercile_anova(&known);
            FactorResult {
                factor,
                outcome,
                n_used: known.len(),
                n_unknown: 0,
            }
        }
        Factor::Orientation => {
            let known: Vec<(&str, f64)> = data
                .iter()
                .filter_map(|(m, p)| match m.orientation {
                    Orientation::Landscape => Some(("landscape", *p)),
                    Orientation::Portrait => Some(("portrait", *p)),
                    Orientation::Unknown => None,
                })
                .collect();
            let n_unknown = data.len() - known.len();
            let outcome = orientation_t_test(&known);
            FactorResult {
                factor,
                outcome,
                n_used: known.len(),
                n_unknown,
            }
        }
        Factor::EmotionCount => continuous_outcome(
            factor,
            data,
            |m| Some(m.distinct_emotion_count as f64),
            permutation_seed,
        ),
        Factor::Duration => continuous_outcome(
            factor,
            data,
            |m| (m.duration_seconds > 0.0).then_some(m.duration_seconds),
            permutation_seed,
        ),
        Factor::ColorThemeCount => continuous_outcome(
            factor,
            data,
            |m| Some(m.color_theme_count as f64),
            permutation_seed,
        ),
    }
}

fn group_summary(name: &str, values: &[f64]) -> GroupSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    GroupSummary {
        name: name.to_string(),
        n,
        mean,
        sd: var.sqrt(),
    }
}

fn categorical_anova(
    known: &[(&str, f64)],
    tested: &[&str],
    reported: &[&str],
) -> FactorOutcome {
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (g, p) in known {
        by_group.entry(g).or_default().push(*p);
    }
    let groups: Vec<GroupSummary> = reported
        .iter()
        .filter_map(|name| by_group.get(name).map(|vals| group_summary(name, vals)))
        .collect();
    let test_groups: Vec<Vec<f64>> = tested
        .iter()
        .filter_map(|name| by_group.get(name).cloned())
        .filter(|g| g.len() >= 2)
        .collect();
    if test_groups.len() < 2 {
        return FactorOutcome::Degenerate {
            reason: format!(
                "need ≥2 populated groups from {tested:?}, found {}",
                test_groups.len()
            ),
        };
    }
    match one_way_anova(&test_groups) {
        Ok(result) => FactorOutcome::Anova {
            groups,
            f_statistic: result.f_statistic,
            df_between: result.df_between,
            df_within: result.df_within,
            p_value: result.p_value,
        },
        Err(e) => FactorOutcome::Degenerate {
            reason: e.to_string(),
        },
    }
}

/// Buckets scene counts into terciles by value and runs ANOVA across the
/// non-empty buckets.
fn tercile_anova(known: &[(usize, f64)]) -> FactorOutcome {
    if known.is_empty() {
        return FactorOutcome::Skipped {
            reason: "no scene counts available".to_string(),
        };
    }
    let mut counts: Vec<usize> = known.iter().map(|(c, _)| *c).collect();
    counts.sort_unstable();
    let q = |fraction: f64| -> usize {
        let idx = ((counts.len() as f64) * fraction) as usize;
        counts[idx.min(counts.len() - 1)]
    };
    let (q1, q2) = (q(1.0 / 3.0), q(2.0 / 3.0));
    let named: Vec<(&str, f64)> = known
        .iter()
        .map(|(c, p)| {
            let bucket = if *c <= q1 {
                "low"
            } else if *c <= q2 {
                "medium"
            } else {
                "high"
            };
            (bucket, *p)
        })
        .collect();
    categorical_anova(&named, &["low", "medium", "high"], &["low", "medium", "high"])
}

fn orientation_t_test(known: &[(&str, f64)]) -> FactorOutcome {
    let landscape: Vec<f64> = known
        .iter()
        .filter(|(g, _)| *g == "landscape")
        .map(|(_, p)| *p)
        .collect();
    let portrait: Vec<f64> = known
        .iter()
        .filter(|(g, _)| *g == "portrait")
        .map(|(_, p)| *p)
        .collect();
    if landscape.len() < 2 || portrait.len() < 2 {
        return FactorOutcome::Degenerate {
            reason: format!(
                "need ≥2 samples per orientation, got {} landscape / {} portrait",
                landscape.len(),
                portrait.len()
            ),
        };
    }
    let groups = vec![
        group_summary("landscape", &landscape),
        group_summary("portrait", &portrait),
    ];
    match t_test(&landscape, &portrait, TTestVariant::Welch) {
        Ok((t, df, p)) => FactorOutcome::TTest {
            groups,
            t_statistic: t,
            df,
            p_value: p,
        },
        Err(e) => FactorOutcome::Degenerate {
            reason: e.to_string(),
        },
    }
}

fn continuous_outcome(
    factor: Factor,
    data: &[(&MetaRecord, f64)],
    extract: impl Fn(&MetaRecord) -> Option<f64>,
    permutation_seed: u64,
) -> FactorResult {
    let pairs: Vec<(f64, f64)> = data
        .iter()
        .filter_map(|(m, p)| extract(m).map(|v| (v, *p)))
        .collect();
    let n_unknown = data.len() - pairs.len();
    if pairs.len() < 10 {
        return FactorResult {
            factor,
            outcome: FactorOutcome::Skipped {
                reason: format!("needs ≥10 known values, got {}", pairs.len()),
            },
            n_used: pairs.len(),
            n_unknown,
        };
    }
    let xs: Vec<f64> = pairs.iter().map(|(v, _)| *v).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, p)| *p).collect();
    let outcome = match spearman(&xs, &ys) {
        Ok(rho) => FactorOutcome::Correlation {
            rho,
            p_value: permutation_p_value(&xs, &ys, rho, permutation_seed),
        },
        Err(e) => FactorOutcome::Degenerate {
            reason: e.to_string(),
        },
    };
    FactorResult {
        factor,
        outcome,
        n_used: pairs.len(),
        n_unknown,
    }
}

/// Two-sided permutation p-value for Spearman's ρ: the fraction of
/// label shuffles whose |ρ| reaches the observed |ρ|, with the +1
/// correction that keeps the estimate away from zero.
fn permutation_p_value(xs: &[f64], ys: &[f64], observed: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = ys.to_vec();
    let threshold = observed.abs() - 1e-12;
    let mut hits = 0usize;
    for _ in 0..PERMUTATIONS {
        shuffled.shuffle(&mut rng);
        if let Ok(rho) = spearman(xs, &shuffled) {
            if rho.abs() >= threshold {
                hits += 1;
            }
        }
    }
    (hits + 1) as f64 / (PERMUTATIONS + 1) as f64
}

// ── Reranking ───────────────────────────────────────────────────────

/// Memorability category thresholds over the original score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Low,
    Medium,
    High,
}

impl Category {
    /// low: score ≤ 0.5; medium: 0.5 < score < 0.7; high: score ≥ 0.7.
    pub fn of(score: f64) -> Category {
        if score <= 0.5 {
            Category::Low
        } else if score < 0.7 {
            Category::Medium
        } else {
            Category::High
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Low => "low",
            Category::Medium => "medium",
            Category::High => "high",
        }
    }
}

/// One reranked item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankItem {
    pub id: String,
    pub original_score: f64,
    pub best_candidate_id: String,
    pub best_candidate_score: f64,
    pub category: Category,
}

/// Mean ± sd of original and best-candidate scores for one category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub n: usize,
    pub original_mean: f64,
    pub original_sd: f64,
    pub best_mean: f64,
    pub best_sd: f64,
    /// `100 · (best_mean − original_mean) / original_mean`.
    pub improvement_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankReport {
    pub items: Vec<RerankItem>,
    pub categories: Vec<CategoryRow>,
    pub overall: Option<CategoryRow>,
}

/// Scores originals and candidates with the frozen predictor and picks
/// each item's argmax candidate (ties broken by lexicographic candidate
/// id). Improvement is aggregated per category of the original score.
pub fn rerank(
    items: &[(Sample, Vec<Sample>)],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<RerankReport, InsightError> {
    let score = |sample: &Sample| -> Result<f64, InsightError> {
        for m in &config.modalities {
            if !sample.sequences.contains_key(m) {
                return Err(InsightError::MissingModality {
                    id: sample.id.clone(),
                    modality: *m,
                });
            }
        }
        Ok(predict(params, config, sample)?)
    };

    let mut rows = Vec::with_capacity(items.len());
    for (original, candidates) in items {
        if candidates.is_empty() {
            return Err(InsightError::NoCandidates {
                id: original.id.clone(),
            });
        }
        let original_score = score(original)?;
        let mut scored: Vec<(String, f64)> = candidates
            .iter()
            .map(|c| score(c).map(|s| (c.id.clone(), s)))
            .collect::<Result<_, _>>()?;
        scored.sort_by(|a, b| a.0.cmp(&b.0));
        let (mut best_id, mut best_score) = scored[0].clone();
        for (id, s) in &scored[1..] {
            if *s > best_score {
                best_id = id.clone();
                best_score = *s;
            }
        }
        rows.push(RerankItem {
            id: original.id.clone(),
            original_score,
            best_candidate_id: best_id,
            best_candidate_score: best_score,
            category: Category::of(original_score),
        });
    }

    let mut categories = Vec::new();
    for category in [Category::Low, Category::Medium, Category::High] {
        let members: Vec<&RerankItem> =
            rows.iter().filter(|r| r.category == category).collect();
        if !members.is_empty() {
            categories.push(category_row(category.name(), &members));
        }
    }
    let all: Vec<&RerankItem> = rows.iter().collect();
    let overall = (!all.is_empty()).then(|| category_row("overall", &all));
    Ok(RerankReport {
        items: rows,
        categories,
        overall,
    })
}

/// `100 · (best − original) / original`, the reported improvement.
pub fn improvement_percent(original_mean: f64, best_mean: f64) -> f64 {
    100.0 * (best_mean - original_mean) / original_mean
}

fn category_row(name: &str, members: &[&RerankItem]) -> CategoryRow {
    let originals: Vec<f64> = members.iter().map(|r| r.original_score).collect();
    let bests: Vec<f64> = members.iter().map(|r| r.best_candidate_score).collect();
    let o = group_summary(name, &originals);
    let b = group_summary(name, &bests);
    CategoryRow {
        category: name.to_string(),
        n: members.len(),
        original_mean: o.mean,
        original_sd: o.sd,
        best_mean: b.mean,
        best_sd: b.sd,
        improvement_percent: improvement_percent(o.mean, b.mean),
    }
}

// ── Report rendering ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

pub fn render_factor_report(report: &FactorReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut out =
                String::from("factor,kind,statistic,p_value,rho,n_used,n_unknown,detail\n");
            for r in &report.results {
                let (kind, stat, p, rho, detail) = factor_cells(&r.outcome);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.factor.name(),
                    kind,
                    stat,
                    p,
                    rho,
                    r.n_used,
                    r.n_unknown,
                    detail
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from(
                "| factor | test | statistic | p-value | rho | n | excluded |\n|---|---|---|---|---|---|---|\n",
            );
            for r in &report.results {
                let (kind, stat, p, rho, _) = factor_cells(&r.outcome);
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    r.factor.name(),
                    kind,
                    stat,
                    p,
                    rho,
                    r.n_used,
                    r.n_unknown
                ));
            }
            out
        }
    }
}

fn factor_cells(outcome: &FactorOutcome) -> (String, String, String, String, String) {
    let na = "NA".to_string();
    match outcome {
        FactorOutcome::Anova {
            f_statistic,
            p_value,
            ..
        } => (
            "anova".into(),
            format!("{f_statistic}"),
            format!("{p_value}"),
            na.clone(),
            String::new(),
        ),
        FactorOutcome::TTest {
            t_statistic,
            p_value,
            ..
        } => (
            "t_test".into(),
            format!("{t_statistic}"),
            format!("{p_value}"),
            na.clone(),
            String::new(),
        ),
        FactorOutcome::Correlation { rho, p_value } => (
            "spearman".into(),
            na.clone(),
            format!("{p_value}"),
            format!("{rho}"),
            String::new(),
        ),
        FactorOutcome::Degenerate { reason } => {
            ("degenerate".into(), na.clone(), na.clone(), na, reason.replace(',', ";"))
        }
        FactorOutcome::Skipped { reason } => {
            ("skipped".into(), na.clone(), na.clone(), na, reason.replace(',', ";"))
        }
    }
}

pub fn render_rerank_report(report: &RerankReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "category,n,original_mean,original_sd,best_mean,best_sd,improvement_percent\n",
            );
            for row in report.categories.iter().chain(report.overall.iter()) {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    row.category,
                    row.n,
                    row.original_mean,
                    row.original_sd,
                    row.best_mean,
                    row.best_sd,
                    row.improvement_percent
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from(
                "| Category | Original | Reranked | Improvement |\n|---|---|---|---|\n",
            );
            for row in report.categories.iter().chain(report.overall.iter()) {
                out.push_str(&format!(
                    "| {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.2}% |\n",
                    row.category,
                    row.original_mean,
                    row.original_sd,
                    row.best_mean,
                    row.best_sd,
                    row.improvement_percent
                ));
            }
            out
        }
    }
}
