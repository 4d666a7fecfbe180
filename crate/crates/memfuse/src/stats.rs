//! Statistics kernel: Spearman's ρ, MSE, Pearson r, one-way ANOVA and
//! two-sample t-tests with analytic p-values.
//!
//! p-values come from the regularized incomplete beta function evaluated
//! with Lentz's continued fraction, so there is no external math
//! dependency. Ranks use the average-rank convention for ties.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("series lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} observations, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("correlation undefined: {which} series is constant")]
    ConstantSeries { which: &'static str },
    #[error("each group needs at least 2 observations (group {index} has {got})")]
    GroupTooSmall { index: usize, got: usize },
    #[error("ANOVA needs at least 2 groups, got {got}")]
    TooFewGroups { got: usize },
    #[error("non-finite input value")]
    NonFinite,
}

/// A series together with its average ranks.
#[derive(Debug, Clone)]
pub struct RankedSeries {
    pub values: Vec<f64>,
    pub ranks: Vec<f64>,
}

impl RankedSeries {
    /// Ranks 1..n with ties sharing the average of the ranks they span.
    pub fn new(values: &[f64]) -> Result<Self, StatsError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && values[order[j + 1]] == values[order[i]] {
                j += 1;
            }
            // Positions i..=j (0-based) share the average rank.
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        Ok(Self {
            values: values.to_vec(),
            ranks,
        })
    }
}

/// Population-normalized Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew { min: 2, got: x.len() });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 {
        return Err(StatsError::ConstantSeries { which: "first" });
    }
    if vy == 0.0 {
        return Err(StatsError::ConstantSeries { which: "second" });
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average-rank tie handling.
///
/// Average ranks are half-integers, so the doubled ranks centered by
/// their integer mean `n + 1` make every sum below an exact integer;
/// the only rounding is the final square root and division. Identical
/// rankings therefore come out exactly 1.0 and reversals exactly −1.0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew { min: 3, got: x.len() });
    }
    let rx = RankedSeries::new(x)?;
    let ry = RankedSeries::new(y)?;
    let center = (x.len() + 1) as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&ra, &rb) in rx.ranks.iter().zip(&ry.ranks) {
        let a = 2.0 * ra - center;
        let b = 2.0 * rb - center;
        cov += a * b;
        vx += a * a;
        vy += b * b;
    }
    if vx == 0.0 {
        return Err(StatsError::ConstantSeries { which: "first" });
    }
    if vy == 0.0 {
        return Err(StatsError::ConstantSeries { which: "second" });
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, StatsError> {
    if pred.len() != truth.len() {
        return Err(StatsError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(StatsError::TooFew { min: 1, got: 0 });
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// One-way ANOVA outcome. `f_statistic` is `+inf` (with p = 0) when all
/// within-group variance vanishes but group means differ.
#[derive(Debug, Clone, PartialEq)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups { got: groups.len() });
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(StatsError::GroupTooSmall {
                index: i,
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (mean - grand) * (mean - grand);
        ss_within += g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n_total - groups.len();
    if ss_within == 0.0 {
        return Ok(if ss_between == 0.0 {
            AnovaResult {
                f_statistic: 0.0,
                df_between,
                df_within,
                p_value: 1.0,
            }
        } else {
            AnovaResult {
                f_statistic: f64::INFINITY,
                df_between,
                df_within,
                p_value: 0.0,
            }
        });
    }
    let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
    let p = f_survival(f, df_between as f64, df_within as f64);
    Ok(AnovaResult {
        f_statistic: f,
        df_between,
        df_within,
        p_value: p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TTestVariant {
    Welch,
    Pooled,
}

/// Two-sided two-sample t-test. Returns `(t, df, p)`.
///
/// Zero variance in both groups yields t = 0 (equal means) or ±inf with
/// p = 0 (unequal means).
pub fn t_test(a: &[f64], b: &[f64], variant: TTestVariant) -> Result<(f64, f64, f64), StatsError> {
    for (i, g) in [a, b].iter().enumerate() {
        if g.len() < 2 {
            return Err(StatsError::GroupTooSmall {
                index: i,
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    // Sample variances (n − 1).
    let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (nb - 1.0);

    let (t, df) = match variant {
        TTestVariant::Welch => {
            let se2 = va / na + vb / nb;
            if se2 == 0.0 {
                let df = na + nb - 2.0;
                return Ok(if ma == mb {
                    (0.0, df, 1.0)
                } else {
                    ((ma - mb).signum() * f64::INFINITY, df, 0.0)
                });
            }
            let df = se2 * se2
                / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
            ((ma - mb) / se2.sqrt(), df)
        }
        TTestVariant::Pooled => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            if sp2 == 0.0 {
                return Ok(if ma == mb {
                    (0.0, df, 1.0)
                } else {
                    ((ma - mb).signum() * f64::INFINITY, df, 0.0)
                });
            }
            ((ma - mb) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt(), df)
        }
    };
    Ok((t, df, student_t_two_sided_p(t, df)))
}

// ── Special functions ───────────────────────────────────────────────

/// ln Γ(z) for z > 0 via the Lanczos approximation.
pub fn ln_gamma(z: f64) -> f64 {
    debug_assert!(z > 0.0);
    const C: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut sum = 1.000000000190015;
    for (i, c) in C.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let tmp = z + 5.5;
    (z + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / z).ln()
}

/// Regularized incomplete beta Iₓ(a, b), continued fraction (Lentz).
pub fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // Converges fastest below the distribution mean; reflect otherwise.
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(1.0 - x, b, a);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    let front = ln_front.exp();

    const TINY: f64 = 1e-30;
    const EPS: f64 = 1e-15;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..300 {
        let mf = m as f64;
        // Even step.
        let num = mf * (b - mf) * x / ((a + 2.0 * mf - 1.0) * (a + 2.0 * mf));
        d = 1.0 / guard(1.0 + num * d);
        c = guard(1.0 + num / c);
        h *= d * c;
        // Odd step.
        let num = -(a + mf) * (a + b + mf) * x / ((a + 2.0 * mf) * (a + 2.0 * mf + 1.0));
        d = 1.0 / guard(1.0 + num * d);
        c = guard(1.0 + num / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (front * h / a).clamp(0.0, 1.0)
}

/// Survival function of the F(d1, d2) distribution.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    inc_beta(d2 / (d2 + d1 * f), d2 / 2.0, d1 / 2.0)
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / (df + t * t), df / 2.0, 0.5)
}
