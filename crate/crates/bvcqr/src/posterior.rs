//! Posterior summaries: effect estimates, significance calls, and recovery
//! metrics against a known truth.
//!
//! Every summary here is a function of the pooled multiset of draws, never of
//! chain identity: pooled values are sorted once per coordinate and all
//! statistics are computed from the sorted copy, so permuting chains yields
//! bit-identical output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{fit_line, quantile_sorted};
use crate::sampler::PosteriorDraws;
use crate::simulate::GroundTruth;

/// Which half of the mixture effect a row describes: the quartile weights on
/// the outcome level (`Baseline`, the h1 block) or on its change per year
/// (`Trajectory`, the h2 block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectLevel {
    Baseline,
    Trajectory,
}

impl std::fmt::Display for EffectLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EffectLevel::Baseline => write!(f, "baseline"),
            EffectLevel::Trajectory => write!(f, "trajectory"),
        }
    }
}

/// Location and spread of one scalar coordinate's pooled draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
    /// True when the central 95% interval excludes zero.
    pub significant: bool,
}

/// One chemical-by-level effect estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub chemical: String,
    pub level: EffectLevel,
    #[serde(flatten)]
    pub stats: SummaryStats,
    /// Posterior SD divided by the matching SD from a wide-prior refit;
    /// filled by [`attach_shrinkage`] when that refit exists.
    pub shrinkage_ratio: Option<f64>,
}

/// All 2M chemical effects, baseline block first, in chemical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub rows: Vec<EffectRow>,
}

impl EffectSummary {
    pub fn row(&self, chemical: &str, level: EffectLevel) -> Option<&EffectRow> {
        self.rows.iter().find(|r| r.chemical == chemical && r.level == level)
    }

    pub fn significant_count(&self) -> usize {
        self.rows.iter().filter(|r| r.stats.significant).count()
    }
}

/// Recovery metrics for one mixture level: ordinary least squares of the
/// posterior-mean h on the true h, plus the root mean squared error. The
/// line fields are `None` when the truth has zero variance and the slope is
/// undefined; the RMSE is always real.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HEvalLevel {
    pub intercept: Option<f64>,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub rmse: f64,
}

/// Per-level recovery of the mixture values against a generator's truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HEvalReport {
    pub level1: HEvalLevel,
    pub level2: HEvalLevel,
}

fn sorted_pooled(draws: &PosteriorDraws, index: usize) -> Vec<f64> {
    let mut v = draws.pooled(index);
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    v
}

fn stats_of_sorted(sorted: &[f64]) -> SummaryStats {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let ss = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    let sd = if sorted.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    let q2_5 = quantile_sorted(sorted, 0.025);
    let q50 = quantile_sorted(sorted, 0.50);
    let q97_5 = quantile_sorted(sorted, 0.975);
    SummaryStats { mean, sd, q2_5, q50, q97_5, significant: q2_5 > 0.0 || q97_5 < 0.0 }
}

/// Pooled summary of one coordinate by packing index.
pub fn summarize_coordinate(draws: &PosteriorDraws, index: usize) -> SummaryStats {
    stats_of_sorted(&sorted_pooled(draws, index))
}

/// Summarizes every chemical effect coordinate. Needs at least 100 retained
/// draws for the tail quantiles to mean anything.
pub fn summarize_effects(draws: &PosteriorDraws) -> Result<EffectSummary> {
    if draws.total_draws() < 100 {
        return Err(Error::Data(format!(
            "effect summaries need at least 100 retained draws, got {}",
            draws.total_draws()
        )));
    }
    let dims = &draws.dims;
    let mut rows = Vec::with_capacity(2 * dims.n_chemicals);
    for (level, range) in
        [(EffectLevel::Baseline, dims.theta1()), (EffectLevel::Trajectory, dims.theta2())]
    {
        for (m, index) in range.enumerate() {
            rows.push(EffectRow {
                chemical: draws.chemical_names[m].clone(),
                level,
                stats: summarize_coordinate(draws, index),
                shrinkage_ratio: None,
            });
        }
    }
    Ok(EffectSummary { rows })
}

/// Fills `shrinkage_ratio` on `summary` from a second summary of the same
/// coordinates fitted without shrinkage. Rows whose wide-prior SD is not a
/// positive number stay `None`.
pub fn attach_shrinkage(summary: &mut EffectSummary, wide: &EffectSummary) -> Result<()> {
    if summary.rows.len() != wide.rows.len() {
        return Err(Error::Data(format!(
            "shrinkage reference has {} rows for {} effects",
            wide.rows.len(),
            summary.rows.len()
        )));
    }
    for (row, reference) in summary.rows.iter_mut().zip(&wide.rows) {
        if row.chemical != reference.chemical || row.level != reference.level {
            return Err(Error::Data(format!(
                "shrinkage reference row mismatch at {} {}",
                row.chemical, row.level
            )));
        }
        row.shrinkage_ratio =
            (reference.stats.sd > 0.0).then(|| row.stats.sd / reference.stats.sd);
    }
    Ok(())
}

fn eval_level(h_hat: &[f64], h_true: &[f64]) -> HEvalLevel {
    let n = h_hat.len() as f64;
    let mse =
        h_hat.iter().zip(h_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    match fit_line(h_true, h_hat) {
        Some(line) => HEvalLevel {
            intercept: Some(line.intercept),
            slope: Some(line.slope),
            r_squared: Some(line.r_squared),
            rmse: mse.sqrt(),
        },
        None => HEvalLevel { intercept: None, slope: None, r_squared: None, rmse: mse.sqrt() },
    }
}

/// Scores the posterior-mean mixture values against the generator's truth,
/// separately per level.
pub fn evaluate_h(draws: &PosteriorDraws, truth: &GroundTruth) -> Result<HEvalReport> {
    let n = draws.dims.n_subjects;
    if truth.h1.len() != n || truth.h2.len() != n {
        return Err(Error::Data(format!(
            "truth has {} / {} mixture values for {n} subjects",
            truth.h1.len(),
            truth.h2.len()
        )));
    }
    let h = draws.dims.h();
    let h_hat: Vec<f64> =
        h.clone().map(|index| mean_of(&draws.pooled(index))).collect();
    Ok(HEvalReport {
        level1: eval_level(&h_hat[..n], &truth.h1),
        level2: eval_level(&h_hat[n..], &truth.h2),
    })
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Summaries of the global intercept and age-trend coefficients.
pub fn global_trend(draws: &PosteriorDraws) -> (SummaryStats, SummaryStats) {
    let beta = draws.dims.beta();
    (summarize_coordinate(draws, beta.start), summarize_coordinate(draws, beta.start + 1))
}
