//! Convergence diagnostics: rank-normalized split-R-hat, bulk effective
//! sample size via Geyer's initial monotone sequence, and the per-fit
//! reliability report.
//!
//! Sequences are `[chains, draws]` matrices. Split statistics halve each
//! chain first, so a single chain still yields two sequences; R-hat is
//! nevertheless reported only for >= 2 chains, matching the warning
//! contract.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::PosteriorDraws;
use crate::math::{mean, variance};

/// Halves each row: `[S, n]` becomes `[2S, n/2]` (odd tail dropped).
fn split_chains(x: ArrayView2<f64>) -> Array2<f64> {
    let (s_chains, n) = (x.nrows(), x.ncols());
    let half = n / 2;
    let mut out = Array2::zeros((2 * s_chains, half));
    for c in 0..s_chains {
        out.row_mut(2 * c).assign(&x.slice(s![c, 0..half]));
        out.row_mut(2 * c + 1).assign(&x.slice(s![c, n - half..n]));
    }
    out
}

/// Replaces values by normal scores of their pooled fractional ranks
/// (ties share the average rank).
fn rank_normalize(x: &mut Array2<f64>) {
    let total = x.len();
    let mut order: Vec<usize> = (0..total).collect();
    let flat: Vec<f64> = x.iter().copied().collect();
    order.sort_by(|&a, &b| flat[a].partial_cmp(&flat[b]).expect("non-NaN draws"));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        // Average 1-based rank across the tie run [i, j].
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = total as f64;
    for (slot, r) in x.iter_mut().zip(ranks) {
        *slot = normal.inverse_cdf((r - 0.375) / (n + 0.25));
    }
}

/// Potential scale reduction on already-prepared sequences.
fn rhat_of(seqs: &Array2<f64>) -> f64 {
    let s_chains = seqs.nrows() as f64;
    let n = seqs.ncols() as f64;
    if s_chains < 2.0 || n < 2.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = seqs
        .axis_iter(Axis(0))
        .map(|row| mean(row.as_slice().unwrap()))
        .collect();
    let vars: Vec<f64> = seqs
        .axis_iter(Axis(0))
        .map(|row| variance(row.as_slice().unwrap()))
        .collect();
    let b = n * variance(&means);
    let w = mean(&vars);
    let w_positive = w > 0.0; // false for NaN as well
    if !w_positive {
        return f64::NAN;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Effective sample size on already-prepared sequences (Geyer's initial
/// monotone positive pairs).
fn ess_of(seqs: &Array2<f64>) -> f64 {
    let s_chains = seqs.nrows();
    let n = seqs.ncols();
    if s_chains == 0 || n < 4 {
        return f64::NAN;
    }
    let rows: Vec<&[f64]> = (0..s_chains)
        .map(|c| seqs.row(c).to_slice().expect("contiguous row"))
        .collect();
    let chain_means: Vec<f64> = rows.iter().map(|r| mean(r)).collect();
    let chain_vars: Vec<f64> = rows.iter().map(|r| variance(r)).collect();
    let w = mean(&chain_vars);
    let nf = n as f64;
    let var_plus = if s_chains > 1 {
        let b = nf * variance(&chain_means);
        (nf - 1.0) / nf * w + b / nf
    } else {
        (nf - 1.0) / nf * w
    };
    let var_plus_positive = var_plus > 0.0; // false for NaN as well
    if !var_plus_positive {
        return f64::NAN;
    }
    // Biased (1/n) autocovariance at lag t, averaged over chains.
    let acov = |t: usize| -> f64 {
        let mut total = 0.0;
        for (row, m) in rows.iter().zip(&chain_means) {
            let mut acc = 0.0;
            for i in 0..n - t {
                acc += (row[i] - m) * (row[i + t] - m);
            }
            total += acc / nf;
        }
        total / s_chains as f64
    };

    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;
    let mut tau = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        // Enforce monotone non-increasing pair sums.
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    let tau = (tau - 1.0).max(1.0 / (s_chains * n) as f64);
    (s_chains * n) as f64 / tau
}

/// Rank-normalized split R-hat of one coordinate's `[chains, draws]` matrix.
pub fn split_rhat(x: ArrayView2<f64>) -> f64 {
    let mut seqs = split_chains(x);
    rank_normalize(&mut seqs);
    rhat_of(&seqs)
}

/// Bulk effective sample size: rank-normalized split-chain ESS.
pub fn ess_bulk(x: ArrayView2<f64>) -> f64 {
    let mut seqs = split_chains(x);
    rank_normalize(&mut seqs);
    ess_of(&seqs)
}

/// Raw-scale split-chain ESS, suitable for Monte Carlo standard errors of
/// means.
pub fn ess_mean(x: ArrayView2<f64>) -> f64 {
    let seqs = split_chains(x);
    ess_of(&seqs)
}

/// Monte Carlo standard error of the pooled mean.
pub fn mcse_mean(x: ArrayView2<f64>) -> f64 {
    let pooled: Vec<f64> = x.iter().copied().collect();
    (variance(&pooled) / ess_mean(x)).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Rank-normalized split R-hat; absent for single-chain fits.
    pub rhat: Option<f64>,
    pub ess_bulk: f64,
    pub mcse_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub n_chains: usize,
    pub n_kept: usize,
    pub divergent: usize,
    pub divergence_fraction: f64,
    pub warmup_divergences: Vec<usize>,
    /// Post-adaptation step size per chain.
    pub step_size: Vec<f64>,
    pub mean_tree_depth: f64,
    /// Transitions that exhausted max_tree_depth doublings.
    pub max_tree_depth_hits: usize,
    /// Largest R-hat over the structural coordinates (trend, theta, phi,
    /// sigma); absent for single-chain fits.
    pub max_rhat_core: Option<f64>,
    /// False when divergences exceed 10% or a structural R-hat exceeds 1.05.
    pub reliable: bool,
    pub warnings: Vec<String>,
    pub params: Vec<ParamDiagnostics>,
}

/// Structural coordinates whose mixing gates reliability.
fn is_core(name: &str) -> bool {
    name.starts_with("gamma")
        || name.starts_with("theta")
        || name.starts_with("phi")
        || name == "sigma_sq"
}

pub fn diagnostics(draws: &PosteriorDraws) -> DiagnosticsReport {
    let n_chains = draws.n_chains();
    let n_kept = draws.n_kept();
    let mut warnings = Vec::new();
    if n_chains < 2 {
        warnings.push("single chain: R-hat omitted".to_string());
    }
    if n_kept < 100 {
        warnings.push(format!("only {n_kept} retained draws per chain; diagnostics are noisy"));
    }

    let mut params = Vec::with_capacity(draws.dim());
    let mut max_rhat_core: Option<f64> = None;
    for (j, name) in draws.param_names.iter().enumerate() {
        let coord = draws.coordinate(j);
        let pooled: Vec<f64> = coord.iter().copied().collect();
        let rhat = if n_chains >= 2 { Some(split_rhat(coord.view())) } else { None };
        if is_core(name) {
            if let Some(r) = rhat {
                if r.is_finite() {
                    max_rhat_core = Some(max_rhat_core.map_or(r, |m: f64| m.max(r)));
                }
            }
        }
        params.push(ParamDiagnostics {
            name: name.clone(),
            mean: mean(&pooled),
            sd: variance(&pooled).sqrt(),
            rhat,
            ess_bulk: ess_bulk(coord.view()),
            mcse_mean: mcse_mean(coord.view()),
        });
    }

    let divergent = draws.divergent_count();
    let divergence_fraction = draws.divergence_fraction();
    let mean_tree_depth =
        draws.tree_depth.iter().map(|&d| d as f64).sum::<f64>() / draws.total_draws() as f64;
    let max_tree_depth_hits = draws
        .tree_depth
        .iter()
        .filter(|&&d| d as usize >= draws.config.max_tree_depth)
        .count();

    let mut reliable = divergence_fraction < 0.10;
    if !reliable {
        warnings.push(format!(
            "{:.1}% divergent transitions exceed the 10% budget",
            100.0 * divergence_fraction
        ));
    }
    if let Some(r) = max_rhat_core {
        if r > 1.05 {
            reliable = false;
            warnings.push(format!("structural R-hat {r:.3} exceeds 1.05"));
        }
    }

    DiagnosticsReport {
        n_chains,
        n_kept,
        divergent,
        divergence_fraction,
        warmup_divergences: draws.warmup_divergences.clone(),
        step_size: draws.step_size.column(0).to_vec(),
        mean_tree_depth,
        max_tree_depth_hits,
        max_rhat_core,
        reliable,
        warnings,
        params,
    }
}
