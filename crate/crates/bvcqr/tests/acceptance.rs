//! Release acceptance gate. Each test prints one `ACCEPTANCE n: PASS/FAIL`
//! line (visible with `--nocapture`) before asserting, so a failing suite
//! still reports every criterion it reached. Criteria 1-4 and 8 share four
//! full-size scenario fits built once in a lazy fixture; expect the whole
//! target to run for roughly half an hour.

use std::sync::LazyLock;
use std::time::Instant;

use bvcqr::design::{build_design, DesignConfig, QuantizedDesign};
use bvcqr::math::{cholesky_lower, cholesky_solve, ks_p_value, ks_statistic, mean, variance};
use bvcqr::model::{Hyperparameters, MixtureTarget, ModelDims, ParameterState, ThetaPrior};
use bvcqr::panel::{ExposurePanel, SubjectRecord};
use bvcqr::posterior::{evaluate_h, summarize_effects, EffectSummary, HEvalLevel, HEvalReport};
use bvcqr::preprocess::{impute_below_lod, quantize, run_pipeline, scale_by_2sd, PreprocessOptions};
use bvcqr::sampler::targets::DiagonalNormal;
use bvcqr::sampler::{
    diagnostics, leapfrog_trajectory, run_nuts, sample, SamplerConfig, Target,
};
use bvcqr::simulate::{builtin_scenario, generate, GroundTruth, Scenario};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn verdict(criterion: usize, pass: bool, detail: &str) {
    println!("ACCEPTANCE {criterion}: {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Shared fixture: both scenarios fitted under both priors at the reference
// settings (4 chains, 7000 iterations, 3000 warmup, target acceptance 0.97 —
// what the shrinkage geometry needs to clear the reliability gates).

struct ArmSummary {
    effects: EffectSummary,
    heval: HEvalReport,
    divergence_fraction: f64,
    max_rhat_core: Option<f64>,
    core_rhat_ok: bool,
    reliable: bool,
    seconds: f64,
}

struct ScenarioFixture {
    truth: GroundTruth,
    horseshoe: ArmSummary,
    wide: ArmSummary,
}

fn reference_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        iterations: 7000,
        warmup: 3000,
        chains: 4,
        target_accept: 0.97,
        seed,
        ..SamplerConfig::default()
    }
}

fn fit_arm(design: &QuantizedDesign, truth: &GroundTruth, horseshoe: bool) -> ArmSummary {
    let mut hyper = Hyperparameters::default();
    if !horseshoe {
        hyper.theta_prior = ThetaPrior::Fixed { variance: 100.0 };
    }
    let config = reference_sampler(if horseshoe { 11 } else { 12 });
    let started = Instant::now();
    let draws = sample(design, &hyper, &config).expect("scenario fit runs");
    let seconds = started.elapsed().as_secs_f64();
    let report = diagnostics(&draws);
    let core_rhat_ok = report
        .params
        .iter()
        .filter(|p| {
            p.name.starts_with("gamma")
                || p.name.starts_with("theta")
                || p.name.starts_with("phi")
                || p.name == "sigma_sq"
        })
        .all(|p| p.rhat.is_none_or(|r| r <= 1.05));
    ArmSummary {
        effects: summarize_effects(&draws).expect("effect summary"),
        heval: evaluate_h(&draws, truth).expect("conformable truth"),
        divergence_fraction: report.divergence_fraction,
        max_rhat_core: report.max_rhat_core,
        core_rhat_ok,
        reliable: report.reliable,
        seconds,
    }
}

fn build_fixture(scenario_id: u32) -> ScenarioFixture {
    let mut scenario = builtin_scenario(scenario_id).expect("built-in scenario");
    scenario.seed = 1;
    let (panel, truth) = generate(&scenario).expect("panel generates");
    let (clean, quantized, _) =
        run_pipeline(&panel, &PreprocessOptions::default()).expect("pipeline runs");
    let design = build_design(&clean, &quantized, DesignConfig::default()).expect("design builds");
    ScenarioFixture {
        horseshoe: fit_arm(&design, &truth, true),
        wide: fit_arm(&design, &truth, false),
        truth,
    }
}

static FIXTURES: LazyLock<Vec<ScenarioFixture>> =
    LazyLock::new(|| vec![build_fixture(1), build_fixture(2)]);

/// True coefficient per effects row: baseline block then trajectory block,
/// both in chemical order — the layout `summarize_effects` documents.
fn truth_by_row(truth: &GroundTruth) -> Vec<f64> {
    let mut v = truth.scenario.theta1_true.clone();
    v.extend_from_slice(&truth.scenario.theta2_true);
    v
}

// ---------------------------------------------------------------------------
// Criterion 1: scenario recovery within the stated bands, on budget.

fn check_level(scenario: u32, name: &str, level: &HEvalLevel, failures: &mut Vec<String>) {
    let (Some(intercept), Some(slope), Some(r2)) = (level.intercept, level.slope, level.r_squared)
    else {
        failures.push(format!("s{scenario} {name}: degenerate regression"));
        return;
    };
    if intercept.abs() > 0.35 {
        failures.push(format!("s{scenario} {name}: intercept {intercept:.3}"));
    }
    if !(0.90..=1.10).contains(&slope) {
        failures.push(format!("s{scenario} {name}: slope {slope:.3}"));
    }
    if r2 < 0.95 {
        failures.push(format!("s{scenario} {name}: R^2 {r2:.3}"));
    }
    if level.rmse > 0.50 {
        failures.push(format!("s{scenario} {name}: RMSE {:.3}", level.rmse));
    }
}

#[test]
fn criterion_1_scenario_recovery() {
    let mut failures = Vec::new();
    for (fixture, scenario) in FIXTURES.iter().zip([1u32, 2]) {
        let arm = &fixture.horseshoe;
        check_level(scenario, "h1", &arm.heval.level1, &mut failures);
        check_level(scenario, "h2", &arm.heval.level2, &mut failures);
        if arm.seconds > 45.0 * 60.0 {
            failures.push(format!("s{scenario}: fit took {:.0}s (budget 2700s)", arm.seconds));
        }
    }
    verdict(1, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 2: shrinkage beats the wide prior on recovery error.

#[test]
fn criterion_2_ablation_ordering() {
    let mut failures = Vec::new();
    for (fixture, scenario) in FIXTURES.iter().zip([1u32, 2]) {
        let hs = &fixture.horseshoe.heval;
        let wide = &fixture.wide.heval;
        if hs.level1.rmse >= wide.level1.rmse {
            failures.push(format!(
                "s{scenario} h1: horseshoe {:.3} !< wide {:.3}",
                hs.level1.rmse, wide.level1.rmse
            ));
        }
        if hs.level2.rmse > wide.level2.rmse {
            failures.push(format!(
                "s{scenario} h2: horseshoe {:.3} !<= wide {:.3}",
                hs.level2.rmse, wide.level2.rmse
            ));
        }
    }
    verdict(2, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 3: the planted effects and only the planted effects.

#[test]
fn criterion_3_selection_correctness() {
    let mut failures = Vec::new();
    for (fixture, scenario) in FIXTURES.iter().zip([1u32, 2]) {
        let truth_values = truth_by_row(&fixture.truth);
        let rows = &fixture.horseshoe.effects.rows;
        assert_eq!(rows.len(), truth_values.len(), "one effect row per coefficient");
        let planted: usize = truth_values.iter().filter(|t| **t != 0.0).count();
        let expected_planted = if scenario == 1 { 8 } else { 10 };
        assert_eq!(planted, expected_planted, "s{scenario} plants {expected_planted} effects");
        let mut flagged = 0usize;
        let mut false_positives = 0usize;
        for (row, t) in rows.iter().zip(&truth_values) {
            match (*t != 0.0, row.stats.significant) {
                (true, true) => flagged += 1,
                (false, true) => false_positives += 1,
                _ => {}
            }
        }
        let allowed_fp = usize::from(scenario == 2);
        if flagged != planted {
            failures.push(format!("s{scenario}: {flagged}/{planted} planted effects flagged"));
        }
        if false_positives > allowed_fp {
            failures.push(format!(
                "s{scenario}: {false_positives} false positives (allowed {allowed_fp})"
            ));
        }
    }
    verdict(3, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 4: shrinkage narrows the null intervals.

#[test]
fn criterion_4_interval_width_ordering() {
    let mut failures = Vec::new();
    for (fixture, scenario) in FIXTURES.iter().zip([1u32, 2]) {
        let truth_values = truth_by_row(&fixture.truth);
        let null_width = |effects: &EffectSummary| -> f64 {
            let widths: Vec<f64> = effects
                .rows
                .iter()
                .zip(&truth_values)
                .filter(|(_, t)| **t == 0.0)
                .map(|(row, _)| row.stats.q97_5 - row.stats.q2_5)
                .collect();
            widths.iter().sum::<f64>() / widths.len() as f64
        };
        let hs = null_width(&fixture.horseshoe.effects);
        let wide = null_width(&fixture.wide.effects);
        if hs >= wide {
            failures.push(format!("s{scenario}: horseshoe width {hs:.3} !< wide {wide:.3}"));
        }
    }
    verdict(4, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 5: the analytic gradient against central finite differences of
// the density alone.

fn tiny_scenario() -> Scenario {
    let scenario = Scenario {
        n_subjects: 5,
        n_chemicals: 3,
        exposure_cov: vec![1.0, 0.3, 0.0, 0.3, 1.0, 0.3, 0.0, 0.3, 1.0],
        theta1_true: vec![0.8, 0.0, 0.0],
        theta2_true: vec![0.0, 0.5, 0.0],
        scale1: 1.0,
        scale2: 1.0,
        ages_months: vec![12.0, 24.0, 36.0],
        beta_true: vec![0.7],
        covariates: vec![bvcqr::simulate::CovariateKind::StandardNormal],
        d_true: [0.09, 0.0, 0.04],
        noise_sd: 0.5,
        seed: 5,
    };
    scenario.validate().expect("tiny scenario is well formed");
    scenario
}

fn tiny_design(n_subjects: usize, seed: u64) -> QuantizedDesign {
    let mut scenario = tiny_scenario();
    scenario.n_subjects = n_subjects;
    scenario.seed = seed;
    let (panel, _) = generate(&scenario).expect("tiny panel generates");
    // The panel is simulated: every value is observed and already clean.
    let options = PreprocessOptions { detect_filter: false, ..PreprocessOptions::default() };
    let (clean, quantized, _) = run_pipeline(&panel, &options).expect("tiny pipeline");
    build_design(&clean, &quantized, DesignConfig::default()).expect("tiny design")
}

#[test]
fn criterion_5_gradient_oracle() {
    let design = tiny_design(5, 5);
    let target = MixtureTarget::new(&design, Hyperparameters::default()).expect("target");
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut failures = Vec::new();
    let started = Instant::now();
    for state in 0..20 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grad = vec![0.0; dim];
        let logp = target.log_density_grad(&x, &mut grad);
        assert!(logp.is_finite(), "state {state} has finite density");
        for i in 0..dim {
            let h = 1e-5 * (1.0 + x[i].abs());
            let mut hi = x.clone();
            hi[i] += h;
            let mut lo = x.clone();
            lo[i] -= h;
            let fd = (target.log_density(&hi) - target.log_density(&lo)) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs()).max(1.0);
            let rel = (grad[i] - fd).abs() / scale;
            if rel > 1e-5 {
                failures.push(format!(
                    "state {state} coord {i}: grad {:.6e} vs FD {fd:.6e} (rel {rel:.2e})",
                    grad[i]
                ));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed > 30.0 {
        failures.push(format!("gradient check took {elapsed:.1}s"));
    }
    verdict(5, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 6: with everything but (beta, sigma^2) frozen, the sampler must
// reproduce the closed-form normal-inverse-gamma conditional posterior.

/// Restriction of a target to a coordinate subset, the rest pinned at `base`.
struct FrozenTarget<'a> {
    inner: &'a MixtureTarget<'a>,
    base: Vec<f64>,
    free: Vec<usize>,
}

impl Target for FrozenTarget<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let mut full = self.base.clone();
        for (&value, &index) in position.iter().zip(&self.free) {
            full[index] = value;
        }
        let mut full_grad = vec![0.0; self.inner.dim()];
        let logp = self.inner.log_density_grad(&full, &mut full_grad);
        for (g, &index) in grad.iter_mut().zip(&self.free) {
            *g = full_grad[index];
        }
        logp
    }
}

/// Symmetric solve against X^T X via its Cholesky factor.
fn xtx_inverse(xtx: &[f64], k: usize) -> Vec<f64> {
    let chol = cholesky_lower(xtx, k).expect("X^T X is SPD");
    let mut inv = vec![0.0; k * k];
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        let col = cholesky_solve(&chol, k, &e);
        for i in 0..k {
            inv[i * k + j] = col[i];
        }
    }
    inv
}

/// Monte Carlo standard error of the mean of a (chains x kept) series.
fn mcse_of(series: &ndarray::Array2<f64>) -> f64 {
    let pooled: Vec<f64> = series.iter().copied().collect();
    let ess = bvcqr::sampler::diagnostics::ess_mean(series.view()).max(1.0);
    (variance(&pooled) / ess).sqrt()
}

#[test]
fn criterion_6_conjugate_oracle() {
    let started = Instant::now();
    let design = tiny_design(30, 9);
    let dims = ModelDims::from_design(&design);
    let hyper = Hyperparameters::default();
    let target = MixtureTarget::new(&design, hyper).expect("target");

    // Freeze at a structured state away from the prior mode.
    let mut state = ParameterState::neutral(&dims);
    state.theta1 = vec![0.6, -0.2, 0.0];
    state.theta2 = vec![0.0, 0.3, -0.1];
    state.h = {
        let h1 = design.mixture_mean(&state.theta1, &state.theta2);
        h1.to_vec()
    };
    for (i, b) in state.b.iter_mut().enumerate() {
        *b = if i % 2 == 0 { 0.05 } else { -0.03 };
    }
    state.d = [0.16, 0.02, 0.09];
    state.phi_sq = [0.09, 0.04];
    let base = state.unconstrain(&dims).expect("state unconstrains");

    let mut free: Vec<usize> = dims.beta().collect();
    free.push(dims.sigma());
    let frozen = FrozenTarget { inner: &target, base, free };

    let config = SamplerConfig {
        iterations: 2500,
        warmup: 500,
        chains: 2,
        target_accept: 0.9,
        seed: 21,
        ..SamplerConfig::default()
    };
    let raw = run_nuts(&frozen, &config).expect("frozen sampler runs");
    let kept = config.kept();
    assert_eq!(config.chains * kept, 4000, "the comparison uses 4000 draws");

    // Closed form: flat prior on beta; y* = y - Wh - Ub; the frozen random
    // effects keep their N(0, sigma^2 D) prior, so b contributes n subjects
    // of rank 2 to the posterior shape and its D^-1 quadratic form to the
    // rate alongside InvGamma(alpha, gamma).
    let n = dims.n_subjects as f64;
    let n_obs = dims.n_obs as f64;
    let k = dims.k();
    let zero_beta = vec![0.0; k];
    let mut offset = vec![0.0; dims.n_obs];
    design.predict(&zero_beta, &state.h, &state.b, &mut offset);
    let y_star: Vec<f64> = design.y.iter().zip(&offset).map(|(y, o)| y - o).collect();

    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    for (r, &ys) in y_star.iter().enumerate() {
        for i in 0..k {
            xty[i] += design.x[(r, i)] * ys;
            for j in 0..k {
                xtx[i * k + j] += design.x[(r, i)] * design.x[(r, j)];
            }
        }
    }
    let chol = cholesky_lower(&xtx, k).expect("X^T X is SPD");
    let beta_hat = cholesky_solve(&chol, k, &xty);
    let inv = xtx_inverse(&xtx, k);
    let s_min: f64 = (0..dims.n_obs)
        .map(|r| {
            let fit: f64 = (0..k).map(|i| design.x[(r, i)] * beta_hat[i]).sum();
            (y_star[r] - fit).powi(2)
        })
        .sum();
    let [d11, d21, d22] = state.d;
    let det = d11 * d22 - d21 * d21;
    let (i11, i21, i22) = (d22 / det, -d21 / det, d11 / det);
    let q_b: f64 = (0..dims.n_subjects)
        .map(|i| {
            let (b1, b2) = (state.b[2 * i], state.b[2 * i + 1]);
            i11 * b1 * b1 + 2.0 * i21 * b1 * b2 + i22 * b2 * b2
        })
        .sum();
    let alpha_post = hyper.alpha + n + (n_obs - k as f64) / 2.0;
    let gamma_post = hyper.gamma + (s_min + q_b) / 2.0;
    let sigma_mean = gamma_post / (alpha_post - 1.0);
    let sigma_var = gamma_post.powi(2) / ((alpha_post - 1.0).powi(2) * (alpha_post - 2.0));

    let mut failures = Vec::new();
    let beta_draws: Vec<ndarray::Array2<f64>> =
        (0..k).map(|j| raw.draws.slice(s![.., .., j]).to_owned()).collect();
    let sigma_draws = raw.draws.slice(s![.., .., k]).mapv(f64::exp);

    for (j, draws_j) in beta_draws.iter().enumerate() {
        let m = mean(&draws_j.iter().copied().collect::<Vec<f64>>());
        let mcse = mcse_of(draws_j);
        if (m - beta_hat[j]).abs() > 3.0 * mcse {
            failures.push(format!(
                "E[beta_{j}] {m:.5} vs {:.5} (3 MCSE {:.5})",
                beta_hat[j],
                3.0 * mcse
            ));
        }
    }
    // Covariance entries, with the MCSE of each cross-moment taken from its
    // own draw-by-draw product series.
    let beta_means: Vec<f64> =
        beta_draws.iter().map(|d| mean(&d.iter().copied().collect::<Vec<f64>>())).collect();
    for i in 0..k {
        for j in i..k {
            let z = ndarray::Zip::from(&beta_draws[i])
                .and(&beta_draws[j])
                .map_collect(|&a, &b| (a - beta_means[i]) * (b - beta_means[j]));
            let sample_cov = mean(&z.iter().copied().collect::<Vec<f64>>());
            let expected = sigma_mean * inv[i * k + j];
            let mcse = mcse_of(&z);
            if (sample_cov - expected).abs() > 3.0 * mcse {
                failures.push(format!(
                    "Cov[beta_{i},beta_{j}] {sample_cov:.6} vs {expected:.6} (3 MCSE {:.6})",
                    3.0 * mcse
                ));
            }
        }
    }
    let sigma_vec: Vec<f64> = sigma_draws.iter().copied().collect();
    let sigma_sample_mean = mean(&sigma_vec);
    let mcse = mcse_of(&sigma_draws);
    if (sigma_sample_mean - sigma_mean).abs() > 3.0 * mcse {
        failures.push(format!(
            "E[sigma^2] {sigma_sample_mean:.5} vs {sigma_mean:.5} (3 MCSE {:.5})",
            3.0 * mcse
        ));
    }
    let z2 = sigma_draws.mapv(|v| (v - sigma_sample_mean).powi(2));
    let sigma_sample_var = mean(&z2.iter().copied().collect::<Vec<f64>>());
    let mcse = mcse_of(&z2);
    if (sigma_sample_var - sigma_var).abs() > 3.0 * mcse {
        failures.push(format!(
            "Var[sigma^2] {sigma_sample_var:.6} vs {sigma_var:.6} (3 MCSE {:.6})",
            3.0 * mcse
        ));
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed > 60.0 {
        failures.push(format!("conjugate check took {elapsed:.1}s (budget 60s)"));
    }
    verdict(6, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 7: sampler calibration on the 2-d standard normal, leapfrog
// reversibility, and bit-exact seeding.

#[test]
fn criterion_7_sampler_calibration() {
    let mut failures = Vec::new();

    let target = DiagonalNormal::standard(2);
    let config = SamplerConfig { iterations: 2500, warmup: 500, chains: 2, seed: 11, ..SamplerConfig::default() };
    let raw = run_nuts(&target, &config).expect("normal target samples");
    let normal = Normal::new(0.0, 1.0).unwrap();
    for j in 0..2 {
        let pooled: Vec<f64> = raw.draws.slice(s![.., .., j]).iter().copied().collect();
        let d = ks_statistic(&pooled, |x| normal.cdf(x));
        let p = ks_p_value(d, pooled.len());
        if p < 0.01 {
            failures.push(format!("coordinate {j}: KS p {p:.4} (D {d:.4})"));
        }
    }

    let q0 = vec![0.3, -1.2];
    let p0 = vec![0.7, 0.4];
    let inv_mass = vec![1.0, 1.0];
    let forward = leapfrog_trajectory(&target, &q0, &p0, &inv_mass, 0.05, 64).expect("forward");
    let end = forward.last().unwrap();
    let flipped: Vec<f64> = end.p.iter().map(|p| -p).collect();
    let back = leapfrog_trajectory(&target, &end.q, &flipped, &inv_mass, 0.05, 64).expect("back");
    let home = back.last().unwrap();
    for i in 0..2 {
        let dq = (home.q[i] - q0[i]).abs();
        let dp = (home.p[i] + p0[i]).abs();
        if dq > 1e-8 || dp > 1e-8 {
            failures.push(format!("reversibility coord {i}: |dq| {dq:.2e}, |dp| {dp:.2e}"));
        }
    }

    let again = run_nuts(&target, &config).expect("same seed reruns");
    if raw.draws != again.draws || raw.energy != again.energy {
        failures.push("same seed did not reproduce draws bit-exactly".to_string());
    }

    verdict(7, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 8: the reliability gates on the scenario fits, and agreement of
// the self-reported flag with its definition.

#[test]
fn criterion_8_diagnostic_gates() {
    let mut failures = Vec::new();
    for (fixture, scenario) in FIXTURES.iter().zip([1u32, 2]) {
        for (arm_name, arm) in [("horseshoe", &fixture.horseshoe), ("wide", &fixture.wide)] {
            if arm.divergence_fraction >= 0.10 {
                failures.push(format!(
                    "s{scenario} {arm_name}: {:.1}% divergent",
                    100.0 * arm.divergence_fraction
                ));
            }
            if !arm.core_rhat_ok {
                failures.push(format!(
                    "s{scenario} {arm_name}: max core R-hat {}",
                    arm.max_rhat_core.map_or("n/a".to_string(), |r| format!("{r:.4}"))
                ));
            }
            let gates = arm.divergence_fraction < 0.10 && arm.core_rhat_ok;
            if arm.reliable != gates {
                failures.push(format!(
                    "s{scenario} {arm_name}: reliable flag {} disagrees with gates {}",
                    arm.reliable, gates
                ));
            }
        }
    }
    verdict(8, failures.is_empty(), &failures.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 9: preprocessing invariants on randomized panels.

/// Single-visit panel from per-chemical columns; NaN marks below-LOD.
fn panel_from_columns(columns: &[Vec<f64>], lod: Option<Vec<Option<f64>>>) -> ExposurePanel {
    let n = columns[0].len();
    let m = columns.len();
    let subjects = (0..n)
        .map(|i| SubjectRecord {
            id: format!("s{i}"),
            covariates: vec![],
            exposures: (0..m).map(|c| columns[c][i]).collect(),
            ages: vec![24.0],
            y: vec![0.0],
        })
        .collect();
    let flags = (0..m)
        .map(|c| (0..n).map(|i| columns[c][i].is_finite()).collect())
        .collect();
    ExposurePanel {
        subjects,
        chemical_names: (1..=m).map(|c| format!("z_{c}")).collect(),
        detect_flags: Some(flags),
        lod,
    }
}

/// Columns of integer-valued concentrations: exactly representable, so the
/// monotone transforms below stay exact and tie structure is preserved.
fn integer_columns() -> impl proptest::strategy::Strategy<Value = Vec<Vec<f64>>> {
    use proptest::collection::vec;
    use proptest::prelude::*;
    (8usize..=24, 1usize..=3).prop_flat_map(|(n, m)| {
        vec(vec((-50i32..=50).prop_map(f64::from), n..=n), m..=m)
    })
}

fn column_has_spread(column: &[f64]) -> bool {
    column.iter().any(|v| *v != column[0])
}

#[test]
fn criterion_9_preprocessing_properties() {
    use proptest::test_runner::{Config, TestRunner};

    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, result: Result<(), proptest::test_runner::TestError<Vec<Vec<f64>>>>| {
        if let Err(e) = result {
            failures.push(format!("{name}: {e}"));
        }
    };

    let config = Config { cases: 200, failure_persistence: None, ..Config::default() };

    // Quartile indices are invariant under strictly increasing transforms.
    let mut runner = TestRunner::new(config.clone());
    check(
        "monotone invariance",
        runner.run(&integer_columns(), |columns| {
            let base = quantize(&panel_from_columns(&columns, None)).unwrap();
            for transform in [|x: f64| 2.0 * x + 1.0, |x: f64| x.powi(3)] {
                let mapped: Vec<Vec<f64>> = columns
                    .iter()
                    .map(|col| col.iter().map(|&v| transform(v)).collect())
                    .collect();
                let transformed = quantize(&panel_from_columns(&mapped, None)).unwrap();
                proptest::prop_assert_eq!(&base.q, &transformed.q);
            }
            Ok(())
        }),
    );

    // 2-SD scaling is one such transform: indices survive it exactly.
    let mut runner = TestRunner::new(config.clone());
    check(
        "scale-then-quantize",
        runner.run(&integer_columns(), |columns| {
            proptest::prop_assume!(columns.iter().all(|c| column_has_spread(c)));
            let panel = panel_from_columns(&columns, None);
            let direct = quantize(&panel).unwrap();
            let (scaled, _) = scale_by_2sd(&panel).unwrap();
            let after = quantize(&scaled).unwrap();
            proptest::prop_assert_eq!(&direct.q, &after.q);
            Ok(())
        }),
    );

    // LOD imputation is idempotent bit-for-bit.
    let mut runner = TestRunner::new(config);
    check(
        "LOD idempotence",
        runner.run(&integer_columns(), |columns| {
            // Mask a deterministic subset below the limit; values do not
            // matter once flagged, the panel's flags drive imputation.
            let masked: Vec<Vec<f64>> = columns
                .iter()
                .map(|col| {
                    col.iter()
                        .enumerate()
                        .map(|(i, &v)| if i % 4 == 0 { f64::NAN } else { v })
                        .collect()
                })
                .collect();
            let lod = Some(vec![Some(1.5); masked.len()]);
            let panel = panel_from_columns(&masked, lod);
            let (once, counts) = impute_below_lod(&panel).unwrap();
            proptest::prop_assert!(counts.iter().all(|&c| c > 0));
            let (twice, recounts) = impute_below_lod(&once).unwrap();
            proptest::prop_assert_eq!(&counts, &recounts);
            for (a, b) in once.subjects.iter().zip(&twice.subjects) {
                for (x, y) in a.exposures.iter().zip(&b.exposures) {
                    proptest::prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            Ok(())
        }),
    );

    verdict(9, failures.is_empty(), &failures.join("; "));
}
