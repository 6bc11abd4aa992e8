//! Synthetic exposure panels with planted quartile effects.
//!
//! A [`Scenario`] fixes everything about a synthetic cohort: how many
//! subjects and chemicals, the exposure covariance, which quartile
//! coefficients are nonzero, the covariate effects, and the noise level.
//! [`generate`] turns a scenario into an [`ExposurePanel`] that flows through
//! the ordinary preprocessing and design path, plus a [`GroundTruth`] record
//! of exactly what was planted so recovery can be scored afterwards.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{mixture_mean, DesignConfig};
use crate::error::{Error, Result};
use crate::math::cholesky_lower;
use crate::panel::{ExposurePanel, SubjectRecord};
use crate::preprocess::quantize;

/// How one baseline covariate is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    StandardNormal,
    Bernoulli { p: f64 },
}

/// Complete recipe for one synthetic cohort.
///
/// `theta1_true`/`theta2_true` hold the planted coefficients as used, i.e.
/// with `scale1`/`scale2` already folded in; the scales are kept so reports
/// can echo how the built-in values were assembled. Ages are in months and
/// all subjects share the visit grid; outcomes are generated with the same
/// year-scaled centering the default design applies, so a default fit sees
/// exactly the generator's age variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_subjects: usize,
    pub n_chemicals: usize,
    /// Row-major M x M exposure covariance.
    pub exposure_cov: Vec<f64>,
    pub theta1_true: Vec<f64>,
    pub theta2_true: Vec<f64>,
    pub scale1: f64,
    pub scale2: f64,
    /// Visit ages in months, strictly increasing, shared by every subject.
    pub ages_months: Vec<f64>,
    pub beta_true: Vec<f64>,
    pub covariates: Vec<CovariateKind>,
    /// Random-effect covariance packed (d11, d21, d22); positive semidefinite.
    pub d_true: [f64; 3],
    pub noise_sd: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_subjects, self.n_chemicals);
        if n < 4 {
            return Err(Error::Config(format!(
                "scenario needs at least 4 subjects for quartile indexing, got {n}"
            )));
        }
        if m == 0 {
            return Err(Error::Config("scenario needs at least one chemical".into()));
        }
        if self.exposure_cov.len() != m * m {
            return Err(Error::Config(format!(
                "exposure covariance has {} entries for {m} chemicals",
                self.exposure_cov.len()
            )));
        }
        for i in 0..m {
            for j in 0..i {
                let a = self.exposure_cov[i * m + j];
                let b = self.exposure_cov[j * m + i];
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Config(format!(
                        "exposure covariance is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        if self.theta1_true.len() != m || self.theta2_true.len() != m {
            return Err(Error::Config(format!(
                "planted coefficient vectors must have length {m}, got {} and {}",
                self.theta1_true.len(),
                self.theta2_true.len()
            )));
        }
        if self.beta_true.len() != self.covariates.len() {
            return Err(Error::Config(format!(
                "{} covariate effects for {} covariate specs",
                self.beta_true.len(),
                self.covariates.len()
            )));
        }
        if self.ages_months.is_empty() {
            return Err(Error::Config("scenario needs at least one visit age".into()));
        }
        for w in self.ages_months.windows(2) {
            let increasing = w[1] > w[0]; // false for NaN as well
            if !increasing {
                return Err(Error::Config(format!(
                    "visit ages must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        for kind in &self.covariates {
            if let CovariateKind::Bernoulli { p } = kind {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "Bernoulli covariate probability must be in [0, 1], got {p}"
                    )));
                }
            }
        }
        let [d11, d21, d22] = self.d_true;
        let psd = d11 >= 0.0 && d22 >= 0.0 && d11 * d22 - d21 * d21 >= -1e-12;
        if !psd {
            return Err(Error::Config(format!(
                "random-effect covariance is not positive semidefinite: {:?}",
                self.d_true
            )));
        }
        let noise_ok = self.noise_sd >= 0.0; // false for NaN as well
        if !noise_ok {
            return Err(Error::Config(format!(
                "noise SD must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

/// Everything the generator planted, echoed next to the panel it produced.
///
/// `h1`/`h2` are per subject and satisfy `h_l[i] = sum_m q[(i, m)] *
/// theta_l[m]` exactly: the generator puts no noise at the mixture level.
/// `b` is interleaved per subject (intercept, slope) to match the model's
/// packing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: Scenario,
    pub seed: u64,
    /// SHA-256 of the panel CSV as written next to this record, filled at
    /// write time; `None` for in-memory truths.
    #[serde(default)]
    pub panel_sha256: Option<String>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub beta: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub b: Vec<f64>,
}

impl GroundTruth {
    /// h stacked (h1 then h2), the layout the model state uses.
    pub fn h_stacked(&self) -> Vec<f64> {
        let mut h = self.h1.clone();
        h.extend_from_slice(&self.h2);
        h
    }
}

/// AR(1)-style covariance: unit variances, corr(i, j) = rho^|i-j|.
pub fn ar1_covariance(m: usize, rho: f64) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            c[i * m + j] = rho.powi((i as i32 - j as i32).abs());
        }
    }
    c
}

/// The two stock validation cohorts: 100 subjects, 36 chemicals, three
/// visits. The first plants four positive baseline effects and four positive
/// trajectory effects; the second adds one negative effect at each level on
/// top of those.
pub fn builtin_scenario(id: u32) -> Result<Scenario> {
    // Level-scale times small weights (5 x {0.1, 0.3, 0.4, 0.2}, ...), stored
    // as the literal products so the planted values are exact decimals.
    let mut plant1: Vec<(usize, f64)> = vec![(0, 0.5), (11, 1.5), (23, 2.0), (34, 1.0)];
    let mut plant2: Vec<(usize, f64)> = vec![(8, 0.3), (22, 1.5), (26, 0.6), (32, 0.6)];
    match id {
        1 => {}
        2 => {
            plant1.push((22, -1.5));
            plant2.push((5, -0.6));
        }
        other => {
            return Err(Error::Config(format!(
                "unknown built-in scenario {other}; choose 1 or 2"
            )))
        }
    }
    let m = 36;
    let (scale1, scale2) = (5.0, 3.0);
    let mut theta1_true = vec![0.0; m];
    let mut theta2_true = vec![0.0; m];
    for (idx, v) in plant1 {
        theta1_true[idx] = v;
    }
    for (idx, v) in plant2 {
        theta2_true[idx] = v;
    }
    Ok(Scenario {
        n_subjects: 100,
        n_chemicals: m,
        exposure_cov: ar1_covariance(m, 0.4),
        theta1_true,
        theta2_true,
        scale1,
        scale2,
        ages_months: vec![12.0, 24.0, 36.0],
        beta_true: vec![1.0, 0.5],
        covariates: vec![CovariateKind::StandardNormal, CovariateKind::Bernoulli { p: 0.5 }],
        d_true: [0.25, 0.0, 0.04],
        noise_sd: 1.0,
        seed: 0,
    })
}

/// Lower-triangular square root of the packed 2x2 PSD matrix, row-major
/// (l11, l21, l22). Handles the semidefinite edge where d11 = 0.
fn psd_sqrt_2x2(d: [f64; 3]) -> [f64; 3] {
    let [d11, d21, d22] = d;
    if d11 <= 0.0 {
        return [0.0, 0.0, d22.max(0.0).sqrt()];
    }
    let l11 = d11.sqrt();
    let l21 = d21 / l11;
    let l22 = (d22 - l21 * l21).max(0.0).sqrt();
    [l11, l21, l22]
}

/// Draws a full synthetic cohort.
///
/// Deterministic in `s.seed`; one generator is consumed in a fixed order
/// (exposures subject by subject, then covariates and random effects subject
/// by subject, then visit noise). Exposures are quantized with the ordinary
/// quartile indexer and the planted mixture values come from those indices,
/// so refitting the returned panel reproduces the generator's design exactly.
pub fn generate(s: &Scenario) -> Result<(ExposurePanel, GroundTruth)> {
    s.validate()?;
    let (n, m) = (s.n_subjects, s.n_chemicals);
    let l = cholesky_lower(&s.exposure_cov, m)
        .map_err(|e| Error::Config(format!("exposure covariance: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    let mut exposures = vec![vec![0.0; m]; n];
    let mut eps = vec![0.0; m];
    for row in exposures.iter_mut() {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for i in 0..m {
            let mut z = 0.0;
            for j in 0..=i {
                z += l[i * m + j] * eps[j];
            }
            row[i] = z;
        }
    }

    let lb = psd_sqrt_2x2(s.d_true);
    let mut covariates = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x: Vec<f64> = s
            .covariates
            .iter()
            .map(|kind| match kind {
                CovariateKind::StandardNormal => rng.sample(StandardNormal),
                CovariateKind::Bernoulli { p } => f64::from(rng.random::<f64>() < *p),
            })
            .collect();
        covariates.push(x);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        b.push(lb[0] * e1);
        b.push(lb[1] * e1 + lb[2] * e2);
    }

    let id_width = n.to_string().len();
    let chem_width = m.to_string().len().max(2);
    let chemical_names: Vec<String> =
        (1..=m).map(|c| format!("chem{c:0chem_width$}")).collect();
    let mut subjects: Vec<SubjectRecord> = (0..n)
        .map(|i| SubjectRecord {
            id: format!("s{:0id_width$}", i + 1),
            covariates: covariates[i].clone(),
            exposures: exposures[i].clone(),
            ages: s.ages_months.clone(),
            y: vec![0.0; s.ages_months.len()],
        })
        .collect();

    // Every simulated concentration is observed, so detectability is recorded
    // as uniformly true; reading the panel back from CSV rederives the same.
    let detect_flags = Some(vec![vec![true; n]; m]);
    let shell = ExposurePanel {
        subjects: subjects.clone(),
        chemical_names: chemical_names.clone(),
        detect_flags: detect_flags.clone(),
        lod: None,
    };
    let quantized = quantize(&shell)?;
    let q = quantized.q.mapv(f64::from);
    let h = mixture_mean(&q, &s.theta1_true, &s.theta2_true);
    let (h1, h2) = (h.as_slice().unwrap()[..n].to_vec(), h.as_slice().unwrap()[n..].to_vec());

    let design_cfg = DesignConfig::default();
    for (i, subj) in subjects.iter_mut().enumerate() {
        let xb: f64 =
            subj.covariates.iter().zip(&s.beta_true).map(|(x, bt)| x * bt).sum();
        for (v, &months) in s.ages_months.iter().enumerate() {
            let a = (months - design_cfg.baseline_age) / design_cfg.age_divisor;
            let noise: f64 = rng.sample(StandardNormal);
            subj.y[v] = h1[i] + h2[i] * a + xb + b[2 * i] + a * b[2 * i + 1]
                + s.noise_sd * noise;
        }
    }

    let panel = ExposurePanel { subjects, chemical_names, detect_flags, lod: None };
    panel.validate()?;
    let truth = GroundTruth {
        scenario: s.clone(),
        seed: s.seed,
        panel_sha256: None,
        theta1: s.theta1_true.clone(),
        theta2: s.theta2_true.clone(),
        beta: s.beta_true.clone(),
        h1,
        h2,
        b,
    };
    Ok((panel, truth))
}
