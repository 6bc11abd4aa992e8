//! Model parameters, their packing, and the bijection between the
//! constrained and unconstrained views.
//!
//! The joint model for outcome vector Y with design blocks X, W, U
//! (see [`crate::design`]) is
//!
//! ```text
//! Y | beta, h, b, sigma^2   ~ N(X beta + W h + U b, sigma^2 I)
//! h | theta, phi            ~ N((Q theta1, Q theta2), blockdiag(phi1^2 I_n, phi2^2 I_n))
//! phi_l^2                   ~ InvGamma(alpha0, gamma0)
//! b | sigma^2, D            ~ N(0, sigma^2 (I_n ⊗ D))
//! D^{-1}                    ~ Wishart(nu0, C0)
//! sigma^2                   ~ InvGamma(alpha, gamma)
//! beta                      ~ flat
//! theta_lm | lambda, tau    ~ N(0, lambda_lm^2 tau_l^c)        (c = tau_power)
//! lambda_lm                 ~ half-t(df_lambda, scale 1)
//! tau_l                     ~ half-t(df_tau, scale a0 phi_l^2)
//! ```
//!
//! Sampling happens on an unconstrained vector with a fixed packing order:
//! beta, theta1, theta2, log phi^2 (2), log lambda1, log lambda2, log tau (2),
//! log sigma^2, log-Cholesky of D (3), h (2n), b (2n). Positive scalars map
//! through log; D maps through its Cholesky factor with logged diagonal. The
//! constrained view uses the same layout with positives in natural units and
//! D stored as (d11, d21, d22).

mod density;

pub use density::{
    grad_log_joint, half_t_logpdf, inv_gamma_logpdf, log_density_gradient,
    log_density_unconstrained, log_joint, log_joint_terms, LogJointTerms, MixtureTarget,
};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::design::QuantizedDesign;
use crate::error::{Error, Result};

/// Problem sizes that fix the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_subjects: usize,
    pub n_obs: usize,
    pub n_chemicals: usize,
    pub n_covariates: usize,
}

impl ModelDims {
    pub fn from_design(design: &QuantizedDesign) -> Self {
        ModelDims {
            n_subjects: design.n_subjects(),
            n_obs: design.n_obs(),
            n_chemicals: design.n_chemicals(),
            n_covariates: design.n_covariates,
        }
    }

    /// Columns of X: intercept, age trend, covariates.
    pub fn k(&self) -> usize {
        self.n_covariates + 2
    }

    /// Total parameter dimension in either view.
    pub fn dim(&self) -> usize {
        self.k() + 4 * self.n_chemicals + 4 * self.n_subjects + 8
    }

    pub fn beta(&self) -> Range<usize> {
        0..self.k()
    }

    pub fn theta1(&self) -> Range<usize> {
        let s = self.k();
        s..s + self.n_chemicals
    }

    pub fn theta2(&self) -> Range<usize> {
        let s = self.theta1().end;
        s..s + self.n_chemicals
    }

    pub fn phi(&self) -> Range<usize> {
        let s = self.theta2().end;
        s..s + 2
    }

    pub fn lambda1(&self) -> Range<usize> {
        let s = self.phi().end;
        s..s + self.n_chemicals
    }

    pub fn lambda2(&self) -> Range<usize> {
        let s = self.lambda1().end;
        s..s + self.n_chemicals
    }

    pub fn tau(&self) -> Range<usize> {
        let s = self.lambda2().end;
        s..s + 2
    }

    pub fn sigma(&self) -> usize {
        self.tau().end
    }

    pub fn d(&self) -> Range<usize> {
        let s = self.sigma() + 1;
        s..s + 3
    }

    pub fn h(&self) -> Range<usize> {
        let s = self.d().end;
        s..s + 2 * self.n_subjects
    }

    pub fn b(&self) -> Range<usize> {
        let s = self.h().end;
        s..s + 2 * self.n_subjects
    }

    /// Column names for draw files and diagnostics, in packing order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        names.push("gamma1".into());
        names.push("gamma2".into());
        for j in 1..=self.n_covariates {
            names.push(format!("beta_{j}"));
        }
        for l in 1..=2 {
            for m in 1..=self.n_chemicals {
                names.push(format!("theta{l}_{m}"));
            }
        }
        names.push("phi1_sq".into());
        names.push("phi2_sq".into());
        for l in 1..=2 {
            for m in 1..=self.n_chemicals {
                names.push(format!("lambda{l}_{m}"));
            }
        }
        names.push("tau1".into());
        names.push("tau2".into());
        names.push("sigma_sq".into());
        names.push("d_11".into());
        names.push("d_21".into());
        names.push("d_22".into());
        for l in 1..=2 {
            for i in 1..=self.n_subjects {
                names.push(format!("h{l}_{i}"));
            }
        }
        for i in 1..=self.n_subjects {
            names.push(format!("b1_{i}"));
            names.push(format!("b2_{i}"));
        }
        debug_assert_eq!(names.len(), self.dim());
        names
    }
}

/// Prior on the mixture coefficients theta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ThetaPrior {
    /// Hierarchical shrinkage: theta_lm ~ N(0, lambda_lm^2 tau_l^c).
    Horseshoe,
    /// Flat alternative for ablation runs: theta_lm ~ N(0, variance). The
    /// local and global scales stay in the parameter vector but no longer
    /// influence theta.
    Fixed { variance: f64 },
}

/// All fixed prior constants. Defaults are weakly informative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Shape of the InvGamma prior on each phi_l^2.
    pub alpha0: f64,
    /// Rate of the InvGamma prior on each phi_l^2.
    pub gamma0: f64,
    /// Shape of the InvGamma prior on sigma^2.
    pub alpha: f64,
    /// Rate of the InvGamma prior on sigma^2.
    pub gamma: f64,
    /// Wishart degrees of freedom for D^{-1}; must be >= 2.
    pub nu0: f64,
    /// Wishart scale matrix C0 as (c11, c21, c22); must be SPD.
    pub c0: [f64; 3],
    /// Multiplier on phi_l^2 in the global-scale prior.
    pub a0: f64,
    /// Degrees of freedom of the local-scale half-t (1 = half-Cauchy).
    pub df_lambda: f64,
    /// Degrees of freedom of the global-scale half-t (1 = half-Cauchy).
    pub df_tau: f64,
    /// Exponent c in Var(theta_lm) = lambda_lm^2 tau_l^c; 2 or 1.
    pub tau_power: f64,
    pub theta_prior: ThetaPrior,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            alpha0: 1.0,
            gamma0: 1.0,
            alpha: 1.0,
            gamma: 1.0,
            nu0: 3.0,
            c0: [1.0, 0.0, 1.0],
            a0: 1.0,
            df_lambda: 1.0,
            df_tau: 1.0,
            tau_power: 2.0,
            theta_prior: ThetaPrior::Horseshoe,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("alpha0", self.alpha0),
            ("gamma0", self.gamma0),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("a0", self.a0),
            ("df_lambda", self.df_lambda),
            ("df_tau", self.df_tau),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.nu0 >= 2.0 && self.nu0.is_finite()) {
            return Err(Error::Config(format!("nu0 must be >= 2, got {}", self.nu0)));
        }
        let [c11, c21, c22] = self.c0;
        if !(c11 > 0.0 && c11 * c22 - c21 * c21 > 0.0) {
            return Err(Error::Config(format!("c0 must be positive definite, got {:?}", self.c0)));
        }
        if self.tau_power != 1.0 && self.tau_power != 2.0 {
            return Err(Error::Config(format!("tau_power must be 1 or 2, got {}", self.tau_power)));
        }
        if let ThetaPrior::Fixed { variance } = self.theta_prior {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(Error::Config(format!(
                    "fixed theta prior variance must be positive, got {variance}"
                )));
            }
        }
        Ok(())
    }

    /// Inverse of C0, used by the prior density on D.
    pub(crate) fn c0_inverse(&self) -> [f64; 3] {
        let [c11, c21, c22] = self.c0;
        let det = c11 * c22 - c21 * c21;
        [c22 / det, -c21 / det, c11 / det]
    }
}

/// Constrained parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    /// Global trend (gamma1, gamma2) followed by covariate effects.
    pub beta: Vec<f64>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub phi_sq: [f64; 2],
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub tau: [f64; 2],
    pub sigma_sq: f64,
    /// Random-effect covariance D as (d11, d21, d22).
    pub d: [f64; 3],
    /// Mixture effects: first n intercepts, then n slopes.
    pub h: Vec<f64>,
    /// Random effects interleaved per subject: (b1_1, b2_1, b1_2, ...).
    pub b: Vec<f64>,
}

impl ParameterState {
    pub fn dims_match(&self, dims: &ModelDims) -> bool {
        self.beta.len() == dims.k()
            && self.theta1.len() == dims.n_chemicals
            && self.theta2.len() == dims.n_chemicals
            && self.lambda1.len() == dims.n_chemicals
            && self.lambda2.len() == dims.n_chemicals
            && self.h.len() == 2 * dims.n_subjects
            && self.b.len() == 2 * dims.n_subjects
    }

    /// Maps to the unconstrained vector. Fails when a positive parameter is
    /// not strictly positive or D is not positive definite.
    pub fn unconstrain(&self, dims: &ModelDims) -> Result<Vec<f64>> {
        if !self.dims_match(dims) {
            return Err(Error::Config("parameter state does not match model dims".into()));
        }
        let mut v = vec![0.0; dims.dim()];
        v[dims.beta()].copy_from_slice(&self.beta);
        v[dims.theta1()].copy_from_slice(&self.theta1);
        v[dims.theta2()].copy_from_slice(&self.theta2);
        let phi = dims.phi().start;
        for (offset, &x) in self.phi_sq.iter().enumerate() {
            v[phi + offset] = log_positive(x, "phi_sq")?;
        }
        for (offset, &x) in self.lambda1.iter().enumerate() {
            v[dims.lambda1().start + offset] = log_positive(x, "lambda1")?;
        }
        for (offset, &x) in self.lambda2.iter().enumerate() {
            v[dims.lambda2().start + offset] = log_positive(x, "lambda2")?;
        }
        for (offset, &x) in self.tau.iter().enumerate() {
            v[dims.tau().start + offset] = log_positive(x, "tau")?;
        }
        v[dims.sigma()] = log_positive(self.sigma_sq, "sigma_sq")?;
        let [d11, d21, d22] = self.d;
        let d11_positive = d11 > 0.0; // false for NaN as well
        if !d11_positive {
            return Err(Error::Numerical(format!("d11 must be positive, got {d11}")));
        }
        let l11 = d11.sqrt();
        let l21 = d21 / l11;
        let rest = d22 - l21 * l21;
        let rest_positive = rest > 0.0; // false for NaN as well
        if !rest_positive {
            return Err(Error::Numerical(format!("D is not positive definite: {:?}", self.d)));
        }
        let l22 = rest.sqrt();
        let dr = dims.d().start;
        v[dr] = l11.ln();
        v[dr + 1] = l21;
        v[dr + 2] = l22.ln();
        v[dims.h()].copy_from_slice(&self.h);
        v[dims.b()].copy_from_slice(&self.b);
        Ok(v)
    }

    /// Maps an unconstrained vector back to a constrained state. Rejects
    /// non-finite input and values that overflow the transforms.
    pub fn constrain(v: &[f64], dims: &ModelDims) -> Result<ParameterState> {
        if v.len() != dims.dim() {
            return Err(Error::Config(format!(
                "unconstrained vector has length {}, model needs {}",
                v.len(),
                dims.dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite unconstrained coordinate".into()));
        }
        let exp_checked = |u: f64, what: &str| -> Result<f64> {
            let x = u.exp();
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::Numerical(format!("{what} = exp({u}) overflows")));
            }
            Ok(x)
        };
        let phi = dims.phi().start;
        let tau = dims.tau().start;
        let dr = dims.d().start;
        let l11 = exp_checked(v[dr], "L11")?;
        let l21 = v[dr + 1];
        let l22 = exp_checked(v[dr + 2], "L22")?;
        let d = [l11 * l11, l21 * l11, l21 * l21 + l22 * l22];
        if !d.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("D entries overflow".into()));
        }
        Ok(ParameterState {
            beta: v[dims.beta()].to_vec(),
            theta1: v[dims.theta1()].to_vec(),
            theta2: v[dims.theta2()].to_vec(),
            phi_sq: [exp_checked(v[phi], "phi1_sq")?, exp_checked(v[phi + 1], "phi2_sq")?],
            lambda1: v[dims.lambda1()].iter().map(|&u| exp_checked(u, "lambda1")).collect::<Result<_>>()?,
            lambda2: v[dims.lambda2()].iter().map(|&u| exp_checked(u, "lambda2")).collect::<Result<_>>()?,
            tau: [exp_checked(v[tau], "tau1")?, exp_checked(v[tau + 1], "tau2")?],
            sigma_sq: exp_checked(v[dims.sigma()], "sigma_sq")?,
            d,
            h: v[dims.h()].to_vec(),
            b: v[dims.b()].to_vec(),
        })
    }

    /// Flat constrained vector in packing order (positives in natural units,
    /// D as d11, d21, d22). This is the layout draw files use.
    pub fn to_constrained_vec(&self, dims: &ModelDims) -> Vec<f64> {
        let mut v = vec![0.0; dims.dim()];
        v[dims.beta()].copy_from_slice(&self.beta);
        v[dims.theta1()].copy_from_slice(&self.theta1);
        v[dims.theta2()].copy_from_slice(&self.theta2);
        let phi = dims.phi().start;
        v[phi] = self.phi_sq[0];
        v[phi + 1] = self.phi_sq[1];
        v[dims.lambda1()].copy_from_slice(&self.lambda1);
        v[dims.lambda2()].copy_from_slice(&self.lambda2);
        let tau = dims.tau().start;
        v[tau] = self.tau[0];
        v[tau + 1] = self.tau[1];
        v[dims.sigma()] = self.sigma_sq;
        v[dims.d()].copy_from_slice(&self.d);
        v[dims.h()].copy_from_slice(&self.h);
        v[dims.b()].copy_from_slice(&self.b);
        v
    }

    /// Inverse of [`Self::to_constrained_vec`].
    pub fn from_constrained_vec(v: &[f64], dims: &ModelDims) -> Result<ParameterState> {
        if v.len() != dims.dim() {
            return Err(Error::Config(format!(
                "constrained vector has length {}, model needs {}",
                v.len(),
                dims.dim()
            )));
        }
        let phi = dims.phi().start;
        let tau = dims.tau().start;
        let d = dims.d().start;
        Ok(ParameterState {
            beta: v[dims.beta()].to_vec(),
            theta1: v[dims.theta1()].to_vec(),
            theta2: v[dims.theta2()].to_vec(),
            phi_sq: [v[phi], v[phi + 1]],
            lambda1: v[dims.lambda1()].to_vec(),
            lambda2: v[dims.lambda2()].to_vec(),
            tau: [v[tau], v[tau + 1]],
            sigma_sq: v[dims.sigma()],
            d: [v[d], v[d + 1], v[d + 2]],
            h: v[dims.h()].to_vec(),
            b: v[dims.b()].to_vec(),
        })
    }

    /// A neutral interior state: zeros for location parameters, ones for
    /// scales, identity D.
    pub fn neutral(dims: &ModelDims) -> ParameterState {
        ParameterState {
            beta: vec![0.0; dims.k()],
            theta1: vec![0.0; dims.n_chemicals],
            theta2: vec![0.0; dims.n_chemicals],
            phi_sq: [1.0, 1.0],
            lambda1: vec![1.0; dims.n_chemicals],
            lambda2: vec![1.0; dims.n_chemicals],
            tau: [1.0, 1.0],
            sigma_sq: 1.0,
            d: [1.0, 0.0, 1.0],
            h: vec![0.0; 2 * dims.n_subjects],
            b: vec![0.0; 2 * dims.n_subjects],
        }
    }
}

fn log_positive(x: f64, what: &str) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Numerical(format!("{what} must be strictly positive, got {x}")));
    }
    Ok(x.ln())
}

/// Transforms a whole unconstrained vector to the constrained layout without
/// building a state. Coordinates with identity transforms copy through.
pub fn constrain_vector(v: &[f64], dims: &ModelDims) -> Result<Vec<f64>> {
    Ok(ParameterState::constrain(v, dims)?.to_constrained_vec(dims))
}
