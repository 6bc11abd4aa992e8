//! Simple targets for sampler validation and conditional (restricted)
//! sampling of a larger target.

use super::Target;
use crate::error::{Error, Result};

/// Independent zero-mean Gaussians with fixed variances, normalizing
/// constant included so Hamiltonians are physically meaningful.
pub struct DiagonalNormal {
    variances: Vec<f64>,
}

impl DiagonalNormal {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() || variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("variances must be positive and finite".into()));
        }
        Ok(DiagonalNormal { variances })
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalNormal { variances: vec![1.0; dim] }
    }
}

impl Target for DiagonalNormal {
    fn dim(&self) -> usize {
        self.variances.len()
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for ((&x, &v), g) in position.iter().zip(&self.variances).zip(grad.iter_mut()) {
            lp += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + x * x / v);
            *g = -x / v;
        }
        lp
    }
}

/// A target restricted to a subset of coordinates of an inner target; the
/// remaining coordinates stay frozen at `base`. Samples the inner target's
/// conditional distribution given the frozen block.
pub struct FrozenTarget<'a, T: Target> {
    inner: &'a T,
    base: Vec<f64>,
    free: Vec<usize>,
}

impl<'a, T: Target> FrozenTarget<'a, T> {
    pub fn new(inner: &'a T, base: Vec<f64>, free: Vec<usize>) -> Result<Self> {
        if base.len() != inner.dim() {
            return Err(Error::Config(format!(
                "base has length {}, inner target needs {}",
                base.len(),
                inner.dim()
            )));
        }
        if free.is_empty() {
            return Err(Error::Config("free coordinate set is empty".into()));
        }
        let mut seen = vec![false; inner.dim()];
        for &f in &free {
            if f >= inner.dim() {
                return Err(Error::Config(format!("free coordinate {f} out of range")));
            }
            if seen[f] {
                return Err(Error::Config(format!("free coordinate {f} repeated")));
            }
            seen[f] = true;
        }
        Ok(FrozenTarget { inner, base, free })
    }

    /// Embeds a restricted position into the full coordinate space.
    pub fn embed(&self, position: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (&f, &x) in self.free.iter().zip(position) {
            full[f] = x;
        }
        full
    }
}

impl<T: Target> Target for FrozenTarget<'_, T> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let full = self.embed(position);
        let mut full_grad = vec![0.0; self.inner.dim()];
        let lp = self.inner.log_density_grad(&full, &mut full_grad);
        for (g, &f) in grad.iter_mut().zip(&self.free) {
            *g = full_grad[f];
        }
        lp
    }
}
