//! Hamiltonian Monte Carlo with no-U-turn trajectory termination.
//!
//! The engine samples any [`Target`]; the model entry point is [`sample`].
//! Warmup adapts a diagonal mass matrix (variance windows) and the step size
//! (dual averaging toward `target_accept`). Chains are independent given
//! (seed, chain index), so parallel and sequential execution produce
//! bit-identical output merged by chain index.

mod adapt;
pub mod diagnostics;
mod nuts;
pub mod targets;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::QuantizedDesign;
use crate::error::{Error, Result};
use crate::model::{constrain_vector, Hyperparameters, MixtureTarget, ModelDims};

pub use diagnostics::{diagnostics, DiagnosticsReport, ParamDiagnostics};
pub use nuts::DIVERGENCE_THRESHOLD;

/// Log-density target over an unconstrained position vector.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient and returns the log density. `NEG_INFINITY`
    /// marks an invalid state; the gradient contents are then ignored.
    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, position: &[f64]) -> f64 {
        let mut grad = vec![0.0; self.dim()];
        self.log_density_grad(position, &mut grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Total iterations per chain, warmup included.
    pub iterations: usize,
    /// Adaptation iterations discarded from the front of each chain.
    pub warmup: usize,
    pub chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// Width of the uniform initialization box in unconstrained space.
    pub init_radius: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 2000,
            warmup: 1000,
            chains: 4,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_radius: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must be in (0,1), got {}",
                self.target_accept
            )));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 20 {
            return Err(Error::Config(format!(
                "max_tree_depth must be in 1..=20, got {}",
                self.max_tree_depth
            )));
        }
        if !(self.init_radius > 0.0 && self.init_radius.is_finite()) {
            return Err(Error::Config(format!(
                "init_radius must be positive, got {}",
                self.init_radius
            )));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn kept(&self) -> usize {
        self.iterations - self.warmup
    }
}

/// Raw engine output: unconstrained draws plus per-draw statistics.
#[derive(Debug, Clone)]
pub struct RawChains {
    pub dim: usize,
    /// `[chains, kept, dim]`, unconstrained coordinates.
    pub draws: Array3<f64>,
    /// Hamiltonian of the selected phase point, per draw.
    pub energy: Array2<f64>,
    pub accept_prob: Array2<f64>,
    pub tree_depth: Array2<u32>,
    pub divergent: Array2<bool>,
    /// Post-adaptation step size per chain.
    pub step_size: Vec<f64>,
    pub warmup_divergences: Vec<usize>,
}

struct ChainRun {
    draws: Array2<f64>,
    energy: Vec<f64>,
    accept_prob: Vec<f64>,
    tree_depth: Vec<u32>,
    divergent: Vec<bool>,
    step_size: f64,
    warmup_divergences: usize,
}

/// Runs `config.chains` independent chains on `target`. Uses the rayon
/// thread pool when the `parallel` feature is enabled.
pub fn run_nuts<T: Target>(target: &T, config: &SamplerConfig) -> Result<RawChains> {
    run_nuts_with_mode(target, config, cfg!(feature = "parallel"))
}

/// Like [`run_nuts`] with explicit execution mode; both modes produce
/// identical output. `parallel = true` requires the `parallel` feature.
pub fn run_nuts_with_mode<T: Target>(
    target: &T,
    config: &SamplerConfig,
    parallel: bool,
) -> Result<RawChains> {
    config.validate()?;
    let runs: Vec<Result<ChainRun>> = if parallel {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..config.chains)
                .into_par_iter()
                .map(|c| run_chain(target, config, c))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            return Err(Error::Config(
                "parallel execution requires the `parallel` feature".into(),
            ));
        }
    } else {
        (0..config.chains).map(|c| run_chain(target, config, c)).collect()
    };

    let kept = config.kept();
    let dim = target.dim();
    let mut out = RawChains {
        dim,
        draws: Array3::zeros((config.chains, kept, dim)),
        energy: Array2::zeros((config.chains, kept)),
        accept_prob: Array2::zeros((config.chains, kept)),
        tree_depth: Array2::zeros((config.chains, kept)),
        divergent: Array2::from_elem((config.chains, kept), false),
        step_size: Vec::with_capacity(config.chains),
        warmup_divergences: Vec::with_capacity(config.chains),
    };
    for (c, run) in runs.into_iter().enumerate() {
        let run = run?;
        out.draws.slice_mut(s![c, .., ..]).assign(&run.draws);
        out.energy.row_mut(c).assign(&Array1::from(run.energy));
        out.accept_prob.row_mut(c).assign(&Array1::from(run.accept_prob));
        out.tree_depth.row_mut(c).assign(&Array1::from(run.tree_depth));
        out.divergent.row_mut(c).assign(&Array1::from(run.divergent));
        out.step_size.push(run.step_size);
        out.warmup_divergences.push(run.warmup_divergences);
    }
    Ok(out)
}

fn run_chain<T: Target>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainRun> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);

    // Initialization: redraw until the density is finite.
    let mut state = nuts::ChainState {
        q: vec![0.0; dim],
        grad: vec![0.0; dim],
        logp: f64::NEG_INFINITY,
    };
    let mut initialized = false;
    for _ in 0..100 {
        for qi in state.q.iter_mut() {
            *qi = rng.random_range(-config.init_radius..config.init_radius);
        }
        state.logp = target.log_density_grad(&state.q, &mut state.grad);
        if state.logp.is_finite() {
            initialized = true;
            break;
        }
    }
    if !initialized {
        return Err(Error::Numerical(format!(
            "chain {chain}: no finite initial density after 100 draws; widen or shrink init_radius"
        )));
    }

    let mut inv_mass = vec![1.0; dim];
    let eps0 = adapt::find_reasonable_epsilon(target, &state, &inv_mass, &mut rng);
    let schedule = adapt::WarmupSchedule::new(config.warmup);
    let mut da = adapt::DualAveraging::new(eps0, config.target_accept);
    let mut welford = adapt::Welford::new(dim);
    let mut window_idx = 0;
    let mut warmup_divergences = 0;

    for t in 0..config.warmup {
        let info =
            nuts::transition(target, &mut state, da.current(), &inv_mass, config.max_tree_depth, &mut rng);
        da.update(info.accept_stat);
        if info.divergent {
            warmup_divergences += 1;
        }
        if schedule.in_slow_window(t) {
            welford.push(&state.q);
            if schedule.window_ends.get(window_idx) == Some(&(t + 1)) {
                window_idx += 1;
                welford.finalize_into(&mut inv_mass);
                welford.reset();
                let eps = adapt::find_reasonable_epsilon(target, &state, &inv_mass, &mut rng);
                da = adapt::DualAveraging::new(eps, config.target_accept);
            }
        }
    }
    let step_size = if config.warmup == 0 { eps0 } else { da.averaged() };

    let kept = config.kept();
    let mut run = ChainRun {
        draws: Array2::zeros((kept, dim)),
        energy: Vec::with_capacity(kept),
        accept_prob: Vec::with_capacity(kept),
        tree_depth: Vec::with_capacity(kept),
        divergent: Vec::with_capacity(kept),
        step_size,
        warmup_divergences,
    };
    for i in 0..kept {
        let info =
            nuts::transition(target, &mut state, step_size, &inv_mass, config.max_tree_depth, &mut rng);
        run.draws.row_mut(i).assign(&ndarray::ArrayView1::from(&state.q[..]));
        run.energy.push(info.energy);
        run.accept_prob.push(info.accept_stat);
        run.tree_depth.push(info.depth);
        run.divergent.push(info.divergent);
    }
    Ok(run)
}

/// Posterior draws of the mixture model in the constrained view.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub dims: ModelDims,
    /// Packing-order manifest for the draw columns.
    pub param_names: Vec<String>,
    pub chemical_names: Vec<String>,
    /// `[chains, kept, dim]`, constrained coordinates.
    pub draws: Array3<f64>,
    pub energy: Array2<f64>,
    pub accept_prob: Array2<f64>,
    pub tree_depth: Array2<u32>,
    pub divergent: Array2<bool>,
    /// Post-adaptation step size, repeated per draw.
    pub step_size: Array2<f64>,
    pub warmup_divergences: Vec<usize>,
    pub config: SamplerConfig,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.draws.shape()[0]
    }

    pub fn n_kept(&self) -> usize {
        self.draws.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.draws.shape()[2]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// Draws of one coordinate as a `[chains, kept]` matrix.
    pub fn coordinate(&self, index: usize) -> Array2<f64> {
        self.draws.slice(s![.., .., index]).to_owned()
    }

    /// Pooled draws of one coordinate across chains.
    pub fn pooled(&self, index: usize) -> Vec<f64> {
        self.draws.slice(s![.., .., index]).iter().copied().collect()
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains() * self.n_kept()
    }

    pub fn divergent_count(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    pub fn divergence_fraction(&self) -> f64 {
        self.divergent_count() as f64 / self.total_draws() as f64
    }
}

/// Fits the mixture model: runs NUTS on the joint posterior and returns
/// constrained draws with their packing manifest.
pub fn sample(
    design: &QuantizedDesign,
    hyper: &Hyperparameters,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let target = MixtureTarget::new(design, *hyper)?;
    let raw = run_nuts(&target, config)?;
    raw_to_posterior(design, &target.dims(), raw, config)
}

/// Sequential-only variant of [`sample`]; output is identical.
pub fn sample_sequential(
    design: &QuantizedDesign,
    hyper: &Hyperparameters,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let target = MixtureTarget::new(design, *hyper)?;
    let raw = run_nuts_with_mode(&target, config, false)?;
    raw_to_posterior(design, &target.dims(), raw, config)
}

fn raw_to_posterior(
    design: &QuantizedDesign,
    dims: &ModelDims,
    raw: RawChains,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let kept = config.kept();
    let mut draws = Array3::zeros((config.chains, kept, dims.dim()));
    for c in 0..config.chains {
        for i in 0..kept {
            let row = raw.draws.slice(s![c, i, ..]);
            let constrained = constrain_vector(row.as_slice().expect("contiguous draw"), dims)?;
            draws
                .slice_mut(s![c, i, ..])
                .assign(&ndarray::ArrayView1::from(&constrained[..]));
        }
    }
    let mut step_size = Array2::zeros((config.chains, kept));
    for c in 0..config.chains {
        step_size.row_mut(c).fill(raw.step_size[c]);
    }
    Ok(PosteriorDraws {
        dims: *dims,
        param_names: dims.param_names(),
        chemical_names: design.chemical_names.clone(),
        draws,
        energy: raw.energy,
        accept_prob: raw.accept_prob,
        tree_depth: raw.tree_depth,
        divergent: raw.divergent,
        step_size,
        warmup_divergences: raw.warmup_divergences,
        config: *config,
    })
}

/// One leapfrog state of [`leapfrog_trajectory`].
#[derive(Debug, Clone)]
pub struct LeapfrogStep {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub hamiltonian: f64,
}

/// Integrates `steps` leapfrog steps at fixed step size, returning every
/// state including the start. Diagnostic harness for reversibility and
/// energy-conservation checks; not used by the sampler loop.
pub fn leapfrog_trajectory<T: Target>(
    target: &T,
    q0: &[f64],
    p0: &[f64],
    inv_mass: &[f64],
    eps: f64,
    steps: usize,
) -> Result<Vec<LeapfrogStep>> {
    if q0.len() != target.dim() || p0.len() != target.dim() || inv_mass.len() != target.dim() {
        return Err(Error::Config("leapfrog inputs must match target dim".into()));
    }
    let mut grad = vec![0.0; target.dim()];
    let logp = target.log_density_grad(q0, &mut grad);
    if !logp.is_finite() {
        return Err(Error::Numerical("non-finite density at trajectory start".into()));
    }
    let mut phase = nuts::Phase { q: q0.to_vec(), p: p0.to_vec(), grad, logp };
    let mut out = Vec::with_capacity(steps + 1);
    out.push(LeapfrogStep {
        q: phase.q.clone(),
        p: phase.p.clone(),
        hamiltonian: nuts::hamiltonian(&phase, inv_mass),
    });
    for _ in 0..steps {
        nuts::leapfrog(target, &mut phase, eps, inv_mass);
        out.push(LeapfrogStep {
            q: phase.q.clone(),
            p: phase.p.clone(),
            hamiltonian: nuts::hamiltonian(&phase, inv_mass),
        });
    }
    Ok(out)
}
