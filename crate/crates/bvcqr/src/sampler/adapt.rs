//! Warmup adaptation: dual-averaging step-size control, diagonal mass
//! estimation over expanding variance windows, and the initial step-size
//! search.
//!
//! The window layout follows the common fast/slow/fast split: an initial
//! fast buffer (75), doubling slow windows (25, 50, 100, ...; the last one
//! absorbs the remainder), and a terminal fast buffer (50). Short warmups
//! rescale the buffers to 15%/10%; below 20 iterations only the step size
//! adapts.

use rand::Rng;

use super::nuts::{draw_momentum, hamiltonian, kinetic, leapfrog, ChainState, Phase};
use super::Target;

/// Nesterov dual averaging of log step size toward a target acceptance
/// statistic (gamma=0.05, t0=10, kappa=0.75).
pub(crate) struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(eps0: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: eps0.ln(),
            h_bar: 0.0,
            m: 1.0,
            target,
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - a);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.m += 1.0;
    }

    /// Step size for the next transition.
    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Iteration-averaged step size, used after warmup.
    pub fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Streaming mean/variance per coordinate.
pub(crate) struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((mi, vi), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = xi - *mi;
            *mi += delta / self.count;
            *vi += delta * (xi - *mi);
        }
    }

    /// Writes the regularized variance estimate into `inv_mass`; with fewer
    /// than two samples the previous estimate is kept.
    pub fn finalize_into(&self, inv_mass: &mut [f64]) {
        if self.count < 2.0 {
            return;
        }
        let n = self.count;
        let shrink = n / (n + 5.0);
        for (out, &m2) in inv_mass.iter_mut().zip(&self.m2) {
            let var = m2 / (n - 1.0);
            *out = shrink * var + 1e-3 * (5.0 / (n + 5.0));
        }
    }

    pub fn reset(&mut self) {
        self.count = 0.0;
        self.mean.iter_mut().for_each(|x| *x = 0.0);
        self.m2.iter_mut().for_each(|x| *x = 0.0);
    }

    #[cfg(test)]
    pub fn variance(&self, i: usize) -> f64 {
        self.m2[i] / (self.count - 1.0)
    }
}

/// Slow-window layout inside warmup.
pub(crate) struct WarmupSchedule {
    /// First slow iteration (end of the initial fast buffer).
    pub init: usize,
    /// First iteration of the terminal fast buffer.
    pub term_start: usize,
    /// Iteration counts (1-based) at which a slow window closes.
    pub window_ends: Vec<usize>,
    pub adapt_mass: bool,
}

impl WarmupSchedule {
    pub fn new(warmup: usize) -> Self {
        if warmup < 20 {
            return WarmupSchedule {
                init: 0,
                term_start: warmup,
                window_ends: Vec::new(),
                adapt_mass: false,
            };
        }
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.10 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let term_start = warmup - term;
        let mut window_ends = Vec::new();
        let mut pos = init;
        let mut width = base;
        loop {
            let end = pos + width;
            // The last window absorbs everything up to the terminal buffer.
            if end + 2 * width > term_start {
                window_ends.push(term_start);
                break;
            }
            window_ends.push(end);
            pos = end;
            width *= 2;
        }
        WarmupSchedule { init, term_start, window_ends, adapt_mass: true }
    }

    pub fn in_slow_window(&self, t: usize) -> bool {
        self.adapt_mass && t >= self.init && t < self.term_start
    }
}

/// Doubles or halves the step size until a single leapfrog step crosses 50%
/// acceptance, starting from eps = 1.
pub(crate) fn find_reasonable_epsilon<T: Target, R: Rng>(
    target: &T,
    state: &ChainState,
    inv_mass: &[f64],
    rng: &mut R,
) -> f64 {
    const LN_HALF: f64 = -std::f64::consts::LN_2;
    let p0 = draw_momentum(rng, inv_mass);
    let h0 = -state.logp + kinetic(&p0, inv_mass);
    let log_accept = |eps: f64| -> f64 {
        let mut phase = Phase {
            q: state.q.clone(),
            p: p0.clone(),
            grad: state.grad.clone(),
            logp: state.logp,
        };
        leapfrog(target, &mut phase, eps, inv_mass);
        let h1 = hamiltonian(&phase, inv_mass);
        if h1.is_finite() {
            h0 - h1
        } else {
            f64::NEG_INFINITY
        }
    };

    let mut eps = 1.0;
    let mut la = log_accept(eps);
    let doubling = la > LN_HALF;
    for _ in 0..100 {
        let keep_going = if doubling { la > LN_HALF } else { la < LN_HALF };
        if !keep_going {
            break;
        }
        eps *= if doubling { 2.0 } else { 0.5 };
        if !(1e-10..=1e8).contains(&eps) {
            break;
        }
        la = log_accept(eps);
    }
    eps
}

#[cfg(test)]
mod tests {
    use super::super::targets::DiagonalNormal;
    use super::super::Target;
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_matches_reference_layout_at_default_warmup() {
        let s = WarmupSchedule::new(1000);
        assert!(s.adapt_mass);
        assert_eq!(s.init, 75);
        assert_eq!(s.term_start, 950);
        assert_eq!(s.window_ends, vec![100, 150, 250, 450, 950]);
    }

    #[test]
    fn schedule_rescales_short_warmup() {
        // 140 < 75 + 50 + 25, so the buffers shrink to 15% / 10%.
        let s = WarmupSchedule::new(140);
        assert!(s.adapt_mass);
        assert_eq!(s.init, 21);
        assert_eq!(s.term_start, 126);
        assert_eq!(s.window_ends, vec![126]);
        // 150 fits the standard buffers exactly.
        let s = WarmupSchedule::new(150);
        assert_eq!(s.init, 75);
        assert_eq!(s.window_ends, vec![100]);
    }

    #[test]
    fn schedule_disables_mass_adaptation_below_twenty() {
        let s = WarmupSchedule::new(19);
        assert!(!s.adapt_mass);
        assert!(s.window_ends.is_empty());
    }

    #[test]
    fn windows_partition_the_slow_phase() {
        for warmup in [20, 75, 150, 300, 1000, 2500] {
            let s = WarmupSchedule::new(warmup);
            assert!(s.init <= s.term_start);
            assert_eq!(*s.window_ends.last().unwrap(), s.term_start);
            let mut prev = s.init;
            for &e in &s.window_ends {
                assert!(e > prev, "warmup {warmup}: window end {e} after {prev}");
                prev = e;
            }
        }
    }

    #[test]
    fn welford_matches_two_pass_variance() {
        let data = [0.5, 1.5, -2.0, 0.25, 3.0, -1.0];
        let mut w = Welford::new(1);
        for &x in &data {
            w.push(&[x]);
        }
        assert_abs_diff_eq!(
            w.variance(0),
            crate::math::variance(&data),
            epsilon = 1e-12
        );
        let mut inv_mass = vec![1.0];
        w.finalize_into(&mut inv_mass);
        let n = data.len() as f64;
        let expect = n / (n + 5.0) * crate::math::variance(&data) + 1e-3 * 5.0 / (n + 5.0);
        assert_abs_diff_eq!(inv_mass[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn dual_averaging_responds_to_acceptance() {
        // Persistently high acceptance must grow the step size, low must
        // shrink it.
        let mut grow = DualAveraging::new(0.5, 0.8);
        let mut shrink = DualAveraging::new(0.5, 0.8);
        for _ in 0..50 {
            grow.update(0.99);
            shrink.update(0.1);
        }
        assert!(grow.averaged() > 0.5);
        assert!(shrink.averaged() < 0.5);
    }

    #[test]
    fn reasonable_epsilon_lands_in_a_sane_band() {
        let target = DiagonalNormal::standard(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = vec![0.1, -0.3];
        let mut grad = vec![0.0; 2];
        let logp = target.log_density_grad(&q, &mut grad);
        let state = ChainState { q, grad, logp };
        let eps = find_reasonable_epsilon(&target, &state, &[1.0, 1.0], &mut rng);
        assert!(eps > 1e-3 && eps < 1e3, "eps = {eps}");
    }
}
