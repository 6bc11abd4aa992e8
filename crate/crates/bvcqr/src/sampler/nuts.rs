//! Trajectory construction: leapfrog integration, multinomial state
//! selection over doubling trees, and the generalized U-turn criterion.
//!
//! Momenta are drawn from N(0, M) with M the diagonal mass matrix;
//! `inv_mass` stores M^{-1} (the position-variance estimate), so kinetic
//! energy is 0.5 * sum(inv_mass * p^2). Trees are built with the three-part
//! U-turn check (full span plus both subtree boundaries), and a transition
//! is divergent when a leaf's energy error exceeds [`DIVERGENCE_THRESHOLD`].

use rand::Rng;
use rand_distr::StandardNormal;

use super::Target;
use crate::math::log_sum_exp;

/// Energy-error cutoff marking a divergent leaf.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Current chain position with cached density and gradient.
pub(crate) struct ChainState {
    pub q: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

/// A phase-space point on the trajectory.
#[derive(Clone)]
pub(crate) struct Phase {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

pub(crate) fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pi, mi)| mi * pi * pi).sum::<f64>()
}

pub(crate) fn hamiltonian(phase: &Phase, inv_mass: &[f64]) -> f64 {
    -phase.logp + kinetic(&phase.p, inv_mass)
}

pub(crate) fn draw_momentum<R: Rng>(rng: &mut R, inv_mass: &[f64]) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|&mi| {
            let z: f64 = rng.sample(StandardNormal);
            z / mi.sqrt()
        })
        .collect()
}

/// One leapfrog step; `eps` carries the direction sign.
pub(crate) fn leapfrog<T: Target>(target: &T, phase: &mut Phase, eps: f64, inv_mass: &[f64]) {
    for (pi, gi) in phase.p.iter_mut().zip(&phase.grad) {
        *pi += 0.5 * eps * gi;
    }
    for ((qi, pi), mi) in phase.q.iter_mut().zip(&phase.p).zip(inv_mass) {
        *qi += eps * mi * pi;
    }
    phase.logp = target.log_density_grad(&phase.q, &mut phase.grad);
    for (pi, gi) in phase.p.iter_mut().zip(&phase.grad) {
        *pi += 0.5 * eps * gi;
    }
}

fn p_sharp(p: &[f64], inv_mass: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_mass).map(|(pi, mi)| mi * pi).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Turning when the span momentum `rho` points away from either boundary.
fn is_turning(sharp_beg: &[f64], sharp_end: &[f64], rho: &[f64]) -> bool {
    dot(sharp_beg, rho) <= 0.0 || dot(sharp_end, rho) <= 0.0
}

struct Subtree {
    candidate_q: Vec<f64>,
    candidate_grad: Vec<f64>,
    candidate_logp: f64,
    candidate_h: f64,
    log_sum_weight: f64,
    rho: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    sharp_beg: Vec<f64>,
    sharp_end: Vec<f64>,
    sum_accept: f64,
    n_leaf: f64,
    divergent: bool,
    valid: bool,
}

/// Extends `edge` by 2^depth leapfrog steps in the direction of `eps`,
/// in build order. Returns the multinomial candidate and span summaries.
#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target, R: Rng>(
    target: &T,
    depth: usize,
    edge: &mut Phase,
    eps: f64,
    h0: f64,
    inv_mass: &[f64],
    rng: &mut R,
) -> Subtree {
    if depth == 0 {
        leapfrog(target, edge, eps, inv_mass);
        let h = hamiltonian(edge, inv_mass);
        // NaN-safe: any non-comparable energy error counts as divergent.
        let within_threshold = (h - h0) <= DIVERGENCE_THRESHOLD;
        let divergent = !within_threshold;
        let log_weight = if divergent { f64::NEG_INFINITY } else { h0 - h };
        let accept = if h.is_finite() { (h0 - h).exp().min(1.0) } else { 0.0 };
        let sharp = p_sharp(&edge.p, inv_mass);
        return Subtree {
            candidate_q: edge.q.clone(),
            candidate_grad: edge.grad.clone(),
            candidate_logp: edge.logp,
            candidate_h: h,
            log_sum_weight: log_weight,
            rho: edge.p.clone(),
            p_beg: edge.p.clone(),
            p_end: edge.p.clone(),
            sharp_beg: sharp.clone(),
            sharp_end: sharp,
            sum_accept: accept,
            n_leaf: 1.0,
            divergent,
            valid: !divergent,
        };
    }

    let mut left = build_tree(target, depth - 1, edge, eps, h0, inv_mass, rng);
    if !left.valid {
        return left;
    }
    let right = build_tree(target, depth - 1, edge, eps, h0, inv_mass, rng);
    left.sum_accept += right.sum_accept;
    left.n_leaf += right.n_leaf;
    left.divergent |= right.divergent;
    if !right.valid {
        left.valid = false;
        return left;
    }

    // Uniform multinomial choice between the two halves.
    let merged_weight = log_sum_exp(left.log_sum_weight, right.log_sum_weight);
    if rng.random::<f64>().ln() < right.log_sum_weight - merged_weight {
        left.candidate_q = right.candidate_q;
        left.candidate_grad = right.candidate_grad;
        left.candidate_logp = right.candidate_logp;
        left.candidate_h = right.candidate_h;
    }
    left.log_sum_weight = merged_weight;

    // Three-part U-turn check: whole span and both boundary extensions.
    let rho_total = add(&left.rho, &right.rho);
    let mut ok = !is_turning(&left.sharp_beg, &right.sharp_end, &rho_total);
    let rho_left_ext = add(&left.rho, &right.p_beg);
    ok &= !is_turning(&left.sharp_beg, &right.sharp_beg, &rho_left_ext);
    let rho_right_ext = add(&right.rho, &left.p_end);
    ok &= !is_turning(&left.sharp_end, &right.sharp_end, &rho_right_ext);

    left.rho = rho_total;
    left.p_end = right.p_end;
    left.sharp_end = right.sharp_end;
    left.valid = ok;
    left
}

pub(crate) struct TransitionInfo {
    /// Hamiltonian of the selected phase point.
    pub energy: f64,
    /// Completed doublings.
    pub depth: u32,
    pub divergent: bool,
    /// Mean leaf acceptance statistic, divergent leaves included.
    pub accept_stat: f64,
}

/// One NUTS transition; `state` is advanced to the selected draw.
pub(crate) fn transition<T: Target, R: Rng>(
    target: &T,
    state: &mut ChainState,
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut R,
) -> TransitionInfo {
    let p0 = draw_momentum(rng, inv_mass);
    let h0 = -state.logp + kinetic(&p0, inv_mass);

    let init = Phase {
        q: state.q.clone(),
        p: p0.clone(),
        grad: state.grad.clone(),
        logp: state.logp,
    };
    let mut fwd = init.clone();
    let mut bck = init;

    let sharp0 = p_sharp(&p0, inv_mass);
    let mut rho = p0.clone();
    let mut p_fwd = p0.clone();
    let mut p_bck = p0;
    let mut sharp_fwd = sharp0.clone();
    let mut sharp_bck = sharp0;

    // The initial point enters the multinomial pool with weight one.
    let mut cand_q = state.q.clone();
    let mut cand_grad = state.grad.clone();
    let mut cand_logp = state.logp;
    let mut cand_h = h0;
    let mut log_sum_weight = 0.0;

    let mut sum_accept = 0.0;
    let mut n_leaf = 0.0;
    let mut divergent = false;
    let mut depth = 0u32;

    for level in 0..max_depth {
        let forward: bool = rng.random();
        let sub = if forward {
            build_tree(target, level, &mut fwd, eps, h0, inv_mass, rng)
        } else {
            build_tree(target, level, &mut bck, -eps, h0, inv_mass, rng)
        };
        sum_accept += sub.sum_accept;
        n_leaf += sub.n_leaf;
        divergent |= sub.divergent;
        if !sub.valid {
            break;
        }
        depth += 1;

        // Biased progressive selection toward the fresh subtree.
        if rng.random::<f64>().ln() < sub.log_sum_weight - log_sum_weight {
            cand_q = sub.candidate_q;
            cand_grad = sub.candidate_grad;
            cand_logp = sub.candidate_logp;
            cand_h = sub.candidate_h;
        }
        log_sum_weight = log_sum_exp(log_sum_weight, sub.log_sum_weight);

        // U-turn checks across the merged trajectory, in time order.
        let turning = if forward {
            let c1 = is_turning(&sharp_bck, &sub.sharp_end, &add(&rho, &sub.rho));
            let c2 = is_turning(&sharp_bck, &sub.sharp_beg, &add(&rho, &sub.p_beg));
            let c3 = is_turning(&sharp_fwd, &sub.sharp_end, &add(&p_fwd, &sub.rho));
            p_fwd = sub.p_end;
            sharp_fwd = sub.sharp_end;
            c1 || c2 || c3
        } else {
            let c1 = is_turning(&sub.sharp_end, &sharp_fwd, &add(&sub.rho, &rho));
            let c2 = is_turning(&sub.sharp_end, &sharp_bck, &add(&sub.rho, &p_bck));
            let c3 = is_turning(&sub.sharp_beg, &sharp_fwd, &add(&sub.p_beg, &rho));
            p_bck = sub.p_end;
            sharp_bck = sub.sharp_end;
            c1 || c2 || c3
        };
        rho = add(&rho, &sub.rho);
        if turning {
            break;
        }
    }

    state.q = cand_q;
    state.grad = cand_grad;
    state.logp = cand_logp;
    TransitionInfo {
        energy: cand_h,
        depth,
        divergent,
        accept_stat: if n_leaf > 0.0 { sum_accept / n_leaf } else { 0.0 },
    }
}
