//! Worst-case expectation over a KL ball, evaluated through its
//! one-dimensional dual
//!
//! ```text
//! sup_{alpha >= 0}  -alpha * log E_mu[exp(-u / alpha)] - alpha * delta
//! ```
//!
//! The objective is concave in `alpha`, so a golden-section search over a
//! bracket that provably contains the maximizer is globally correct. The
//! corner `alpha = 0` (value `essinf u`) is detected analytically: it is the
//! maximizer exactly when the mass sitting on the minimum payoff is at least
//! `exp(-delta)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::Categorical;

const GOLDEN_TOL: f64 = 1e-10;
const GOLDEN_MAX_ITER: usize = 200;

/// Largest support accepted by [`primal_oracle`].
pub const PRIMAL_MAX_SUPPORT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    pub mu: Categorical,
    pub u: Vec<f64>,
    pub delta: f64,
}

impl DualProblem {
    pub fn new(mu: Categorical, u: Vec<f64>, delta: f64) -> Result<Self> {
        if u.len() != mu.len() {
            return Err(Error::InvalidArgument(format!(
                "{} payoffs for {} outcomes",
                u.len(),
                mu.len()
            )));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArgument(format!("radius {delta} must be finite and >= 0")));
        }
        if mu.probs().iter().zip(&u).any(|(p, x)| *p > 0.0 && !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite payoff on the support".into()));
        }
        Ok(Self { mu, u, delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualSolution {
    pub value: f64,
    /// Maximizing dual variable. `0` at the essinf corner, `+inf` when
    /// `delta = 0` (the supremum is approached as `alpha -> inf`).
    pub alpha_star: f64,
    pub at_boundary: bool,
}

/// Summary of a weighted payoff vector restricted to positive weights.
#[derive(Debug, Clone, Copy)]
struct Support {
    total: f64,
    u_min: f64,
    u_max: f64,
    mean: f64,
    kappa: f64,
}

fn support(weights: &[f64], u: &[f64]) -> Result<Support> {
    let mut total = 0.0;
    let mut u_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut weighted = 0.0;
    for (&w, &x) in weights.iter().zip(u) {
        if w > 0.0 {
            if !x.is_finite() {
                return Err(Error::InvalidArgument("non-finite payoff on the support".into()));
            }
            total += w;
            u_min = u_min.min(x);
            u_max = u_max.max(x);
            weighted += w * x;
        }
    }
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    let at_min: f64 = weights
        .iter()
        .zip(u)
        .filter(|(w, x)| **w > 0.0 && **x == u_min)
        .map(|(w, _)| *w)
        .sum();
    let mean = (weighted / total).clamp(u_min, u_max);
    Ok(Support { total, u_min, u_max, mean, kappa: at_min / total })
}

fn objective(weights: &[f64], u: &[f64], sup: &Support, delta: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return sup.u_min;
    }
    let inv = 1.0 / alpha;
    let mgf: f64 = weights
        .iter()
        .zip(u)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, x)| w * (-(x - sup.u_min) * inv).exp())
        .sum::<f64>()
        / sup.total;
    sup.u_min - alpha * mgf.ln() - alpha * delta
}

/// Dual objective `f(mu, u, alpha)` for an unnormalized weight vector.
pub fn dual_objective_weighted(weights: &[f64], u: &[f64], delta: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be finite and >= 0")));
    }
    let sup = support(weights, u)?;
    Ok(objective(weights, u, &sup, delta, alpha))
}

pub fn dual_objective(prob: &DualProblem, alpha: f64) -> Result<f64> {
    dual_objective_weighted(prob.mu.probs(), &prob.u, prob.delta, alpha)
}

/// Maximizes a unimodal function on `[lo, hi]`.
fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_MAX_ITER {
        if hi - lo <= GOLDEN_TOL {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Solves the dual for a nonnegative weight vector (weights need not be
/// normalized; zero weights are off the support). This is the allocation-free
/// entry point used on empirical count vectors.
pub fn solve_dual_weighted(weights: &[f64], u: &[f64], delta: f64) -> Result<DualSolution> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("radius {delta} must be finite and >= 0")));
    }
    if weights.len() != u.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} payoffs",
            weights.len(),
            u.len()
        )));
    }
    let sup = support(weights, u)?;
    let range = sup.u_max - sup.u_min;
    if range == 0.0 {
        return Ok(DualSolution { value: sup.u_min, alpha_star: 0.0, at_boundary: true });
    }
    if delta == 0.0 {
        return Ok(DualSolution { value: sup.mean, alpha_star: f64::INFINITY, at_boundary: false });
    }
    if sup.kappa >= (-delta).exp() {
        return Ok(DualSolution { value: sup.u_min, alpha_star: 0.0, at_boundary: true });
    }
    // For alpha > range / delta the derivative is negative, so the maximizer
    // lies in [0, range / delta].
    let hi = range / delta;
    let (alpha_star, value) =
        golden_section_max(|alpha| objective(weights, u, &sup, delta, alpha), 0.0, hi);
    Ok(DualSolution { value: value.clamp(sup.u_min, sup.mean), alpha_star, at_boundary: false })
}

pub fn solve_dual(prob: &DualProblem) -> Result<DualSolution> {
    solve_dual_weighted(prob.mu.probs(), &prob.u, prob.delta)
}

/// Brute-force primal evaluation of `inf { E_q[u] : KL(q || mu) <= delta }`.
///
/// The minimizer lies in the relative interior of some face of the simplex,
/// so every face `S` of the support with `-ln mu(S) <= delta` is searched
/// separately. Within a face, every feasible `q` lies on a ray `c + t d` from
/// the renormalized restriction `c` of `mu`, with `sum(d) = 0`, and the
/// optimum sits at the far end of some ray. The search runs over ray
/// directions (hyperspherical angles in the zero-sum subspace): a dense grid
/// first, then a shrinking full-stencil pattern refinement around the best
/// grid points. For each direction the ray end is found by bisection on the
/// KL divergence. Meant for validation on small supports only.
pub fn primal_oracle(prob: &DualProblem) -> Result<f64> {
    let support: Vec<(f64, f64)> = prob
        .mu
        .probs()
        .iter()
        .zip(&prob.u)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, u)| (*p, *u))
        .collect();
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    if support.len() > PRIMAL_MAX_SUPPORT {
        return Err(Error::InvalidArgument(format!(
            "primal oracle supports at most {PRIMAL_MAX_SUPPORT} outcomes, got {}",
            support.len()
        )));
    }
    let total: f64 = support.iter().map(|(p, _)| p).sum();
    let mu: Vec<f64> = support.iter().map(|(p, _)| p / total).collect();
    let u: Vec<f64> = support.iter().map(|(_, u)| *u).collect();
    let mean: f64 = mu.iter().zip(&u).map(|(p, x)| p * x).sum();
    let m = mu.len();
    if prob.delta == 0.0 || m == 1 || u.iter().all(|x| *x == u[0]) {
        return Ok(mean);
    }
    let mut best = mean;
    for mask in 1u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let mass: f64 = idx.iter().map(|&i| mu[i]).sum();
        if -mass.ln() > prob.delta {
            continue;
        }
        let mu_s: Vec<f64> = idx.iter().map(|&i| mu[i]).collect();
        let u_s: Vec<f64> = idx.iter().map(|&i| u[i]).collect();
        best = best.min(face_minimum(&mu_s, &u_s, prob.delta));
    }
    Ok(best)
}

/// Minimum of `E_q[u]` over `q` supported on the given face with
/// `KL(q || mu) <= delta`, where `mu` is the unnormalized restriction of the
/// nominal law.
fn face_minimum(mu: &[f64], u: &[f64], delta: f64) -> f64 {
    let mass: f64 = mu.iter().sum();
    let center: Vec<f64> = mu.iter().map(|p| p / mass).collect();
    let m = mu.len();
    let center_value: f64 = center.iter().zip(u).map(|(c, x)| c * x).sum();
    if m == 1 {
        return u[0];
    }
    let basis = zero_sum_basis(m);
    let ray_value = |w: &[f64]| -> f64 {
        let d: Vec<f64> = (0..m)
            .map(|i| basis.iter().zip(w).map(|(e, wk)| e[i] * wk).sum())
            .collect();
        ray_end_value(&center, mu, u, &d, delta)
    };
    if m == 2 {
        return ray_value(&[1.0]).min(ray_value(&[-1.0])).min(center_value);
    }

    let k = m - 2;
    let per_angle = (1000f64.powf(1.0 / k as f64).ceil() as usize).max(4);
    let spacing: Vec<f64> = (0..k)
        .map(|j| {
            let span = if j + 1 == k { 2.0 * std::f64::consts::PI } else { std::f64::consts::PI };
            let n = if j + 1 == k { 2 * per_angle } else { per_angle };
            span / n as f64
        })
        .collect();
    let eval = |angles: &[f64]| ray_value(&spherical(angles));

    // Coarse grid.
    let mut grid: Vec<(f64, Vec<f64>)> = Vec::new();
    let counts: Vec<usize> = (0..k)
        .map(|j| if j + 1 == k { 2 * per_angle } else { per_angle + 1 })
        .collect();
    let mut idx = vec![0usize; k];
    loop {
        let angles: Vec<f64> = idx.iter().zip(&spacing).map(|(i, h)| *i as f64 * h).collect();
        grid.push((eval(&angles), angles));
        let mut j = 0;
        while j < k {
            idx[j] += 1;
            if idx[j] < counts[j] {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == k {
            break;
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));

    let stencil: Vec<Vec<i32>> = (0..3usize.pow(k as u32))
        .map(|mut c| {
            (0..k)
                .map(|_| {
                    let digit = (c % 3) as i32 - 1;
                    c /= 3;
                    digit
                })
                .collect()
        })
        .filter(|v: &Vec<i32>| v.iter().any(|x| *x != 0))
        .collect();

    let mut best = f64::INFINITY;
    for (start_value, start) in grid.into_iter().take(3) {
        let mut x = start;
        let mut fx = start_value;
        let mut h = spacing.clone();
        let mut moves = 0;
        while h.iter().cloned().fold(0.0, f64::max) > 1e-9 && moves < 2000 {
            let mut improved: Option<(f64, Vec<f64>)> = None;
            let threshold = fx - 1e-14 * (1.0 + fx.abs());
            for step in &stencil {
                let y: Vec<f64> = x.iter().zip(step).zip(&h).map(|((xi, s), hi)| xi + *s as f64 * hi).collect();
                let fy = eval(&y);
                if fy < improved.as_ref().map_or(threshold, |(v, _)| *v) {
                    improved = Some((fy, y));
                }
            }
            match improved {
                Some((fy, y)) => {
                    fx = fy;
                    x = y;
                    moves += 1;
                    h.iter_mut().zip(&spacing).for_each(|(hi, cap)| *hi = (2.0 * *hi).min(*cap));
                }
                None => h.iter_mut().for_each(|hi| *hi *= 0.5),
            }
        }
        best = best.min(fx);
    }
    best.min(center_value)
}

/// Orthonormal basis of `{d : sum(d) = 0}` in `R^m`.
fn zero_sum_basis(m: usize) -> Vec<Vec<f64>> {
    (1..m)
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            (0..m)
                .map(|i| match i.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(k as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Unit vector in `R^{k+1}` from `k` hyperspherical angles.
fn spherical(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len() + 1);
    let mut sin_prod = 1.0;
    for a in angles {
        out.push(sin_prod * a.cos());
        sin_prod *= a.sin();
    }
    out.push(sin_prod);
    out
}

fn kl_along(c: &[f64], mu: &[f64], d: &[f64], t: f64) -> f64 {
    c.iter()
        .zip(mu)
        .zip(d)
        .map(|((ci, m), di)| {
            let q = (ci + t * di).max(0.0);
            if q > 0.0 { q * (q / m).ln() } else { 0.0 }
        })
        .sum()
}

/// `E_q[u]` at the point where the ray `c + t d` leaves `{KL(q || mu) <= delta}`
/// or the face.
fn ray_end_value(c: &[f64], mu: &[f64], u: &[f64], d: &[f64], delta: f64) -> f64 {
    let t_simplex = c
        .iter()
        .zip(d)
        .filter(|(_, di)| **di < 0.0)
        .map(|(ci, di)| ci / -di)
        .fold(f64::INFINITY, f64::min);
    let t_end = if kl_along(c, mu, d, t_simplex) <= delta {
        t_simplex
    } else {
        let (mut lo, mut hi) = (0.0, t_simplex);
        for _ in 0..52 {
            let mid = 0.5 * (lo + hi);
            if kl_along(c, mu, d, mid) <= delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    c.iter().zip(d).zip(u).map(|((ci, di), x)| (ci + t_end * di).max(0.0) * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform01(delta: f64) -> DualProblem {
        DualProblem::new(Categorical::uniform(2).unwrap(), vec![0.0, 1.0], delta).unwrap()
    }

    /// Independent grid search of the dual objective written from its
    /// closed form.
    fn grid_sup_uniform01(delta: f64) -> f64 {
        let mut best: f64 = 0.0;
        let steps = 1_000_000;
        for i in 1..=steps {
            let a = 10.0 * i as f64 / steps as f64;
            let f = -a * (0.5 * (1.0 + (-1.0 / a).exp())).ln() - a * delta;
            best = best.max(f);
        }
        best
    }

    #[test]
    fn objective_constant_payoff() {
        let p = DualProblem::new(Categorical::from_probs(vec![0.2, 0.8]).unwrap(), vec![2.5, 2.5], 0.1).unwrap();
        assert!((dual_objective(&p, 1.0).unwrap() - 2.4).abs() < 1e-14);
    }

    #[test]
    fn objective_at_zero_is_essinf() {
        assert_eq!(dual_objective(&uniform01(0.1), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn objective_closed_form_value() {
        let v = dual_objective(&uniform01(0.1), 1.0).unwrap();
        let expected = -(0.5 * (1.0 + (-1.0f64).exp())).ln() - 0.1;
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 0.2799).abs() < 5e-5);
    }

    #[test]
    fn objective_rejects_bad_alpha() {
        assert!(dual_objective(&uniform01(0.1), -1.0).is_err());
        assert!(dual_objective(&uniform01(0.1), f64::NAN).is_err());
        assert!(dual_objective(&uniform01(0.1), f64::INFINITY).is_err());
    }

    #[test]
    fn objective_is_stable_for_tiny_alpha() {
        let p = DualProblem::new(Categorical::uniform(2).unwrap(), vec![1000.0, 2000.0], 0.1).unwrap();
        let v = dual_objective(&p, 1e-3).unwrap();
        assert!(v.is_finite() && (v - 1000.0 - 1e-3 * 2f64.ln() + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn solve_constant_payoff() {
        let p = DualProblem::new(Categorical::uniform(3).unwrap(), vec![2.5; 3], 0.3).unwrap();
        let s = solve_dual(&p).unwrap();
        assert_eq!((s.value, s.alpha_star, s.at_boundary), (2.5, 0.0, true));
    }

    #[test]
    fn solve_boundary_case() {
        // kappa = 0.5 >= exp(-0.8) ~ 0.449
        let s = solve_dual(&uniform01(0.8)).unwrap();
        assert_eq!((s.value, s.alpha_star, s.at_boundary), (0.0, 0.0, true));
        assert!(grid_sup_uniform01(0.8) < 1e-12);
    }

    #[test]
    fn solve_matches_grid_oracle() {
        let s = solve_dual(&uniform01(0.1)).unwrap();
        assert!(!s.at_boundary && s.alpha_star > 0.0);
        assert!((s.value - grid_sup_uniform01(0.1)).abs() < 1e-6, "{}", s.value);
    }

    #[test]
    fn zero_radius_is_the_mean() {
        let s = solve_dual(&uniform01(0.0)).unwrap();
        assert_eq!(s.value, 0.5);
    }

    #[test]
    fn ties_at_the_minimum_pool_their_mass() {
        // kappa = 0.3 + 0.3 = 0.6 >= exp(-0.6) ~ 0.549 only when pooled.
        let mu = Categorical::from_probs(vec![0.3, 0.4, 0.3]).unwrap();
        let s = solve_dual(&DualProblem::new(mu, vec![1.0, 2.0, 1.0], 0.6).unwrap()).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(s.at_boundary);
    }

    #[test]
    fn rejects_empty_support_and_bad_problems() {
        assert!(solve_dual_weighted(&[0.0, 0.0], &[1.0, 2.0], 0.1).is_err());
        assert!(DualProblem::new(Categorical::uniform(2).unwrap(), vec![0.0], 0.1).is_err());
        assert!(DualProblem::new(Categorical::uniform(2).unwrap(), vec![0.0, 1.0], -0.1).is_err());
        assert!(DualProblem::new(Categorical::uniform(2).unwrap(), vec![0.0, f64::NAN], 0.1).is_err());
    }

    #[test]
    fn unnormalized_weights_match_normalized() {
        let a = solve_dual_weighted(&[3.0, 1.0, 4.0], &[0.5, 2.0, 1.0], 0.2).unwrap();
        let b = solve_dual_weighted(&[0.375, 0.125, 0.5], &[0.5, 2.0, 1.0], 0.2).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn primal_trivial_cases() {
        assert!((primal_oracle(&uniform01(0.0)).unwrap() - 0.5).abs() < 1e-15);
        let c = DualProblem::new(Categorical::uniform(4).unwrap(), vec![3.0; 4], 0.4).unwrap();
        assert_eq!(primal_oracle(&c).unwrap(), 3.0);
    }

    #[test]
    fn primal_matches_dual_on_uniform_pair() {
        let p = uniform01(0.1);
        let gap = (primal_oracle(&p).unwrap() - solve_dual(&p).unwrap().value).abs();
        assert!(gap <= 1e-4, "{gap}");
    }

    #[test]
    fn primal_rejects_large_support() {
        let p = DualProblem::new(Categorical::uniform(9).unwrap(), (0..9).map(f64::from).collect(), 0.1).unwrap();
        assert!(primal_oracle(&p).is_err());
    }

    #[test]
    fn concavity_along_the_bracket() {
        let mu = Categorical::from_probs(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = DualProblem::new(mu, vec![0.0, 3.0, 1.0, 2.0], 0.1).unwrap();
        let hi = 3.0 / 0.1;
        let f: Vec<f64> = (0..100).map(|i| dual_objective(&p, hi * i as f64 / 99.0).unwrap()).collect();
        let interior_min = f.windows(3).any(|w| w[1] < w[0] - 1e-12 && w[1] < w[2] - 1e-12);
        assert!(!interior_min);
    }
}
