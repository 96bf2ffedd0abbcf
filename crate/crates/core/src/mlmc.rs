//! Unbiased multilevel Monte Carlo estimator of the robust Bellman operator.
//!
//! A level `n ~ Geo(g)` is drawn, `2^(n+1)` samples are taken, and the
//! nonlinear dual functional is debiased with the telescoping correction
//!
//! ```text
//! Delta_n = F(full) - F(even) / 2 - F(odd) / 2
//! ```
//!
//! divided by the level probability `p_n = g (1 - g)^n`. Odd and even refer to
//! 1-based positions in the ordered batch, so the first draw is odd.

use rand::Rng;

use crate::dual::solve_dual_weighted;
use crate::error::{Error, Result};
use crate::mdp::{Categorical, MdpModel, RngStream};
use crate::oracle::QTable;

/// Largest level accepted before the draw is treated as an error.
pub const MAX_LEVEL: u32 = 40;

/// Configured `g` at or below this value is rejected.
pub const MIN_G: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricLevel {
    pub g: f64,
    pub n: u32,
    pub p_n: f64,
}

impl GeometricLevel {
    pub fn new(g: f64, n: u32) -> Result<Self> {
        validate_g(g)?;
        if n > MAX_LEVEL {
            return Err(Error::LevelCapExceeded { level: n as u64, cap: MAX_LEVEL });
        }
        Ok(Self { g, n, p_n: level_probability(g, n) })
    }

    /// Number of simulator draws consumed at this level, `2^(n+1)`.
    pub fn sample_count(&self) -> u64 {
        1u64 << (self.n + 1)
    }
}

pub fn validate_g(g: f64) -> Result<()> {
    if !(g > MIN_G && g < 1.0) {
        return Err(Error::InvalidArgument(format!("g = {g} must lie in ({MIN_G}, 1)")));
    }
    Ok(())
}

pub fn level_probability(g: f64, n: u32) -> f64 {
    g * (1.0 - g).powi(n as i32)
}

/// Expected draws per estimator call, `E[2^(N1+1) + 2^(N2+1)] = 4g / (2g - 1)`;
/// infinite for `g <= 1/2`.
pub fn expected_draws_per_call(g: f64) -> f64 {
    if g <= 0.5 {
        f64::INFINITY
    } else {
        4.0 * g / (2.0 * g - 1.0)
    }
}

/// Draws `N ~ Geo(g)` with `P(N = n) = g (1 - g)^n` by inversion.
pub fn draw_level(g: f64, rng: &mut RngStream) -> Result<GeometricLevel> {
    validate_g(g)?;
    let u = 1.0 - rng.gen::<f64>();
    let n = (u.ln() / (1.0 - g).ln()).floor();
    if n > MAX_LEVEL as f64 {
        return Err(Error::LevelCapExceeded { level: n as u64, cap: MAX_LEVEL });
    }
    GeometricLevel::new(g, n as u32)
}

/// One level's worth of ordered draws from a categorical.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmcSample {
    pub level: GeometricLevel,
    /// Positions into the categorical, in draw order.
    pub draws: Vec<usize>,
    pub first_draw_value: f64,
}

impl MlmcSample {
    pub fn draw(dist: &Categorical, payoffs: &[f64], level: GeometricLevel, rng: &mut RngStream) -> Self {
        let draws: Vec<usize> = (0..level.sample_count()).map(|_| dist.sample_index(rng)).collect();
        let first_draw_value = payoffs[draws[0]];
        Self { level, draws, first_draw_value }
    }

    fn counts(&self, width: usize, keep: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut c = vec![0.0; width];
        for (i, d) in self.draws.iter().enumerate() {
            if keep(i) {
                c[*d] += 1.0;
            }
        }
        c
    }

    pub fn full_counts(&self, width: usize) -> Vec<f64> {
        self.counts(width, |_| true)
    }

    /// Draws at 1-based odd positions.
    pub fn odd_counts(&self, width: usize) -> Vec<f64> {
        self.counts(width, |i| i % 2 == 0)
    }

    /// Draws at 1-based even positions.
    pub fn even_counts(&self, width: usize) -> Vec<f64> {
        self.counts(width, |i| i % 2 == 1)
    }
}

/// Draws a level's batch straight into odd/even count vectors; returns the
/// position of the first draw. Consumes the RNG exactly like
/// [`MlmcSample::draw`].
fn draw_counts(dist: &Categorical, level: &GeometricLevel, rng: &mut RngStream, odd: &mut [f64], even: &mut [f64]) -> usize {
    odd.iter_mut().for_each(|c| *c = 0.0);
    even.iter_mut().for_each(|c| *c = 0.0);
    let first = dist.sample_index(rng);
    odd[first] += 1.0;
    let mut pos = 1u64;
    while pos < level.sample_count() {
        let i = dist.sample_index(rng);
        if pos % 2 == 0 {
            odd[i] += 1.0;
        } else {
            even[i] += 1.0;
        }
        pos += 1;
    }
    first
}

/// `F(full) - F(even)/2 - F(odd)/2` where `F` is the dual supremum and the
/// measures are empirical count vectors of one batch.
pub fn delta_correction_counts(odd: &[f64], even: &[f64], full: &mut [f64], u: &[f64], delta: f64) -> Result<f64> {
    for ((f, o), e) in full.iter_mut().zip(odd).zip(even) {
        *f = o + e;
    }
    let sup_full = solve_dual_weighted(full, u, delta)?.value;
    let sup_even = solve_dual_weighted(even, u, delta)?.value;
    let sup_odd = solve_dual_weighted(odd, u, delta)?.value;
    Ok(sup_full - 0.5 * sup_even - 0.5 * sup_odd)
}

/// Correction term from the three empirical measures of one batch.
pub fn delta_correction(full: &Categorical, even: &Categorical, odd: &Categorical, u: &[f64], delta: f64) -> Result<f64> {
    let sup = |m: &Categorical| solve_dual_weighted(m.probs(), u, delta).map(|s| s.value);
    Ok(sup(full)? - 0.5 * sup(even)? - 0.5 * sup(odd)?)
}

/// Converts a sample into its three empirical measures over `width` positions.
pub fn empirical_measures(sample: &MlmcSample, width: usize) -> Result<(Categorical, Categorical, Categorical)> {
    let norm = |c: Vec<f64>| {
        let t: f64 = c.iter().sum();
        Categorical::from_probs(c.into_iter().map(|x| x / t).collect())
    };
    Ok((
        norm(sample.full_counts(width))?,
        norm(sample.even_counts(width))?,
        norm(sample.odd_counts(width))?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanEstimate {
    pub value: f64,
    /// Simulator draws consumed: `2^(N1+1) + 2^(N2+1)`.
    pub draws: u64,
}

/// Reusable buffers for the estimator hot loop.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    odd: Vec<f64>,
    even: Vec<f64>,
    full: Vec<f64>,
    payoff: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, width: usize) {
        self.odd.resize(width, 0.0);
        self.even.resize(width, 0.0);
        self.full.resize(width, 0.0);
        self.payoff.resize(width, 0.0);
    }
}

/// MLMC estimate of the robust Bellman operator at `(s, a)` given the state
/// values `v(Q)(s') = max_b Q(s', b)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_with_values(
    model: &MdpModel,
    v: &[f64],
    s: usize,
    a: usize,
    delta: f64,
    g: f64,
    rng: &mut RngStream,
    scratch: &mut Scratch,
) -> Result<BellmanEstimate> {
    if !model.is_feasible(s, a) {
        return Err(Error::InvalidArgument(format!("({s},{a}) is not a feasible pair")));
    }
    let reward_level = draw_level(g, rng)?;
    let value_level = draw_level(g, rng)?;

    let reward = model.reward(s, a);
    scratch.resize(reward.len());
    let reward_values = reward.values().expect("validated model");
    let first = draw_counts(reward, &reward_level, rng, &mut scratch.odd, &mut scratch.even);
    let r_first = reward_values[first];
    let delta_r =
        delta_correction_counts(&scratch.odd, &scratch.even, &mut scratch.full, reward_values, delta)?;

    let trans = model.transition(s, a);
    scratch.resize(trans.len());
    for (p, o) in scratch.payoff.iter_mut().zip(trans.outcomes()) {
        *p = v[*o];
    }
    let first = draw_counts(trans, &value_level, rng, &mut scratch.odd, &mut scratch.even);
    let v_first = scratch.payoff[first];
    let delta_v =
        delta_correction_counts(&scratch.odd, &scratch.even, &mut scratch.full, &scratch.payoff, delta)?;

    let r_hat = r_first + delta_r / reward_level.p_n;
    let v_hat = v_first + delta_v / value_level.p_n;
    let value = r_hat + model.gamma() * v_hat;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("estimate at ({s},{a})")));
    }
    Ok(BellmanEstimate { value, draws: reward_level.sample_count() + value_level.sample_count() })
}

pub fn estimate_bellman(
    model: &MdpModel,
    q: &QTable,
    s: usize,
    a: usize,
    delta: f64,
    g: f64,
    rng: &mut RngStream,
) -> Result<BellmanEstimate> {
    let v = q.state_values();
    estimate_with_values(model, &v, s, a, delta, g, rng, &mut Scratch::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_model() -> MdpModel {
        let p = Categorical::point_mass(1);
        let r = Categorical::with_values(vec![0], vec![1.0], vec![0.75]).unwrap();
        MdpModel::new(
            2,
            1,
            0.6,
            vec![Some(p.clone()), Some(p)],
            vec![Some(r.clone()), Some(r)],
            vec![vec![0], vec![0]],
        )
        .unwrap()
    }

    #[test]
    fn level_probabilities() {
        assert_eq!(GeometricLevel::new(0.625, 0).unwrap().p_n, 0.625);
        assert!((GeometricLevel::new(0.625, 2).unwrap().p_n - 0.625 * 0.375 * 0.375).abs() < 1e-16);
        assert_eq!(GeometricLevel::new(0.625, 3).unwrap().sample_count(), 16);
    }

    #[test]
    fn rejects_bad_g() {
        let mut rng = RngStream::new(0, 0);
        for g in [0.0, 0.05, 1.0, -0.3, f64::NAN] {
            assert!(draw_level(g, &mut rng).is_err(), "{g}");
        }
    }

    #[test]
    fn level_cap_is_an_error() {
        assert!(matches!(GeometricLevel::new(0.5, 41), Err(Error::LevelCapExceeded { .. })));
    }

    #[test]
    fn geometric_mean_in_three_sigma_band() {
        let g = 0.625;
        let mut rng = RngStream::new(5, 0);
        let m = 100_000;
        let draws: Vec<f64> = (0..m).map(|_| draw_level(g, &mut rng).unwrap().n as f64).collect();
        let mean = draws.iter().sum::<f64>() / m as f64;
        let var = (1.0 - g) / (g * g);
        assert!((mean - 0.6).abs() <= 3.0 * (var / m as f64).sqrt(), "{mean}");
        let zeros = draws.iter().filter(|n| **n == 0.0).count() as f64 / m as f64;
        assert!((zeros - 0.625).abs() <= 3.0 * (0.625 * 0.375 / m as f64).sqrt());
    }

    #[test]
    fn near_degenerate_g() {
        let mut rng = RngStream::new(9, 0);
        let zeros = (0..100_000).filter(|_| draw_level(0.999, &mut rng).unwrap().n == 0).count();
        let freq = zeros as f64 / 1e5;
        assert!((freq - 0.999).abs() <= 3.0 * (0.999 * 0.001f64 / 1e5).sqrt());
    }

    #[test]
    fn expected_cost_formula() {
        assert!((expected_draws_per_call(0.625) - 10.0).abs() < 1e-12);
        assert!((expected_draws_per_call(0.999) - 4.004008016032064).abs() < 1e-12);
        assert!(expected_draws_per_call(0.499).is_infinite());
    }

    #[test]
    fn mixture_identity_at_count_level() {
        let dist = Categorical::uniform(5).unwrap();
        let mut rng = RngStream::new(3, 0);
        let level = GeometricLevel::new(0.6, 4).unwrap();
        let sample = MlmcSample::draw(&dist, &[0.0; 5], level, &mut rng);
        let (full, odd, even) = (sample.full_counts(5), sample.odd_counts(5), sample.even_counts(5));
        assert_eq!(odd.iter().sum::<f64>(), 16.0);
        assert_eq!(even.iter().sum::<f64>(), 16.0);
        for i in 0..5 {
            assert_eq!(full[i], odd[i] + even[i]);
        }
    }

    #[test]
    fn counted_batches_match_stored_samples() {
        let dist = Categorical::from_probs(vec![0.1, 0.6, 0.3]).unwrap();
        let level = GeometricLevel::new(0.6, 3).unwrap();
        let sample = MlmcSample::draw(&dist, &[0.0; 3], level, &mut RngStream::new(8, 2));
        let (mut odd, mut even) = (vec![0.0; 3], vec![0.0; 3]);
        let first = draw_counts(&dist, &level, &mut RngStream::new(8, 2), &mut odd, &mut even);
        assert_eq!(first, sample.draws[0]);
        assert_eq!(odd, sample.odd_counts(3));
        assert_eq!(even, sample.even_counts(3));
    }

    #[test]
    fn correction_vanishes_for_constant_batches() {
        let odd = [4.0, 0.0];
        let even = [4.0, 0.0];
        let d = delta_correction_counts(&odd, &even, &mut [0.0; 2], &[1.7, 9.0], 0.3).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn correction_is_zero_without_robustness() {
        let odd = [3.0, 1.0];
        let even = [1.0, 3.0];
        let d = delta_correction_counts(&odd, &even, &mut [0.0; 2], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn level_zero_correction_from_two_draws() {
        // Draw 1 (odd) hits payoff 0, draw 2 (even) hits payoff 1.
        let sample = MlmcSample {
            level: GeometricLevel::new(0.625, 0).unwrap(),
            draws: vec![0, 1],
            first_draw_value: 0.0,
        };
        let (full, even, odd) = empirical_measures(&sample, 2).unwrap();
        let d = delta_correction(&full, &even, &odd, &[0.0, 1.0], 0.1).unwrap();
        // Grid oracle for the uniform {0, 1} supremum at radius 0.1.
        let mut grid: f64 = 0.0;
        for i in 1..=1_000_000 {
            let a = 10.0 * i as f64 / 1e6;
            grid = grid.max(-a * (0.5 * (1.0 + (-1.0 / a).exp())).ln() - a * 0.1);
        }
        assert!((d - (grid - 0.5)).abs() < 1e-6, "{d}");
    }

    #[test]
    fn deterministic_model_is_estimated_exactly() {
        let model = deterministic_model();
        let mut q = QTable::zeros(&model);
        q.set(1, 0, 2.0);
        let mut rng = RngStream::new(1, 1);
        for g in [0.3, 0.625, 0.9] {
            for _ in 0..200 {
                let e = estimate_bellman(&model, &q, 0, 0, 0.4, g, &mut rng).unwrap();
                assert_eq!(e.value, 0.75 + 0.6 * 2.0);
            }
        }
    }

    #[test]
    fn infeasible_pair_is_rejected() {
        let model = deterministic_model();
        let q = QTable::zeros(&model);
        assert!(estimate_bellman(&model, &q, 0, 1, 0.1, 0.6, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn nonrobust_estimate_is_unbiased_for_the_mean_reward() {
        let p = Categorical::point_mass(0);
        let r = Categorical::with_values(vec![0, 1], vec![0.5, 0.5], vec![0.0, 1.0]).unwrap();
        let model = MdpModel::new(1, 1, 0.5, vec![Some(p)], vec![Some(r)], vec![vec![0]]).unwrap();
        let q = QTable::zeros(&model);
        let mut rng = RngStream::new(21, 0);
        let m = 100_000;
        let xs: Vec<f64> = (0..m)
            .map(|_| estimate_bellman(&model, &q, 0, 0, 0.0, 0.625, &mut rng).unwrap().value)
            .collect();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((mean - 0.5).abs() <= 3.0 * (var / m as f64).sqrt(), "{mean}");
    }
}
