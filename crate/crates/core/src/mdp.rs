//! Finite MDPs with categorical transition and reward laws, and the seeded
//! sampler that plays the role of the simulator.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;
const RENORMALIZE_TOL: f64 = 1e-9;

/// A finite probability distribution over indexed outcomes, optionally
/// carrying a real payload per outcome (reward amounts).
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    outcomes: Vec<usize>,
    probs: Vec<f64>,
    values: Option<Vec<f64>>,
    cdf: Vec<f64>,
}

impl Categorical {
    pub fn new(outcomes: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        Self::build(outcomes, probs, None)
    }

    pub fn with_values(outcomes: Vec<usize>, probs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::build(outcomes, probs, Some(values))
    }

    /// Distribution over `0..probs.len()`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        Self::new((0..probs.len()).collect(), probs)
    }

    pub fn point_mass(outcome: usize) -> Self {
        Self::new(vec![outcome], vec![1.0]).expect("point mass is valid")
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDistribution("uniform over zero outcomes".into()));
        }
        Self::from_probs(vec![1.0 / n as f64; n])
    }

    fn build(outcomes: Vec<usize>, mut probs: Vec<f64>, values: Option<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        if outcomes.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} outcomes but {} probabilities",
                outcomes.len(),
                probs.len()
            )));
        }
        if let Some(v) = &values {
            if v.len() != probs.len() {
                return Err(Error::InvalidDistribution(format!(
                    "{} values but {} probabilities",
                    v.len(),
                    probs.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDistribution("non-finite payload value".into()));
            }
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        let gap = (sum - 1.0).abs();
        if gap > RENORMALIZE_TOL {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {sum}")));
        }
        if gap > SUM_TOL {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Pin the last positive bin to 1 so every uniform in [0, 1) lands.
        let last_positive = probs.iter().rposition(|p| *p > 0.0).expect("sum is 1");
        for c in &mut cdf[last_positive..] {
            *c = 1.0;
        }
        Ok(Self { outcomes, probs, values, cdf })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn outcomes(&self) -> &[usize] {
        &self.outcomes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    /// Smallest strictly positive probability.
    pub fn min_positive_prob(&self) -> f64 {
        self.probs
            .iter()
            .copied()
            .filter(|p| *p > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Draws a position in `0..len()` by inverse CDF.
    pub fn sample_index(&self, rng: &mut RngStream) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|c| *c <= u)
    }

    /// Draws an outcome label.
    pub fn sample(&self, rng: &mut RngStream) -> usize {
        self.outcomes[self.sample_index(rng)]
    }
}

/// Per-trajectory random stream. ChaCha8 with a 64-bit stream selector, so
/// `(seed, stream)` pairs give independent, reproducible sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Draws one outcome of `dist`.
pub fn sample(dist: &Categorical, rng: &mut RngStream) -> usize {
    dist.sample(rng)
}

/// A tabular MDP. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transitions: Vec<Option<Categorical>>,
    rewards: Vec<Option<Categorical>>,
    feasible: Vec<Vec<usize>>,
    mask: Vec<bool>,
}

impl MdpModel {
    /// `transitions` and `rewards` are indexed row-major by `s * n_actions + a`;
    /// entries for infeasible pairs must be `None`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: Vec<Option<Categorical>>,
        rewards: Vec<Option<Categorical>>,
        feasible: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidModel("empty state or action space".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("discount {gamma} outside (0, 1)")));
        }
        let n_pairs = n_states * n_actions;
        if transitions.len() != n_pairs || rewards.len() != n_pairs {
            return Err(Error::InvalidModel(format!(
                "expected {n_pairs} transition and reward rows, got {} and {}",
                transitions.len(),
                rewards.len()
            )));
        }
        if feasible.len() != n_states {
            return Err(Error::InvalidModel(format!(
                "feasible list has {} states, expected {n_states}",
                feasible.len()
            )));
        }
        let mut mask = vec![false; n_pairs];
        for (s, actions) in feasible.iter().enumerate() {
            if actions.is_empty() {
                return Err(Error::InvalidModel(format!("state {s} has no feasible action")));
            }
            for &a in actions {
                if a >= n_actions {
                    return Err(Error::InvalidModel(format!("action {a} out of range in state {s}")));
                }
                if mask[s * n_actions + a] {
                    return Err(Error::InvalidModel(format!("action {a} listed twice in state {s}")));
                }
                mask[s * n_actions + a] = true;
            }
        }
        for idx in 0..n_pairs {
            let (s, a) = (idx / n_actions, idx % n_actions);
            match (mask[idx], &transitions[idx], &rewards[idx]) {
                (true, Some(p), Some(r)) => {
                    if let Some(o) = p.outcomes().iter().find(|o| **o >= n_states) {
                        return Err(Error::InvalidModel(format!(
                            "transition ({s},{a}) targets state {o} >= {n_states}"
                        )));
                    }
                    let values = r.values().ok_or_else(|| {
                        Error::InvalidModel(format!("reward row ({s},{a}) has no values"))
                    })?;
                    if let Some(v) = values.iter().find(|v| **v < 0.0) {
                        return Err(Error::InvalidModel(format!(
                            "reward ({s},{a}) has negative value {v}"
                        )));
                    }
                }
                (true, _, _) => {
                    return Err(Error::InvalidModel(format!(
                        "feasible pair ({s},{a}) lacks a transition or reward row"
                    )))
                }
                (false, None, None) => {}
                (false, _, _) => {
                    return Err(Error::InvalidModel(format!(
                        "infeasible pair ({s},{a}) carries a row"
                    )))
                }
            }
        }
        let mut feasible = feasible;
        feasible.iter_mut().for_each(|acts| acts.sort_unstable());
        Ok(Self { n_states, n_actions, gamma, transitions, rewards, feasible, mask })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn feasible_actions(&self, s: usize) -> &[usize] {
        &self.feasible[s]
    }

    pub fn is_feasible(&self, s: usize, a: usize) -> bool {
        s < self.n_states && a < self.n_actions && self.mask[s * self.n_actions + a]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Feasible pairs in row-major order.
    pub fn feasible_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.feasible
            .iter()
            .enumerate()
            .flat_map(|(s, acts)| acts.iter().map(move |&a| (s, a)))
    }

    pub fn n_feasible_pairs(&self) -> usize {
        self.feasible.iter().map(Vec::len).sum()
    }

    /// Transition law of a feasible pair.
    pub fn transition(&self, s: usize, a: usize) -> &Categorical {
        self.transitions[s * self.n_actions + a]
            .as_ref()
            .unwrap_or_else(|| panic!("({s},{a}) is infeasible"))
    }

    /// Reward law of a feasible pair; always carries values.
    pub fn reward(&self, s: usize, a: usize) -> &Categorical {
        self.rewards[s * self.n_actions + a]
            .as_ref()
            .unwrap_or_else(|| panic!("({s},{a}) is infeasible"))
    }

    /// Largest reward value with positive probability.
    pub fn r_max(&self) -> f64 {
        self.feasible_pairs()
            .flat_map(|(s, a)| {
                let r = self.reward(s, a);
                r.probs()
                    .iter()
                    .zip(r.values().unwrap_or_default())
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(_, v)| *v)
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    /// Same dynamics under a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("discount {gamma} outside (0, 1)")));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    pub fn to_file(&self) -> ModelFile {
        let mut transitions = Vec::with_capacity(self.transitions.len());
        let mut rewards = Vec::with_capacity(self.rewards.len());
        for (p, r) in self.transitions.iter().zip(&self.rewards) {
            transitions.push(p.as_ref().map(|p| {
                let mut dense = vec![0.0; self.n_states];
                for (o, q) in p.outcomes().iter().zip(p.probs()) {
                    dense[*o] += q;
                }
                dense
            }));
            rewards.push(r.as_ref().map(|r| RewardRow {
                values: r.values().expect("validated").to_vec(),
                probs: r.probs().to_vec(),
            }));
        }
        ModelFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            transitions,
            rewards,
            feasible: self.feasible.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let transitions = file
            .transitions
            .into_iter()
            .map(|row| row.map(Categorical::from_probs).transpose())
            .collect::<Result<Vec<_>>>()?;
        let rewards = file
            .rewards
            .into_iter()
            .map(|row| {
                row.map(|r| {
                    Categorical::with_values((0..r.probs.len()).collect(), r.probs, r.values)
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.n_states, file.n_actions, file.gamma, transitions, rewards, file.feasible)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// On-disk model layout. Rows are indexed `s * n_actions + a`; `null` marks
/// infeasible pairs. Transition rows are dense over next states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub transitions: Vec<Option<Vec<f64>>>,
    pub rewards: Vec<Option<RewardRow>>,
    pub feasible: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Minimal support probability: the smallest nonzero probability across every
/// feasible transition and reward row.
pub fn min_support_probability(model: &MdpModel) -> f64 {
    model
        .feasible_pairs()
        .map(|(s, a)| {
            model
                .transition(s, a)
                .min_positive_prob()
                .min(model.reward(s, a).min_positive_prob())
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallRadiusReport {
    pub p_min: f64,
    pub delta: f64,
    /// `p_min / 2`
    pub lhs: f64,
    /// `1 - exp(-delta)`
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `p_min / 2 >= 1 - exp(-delta)`.
pub fn small_radius(p_min: f64, delta: f64) -> Result<SmallRadiusReport> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("radius {delta} must be positive")));
    }
    let lhs = 0.5 * p_min;
    let rhs = -(-delta).exp_m1();
    Ok(SmallRadiusReport { p_min, delta, lhs, rhs, holds: lhs >= rhs })
}

pub fn check_small_radius(model: &MdpModel, delta: f64) -> Result<SmallRadiusReport> {
    small_radius(min_support_probability(model), delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frequencies(dist: &Categorical, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 0);
        let mut counts = vec![0usize; dist.len()];
        for _ in 0..draws {
            counts[dist.sample_index(&mut rng)] += 1;
        }
        counts.into_iter().map(|c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn point_mass_always_returns_its_outcome() {
        let d = Categorical::point_mass(3);
        let mut rng = RngStream::new(1, 0);
        assert!((0..1000).all(|_| sample(&d, &mut rng) == 3));
    }

    #[test]
    fn uniform_pair_frequency_in_three_sigma_band() {
        let f = frequencies(&Categorical::uniform(2).unwrap(), 100_000, 11);
        assert!((0.494..=0.506).contains(&f[0]), "{}", f[0]);
    }

    #[test]
    fn two_point_mean_in_three_sigma_band() {
        let d = Categorical::from_probs(vec![0.9, 0.1]).unwrap();
        let f = frequencies(&d, 100_000, 12);
        let band = 3.0 * (0.09f64 / 1e5).sqrt();
        assert!((f[1] - 0.1).abs() <= band, "{}", f[1]);
    }

    #[test]
    fn zero_probability_outcomes_are_never_drawn() {
        let d = Categorical::from_probs(vec![0.0, 0.5, 0.0, 0.5, 0.0]).unwrap();
        let f = frequencies(&d, 20_000, 3);
        assert_eq!(f[0] + f[2] + f[4], 0.0);
    }

    #[test]
    fn construction_rejects_bad_rows() {
        assert!(Categorical::from_probs(vec![]).is_err());
        assert!(Categorical::from_probs(vec![0.5, 0.6]).is_err());
        assert!(Categorical::from_probs(vec![1.5, -0.5]).is_err());
        assert!(Categorical::new(vec![0], vec![0.5, 0.5]).is_err());
        assert!(Categorical::with_values(vec![0, 1], vec![0.5, 0.5], vec![1.0]).is_err());
    }

    #[test]
    fn slightly_off_rows_are_renormalized() {
        let d = Categorical::from_probs(vec![0.5 + 5e-10, 0.5]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn identical_streams_reproduce_and_distinct_streams_differ() {
        let d = Categorical::uniform(7).unwrap();
        let run = |stream| {
            let mut rng = RngStream::new(42, stream);
            (0..200).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    fn two_state_model(row: Vec<f64>) -> MdpModel {
        let p = Categorical::from_probs(row).unwrap();
        let r = Categorical::with_values(vec![0], vec![1.0], vec![1.0]).unwrap();
        let n = p.len();
        MdpModel::new(
            n,
            1,
            0.9,
            (0..n).map(|_| Some(p.clone())).collect(),
            (0..n).map(|_| Some(r.clone())).collect(),
            (0..n).map(|_| vec![0]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn min_support_over_uniform_rows() {
        let m = two_state_model(vec![0.25; 4]);
        assert_eq!(min_support_probability(&m), 0.25);
    }

    #[test]
    fn min_support_skips_zero_entries() {
        let p_bad = Categorical::from_probs(vec![0.9, 0.1, 0.0]).unwrap();
        let p_uni = Categorical::uniform(3).unwrap();
        let r = Categorical::with_values(vec![0], vec![1.0], vec![0.0]).unwrap();
        let m = MdpModel::new(
            3,
            1,
            0.5,
            vec![Some(p_bad), Some(p_uni.clone()), Some(p_uni)],
            vec![Some(r.clone()), Some(r.clone()), Some(r)],
            vec![vec![0]; 3],
        )
        .unwrap();
        assert!((min_support_probability(&m) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn small_radius_examples() {
        let r = small_radius(0.5, 0.1).unwrap();
        assert!(r.holds);
        assert!((r.rhs - 0.09516258196404048).abs() < 1e-15);
        let r = small_radius(0.125, 0.5).unwrap();
        assert!(!r.holds);
        assert!((r.lhs - 0.0625).abs() < 1e-15 && (r.rhs - 0.3934693402873666).abs() < 1e-15);
        assert!(small_radius(1e-6, 1e-12).unwrap().holds);
        assert!(small_radius(0.5, 0.0).is_err());
    }

    #[test]
    fn model_validation() {
        let p = Categorical::point_mass(0);
        let r = Categorical::with_values(vec![0], vec![1.0], vec![1.0]).unwrap();
        let neg = Categorical::with_values(vec![0], vec![1.0], vec![-1.0]).unwrap();
        let ok = |g| MdpModel::new(1, 1, g, vec![Some(p.clone())], vec![Some(r.clone())], vec![vec![0]]);
        assert!(ok(0.5).is_ok());
        assert!(ok(1.0).is_err());
        assert!(ok(0.0).is_err());
        assert!(MdpModel::new(1, 1, 0.5, vec![Some(p.clone())], vec![Some(neg)], vec![vec![0]]).is_err());
        assert!(MdpModel::new(1, 1, 0.5, vec![None], vec![None], vec![vec![0]]).is_err());
        assert!(MdpModel::new(1, 2, 0.5, vec![Some(p.clone()), Some(p)], vec![Some(r.clone()), None], vec![vec![0]]).is_err());
        let unreachable = Categorical::point_mass(4);
        assert!(MdpModel::new(1, 1, 0.5, vec![Some(unreachable)], vec![Some(r)], vec![vec![0]]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = two_state_model(vec![0.3, 0.7]);
        let back = MdpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.to_file(), m.to_file());
    }
}
