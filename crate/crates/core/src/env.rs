//! Benchmark MDP families: the four-state hard instance for Q-learning and
//! the lost-sale inventory model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Categorical, MdpModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardMdpParams {
    pub gamma: f64,
    /// Self-loop probability of the two transient states. Defaults to
    /// `(4 gamma - 1) / (3 gamma)`.
    #[serde(default)]
    pub p: Option<f64>,
}

impl HardMdpParams {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, p: None }
    }

    pub fn default_p(gamma: f64) -> f64 {
        (4.0 * gamma - 1.0) / (3.0 * gamma)
    }

    pub fn p(&self) -> f64 {
        self.p.unwrap_or_else(|| Self::default_p(self.gamma))
    }
}

/// Four states, two actions, built after the Li et al. (2021) lower-bound
/// construction for Q-learning:
///
/// * state 0: absorbing, reward 0;
/// * states 1 and 2: reward 1, stay with probability `p`, fall to state 0
///   otherwise (both actions identical, so the max over two noisy estimates
///   is where plain Q-learning overestimates);
/// * state 3: absorbing, reward 1.
///
/// Every entry is visible in the serialized model and can be overridden from
/// a model file.
pub fn make_hard_mdp(params: &HardMdpParams) -> Result<MdpModel> {
    let gamma = params.gamma;
    if !(gamma > 0.25 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("hard MDP needs gamma in (1/4, 1), got {gamma}")));
    }
    let p = params.p();
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("self-loop probability {p} outside (0, 1)")));
    }
    let n_states = 4;
    let n_actions = 2;
    let reward = |r: f64| Categorical::with_values(vec![0], vec![1.0], vec![r]).expect("point mass");
    let leaky = |s: usize| Categorical::new(vec![s, 0], vec![p, 1.0 - p]).expect("two-point row");
    let mut transitions = Vec::with_capacity(n_states * n_actions);
    let mut rewards = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for _ in 0..n_actions {
            let (row, r) = match s {
                0 => (Categorical::point_mass(0), 0.0),
                1 | 2 => (leaky(s), 1.0),
                _ => (Categorical::point_mass(3), 1.0),
            };
            transitions.push(Some(row));
            rewards.push(Some(reward(r)));
        }
    }
    MdpModel::new(n_states, n_actions, gamma, transitions, rewards, vec![vec![0, 1]; n_states])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryParams {
    pub gamma: f64,
    /// Capacity; states are `0..=n_s`.
    pub n_s: usize,
    /// Largest order; actions are `0..=n_a`.
    pub n_a: usize,
    /// Largest demand; demand lives on `0..=n_d`.
    pub n_d: usize,
    /// Fixed ordering cost.
    pub k: f64,
    /// Holding cost per unit.
    pub h: f64,
    /// Lost-sale price per unit.
    pub p_cost: f64,
    /// Demand probabilities over `0..=n_d`; uniform when absent.
    #[serde(default)]
    pub demand: Option<Vec<f64>>,
}

impl Default for InventoryParams {
    fn default() -> Self {
        Self { gamma: 0.7, n_s: 7, n_a: 7, n_d: 7, k: 3.0, h: 1.0, p_cost: 2.0, demand: None }
    }
}

impl InventoryParams {
    pub fn demand_law(&self) -> Result<Categorical> {
        match &self.demand {
            Some(probs) if probs.len() != self.n_d + 1 => Err(Error::InvalidArgument(format!(
                "demand law has {} entries, expected {}",
                probs.len(),
                self.n_d + 1
            ))),
            Some(probs) => Categorical::from_probs(probs.clone()),
            None => Categorical::uniform(self.n_d + 1),
        }
    }

    /// One-period cost `k 1{a > 0} + h (s + a - d)_+ + p (s + a - d)_-`.
    pub fn cost(&self, s: usize, a: usize, d: usize) -> f64 {
        let stock = (s + a) as f64 - d as f64;
        let order = if a > 0 { self.k } else { 0.0 };
        order + self.h * stock.max(0.0) + self.p_cost * (-stock).max(0.0)
    }

    pub fn next_state(&self, s: usize, a: usize, d: usize) -> usize {
        (s + a).saturating_sub(d)
    }

    /// Largest one-period cost over feasible pairs and demands with positive
    /// probability.
    pub fn max_cost(&self) -> Result<f64> {
        let demand = self.demand_law()?;
        let mut c_max: f64 = 0.0;
        for s in 0..=self.n_s {
            for a in 0..=self.n_a.min(self.n_s - s) {
                for (d, q) in demand.outcomes().iter().zip(demand.probs()) {
                    if *q > 0.0 {
                        c_max = c_max.max(self.cost(s, a, *d));
                    }
                }
            }
        }
        Ok(c_max)
    }
}

/// Lost-sale inventory model. Costs become rewards through
/// `r = C_max - C(s, a, d)`, which keeps rewards nonnegative and reverses the
/// order, so greedy policies of the reward model minimize cost.
pub fn make_inventory_mdp(params: &InventoryParams) -> Result<MdpModel> {
    if params.n_a > params.n_s {
        return Err(Error::InvalidArgument(format!(
            "n_a = {} exceeds n_s = {}",
            params.n_a, params.n_s
        )));
    }
    for (name, x) in [("k", params.k), ("h", params.h), ("p", params.p_cost)] {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::InvalidArgument(format!("cost parameter {name} = {x} must be >= 0")));
        }
    }
    let demand = params.demand_law()?;
    let c_max = params.max_cost()?;
    let n_states = params.n_s + 1;
    let n_actions = params.n_a + 1;
    let mut transitions = Vec::with_capacity(n_states * n_actions);
    let mut rewards = Vec::with_capacity(n_states * n_actions);
    let mut feasible = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let mut acts = Vec::new();
        for a in 0..n_actions {
            if s + a > params.n_s {
                transitions.push(None);
                rewards.push(None);
                continue;
            }
            acts.push(a);
            let mut next = vec![0.0; n_states];
            let mut by_reward: Vec<(f64, f64)> = Vec::new();
            for (d, q) in demand.outcomes().iter().zip(demand.probs()) {
                next[params.next_state(s, a, *d)] += q;
                let r = c_max - params.cost(s, a, *d);
                match by_reward.iter_mut().find(|(v, _)| *v == r) {
                    Some(entry) => entry.1 += q,
                    None => by_reward.push((r, *q)),
                }
            }
            by_reward.sort_by(|x, y| x.0.total_cmp(&y.0));
            let (values, probs): (Vec<f64>, Vec<f64>) = by_reward.into_iter().unzip();
            transitions.push(Some(Categorical::from_probs(next)?));
            rewards.push(Some(Categorical::with_values((0..probs.len()).collect(), probs, values)?));
        }
        feasible.push(acts);
    }
    MdpModel::new(n_states, n_actions, params.gamma, transitions, rewards, feasible)
}
