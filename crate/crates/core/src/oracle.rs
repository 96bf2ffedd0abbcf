//! Exact robust Bellman operator on the population model and the value
//! iteration that produces the ground-truth robust Q-function.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dual::solve_dual_weighted;
use crate::error::{Error, Result};
use crate::mdp::MdpModel;

/// Dense `n_states x n_actions` action values. Infeasible entries are held at
/// zero and ignored by every norm and max.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl QTable {
    pub fn zeros(model: &MdpModel) -> Self {
        Self {
            n_states: model.n_states(),
            n_actions: model.n_actions(),
            values: vec![0.0; model.n_states() * model.n_actions()],
            mask: model.mask().to_vec(),
        }
    }

    pub fn from_fn(model: &MdpModel, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut q = Self::zeros(model);
        for (s, a) in model.feasible_pairs() {
            q.set(s, a, f(s, a));
        }
        q
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        debug_assert!(self.mask[s * self.n_actions + a], "({s},{a}) is infeasible");
        self.values[s * self.n_actions + a] = value;
    }

    pub fn is_feasible(&self, s: usize, a: usize) -> bool {
        self.mask[s * self.n_actions + a]
    }

    fn feasible_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(v, _)| *v)
    }

    /// `v(Q)(s) = max over feasible b of Q(s, b)`.
    pub fn state_values(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.n_states];
        self.state_values_into(&mut out);
        out
    }

    pub fn state_values_into(&self, out: &mut [f64]) {
        for (s, slot) in out.iter_mut().enumerate() {
            let row = s * self.n_actions..(s + 1) * self.n_actions;
            *slot = self.values[row.clone()]
                .iter()
                .zip(&self.mask[row])
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.feasible_values().map(f64::abs).fold(0.0, f64::max)
    }

    /// `max |self - other|` over feasible pairs.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|((x, y), _)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.feasible_values().all(f64::is_finite)
    }

    /// Raw row-major storage.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Adds `c` to every feasible entry.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        for (v, m) in out.values.iter_mut().zip(&self.mask) {
            if *m {
                *v += c;
            }
        }
        out
    }

    pub fn to_file(&self) -> QTableFile {
        QTableFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| self.is_feasible(s, a).then(|| self.get(s, a)))
                        .collect()
                })
                .collect(),
        }
    }

    /// Rebuilds a table for `model`; the `null` pattern must match its mask.
    pub fn from_file(model: &MdpModel, file: &QTableFile) -> Result<Self> {
        if file.n_states != model.n_states() || file.n_actions != model.n_actions() || file.values.len() != file.n_states {
            return Err(Error::InvalidArgument("Q-table shape does not match the model".into()));
        }
        let mut q = Self::zeros(model);
        for (s, row) in file.values.iter().enumerate() {
            if row.len() != file.n_actions {
                return Err(Error::InvalidArgument(format!("Q-table row {s} has wrong width")));
            }
            for (a, v) in row.iter().enumerate() {
                match (model.is_feasible(s, a), v) {
                    (true, Some(x)) => q.set(s, a, *x),
                    (false, None) => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "Q-table entry ({s},{a}) disagrees with the feasible set"
                        )))
                    }
                }
            }
        }
        Ok(q)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(model: &MdpModel, path: impl AsRef<Path>) -> Result<Self> {
        let file: QTableFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(model, &file)
    }
}

/// JSON layout: `values[s][a]`, `null` where `(s, a)` is infeasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    pub residual: f64,
    /// Successive residual ratios; each should be at most `gamma`.
    pub contraction: Vec<f64>,
}

/// Robust Bellman operator. Reward and value terms are both worst cases over
/// KL balls of radius `delta`.
pub fn exact_bellman(model: &MdpModel, q: &QTable, delta: f64) -> Result<QTable> {
    if !q.is_finite() {
        return Err(Error::NonFinite("Q-table passed to the Bellman operator".into()));
    }
    let v = q.state_values();
    let mut out = QTable::zeros(model);
    let mut payoff = Vec::new();
    for (s, a) in model.feasible_pairs() {
        let r = model.reward(s, a);
        let reward_term = solve_dual_weighted(r.probs(), r.values().expect("validated"), delta)?.value;
        let p = model.transition(s, a);
        payoff.clear();
        payoff.extend(p.outcomes().iter().map(|o| v[*o]));
        let value_term = solve_dual_weighted(p.probs(), &payoff, delta)?.value;
        out.set(s, a, reward_term + model.gamma() * value_term);
    }
    Ok(out)
}

/// Value iteration from `Q = 0` until the residual certifies
/// `||Q - Q*||_inf <= tol`.
pub fn solve_q_star(model: &MdpModel, delta: f64, tol: f64) -> Result<(QTable, FixedPointReport)> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let gamma = model.gamma();
    let threshold = tol * (1.0 - gamma) / gamma;
    let r_max = model.r_max();
    let cap = if r_max > 0.0 {
        ((tol * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil().max(0.0) as usize + 100
    } else {
        100
    };
    let mut q = QTable::zeros(model);
    let mut contraction = Vec::new();
    let mut prev_residual = f64::NAN;
    for it in 1..=cap {
        let next = exact_bellman(model, &q, delta)?;
        let residual = next.sup_distance(&q);
        q = next;
        if prev_residual > 0.0 {
            contraction.push(residual / prev_residual);
        }
        prev_residual = residual;
        if residual <= threshold {
            return Ok((q, FixedPointReport { iterations: it, residual, contraction }));
        }
    }
    Err(Error::NoConvergence { iterations: cap, residual: prev_residual })
}

/// Per-state argmax over feasible actions; ties go to the smallest index.
pub fn greedy_policy(q: &QTable) -> Vec<usize> {
    (0..q.n_states())
        .map(|s| {
            let mut best: Option<(usize, f64)> = None;
            for a in 0..q.n_actions() {
                if q.is_feasible(s, a) && best.map_or(true, |(_, v)| q.get(s, a) > v) {
                    best = Some((a, q.get(s, a)));
                }
            }
            best.map(|(a, _)| a).expect("every state has a feasible action")
        })
        .collect()
}
