//! Synchronous MLMC distributionally robust Q-learning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{MdpModel, RngStream};
use crate::mlmc::{estimate_with_values, validate_g, Scratch};
use crate::oracle::QTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepsizeSchedule {
    /// `alpha_k = alpha`
    Constant { alpha: f64 },
    /// `alpha_k = a / (b + (1 - gamma) k)`
    RescaledLinear { a: f64, b: f64 },
}

impl StepsizeSchedule {
    pub fn constant(alpha: f64) -> Result<Self> {
        let s = Self::Constant { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn rescaled_linear(a: f64, b: f64) -> Result<Self> {
        let s = Self::RescaledLinear { a, b };
        s.validate()?;
        Ok(s)
    }

    /// `1 / (1 + (1 - gamma) k)`
    pub fn default_rescaled_linear() -> Self {
        Self::RescaledLinear { a: 1.0, b: 1.0 }
    }

    /// Ensures `alpha_k` stays in `(0, 1]` for every `k >= 0` and `gamma < 1`.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Constant { alpha } => alpha > 0.0 && alpha <= 1.0,
            Self::RescaledLinear { a, b } => a > 0.0 && b > 0.0 && a <= b && a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("stepsize schedule {self:?} leaves (0, 1]")))
        }
    }

    pub fn alpha(&self, k: usize, gamma: f64) -> Result<f64> {
        let alpha = match *self {
            Self::Constant { alpha } => alpha,
            Self::RescaledLinear { a, b } => a / (b + (1.0 - gamma) * k as f64),
        };
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(alpha)
        } else {
            Err(Error::InvalidArgument(format!("stepsize {alpha} at iteration {k} outside (0, 1]")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// `||Q_k - Q*||_inf` for `k = 0..=T`, when an oracle was supplied.
    pub errors: Option<Vec<f64>>,
    /// Simulator draws used through iteration `k`, `k = 0..=T`.
    pub cum_draws: Vec<u64>,
    /// Histogram of draws per estimator call: draw count -> number of calls.
    pub call_draws: BTreeMap<u64, u64>,
    pub final_q: QTable,
}

impl TrajectoryRecord {
    pub fn iterations(&self) -> usize {
        self.cum_draws.len() - 1
    }

    pub fn total_calls(&self) -> u64 {
        self.call_draws.values().sum()
    }

    /// Lower median of the per-call draw counts.
    pub fn median_call_draws(&self) -> u64 {
        median_of_histogram(&self.call_draws)
    }

    pub fn max_call_draws(&self) -> u64 {
        self.call_draws.keys().next_back().copied().unwrap_or(0)
    }
}

pub fn median_of_histogram(hist: &BTreeMap<u64, u64>) -> u64 {
    let total: u64 = hist.values().sum();
    let target = total.div_ceil(2);
    let mut seen = 0;
    for (value, count) in hist {
        seen += count;
        if seen >= target {
            return *value;
        }
    }
    0
}

/// Parameters shared by every trajectory of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunParams {
    pub delta: f64,
    pub g: f64,
    pub schedule: StepsizeSchedule,
    pub iterations: usize,
}

impl RunParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidArgument(format!("radius {} must be finite and >= 0", self.delta)));
        }
        validate_g(self.g)?;
        self.schedule.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs one trajectory from `Q = 0`. Every feasible pair is updated each
/// iteration with a fresh estimate built from `Q_k`, in row-major order.
pub fn run(model: &MdpModel, params: &RunParams, rng: &mut RngStream, oracle: Option<&QTable>) -> Result<TrajectoryRecord> {
    params.validate()?;
    let gamma = model.gamma();
    let n_actions = model.n_actions();
    let pairs: Vec<(usize, usize)> = model.feasible_pairs().collect();

    let mut q = QTable::zeros(model);
    let mut next = q.clone();
    let mut v = vec![0.0; model.n_states()];
    let mut scratch = Scratch::default();

    let mut errors = oracle.map(|o| {
        let mut e = Vec::with_capacity(params.iterations + 1);
        e.push(q.sup_distance(o));
        e
    });
    let mut cum_draws = Vec::with_capacity(params.iterations + 1);
    cum_draws.push(0u64);
    let mut call_draws = BTreeMap::new();
    let mut total = 0u64;

    for k in 0..params.iterations {
        let alpha = params.schedule.alpha(k, gamma)?;
        q.state_values_into(&mut v);
        for &(s, a) in &pairs {
            let est = estimate_with_values(model, &v, s, a, params.delta, params.g, rng, &mut scratch)?;
            let idx = s * n_actions + a;
            next.values_mut()[idx] = (1.0 - alpha) * q.values()[idx] + alpha * est.value;
            total += est.draws;
            *call_draws.entry(est.draws).or_insert(0) += 1;
        }
        std::mem::swap(&mut q, &mut next);
        if !q.is_finite() {
            return Err(Error::NonFinite(format!("iterate {}", k + 1)));
        }
        cum_draws.push(total);
        if let (Some(e), Some(o)) = (errors.as_mut(), oracle) {
            e.push(q.sup_distance(o));
        }
    }
    Ok(TrajectoryRecord { errors, cum_draws, call_draws, final_q: q })
}

/// Runs `trajectories` independent trajectories; trajectory `i` uses stream
/// `i` of `seed`. Output order and content do not depend on thread count.
pub fn run_trajectories(
    model: &MdpModel,
    params: &RunParams,
    trajectories: usize,
    seed: u64,
    oracle: Option<&QTable>,
) -> Result<Vec<TrajectoryRecord>> {
    use rayon::prelude::*;
    if trajectories == 0 {
        return Err(Error::InvalidArgument("trajectory count must be at least 1".into()));
    }
    (0..trajectories as u64)
        .into_par_iter()
        .map(|i| run(model, params, &mut RngStream::new(seed, i), oracle))
        .collect()
}
