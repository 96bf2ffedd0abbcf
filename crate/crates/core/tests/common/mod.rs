#![allow(dead_code)]

use drq_core::mdp::ModelFile;
use drq_core::{Categorical, DualProblem, MdpModel, QTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Classical (non-robust) value iteration on the dense file representation,
/// written without any of the library's operators.
pub fn classical_q_star(model: &MdpModel, tol: f64) -> Vec<Option<f64>> {
    let f: ModelFile = model.to_file();
    let (ns, na, gamma) = (f.n_states, f.n_actions, f.gamma);
    let mean_reward: Vec<Option<f64>> = f
        .rewards
        .iter()
        .map(|r| r.as_ref().map(|r| r.values.iter().zip(&r.probs).map(|(v, p)| v * p).sum()))
        .collect();
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .filter(|a| f.transitions[s * na + a].is_some())
                    .map(|a| q[s * na + a])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut next = vec![0.0; ns * na];
        let mut diff: f64 = 0.0;
        for i in 0..ns * na {
            if let (Some(p), Some(r)) = (&f.transitions[i], mean_reward[i]) {
                next[i] = r + gamma * p.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                diff = diff.max((next[i] - q[i]).abs());
            }
        }
        q = next;
        if diff <= tol * (1.0 - gamma) / gamma {
            break;
        }
    }
    (0..ns * na).map(|i| f.transitions[i].as_ref().map(|_| q[i])).collect()
}

pub fn classical_q_table(model: &MdpModel, tol: f64) -> QTable {
    let flat = classical_q_star(model, tol);
    let na = model.n_actions();
    QTable::from_fn(model, |s, a| flat[s * na + a].unwrap())
}

pub fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

pub fn random_dual_problem(rng: &mut ChaCha8Rng, max_support: usize, delta: f64) -> DualProblem {
    let n = rng.gen_range(1..=max_support);
    let mu = Categorical::from_probs(random_probs(rng, n)).unwrap();
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    DualProblem::new(mu, u, delta).unwrap()
}

/// Random model with a few states and actions; some transition entries are
/// zeroed and roughly one pair in six is infeasible.
pub fn random_model(rng: &mut ChaCha8Rng) -> MdpModel {
    let ns = rng.gen_range(1..=5);
    let na = rng.gen_range(1..=3);
    let gamma = rng.gen_range(0.3..0.95);
    let mut transitions = Vec::new();
    let mut rewards = Vec::new();
    let mut feasible = Vec::new();
    for _ in 0..ns {
        let mut acts = Vec::new();
        for a in 0..na {
            if a > 0 && rng.gen_bool(1.0 / 6.0) {
                transitions.push(None);
                rewards.push(None);
                continue;
            }
            acts.push(a);
            let mut p = random_probs(rng, ns);
            if ns > 1 {
                let z = rng.gen_range(0..ns);
                p[z] = 0.0;
                let t: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= t);
            }
            transitions.push(Some(Categorical::from_probs(p).unwrap()));
            let k = rng.gen_range(1..=3);
            let values: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..5.0)).collect();
            rewards.push(Some(Categorical::with_values((0..k).collect(), random_probs(rng, k), values).unwrap()));
        }
        feasible.push(acts);
    }
    MdpModel::new(ns, na, gamma, transitions, rewards, feasible).unwrap()
}

pub fn random_q(rng: &mut ChaCha8Rng, model: &MdpModel, scale: f64) -> QTable {
    QTable::from_fn(model, |_, _| rng.gen_range(-scale..scale))
}

/// Compensated (Neumaier) sum.
pub fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = exact_sum(xs.iter().copied()) / n;
    let var = exact_sum(xs.iter().map(|x| (x - mean).powi(2))) / (n - 1.0);
    (mean, (var / n).sqrt())
}
