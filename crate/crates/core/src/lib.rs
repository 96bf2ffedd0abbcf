//! Tabular distributionally robust Q-learning.
//!
//! The robust Bellman operator replaces each expectation with a worst case
//! over a KL ball of radius `delta` around the nominal reward and transition
//! laws. [`dual`] evaluates that worst case through its scalar dual,
//! [`oracle`] applies the exact operator to a known model, [`mlmc`] builds an
//! unbiased sample-based estimate of it with a geometric number of draws, and
//! [`qlearning`] runs the synchronous stochastic-approximation loop on top.
//! [`env`] provides the benchmark MDPs and [`experiment`] the statistics used
//! to check convergence rates.

pub mod dual;
pub mod env;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod mlmc;
pub mod oracle;
pub mod qlearning;

pub use dual::{dual_objective, primal_oracle, solve_dual, DualProblem, DualSolution};
pub use env::{make_hard_mdp, make_inventory_mdp, HardMdpParams, InventoryParams};
pub use error::{Error, Result};
pub use experiment::{aggregate, run_batch, AggregateCurve, EnvironmentSpec, ExperimentConfig};
pub use mdp::{check_small_radius, min_support_probability, sample, Categorical, MdpModel, RngStream};
pub use mlmc::{delta_correction, draw_level, estimate_bellman, BellmanEstimate, GeometricLevel, MlmcSample};
pub use oracle::{exact_bellman, greedy_policy, solve_q_star, FixedPointReport, QTable};
pub use qlearning::{run, run_trajectories, RunParams, StepsizeSchedule, TrajectoryRecord};
