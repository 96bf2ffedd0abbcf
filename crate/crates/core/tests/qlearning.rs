mod common;

use drq_core::{
    aggregate, make_hard_mdp, make_inventory_mdp, run, run_trajectories, solve_q_star, HardMdpParams, InventoryParams,
    RngStream, RunParams, StepsizeSchedule,
};

use common::*;

fn params(delta: f64, iterations: usize) -> RunParams {
    RunParams { delta, g: 0.625, schedule: StepsizeSchedule::default_rescaled_linear(), iterations }
}

#[test]
fn batches_are_bit_identical_across_runs() {
    let model = make_hard_mdp(&HardMdpParams::new(0.7)).unwrap();
    let (q_star, _) = solve_q_star(&model, 0.1, 1e-10).unwrap();
    let a = run_trajectories(&model, &params(0.1, 200), 4, 9, Some(&q_star)).unwrap();
    let b = run_trajectories(&model, &params(0.1, 200), 4, 9, Some(&q_star)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.errors.as_ref().unwrap()), bits(y.errors.as_ref().unwrap()));
        assert_eq!(x.cum_draws, y.cum_draws);
        assert_eq!(x.call_draws, y.call_draws);
        assert_eq!(bits(x.final_q.values()), bits(y.final_q.values()));
    }
}

#[test]
fn trajectories_use_separate_streams() {
    let model = make_hard_mdp(&HardMdpParams::new(0.7)).unwrap();
    let recs = run_trajectories(&model, &params(0.1, 50), 2, 3, None).unwrap();
    assert_ne!(recs[0].final_q.values(), recs[1].final_q.values());
    assert_ne!(recs[0].cum_draws, recs[1].cum_draws);
    assert!(recs.iter().all(|r| r.errors.is_none()));

    let single = run(&model, &params(0.1, 50), &mut RngStream::new(3, 1), None).unwrap();
    assert_eq!(single.final_q.values(), recs[1].final_q.values());
}

#[test]
fn error_record_starts_at_the_oracle_norm() {
    let model = make_inventory_mdp(&InventoryParams::default()).unwrap();
    let (q_star, _) = solve_q_star(&model, 0.5, 1e-10).unwrap();
    let rec = run(&model, &params(0.5, 3), &mut RngStream::new(0, 0), Some(&q_star)).unwrap();
    let errors = rec.errors.unwrap();
    assert_eq!(errors.len(), 4);
    assert_eq!(errors[0], q_star.sup_norm());
    assert_eq!(rec.cum_draws[0], 0);
    assert!(rec.cum_draws.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn full_benchmark_runs_stay_finite() {
    let hard = make_hard_mdp(&HardMdpParams::new(0.9)).unwrap();
    let (qh, _) = solve_q_star(&hard, 0.1, 1e-10).unwrap();
    let inv = make_inventory_mdp(&InventoryParams::default()).unwrap();
    let (qi, _) = solve_q_star(&inv, 0.5, 1e-10).unwrap();
    for (model, q_star, delta, t) in [(&hard, &qh, 0.1, 5000), (&inv, &qi, 0.5, 2000)] {
        for schedule in [StepsizeSchedule::default_rescaled_linear(), StepsizeSchedule::constant(0.008).unwrap()] {
            let p = RunParams { delta, g: 0.625, schedule, iterations: t };
            let recs = run_trajectories(model, &p, 2, 5, Some(q_star)).unwrap();
            for r in &recs {
                assert!(r.final_q.is_finite());
                assert!(r.errors.as_ref().unwrap().iter().all(|e| e.is_finite()));
            }
        }
    }
}

#[test]
fn zero_radius_converges_to_classical_fixed_point() {
    let mut r = rng(51);
    for i in 0..5 {
        let model = random_model(&mut r);
        let classical = classical_q_table(&model, 1e-10);
        let recs = run_trajectories(&model, &params(0.0, 3000), 10, 60 + i, Some(&classical)).unwrap();
        let curve = aggregate(&recs).unwrap();
        let limit = 0.05 * model.r_max() / (1.0 - model.gamma());
        assert!(curve.mean_error[3000] < limit, "model {i}: {} >= {limit}", curve.mean_error[3000]);
    }
}

#[test]
fn mean_error_decreases_after_burn_in() {
    let model = make_hard_mdp(&HardMdpParams::new(0.7)).unwrap();
    let (q_star, _) = solve_q_star(&model, 0.1, 1e-10).unwrap();
    let recs = run_trajectories(&model, &params(0.1, 2000), 20, 8, Some(&q_star)).unwrap();
    let curve = aggregate(&recs).unwrap();
    let blocks: Vec<f64> = (1..5).map(|b| curve.mean_error[b * 400..(b + 1) * 400].iter().sum::<f64>() / 400.0).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");
}
