//! Property tests of the public API against test-local reference
//! computations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safe_lsoc::compose::{composite_control, composition_weights, position_kernel, state_weights};
use safe_lsoc::harness::{parse_trajectory_csv, run_task, trajectory_csv, RunMode};
use safe_lsoc::lsoc::{estimate_desirability, estimate_optimal_control, rollout_batch, BatchNoise, LsocProblem, StateClass};
use safe_lsoc::mas::{assemble_joint, build_subsystems, extract_block, AgentGraph};
use safe_lsoc::scenarios::Scenario;
use safe_lsoc::sde::{derive_control_weight, ControlAffineDynamics, NoiseStream};
use safe_lsoc::zcbf::{safety_filter, AffineConstraint, ConstraintId};

fn constraint(angle: f64, offset: f64, anchor: [f64; 2], k: usize) -> AffineConstraint {
    let a = [angle.cos(), angle.sin()];
    let b = a[0] * anchor[0] + a[1] * anchor[1] - offset;
    AffineConstraint::new(DVector::from_vec(a.to_vec()), b, ConstraintId { obstacle: k, level: 1 }).unwrap()
}

/// KKT conditions of `min ½‖v − u‖²` s.t. `aᵢᵀv ≥ bᵢ`: `v − u = Σ μᵢ aᵢ`
/// with `μ ≥ 0` on active constraints only. For up to two active
/// constraints in the plane the multipliers are solved directly.
fn kkt_residual(u: [f64; 2], v: [f64; 2], cons: &[AffineConstraint]) -> f64 {
    let active: Vec<&AffineConstraint> = cons.iter().filter(|c| (c.a[0] * v[0] + c.a[1] * v[1] - c.b).abs() < 1e-9).collect();
    let r = [v[0] - u[0], v[1] - u[1]];
    match active.len() {
        0 => r[0].hypot(r[1]),
        1 => {
            let a = &active[0].a;
            let mu = r[0] * a[0] + r[1] * a[1];
            let res = (r[0] - mu * a[0]).hypot(r[1] - mu * a[1]);
            res + (-mu).max(0.0)
        }
        _ => {
            // best nonnegative combination over active pairs
            let mut best = f64::INFINITY;
            for i in 0..active.len() {
                for j in i + 1..active.len() {
                    let (p, q) = (&active[i].a, &active[j].a);
                    let det = p[0] * q[1] - p[1] * q[0];
                    if det.abs() < 1e-12 {
                        continue;
                    }
                    let mi = (r[0] * q[1] - r[1] * q[0]) / det;
                    let mj = (p[0] * r[1] - p[1] * r[0]) / det;
                    best = best.min((-mi).max(0.0) + (-mj).max(0.0));
                }
                let a = &active[i].a;
                let mu = r[0] * a[0] + r[1] * a[1];
                best = best.min((r[0] - mu * a[0]).hypot(r[1] - mu * a[1]) + (-mu).max(0.0));
            }
            best
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn filter_output_is_feasible_and_optimal(
        u in prop::array::uniform2(-3.0f64..3.0),
        anchor in prop::array::uniform2(-1.0f64..1.0),
        specs in prop::collection::vec((0.0f64..std::f64::consts::TAU, 0.0f64..0.5), 1..=3),
    ) {
        let cons: Vec<AffineConstraint> = specs.iter().enumerate().map(|(k, (th, off))| constraint(*th, *off, anchor, k)).collect();
        let v = safety_filter(&DVector::from_vec(u.to_vec()), &cons).unwrap();
        for c in &cons {
            prop_assert!(c.a[0] * v[0] + c.a[1] * v[1] - c.b >= -1e-9);
        }
        prop_assert!(kkt_residual(u, [v[0], v[1]], &cons) <= 1e-7);
    }

    #[test]
    fn feasible_controls_pass_through(u in prop::array::uniform2(-3.0f64..3.0), th in 0.0f64..std::f64::consts::TAU) {
        let c = constraint(th, 0.1, u, 0);
        let v = safety_filter(&DVector::from_vec(u.to_vec()), &[c]).unwrap();
        prop_assert_eq!([v[0], v[1]], u);
    }

    #[test]
    fn mixing_weights_form_a_distribution(
        offsets in prop::collection::vec(prop::array::uniform2(-10.0f64..10.0), 1..6),
        log_z in prop::collection::vec(-200.0f64..0.0, 6),
        shift in -100.0f64..100.0,
        width in 0.001f64..0.5,
    ) {
        let t = DVector::from_vec(vec![35.0, 21.0, 2.0, 0.0]);
        let targets: Vec<DVector<f64>> = offsets.iter().map(|o| DVector::from_vec(vec![35.0 + o[0], 21.0 + o[1], 2.0, 0.0])).collect();
        let f = targets.len();
        if let Ok(cw) = composition_weights(&targets, &t, &position_kernel(4, &[0, 1], width)) {
            prop_assert!((cw.normalized.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let w = state_weights(&cw, &log_z[..f]).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            let shifted: Vec<f64> = log_z[..f].iter().map(|l| l + shift).collect();
            let w2 = state_weights(&cw, &shifted).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let controls: Vec<DVector<f64>> = (0..f).map(|k| DVector::from_vec(vec![k as f64, -(k as f64)])).collect();
            let u = composite_control(&w, &controls).unwrap();
            prop_assert!(u[0] >= -1e-12 && u[0] <= (f - 1) as f64 + 1e-12);
            prop_assert!((u[0] + u[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn control_weight_cancels_noise(d in prop::array::uniform2(0.01f64..2.0), off in -1.0f64..1.0, lambda in 0.001f64..10.0) {
        let sigma = DMatrix::from_row_slice(2, 2, &[d[0], 0.0, off, d[1]]);
        let r = derive_control_weight(&sigma, lambda).unwrap();
        let prod = r.try_inverse().unwrap() * lambda;
        let cov = &sigma * sigma.transpose();
        prop_assert!((prod - &cov).abs().max() <= 1e-9 * cov.abs().max().max(1.0));
    }

    #[test]
    fn joint_states_round_trip(n in 2usize..7, raw_edges in prop::collection::vec((0usize..7, 0usize..7), 0..10)) {
        let edges: Vec<(usize, usize)> = raw_edges.into_iter().filter(|(a, b)| a < &n && b < &n && a != b).collect();
        let graph = AgentGraph::new(n, &edges).unwrap();
        let states: Vec<DVector<f64>> = (0..n).map(|i| DVector::from_vec(vec![i as f64, 10.0 + i as f64, 2.0, 0.1 * i as f64])).collect();
        for sub in build_subsystems(&graph, 4, 2) {
            prop_assert_eq!(sub.members[0], sub.central);
            let joint = assemble_joint(&sub, &states).unwrap();
            for (slot, id) in sub.members.iter().enumerate() {
                prop_assert_eq!(&extract_block(&joint, &sub, slot).unwrap(), &states[*id]);
            }
        }
    }

    #[test]
    fn noise_streams_are_keyed(seed in any::<u64>(), id in any::<u64>()) {
        let mut a = NoiseStream::new(seed, id);
        let mut b = NoiseStream::new(seed, id);
        let mut c = NoiseStream::new(seed, id.wrapping_add(1));
        let (mut xa, mut xb, mut xc) = ([0.0; 8], [0.0; 8], [0.0; 8]);
        a.fill_increments(0.05, &mut xa);
        b.fill_increments(0.05, &mut xb);
        c.fill_increments(0.05, &mut xc);
        prop_assert_eq!(xa, xb);
        prop_assert_ne!(xa, xc);
    }
}

/// Brownian motion over a fixed horizon with linear final cost `aᵀx`:
/// `Z = exp(-aᵀx/λ + ‖a‖²T/(2λ²))` and `u* = ∇log Z = -a/λ` for `σ = I`.
#[test]
fn estimator_matches_gaussian_closed_form() {
    let a = [0.5, -0.25];
    let dynamics = ControlAffineDynamics::new(2, 2, |_| DVector::zeros(2), |_| DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
    let problem = LsocProblem::new(
        Arc::new(dynamics),
        Arc::new(|_| 0.0),
        DMatrix::identity(2, 2),
        1.0,
        Arc::new(move |x: &[f64]| a[0] * x[0] + a[1] * x[1]),
        Arc::new(|_| StateClass::Interior),
    )
    .unwrap();
    let (dt, horizon) = (0.01, 100);
    let x0 = [0.3, -0.2];
    let t = dt * horizon as f64;
    let z = (-(a[0] * x0[0] + a[1] * x0[1]) + (a[0] * a[0] + a[1] * a[1]) * t / 2.0).exp();
    let batch = rollout_batch(&problem, &x0, dt, horizon, 50_000, BatchNoise { seed: 11, step: 0, agent: 0 }, false).unwrap();
    let z_pi = estimate_desirability(&batch, 1.0).unwrap();
    assert!((z_pi - z).abs() / z < 0.02, "{z_pi} vs {z}");
    // std of each control component is about 1/√(dt·ESS) ≈ 0.05 here
    let u = estimate_optimal_control(&batch, 1.0, dt).unwrap().control;
    assert!((u[0] + a[0]).abs() < 0.2 && (u[1] + a[1]).abs() < 0.2, "{u}");
}

#[test]
fn exported_csv_round_trips_bitwise() {
    let mut file = Scenario::bundled("single_uav").unwrap().file;
    file.sim.max_time = 0.5;
    let s = Scenario::from_file(file).unwrap();
    let r = run_task(&s, RunMode::Filtered, 2).unwrap();
    let rows = parse_trajectory_csv(&trajectory_csv(&r)).unwrap();
    let traj = &r.trajectories[0];
    assert_eq!(rows.len(), traj.states.len());
    for (row, (s, t)) in rows.iter().zip(traj.states.iter().zip(&traj.times)) {
        assert_eq!(row.t, *t);
        assert_eq!(&row.state[..3], &s.as_slice()[..3]);
    }
    for (row, u) in rows.iter().zip(&traj.controls) {
        assert_eq!(row.applied, Some([u[0], u[1]]));
    }
    assert_eq!(r.recompute_metrics(), r.metrics);
}

#[test]
fn baseline_and_filtered_share_noise_until_the_filter_acts() {
    let mut file = Scenario::bundled("single_uav").unwrap().file;
    file.sim.max_time = 0.25;
    file.obstacles.clear();
    let s = Scenario::from_file(file).unwrap();
    let a = run_task(&s, RunMode::Baseline, 9).unwrap();
    let b = run_task(&s, RunMode::Filtered, 9).unwrap();
    assert_eq!(b.metrics.filter_activations, 0);
    assert_eq!(a.trajectories[0].states, b.trajectories[0].states);
}
