mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{max_abs_diff, random_tree};
use ddvc_core::estimator::{assemble_regression, build_gamma, estimate, pseudo_inverse_solve, MeasurementWindow};
use ddvc_core::lindistflow::{build_sensitivities, predict_voltages};
use ddvc_core::network::{line_flows, DerFleet, Feeder, LoadProfile};
use ddvc_core::plant::MeasurementSnapshot;

fn trees() -> impl Strategy<Value = (usize, u64)> {
    (1usize..=40, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn inverse_incidence_marks_root_paths((n, seed) in trees()) {
        let t = random_tree(n, seed);
        let m_inv = t.topology.incidence_inverse();
        for bus in 1..=n {
            let path = t.walk_path(bus);
            let mut listed = t.topology.path_set(bus).to_vec();
            listed.sort_unstable();
            let mut walked = path.clone();
            walked.sort_unstable();
            prop_assert_eq!(&listed, &walked);
            for l in 0..n {
                let expected = if path.contains(&l) { -1.0 } else { 0.0 };
                prop_assert_eq!(m_inv[(l, bus - 1)], expected);
            }
        }
        let id = t.topology.incidence() * m_inv;
        prop_assert!(max_abs_diff(&id, &DMatrix::identity(n, n)) < 1e-12);
    }

    #[test]
    fn sensitivities_follow_common_paths((n, seed) in trees()) {
        let t = random_tree(n, seed);
        let s = build_sensitivities(&t.topology, &t.params).unwrap();
        prop_assert!(max_abs_diff(&s.r, &t.common_path_matrix(&t.params.r)) < 1e-12);
        prop_assert!(max_abs_diff(&s.x, &t.common_path_matrix(&t.params.x)) < 1e-12);
    }

    #[test]
    fn gamma_blocks_rebuild_x((n, seed) in trees()) {
        let t = random_tree(n, seed);
        let s = build_sensitivities(&t.topology, &t.params).unwrap();
        let mut sum = DMatrix::zeros(n, n);
        for l in 0..n {
            let g = build_gamma(&t.topology, l).unwrap();
            prop_assert_eq!(g.rank(1e-9), 1);
            sum += g * t.params.x[l];
        }
        prop_assert!(max_abs_diff(&sum, &s.x) < 1e-12);
    }

    #[test]
    fn sensitivities_are_spd((n, seed) in trees()) {
        let t = random_tree(n, seed);
        let s = build_sensitivities(&t.topology, &t.params).unwrap();
        for m in [&s.r, &s.x] {
            prop_assert_eq!(m, &m.transpose());
            prop_assert!(m.clone().cholesky().is_some());
            prop_assert!(m.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn flows_conserve_power((n, seed) in trees(), load_seed in any::<u64>()) {
        let t = random_tree(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(load_seed);
        let p = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let f = line_flows(&t.topology, &p).unwrap();
        let back = t.topology.incidence() * &f;
        prop_assert!((back - &p).amax() < 1e-12);
        // a line carries minus the injection of everything below it
        for bus in 1..=n {
            let l = t.topology.parent_line(bus);
            let below: f64 = (1..=n)
                .filter(|&b| t.walk_path(b).contains(&l))
                .map(|b| p[b - 1])
                .sum();
            prop_assert!((f[l] + below).abs() < 1e-12);
        }
    }

    #[test]
    fn feeder_file_round_trips((n, seed) in trees()) {
        let t = random_tree(n, seed);
        let feeder = Feeder {
            name: format!("tree-{seed}"),
            base_kv: 4.8,
            base_mva: 2.5,
            topology: t.topology.clone(),
            params: t.params.clone(),
            loads: LoadProfile {
                p_d0: DVector::from_element(n, 0.01),
                q_d0: DVector::from_element(n, 0.005),
            },
            ders: DerFleet::empty(n),
        };
        let back = Feeder::from_json(&feeder.to_json()).unwrap();
        prop_assert_eq!(back.to_file_format(), feeder.to_file_format());
        let s0 = build_sensitivities(&feeder.topology, &feeder.params).unwrap();
        let s1 = build_sensitivities(&back.topology, &back.params).unwrap();
        prop_assert_eq!(s0.x, s1.x);
    }

    #[test]
    fn more_load_never_raises_voltage((n, seed) in trees(), bus in 0usize..40, extra in 0.0f64..0.5) {
        let t = random_tree(n, seed);
        let s = build_sensitivities(&t.topology, &t.params).unwrap();
        let p = DVector::from_element(n, -0.01);
        let q = DVector::from_element(n, -0.005);
        let base = predict_voltages(&s, &p, &q, 1.0).unwrap();
        let mut p2 = p.clone();
        p2[bus % n] -= extra;
        let loaded = predict_voltages(&s, &p2, &q, 1.0).unwrap();
        prop_assert!(loaded.u.iter().zip(base.u.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn pinv_agrees_with_normal_equations(rows in 5usize..30, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0));
        let ata = a.transpose() * &a;
        prop_assume!(ata.symmetric_eigenvalues().min() > 1e-3);
        let normal = ata.cholesky().unwrap().solve(&(a.transpose() * &b));
        let ls = pseudo_inverse_solve(&a, &b, 1e-8).unwrap();
        prop_assert_eq!(ls.effective_rank, cols);
        prop_assert!((ls.solution - normal).amax() < 1e-8);
    }

    #[test]
    fn one_noiseless_snapshot_identifies_x((n, seed) in trees(), load_seed in any::<u64>()) {
        let t = random_tree(n, seed);
        let s = build_sensitivities(&t.topology, &t.params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(load_seed);
        let p = DVector::from_fn(n, |_, _| -rng.gen_range(0.01..0.1));
        let q = DVector::from_fn(n, |_, _| -rng.gen_range(0.005..0.05));
        let u = predict_voltages(&s, &p, &q, 1.0).unwrap();
        let mut w = MeasurementWindow::new(1).unwrap();
        w.push(MeasurementSnapshot { step: 1, u0: 1.0, u: u.u, p, q }).unwrap();
        let est = estimate(&w, &t.topology, &t.params.alpha).unwrap();
        prop_assert_eq!(est.effective_rank, n);
        for (a, b) in est.x.iter().zip(t.params.x.iter()) {
            prop_assert!(((a - b) / b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }
}

#[test]
fn deep_tree_regression_is_solved_accurately() {
    let n = 33;
    let t = random_tree(n, 15378524232281971882);
    let s = build_sensitivities(&t.topology, &t.params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10723746858289510067);
    let p = DVector::from_fn(n, |_, _| -rng.gen_range(0.01..0.1));
    let q = DVector::from_fn(n, |_, _| -rng.gen_range(0.005..0.05));
    let u = predict_voltages(&s, &p, &q, 1.0).unwrap();
    let mut w = MeasurementWindow::new(1).unwrap();
    w.push(MeasurementSnapshot { step: 1, u0: 1.0, u: u.u, p, q }).unwrap();
    let sys = assemble_regression(&w, &t.topology, &t.params.alpha).unwrap();
    let ls = pseudo_inverse_solve(&sys.design, &sys.response, 1e-8).unwrap();
    assert!((&sys.design * &ls.solution - &sys.response).amax() < 1e-12);
    assert!((ls.solution - &t.params.x).amax() < 1e-10);
}
