//! End-to-end checks on the bundled feeder. Prints one line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use common::{grid_minimum, max_abs_diff, random_control_problem, random_tree, single_line_problem};
use ddvc_core::bundled::{ieee37_config, ieee37_feeder, ieee37_scenario};
use ddvc_core::controller::solve_control;
use ddvc_core::estimator::{build_gamma, estimate, MeasurementWindow};
use ddvc_core::lindistflow::{build_sensitivities, predict_voltages};
use ddvc_core::plant::{NoiseModel, Plant};
use ddvc_core::scenario::{ControllerMode, SimulationTrace};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn noiseless_identifiability() -> Outcome {
    let feeder = ieee37_feeder();
    let start = Instant::now();
    let noise = NoiseModel { sigma_d: 0.01, sigma_m: 0.0, seed: 2024 };
    let mut plant = Plant::new(feeder.params.clone(), feeder.loads.clone(), noise).unwrap();
    plant.step_loads();
    let s = build_sensitivities(&feeder.topology, &feeder.params).unwrap();
    let (p, q) = plant.state.net_injections();
    let truth = predict_voltages(&s, &p, &q, 1.0).unwrap();
    let mut window = MeasurementWindow::new(1).unwrap();
    window.push(plant.measure(&truth)).unwrap();
    let est = estimate(&window, &feeder.topology, &feeder.params.alpha).unwrap();
    let elapsed = start.elapsed();
    let rel = est
        .x
        .iter()
        .zip(feeder.params.x.iter())
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    outcome(
        rel <= 1e-6 && elapsed < Duration::from_secs(1),
        format!("max relative error {rel:.2e} (<= 1e-6), {:.3} s (< 1 s)", secs(elapsed)),
    )
}

fn monte_carlo_criteria() -> (Outcome, Outcome) {
    let feeder = ieee37_feeder();
    let s = build_sensitivities(&feeder.topology, &feeder.params).unwrap();
    let mean_x = feeder.params.x.mean();
    let mean_big_x = s.x.mean();
    let scenario = ieee37_scenario(ieee37_config()).unwrap();

    let start = Instant::now();
    let m20 = scenario.run_monte_carlo(&[20], 100).unwrap();
    let elapsed = start.elapsed();
    let row = &m20.rows[0];
    let good = row
        .samples
        .iter()
        .filter(|r| r.mae_x <= 0.1 * mean_x && r.mae_x_matrix <= 0.1 * mean_big_x)
        .count();
    let accuracy = outcome(
        good >= 95 && row.failures == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{good}/100 replicas within 10% (mean MAE x {:.2e} vs mean x {mean_x:.2e}, mean MAE X {:.2e} vs mean X {mean_big_x:.2e}), {:.2} s (< 30 s)",
            row.mae_x_mean,
            row.mae_x_matrix_mean,
            secs(elapsed)
        ),
    );

    let table = scenario.run_monte_carlo(&[1, 5, 10, 20], 100).unwrap();
    let vars: Vec<f64> = table.rows.iter().map(|r| r.mae_x_var).collect();
    let decreasing = vars.windows(2).all(|w| w[1] < w[0]);
    let trend = outcome(
        decreasing,
        format!(
            "variance of MAE(x) for m = 1, 5, 10, 20: {}",
            vars.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(" > ")
        ),
    );
    (accuracy, trend)
}

fn run_mode(mode: ControllerMode) -> (SimulationTrace, Duration) {
    let mut cfg = ieee37_config();
    cfg.mode = mode;
    let start = Instant::now();
    let trace = ieee37_scenario(cfg).unwrap().run_closed_loop().unwrap();
    (trace, start.elapsed())
}

fn adaptive_recovery(est: &(SimulationTrace, Duration), frozen: &(SimulationTrace, Duration)) -> Outcome {
    let event = est.0.config.events[0].step;
    let complete = est.0.records.len() == est.0.config.horizon as usize
        && frozen.0.records.len() == frozen.0.config.horizon as usize;
    let last_bad = est
        .0
        .records
        .iter()
        .filter(|r| r.step >= event && r.band.violation_count > 0)
        .map(|r| r.step)
        .max();
    let recovered_by = last_bad.map_or(event, |s| s + 1);
    let recovered = recovered_by <= event + 25;
    let frozen_out = frozen
        .0
        .records
        .iter()
        .filter(|r| r.step >= event)
        .all(|r| r.band.violation_count > 0);
    let fast = est.1 < Duration::from_secs(10) && frozen.1 < Duration::from_secs(10);
    outcome(
        complete && recovered && frozen_out && fast,
        format!(
            "estimated model inside band from step {recovered_by} (deadline {}), frozen model outside band every step from {event}: {frozen_out}, {:.2} s / {:.2} s (< 10 s)",
            event + 25,
            secs(est.1),
            secs(frozen.1)
        ),
    )
}

fn capacity_saturation(est: &SimulationTrace) -> Outcome {
    let feeder = ieee37_feeder();
    let event = est.config.events[0].step;
    let ders = &est.der_buses;
    let mut saturated_every_step: Vec<bool> = vec![true; ders.len()];
    let mut ok_steps = 0;
    let post: Vec<_> = est.records.iter().filter(|r| r.step >= event).collect();
    for r in &post {
        let at_cap: Vec<bool> = ders.iter().map(|&b| r.q_g[b - 1] == feeder.ders.q_max[b - 1]).collect();
        let interior: Vec<bool> = ders
            .iter()
            .map(|&b| r.q_g[b - 1] > feeder.ders.q_min[b - 1] && r.q_g[b - 1] < feeder.ders.q_max[b - 1])
            .collect();
        for (s, &c) in saturated_every_step.iter_mut().zip(&at_cap) {
            *s &= c;
        }
        if at_cap.iter().any(|&c| c) && interior.iter().any(|&i| i) {
            ok_steps += 1;
        }
    }
    let pinned: Vec<usize> = ders
        .iter()
        .zip(&saturated_every_step)
        .filter(|(_, &s)| s)
        .map(|(&b, _)| b)
        .collect();
    outcome(
        !pinned.is_empty() && ok_steps == post.len(),
        format!(
            "DER at bus {pinned:?} at capacity on every post-event step; another DER interior on {ok_steps}/{} steps",
            post.len()
        ),
    )
}

fn controller_oracle() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    for q_max in [0.2, 0.03] {
        let prob = single_line_problem(q_max);
        let sp = solve_control(&prob).unwrap();
        let (_, grid) = grid_minimum(&prob, 1e-5);
        worst_gap = worst_gap.max((sp.objective - grid).abs());
    }
    let mut violations = 0;
    let mut failures = 0;
    for seed in 0..1000 {
        let prob = random_control_problem(seed);
        match solve_control(&prob) {
            Ok(sp) => {
                let d = &prob.ders;
                for i in 0..prob.p_d.len() {
                    if sp.p_g[i] < d.p_min[i]
                        || sp.p_g[i] > d.p_max[i]
                        || sp.q_g[i] < d.q_min[i]
                        || sp.q_g[i] > d.q_max[i]
                    {
                        violations += 1;
                    }
                }
            }
            Err(_) => failures += 1,
        }
    }
    outcome(
        worst_gap <= 1e-4 && violations == 0 && failures == 0,
        format!(
            "LP vs grid objective gap {worst_gap:.2e} (<= 1e-4); capacity violations {violations}, solver failures {failures} in 1000 random problems"
        ),
    )
}

fn model_gap(runs: &[&SimulationTrace]) -> Outcome {
    let gap = runs
        .iter()
        .flat_map(|t| t.records.iter())
        .map(|r| r.model_gap)
        .fold(0.0, f64::max);
    let sweeps = runs.iter().flat_map(|t| t.records.iter()).map(|r| r.sweeps).max().unwrap_or(0);
    outcome(
        gap <= 0.01 && sweeps <= 20,
        format!("max |u_plant - u_linear| = {gap:.4} (<= 0.01), max sweeps {sweeps} (<= 20)"),
    )
}

fn structural_identities() -> Outcome {
    let mut failures = Vec::new();
    for case in 0..100u64 {
        let n = 1 + (case as usize * 7) % 40;
        let t = random_tree(n, 0x5eed + case);
        let m_inv = t.topology.incidence_inverse();
        let path_ok = (1..=n).all(|bus| {
            let path = t.walk_path(bus);
            (0..n).all(|l| m_inv[(l, bus - 1)] == if path.contains(&l) { -1.0 } else { 0.0 })
        });
        let s = build_sensitivities(&t.topology, &t.params).unwrap();
        let common_ok = max_abs_diff(&s.r, &t.common_path_matrix(&t.params.r)) < 1e-12
            && max_abs_diff(&s.x, &t.common_path_matrix(&t.params.x)) < 1e-12;
        let mut sum = DMatrix::zeros(n, n);
        for l in 0..n {
            sum += build_gamma(&t.topology, l).unwrap() * t.params.x[l];
        }
        let gamma_ok = max_abs_diff(&sum, &s.x) < 1e-12;
        let spd_ok = [&s.r, &s.x]
            .iter()
            .all(|m| **m == m.transpose() && (*m).clone().cholesky().is_some());
        if !(path_ok && common_ok && gamma_ok && spd_ok) {
            failures.push(format!(
                "tree {case} (N={n}): path {path_ok} common {common_ok} gamma {gamma_ok} spd {spd_ok}"
            ));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "path sets, common-path formula, gamma reconstruction and SPD hold on 100 random trees (N <= 40)".into()
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    results.push(("noiseless identifiability", noiseless_identifiability()));
    let (accuracy, trend) = monte_carlo_criteria();
    results.push(("noisy accuracy", accuracy));
    results.push(("variance trend", trend));
    let est = run_mode(ControllerMode::EstimatedModel);
    let frozen = run_mode(ControllerMode::FrozenTrueModel);
    let idle = run_mode(ControllerMode::NoControl);
    results.push(("adaptive recovery", adaptive_recovery(&est, &frozen)));
    results.push(("capacity saturation", capacity_saturation(&est.0)));
    results.push(("controller oracle", controller_oracle()));
    results.push(("model gap", model_gap(&[&est.0, &frozen.0, &idle.0])));
    results.push(("structural identities", structural_identities()));

    let mut all = true;
    for (i, (name, o)) in results.iter().enumerate() {
        all &= o.pass;
        println!(
            "criterion {} {:<26} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
