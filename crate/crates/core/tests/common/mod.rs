#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddvc_core::network::{FeederTopology, Line, LineParameters};

/// Random radial feeder with shuffled bus labels and line order.
pub struct RandomTree {
    pub topology: FeederTopology,
    pub params: LineParameters,
    /// `parent[i - 1]` is the upstream neighbour of bus `i`.
    pub parent: Vec<usize>,
}

pub fn random_tree(n: usize, seed: u64) -> RandomTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (1..=n).collect();
    labels.shuffle(&mut rng);
    let label = |k: usize| if k == 0 { 0 } else { labels[k - 1] };

    let mut lines = Vec::with_capacity(n);
    let mut parent = vec![0; n];
    for k in 1..=n {
        let up = rng.gen_range(0..k);
        lines.push(Line { from: label(up), to: label(k) });
        parent[label(k) - 1] = label(up);
    }
    lines.shuffle(&mut rng);
    let topology = FeederTopology::new(n, lines).expect("generated tree is radial");
    let x = DVector::from_fn(n, |_, _| rng.gen_range(0.005..0.5));
    let alpha = DVector::from_fn(n, |_, _| rng.gen_range(0.2..3.0));
    let params = LineParameters::from_reactance(x, alpha).unwrap();
    RandomTree { topology, params, parent }
}

impl RandomTree {
    /// Lines from the substation to `bus`, found by walking parent pointers.
    pub fn walk_path(&self, bus: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut b = bus;
        while b != 0 {
            let up = self.parent[b - 1];
            out.push(self.topology.find_line(up, b).unwrap());
            b = up;
        }
        out
    }

    /// `2 * sum of v over the common root path of i and j`.
    pub fn common_path_matrix(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.topology.bus_count();
        let paths: Vec<Vec<usize>> = (1..=n).map(|b| self.walk_path(b)).collect();
        DMatrix::from_fn(n, n, |i, j| {
            2.0 * paths[i].iter().filter(|l| paths[j].contains(l)).map(|&l| v[l]).sum::<f64>()
        })
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

use ddvc_core::controller::ControlProblem;
use ddvc_core::lindistflow::{build_sensitivities, SensitivityMatrices};
use ddvc_core::network::DerFleet;

/// The one-bus problem: R = 0.4, X = 0.8, demand (0.15, 0.1), lower band 0.95.
pub fn single_line_problem(q_max: f64) -> ControlProblem {
    ControlProblem {
        sensitivities: SensitivityMatrices {
            r: DMatrix::from_element(1, 1, 0.4),
            x: DMatrix::from_element(1, 1, 0.8),
        },
        p_d: DVector::from_element(1, 0.15),
        q_d: DVector::from_element(1, 0.1),
        u0: 1.0,
        ders: DerFleet {
            p_min: DVector::zeros(1),
            p_max: DVector::zeros(1),
            q_min: DVector::zeros(1),
            q_max: DVector::from_element(1, q_max),
        },
        u_lo: DVector::from_element(1, 0.95f64.powi(2)),
        u_hi: DVector::from_element(1, 1.05f64.powi(2)),
        f_max: DVector::from_element(1, f64::INFINITY),
        incidence_inv: DMatrix::from_element(1, 1, -1.0),
        gamma: 1000.0,
    }
}

/// Hinge objective of the single-line problem at reactive injection `q`.
pub fn single_line_objective(prob: &ControlProblem, q: f64) -> f64 {
    let u = prob.u0 - prob.sensitivities.r[(0, 0)] * prob.p_d[0]
        + prob.sensitivities.x[(0, 0)] * (q - prob.q_d[0]);
    q + prob.gamma * ((prob.u_lo[0] - u).max(0.0) + (u - prob.u_hi[0]).max(0.0))
}

/// Grid search over `[q_min, q_max]` with the given step.
pub fn grid_minimum(prob: &ControlProblem, step: f64) -> (f64, f64) {
    let (lo, hi) = (prob.ders.q_min[0], prob.ders.q_max[0]);
    let count = ((hi - lo) / step).round() as usize;
    (0..=count)
        .map(|k| (lo + step * k as f64).min(hi))
        .map(|q| (q, single_line_objective(prob, q)))
        .fold((f64::NAN, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
}

/// Random feasible dispatch problem on a random tree with up to 12 buses.
pub fn random_control_problem(seed: u64) -> ControlProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=12);
    let tree = random_tree(n, rng.gen());
    let s = build_sensitivities(&tree.topology, &tree.params).unwrap();
    let mut ders = DerFleet::empty(n);
    for i in 0..n {
        if rng.gen_bool(0.5) {
            let q_lo = if rng.gen_bool(0.5) { 0.0 } else { -rng.gen_range(0.0..0.1) };
            ders.q_min[i] = q_lo;
            ders.q_max[i] = q_lo + rng.gen_range(0.0..0.2);
            if rng.gen_bool(0.3) {
                ders.p_max[i] = rng.gen_range(0.0..0.1);
            }
        }
    }
    ControlProblem {
        sensitivities: s,
        p_d: DVector::from_fn(n, |_, _| rng.gen_range(-0.02..0.1)),
        q_d: DVector::from_fn(n, |_, _| rng.gen_range(-0.02..0.05)),
        u0: rng.gen_range(0.95..1.05),
        ders,
        u_lo: DVector::from_element(n, 0.95f64.powi(2)),
        u_hi: DVector::from_element(n, 1.05f64.powi(2)),
        f_max: DVector::from_element(n, f64::INFINITY),
        incidence_inv: tree.topology.incidence_inverse().clone(),
        gamma: rng.gen_range(0.0..2000.0),
    }
}
