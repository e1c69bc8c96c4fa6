//! DER dispatch against a linear voltage model.
//!
//! The hinge penalty on band violations is written with nonnegative slacks,
//! which turns the convex program into an LP:
//!
//! ```text
//! min  1'p_g + 1'q_g + gamma 1'(s_lo + s_hi)
//! s.t. u = u0 1 + R (p_g - p_d) + X (q_g - q_d)
//!      p_min <= p_g <= p_max,  q_min <= q_g <= q_max
//!      -f_max <= M^-1 (p_g - p_d) <= f_max
//!      s_lo >= u_lo - u,  s_hi >= u - u_hi,  s_lo, s_hi >= 0
//! ```
//!
//! The LP is handed to clarabel; the result is accepted only when the
//! primal/dual pair certifies optimality.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lindistflow::SensitivityMatrices;
use crate::network::DerFleet;

/// Required duality gap, relative to `1 + |objective|`.
pub const GAP_TOLERANCE: f64 = 1e-7;
/// Allowed primal/dual residual of the returned LP point.
const FEASIBILITY_TOLERANCE: f64 = 1e-6;
/// Interior-point iterates closer than this to a bound are moved onto it.
const BOUND_SNAP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub sensitivities: SensitivityMatrices,
    pub p_d: DVector<f64>,
    pub q_d: DVector<f64>,
    pub u0: f64,
    pub ders: DerFleet,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    /// Per-line flow limit; `f64::INFINITY` disables a line's constraint.
    pub f_max: DVector<f64>,
    /// `M^-1`, maps net active injections to line flows.
    pub incidence_inv: DMatrix<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// LP solved with a certified duality gap.
    Optimal,
    /// No DER has any freedom; the fixed dispatch was evaluated directly.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct ControlSetpoints {
    pub p_g: DVector<f64>,
    pub q_g: DVector<f64>,
    pub u_pred: DVector<f64>,
    pub slack_lo: DVector<f64>,
    pub slack_hi: DVector<f64>,
    /// Objective evaluated at the returned set-points with exact hinges.
    pub objective: f64,
    /// Objective reported by the LP before bound snapping.
    pub lp_objective: f64,
    pub duality_gap: f64,
    pub iterations: u32,
    pub status: SolveStatus,
}

impl ControlSetpoints {
    pub fn total_violation(&self) -> f64 {
        self.slack_lo.sum() + self.slack_hi.sum()
    }
}

pub fn validate_problem(prob: &ControlProblem) -> Result<()> {
    let mut errors = Vec::new();
    let n = prob.p_d.len();
    let check_dim = |name: &str, len: usize, errors: &mut Vec<String>| {
        if len != n {
            errors.push(format!("{name} has length {len}, expected {n}"));
        }
    };
    check_dim("q_d", prob.q_d.len(), &mut errors);
    check_dim("u_lo", prob.u_lo.len(), &mut errors);
    check_dim("u_hi", prob.u_hi.len(), &mut errors);
    check_dim("DER p_min", prob.ders.p_min.len(), &mut errors);
    check_dim("DER p_max", prob.ders.p_max.len(), &mut errors);
    check_dim("DER q_min", prob.ders.q_min.len(), &mut errors);
    check_dim("DER q_max", prob.ders.q_max.len(), &mut errors);
    let lengths_ok = errors.is_empty();
    for (name, m) in [
        ("R", &prob.sensitivities.r),
        ("X", &prob.sensitivities.x),
    ] {
        if m.shape() != (n, n) {
            errors.push(format!("{name} has shape {:?}, expected ({n}, {n})", m.shape()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            errors.push(format!("{name} has non-finite entries"));
        }
    }
    if prob.incidence_inv.ncols() != n || prob.incidence_inv.nrows() != prob.f_max.len() {
        errors.push(format!(
            "line-flow map has shape {:?} for {} limits and {n} buses",
            prob.incidence_inv.shape(),
            prob.f_max.len()
        ));
    }
    if prob.p_d.iter().chain(prob.q_d.iter()).any(|v| !v.is_finite()) {
        errors.push("demand has non-finite entries".into());
    }
    if !(prob.u0.is_finite() && prob.u0 > 0.0) {
        errors.push(format!("u0 must be positive, got {}", prob.u0));
    }
    if !(prob.gamma.is_finite() && prob.gamma >= 0.0) {
        errors.push(format!("gamma must be a nonnegative number, got {}", prob.gamma));
    }
    if lengths_ok {
        for i in 0..n {
            let (lo, hi) = (prob.u_lo[i], prob.u_hi[i]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                errors.push(format!("voltage band at bus {} is [{lo}, {hi}]", i + 1));
            }
        }
        if let Err(e) = prob.ders.validate() {
            errors.push(e.to_string());
        }
    }
    for (l, &f) in prob.f_max.iter().enumerate() {
        if f.is_nan() || f <= 0.0 {
            errors.push(format!("flow limit on line {l} must be positive, got {f}"));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidProblem(errors))
    }
}

#[derive(Debug, Clone, Copy)]
enum Decision {
    P(usize),
    Q(usize),
}

struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Triplets {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
            b: Vec::new(),
        }
    }

    /// Adds the row `sum(coef * var) <= rhs`.
    fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        let row = self.b.len();
        for (col, val) in entries {
            if val != 0.0 {
                self.rows.push(row);
                self.cols.push(col);
                self.vals.push(val);
            }
        }
        self.b.push(rhs);
    }
}

pub fn solve_control(prob: &ControlProblem) -> Result<ControlSetpoints> {
    validate_problem(prob)?;
    let n = prob.p_d.len();
    let ders = &prob.ders;
    let (r, x) = (&prob.sensitivities.r, &prob.sensitivities.x);

    // DERs with zero-width bounds are fixed at their bound
    let mut decisions = Vec::new();
    let mut p_base = DVector::zeros(n);
    let mut q_base = DVector::zeros(n);
    for i in 0..n {
        if ders.p_max[i] > ders.p_min[i] {
            decisions.push(Decision::P(i));
        } else {
            p_base[i] = ders.p_min[i];
        }
        if ders.q_max[i] > ders.q_min[i] {
            decisions.push(Decision::Q(i));
        } else {
            q_base[i] = ders.q_min[i];
        }
    }

    let u_base = (r * (&p_base - &prob.p_d) + x * (&q_base - &prob.q_d)).add_scalar(prob.u0);
    let flow_base = &prob.incidence_inv * (&p_base - &prob.p_d);
    let limited: Vec<usize> = (0..prob.f_max.len())
        .filter(|&l| prob.f_max[l].is_finite())
        .collect();
    if decisions.is_empty() {
        if limited.iter().any(|&l| flow_base[l].abs() > prob.f_max[l]) {
            return Err(Error::Infeasible(diagnose_infeasible(
                prob, &decisions, &flow_base, &limited,
            )));
        }
        return Ok(finish(prob, p_base, q_base, f64::NAN, 0.0, 0, SolveStatus::Fixed));
    }

    let nv = decisions.len();
    let s_lo = |i: usize| nv + i;
    let s_hi = |i: usize| nv + n + i;
    let voltage_column = |d: Decision, bus: usize| match d {
        Decision::P(j) => r[(bus, j)],
        Decision::Q(j) => x[(bus, j)],
    };

    let mut a = Triplets::new();
    for i in 0..n {
        // u_lo - u <= s_lo
        a.push_row(
            decisions
                .iter()
                .enumerate()
                .map(|(k, &d)| (k, -voltage_column(d, i)))
                .chain([(s_lo(i), -1.0)]),
            u_base[i] - prob.u_lo[i],
        );
        // u - u_hi <= s_hi
        a.push_row(
            decisions
                .iter()
                .enumerate()
                .map(|(k, &d)| (k, voltage_column(d, i)))
                .chain([(s_hi(i), -1.0)]),
            prob.u_hi[i] - u_base[i],
        );
        a.push_row([(s_lo(i), -1.0)], 0.0);
        a.push_row([(s_hi(i), -1.0)], 0.0);
    }
    for (k, &d) in decisions.iter().enumerate() {
        let (lo, hi) = bounds(ders, d);
        a.push_row([(k, 1.0)], hi);
        a.push_row([(k, -1.0)], -lo);
    }
    for &l in &limited {
        let coeffs: Vec<(usize, f64)> = decisions
            .iter()
            .enumerate()
            .filter_map(|(k, &d)| match d {
                Decision::P(j) => Some((k, prob.incidence_inv[(l, j)])),
                Decision::Q(_) => None,
            })
            .collect();
        a.push_row(coeffs.iter().copied(), prob.f_max[l] - flow_base[l]);
        a.push_row(
            coeffs.iter().map(|&(k, c)| (k, -c)),
            prob.f_max[l] + flow_base[l],
        );
    }

    let cols = nv + 2 * n;
    let rows = a.b.len();
    let mut cost = vec![1.0; nv];
    cost.extend(std::iter::repeat_n(prob.gamma, 2 * n));
    let a_mat = CscMatrix::new_from_triplets(rows, cols, a.rows, a.cols, a.vals);
    let p_mat = CscMatrix::zeros((cols, cols));
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .build()
        .expect("valid solver settings");
    let cones = [SupportedConeT::NonnegativeConeT(rows)];
    let mut solver = DefaultSolver::new(&p_mat, &cost, &a_mat, &a.b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;

    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::Infeasible(diagnose_infeasible(
                prob,
                &decisions,
                &flow_base,
                &limited,
            )));
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::SolverFailure("LP reported unbounded".into()));
        }
        other => return Err(Error::SolverFailure(format!("{other:?}"))),
    }

    // certificate: primal objective c'x, dual objective -b'z, residuals
    let primal: f64 = cost.iter().zip(&sol.x).map(|(c, v)| c * v).sum();
    let dual: f64 = -a.b.iter().zip(&sol.z).map(|(b, z)| b * z).sum::<f64>();
    let gap = (primal - dual).abs();
    let mut dual_residual = cost.clone();
    let mut primal_residual = vec![0.0; rows];
    for (col, (d, &x)) in dual_residual.iter_mut().zip(&sol.x).enumerate() {
        for idx in a_mat.colptr[col]..a_mat.colptr[col + 1] {
            let (row, v) = (a_mat.rowval[idx], a_mat.nzval[idx]);
            *d += v * sol.z[row];
            primal_residual[row] += v * x;
        }
    }
    let dual_res = dual_residual.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let primal_res = primal_residual
        .iter()
        .zip(&a.b)
        .fold(0.0_f64, |m, (ax, b)| m.max(ax - b));
    let z_min = sol.z.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let const_cost = p_base.sum() + q_base.sum();
    let lp_objective = primal + const_cost;
    if gap > GAP_TOLERANCE * (1.0 + lp_objective.abs())
        || dual_res > FEASIBILITY_TOLERANCE * (1.0 + prob.gamma)
        || primal_res > FEASIBILITY_TOLERANCE
        || z_min < -FEASIBILITY_TOLERANCE
    {
        return Err(Error::SolverFailure(format!(
            "optimality not certified: gap {gap:e}, primal residual {primal_res:e}, dual residual {dual_res:e}"
        )));
    }

    let mut p_g = p_base;
    let mut q_g = q_base;
    for (k, &d) in decisions.iter().enumerate() {
        let (lo, hi) = bounds(ders, d);
        let mut v = sol.x[k].clamp(lo, hi);
        if v - lo <= BOUND_SNAP {
            v = lo;
        } else if hi - v <= BOUND_SNAP {
            v = hi;
        }
        match d {
            Decision::P(i) => p_g[i] = v,
            Decision::Q(i) => q_g[i] = v,
        }
    }
    Ok(finish(
        prob,
        p_g,
        q_g,
        lp_objective,
        gap,
        sol.iterations,
        SolveStatus::Optimal,
    ))
}

fn bounds(ders: &DerFleet, d: Decision) -> (f64, f64) {
    match d {
        Decision::P(i) => (ders.p_min[i], ders.p_max[i]),
        Decision::Q(i) => (ders.q_min[i], ders.q_max[i]),
    }
}

fn finish(
    prob: &ControlProblem,
    p_g: DVector<f64>,
    q_g: DVector<f64>,
    lp_objective: f64,
    duality_gap: f64,
    iterations: u32,
    status: SolveStatus,
) -> ControlSetpoints {
    let s = &prob.sensitivities;
    let u_pred = (&s.r * (&p_g - &prob.p_d) + &s.x * (&q_g - &prob.q_d)).add_scalar(prob.u0);
    let slack_lo = (&prob.u_lo - &u_pred).map(|v| v.max(0.0));
    let slack_hi = (&u_pred - &prob.u_hi).map(|v| v.max(0.0));
    let objective = p_g.sum() + q_g.sum() + prob.gamma * (slack_lo.sum() + slack_hi.sum());
    let lp_objective = if lp_objective.is_nan() {
        objective
    } else {
        lp_objective
    };
    ControlSetpoints {
        p_g,
        q_g,
        u_pred,
        slack_lo,
        slack_hi,
        objective,
        lp_objective,
        duality_gap,
        iterations,
        status,
    }
}

/// Lines whose flow range over the DER box misses their limit; all limited
/// lines when only their combination is infeasible.
fn diagnose_infeasible(
    prob: &ControlProblem,
    decisions: &[Decision],
    flow_base: &DVector<f64>,
    limited: &[usize],
) -> Vec<String> {
    let mut violated = Vec::new();
    for &l in limited {
        let (mut lo, mut hi) = (flow_base[l], flow_base[l]);
        for &d in decisions {
            if let Decision::P(j) = d {
                let c = prob.incidence_inv[(l, j)];
                let (a, b) = (c * prob.ders.p_min[j], c * prob.ders.p_max[j]);
                lo += a.min(b);
                hi += a.max(b);
            }
        }
        let f = prob.f_max[l];
        if hi < -f || lo > f {
            violated.push(format!(
                "line {l}: reachable flow [{lo:.6}, {hi:.6}] outside limit ±{f:.6}"
            ));
        }
    }
    if violated.is_empty() {
        violated.push(format!("flow limits on lines {limited:?} cannot hold jointly"));
    }
    violated
}
