//! Line-reactance estimation from a sliding window of snapshots.
//!
//! With known R-to-X ratios the linear voltage model is linear in the
//! reactance vector: each line contributes `Γ_ℓ (α_ℓ p + q) x_ℓ` to the
//! squared-voltage deviation. Stacking the window gives an ordinary least
//! squares problem, solved through a truncated SVD.

use std::collections::VecDeque;

use faer::Mat;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::lindistflow::{sensitivities_from_vectors, SensitivityMatrices};
use crate::network::FeederTopology;
use crate::plant::MeasurementSnapshot;

/// Singular values below `RCOND * sigma_max` are treated as zero.
pub const RCOND: f64 = 1e-8;

/// FIFO buffer of the most recent `capacity` snapshots, oldest first.
#[derive(Debug, Clone)]
pub struct MeasurementWindow {
    capacity: usize,
    snapshots: VecDeque<MeasurementSnapshot>,
}

impl MeasurementWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("window capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            snapshots: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn newest_step(&self) -> Option<u64> {
        self.snapshots.back().map(|s| s.step)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MeasurementSnapshot> {
        self.snapshots.iter()
    }

    /// Appends `snap`, returning the evicted oldest snapshot when full.
    pub fn push(&mut self, snap: MeasurementSnapshot) -> Result<Option<MeasurementSnapshot>> {
        if let Some(newest) = self.newest_step() {
            if snap.step <= newest {
                return Err(Error::StaleSnapshot {
                    step: snap.step,
                    newest,
                });
            }
        }
        let evicted = if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front()
        } else {
            None
        };
        self.snapshots.push_back(snap);
        Ok(evicted)
    }
}

pub fn push_snapshot(window: &mut MeasurementWindow, snap: MeasurementSnapshot) -> Result<()> {
    window.push(snap).map(|_| ())
}

/// `Γ_ℓ = 2 (M^-1)^T e_ℓ e_ℓ^T M^-1` for zero-based line index `line`.
pub fn build_gamma(topology: &FeederTopology, line: usize) -> Result<DMatrix<f64>> {
    if line >= topology.line_count() {
        return Err(Error::LineIndex {
            index: line,
            count: topology.line_count(),
        });
    }
    let row = topology.incidence_inverse().row(line);
    Ok(row.transpose() * row * 2.0)
}

/// Stacked design matrix and response of the window regression.
#[derive(Debug, Clone)]
pub struct RegressionSystem {
    /// `(m N) x L`
    pub design: DMatrix<f64>,
    /// Stacked `u - u0 1`, length `m N`.
    pub response: DVector<f64>,
    /// Step of each `N`-row block, in window order.
    pub block_steps: Vec<u64>,
}

impl RegressionSystem {
    pub fn blocks(&self) -> usize {
        self.block_steps.len()
    }
}

pub fn assemble_regression(
    window: &MeasurementWindow,
    topology: &FeederTopology,
    alpha: &DVector<f64>,
) -> Result<RegressionSystem> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let n = topology.bus_count();
    let lines = topology.line_count();
    check_len(lines, alpha.len())?;
    let m_inv = topology.incidence_inverse();

    let rows = window.len() * n;
    let mut design = DMatrix::zeros(rows, lines);
    let mut response = DVector::zeros(rows);
    let mut block_steps = Vec::with_capacity(window.len());

    for (k, snap) in window.iter().enumerate() {
        check_len(n, snap.u.len())?;
        check_len(n, snap.p.len())?;
        check_len(n, snap.q.len())?;
        let base = k * n;
        for l in 0..lines {
            let row = m_inv.row(l);
            // e_ℓ^T M^-1 (α_ℓ p + q)
            let s = alpha[l] * row.dot(&snap.p.transpose()) + row.dot(&snap.q.transpose());
            for i in 0..n {
                design[(base + i, l)] = 2.0 * row[i] * s;
            }
        }
        for i in 0..n {
            response[base + i] = snap.u[i] - snap.u0;
        }
        block_steps.push(snap.step);
    }
    Ok(RegressionSystem {
        design,
        response,
        block_steps,
    })
}

#[derive(Debug, Clone)]
pub struct LeastSquaresSolution {
    pub solution: DVector<f64>,
    pub effective_rank: usize,
    pub singular_values: DVector<f64>,
}

/// Minimum-norm least squares via SVD, truncating singular values below
/// `rcond * sigma_max`.
pub fn pseudo_inverse_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rcond: f64,
) -> Result<LeastSquaresSolution> {
    check_len(a.nrows(), b.len())?;
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(LeastSquaresSolution {
            solution: DVector::zeros(cols),
            effective_rank: 0,
            singular_values: DVector::zeros(0),
        });
    }
    let svd = Mat::from_fn(rows, cols, |i, j| a[(i, j)])
        .thin_svd()
        .map_err(|e| Error::SolverFailure(format!("SVD did not converge: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let sigma = svd.S().column_vector();
    let k = sigma.nrows();
    let singular_values = DVector::from_fn(k, |i, _| sigma[i]);
    let threshold = rcond * singular_values.max();

    let mut solution = DVector::zeros(cols);
    let mut rank = 0;
    for c in 0..k {
        let s = sigma[c];
        if s > threshold && s > 0.0 {
            rank += 1;
            let utb: f64 = (0..rows).map(|i| u[(i, c)] * b[i]).sum();
            let w = utb / s;
            for j in 0..cols {
                solution[j] += v[(j, c)] * w;
            }
        }
    }
    Ok(LeastSquaresSolution {
        solution,
        effective_rank: rank,
        singular_values,
    })
}

#[derive(Debug, Clone)]
pub struct EstimatedParameters {
    pub x: DVector<f64>,
    pub r: DVector<f64>,
    pub sensitivities: SensitivityMatrices,
    pub effective_rank: usize,
    pub rank_deficient: bool,
    /// Zero-based indices of lines with a nonpositive reactance estimate.
    pub nonpositive_lines: Vec<usize>,
}

pub fn estimate(
    window: &MeasurementWindow,
    topology: &FeederTopology,
    alpha: &DVector<f64>,
) -> Result<EstimatedParameters> {
    let system = assemble_regression(window, topology, alpha)?;
    let ls = pseudo_inverse_solve(&system.design, &system.response, RCOND)?;
    let x = ls.solution;
    let r = alpha.component_mul(&x);
    let sensitivities = sensitivities_from_vectors(topology, &r, &x)?;
    let nonpositive_lines = x
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(EstimatedParameters {
        effective_rank: ls.effective_rank,
        rank_deficient: ls.effective_rank < topology.line_count(),
        x,
        r,
        sensitivities,
        nonpositive_lines,
    })
}
