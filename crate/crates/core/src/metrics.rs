use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::lindistflow::VoltageState;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AccuracyReport {
    pub mae_x: f64,
    pub mae_r: f64,
    pub mae_x_matrix: f64,
    pub mae_r_matrix: f64,
    pub band: BandReport,
}

/// Buses outside their voltage band, measured in p.u. of V (not V²).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BandReport {
    pub violation_count: usize,
    pub max_violation: f64,
}

pub fn mae_vector(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(truth.len(), est.len())?;
    if est.is_empty() {
        return Err(Error::Invalid("mean absolute error of empty vectors".into()));
    }
    let total: f64 = est.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / est.len() as f64)
}

/// Mean absolute entrywise error over all entries.
pub fn mae_matrix(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::Invalid(format!(
            "matrix shapes differ: {:?} vs {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    mae_vector(est.as_slice(), truth.as_slice())
}

/// Band check on `sqrt(u)` against `[sqrt(u_lo), sqrt(u_hi)]`.
pub fn band_report(state: &VoltageState, u_lo: &DVector<f64>, u_hi: &DVector<f64>) -> BandReport {
    let mut report = BandReport::default();
    for ((&u, &lo), &hi) in state.u.iter().zip(u_lo.iter()).zip(u_hi.iter()) {
        let v = u.sqrt();
        let excess = (lo.sqrt() - v).max(v - hi.sqrt());
        if excess > 0.0 {
            report.violation_count += 1;
            report.max_violation = report.max_violation.max(excess);
        }
    }
    report
}
