//! Linearized branch-flow voltage model.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Result};
use crate::network::{FeederTopology, LineParameters};

/// Sensitivities of squared voltage magnitudes to net active (`r`) and
/// reactive (`x`) injections.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

/// Squared voltage magnitudes; `u0` is the substation.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageState {
    pub u0: f64,
    pub u: DVector<f64>,
}

impl VoltageState {
    pub fn flat(u0: f64, bus_count: usize) -> Self {
        Self {
            u0,
            u: DVector::from_element(bus_count, u0),
        }
    }

    pub fn magnitudes(&self) -> DVector<f64> {
        self.u.map(f64::sqrt)
    }

    /// `u - u0 * 1`
    pub fn deviation(&self) -> DVector<f64> {
        self.u.add_scalar(-self.u0)
    }
}

pub fn build_sensitivities(
    topology: &FeederTopology,
    params: &LineParameters,
) -> Result<SensitivityMatrices> {
    sensitivities_from_vectors(topology, &params.r, &params.x)
}

/// `2 (M^-1)^T diag(v) M^-1` for arbitrary per-line vectors. Used directly for
/// estimated parameters, which may carry nonpositive entries.
pub fn sensitivities_from_vectors(
    topology: &FeederTopology,
    r: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<SensitivityMatrices> {
    check_len(topology.line_count(), r.len())?;
    check_len(topology.line_count(), x.len())?;
    let m_inv = topology.incidence_inverse();
    let weighted = |v: &DVector<f64>| {
        let mut scaled = m_inv.clone();
        for (mut row, &w) in scaled.row_iter_mut().zip(v.iter()) {
            row *= 2.0 * w;
        }
        let mut s = m_inv.transpose() * scaled;
        // exact symmetry; the product is symmetric up to rounding
        let t = s.transpose();
        s += t;
        s * 0.5
    };
    Ok(SensitivityMatrices {
        r: weighted(r),
        x: weighted(x),
    })
}

/// `u = u0 * 1 + R p + X q`
pub fn predict_voltages(
    s: &SensitivityMatrices,
    p: &DVector<f64>,
    q: &DVector<f64>,
    u0: f64,
) -> Result<VoltageState> {
    let n = s.r.nrows();
    check_len(n, p.len())?;
    check_len(n, q.len())?;
    let u = (&s.r * p + &s.x * q).add_scalar(u0);
    Ok(VoltageState { u0, u })
}
