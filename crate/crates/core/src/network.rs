//! Radial feeder graph, line data and the reduced incidence algebra.
//!
//! Bus 0 is always the substation. Non-substation buses are numbered
//! `1..=N` and map to vector index `bus - 1`. Lines are indexed `0..L` in
//! file order.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Residual bound accepted for `M * M^-1 - I` (max-abs entry).
pub const INVERSE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
}

/// Directed radial graph rooted at the substation.
#[derive(Debug, Clone)]
pub struct FeederTopology {
    bus_count: usize,
    lines: Vec<Line>,
    incidence: DMatrix<f64>,
    incidence_inv: DMatrix<f64>,
    /// Line feeding each bus, indexed by `bus - 1`.
    parent_line: Vec<usize>,
    /// Lines on the root-to-bus path, ordered from the root, indexed by `bus - 1`.
    path_sets: Vec<Vec<usize>>,
    /// Lines ordered so every line appears after the line feeding its sender.
    sweep_order: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl FeederTopology {
    pub fn new(bus_count: usize, lines: Vec<Line>) -> Result<Self> {
        if bus_count == 0 {
            return Err(Error::Invalid("feeder has no buses besides the substation".into()));
        }
        if lines.len() != bus_count {
            return Err(Error::NonRadial(format!(
                "{} lines for {} buses (a radial feeder has L = N)",
                lines.len(),
                bus_count
            )));
        }

        let mut parent_line = vec![usize::MAX; bus_count];
        for (idx, line) in lines.iter().enumerate() {
            if line.from > bus_count || line.to > bus_count {
                return Err(Error::NonRadial(format!(
                    "line {idx} references bus outside 0..={bus_count}"
                )));
            }
            if line.from == line.to {
                return Err(Error::NonRadial(format!("line {idx} is a self-loop")));
            }
            if line.to == 0 {
                return Err(Error::NonRadial(format!(
                    "line {idx} feeds into the substation"
                )));
            }
            let slot = &mut parent_line[line.to - 1];
            if *slot != usize::MAX {
                return Err(Error::NonRadial(format!(
                    "bus {} is fed by lines {} and {idx}",
                    line.to, *slot
                )));
            }
            *slot = idx;
        }
        // With L = N and one feeder per bus, every bus has a parent line; a
        // cycle is the only way to miss the root.
        let mut children = vec![Vec::new(); bus_count + 1];
        for (idx, line) in lines.iter().enumerate() {
            children[line.from].push(idx);
        }

        let mut sweep_order = Vec::with_capacity(bus_count);
        let mut queue = VecDeque::from([0usize]);
        let mut reached = vec![false; bus_count + 1];
        reached[0] = true;
        while let Some(bus) = queue.pop_front() {
            for &idx in &children[bus] {
                let to = lines[idx].to;
                if !reached[to] {
                    reached[to] = true;
                    sweep_order.push(idx);
                    queue.push_back(to);
                }
            }
        }
        if let Some(bus) = (1..=bus_count).find(|&b| !reached[b]) {
            return Err(Error::Disconnected(bus));
        }

        let mut path_sets = vec![Vec::new(); bus_count];
        for &idx in &sweep_order {
            let line = lines[idx];
            let mut path = if line.from == 0 {
                Vec::new()
            } else {
                path_sets[line.from - 1].clone()
            };
            path.push(idx);
            path_sets[line.to - 1] = path;
        }

        let incidence = reduced_incidence(bus_count, &lines);
        let incidence_inv = invert(&incidence)?;

        Ok(Self {
            bus_count,
            lines,
            incidence,
            incidence_inv,
            parent_line,
            path_sets,
            sweep_order,
            children,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Reduced incidence matrix `M` (N x L), substation row removed.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Cached `M^-1`.
    pub fn incidence_inverse(&self) -> &DMatrix<f64> {
        &self.incidence_inv
    }

    /// Line indices on the path from the substation to `bus`, root first.
    pub fn path_set(&self, bus: usize) -> &[usize] {
        &self.path_sets[bus - 1]
    }

    pub fn parent_line(&self, bus: usize) -> usize {
        self.parent_line[bus - 1]
    }

    /// Lines leaving `bus` (bus 0 allowed).
    pub fn child_lines(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Lines in breadth-first order from the substation.
    pub fn sweep_order(&self) -> &[usize] {
        &self.sweep_order
    }

    pub fn find_line(&self, from: usize, to: usize) -> Result<usize> {
        self.lines
            .iter()
            .position(|l| (l.from == from && l.to == to) || (l.from == to && l.to == from))
            .ok_or(Error::UnknownLine { from, to })
    }
}

fn reduced_incidence(bus_count: usize, lines: &[Line]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(bus_count, lines.len());
    for (idx, line) in lines.iter().enumerate() {
        m[(line.to - 1, idx)] = -1.0;
        if line.from != 0 {
            m[(line.from - 1, idx)] = 1.0;
        }
    }
    m
}

fn invert(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::SingularIncidence)?;
    let residual = (m * &inv - DMatrix::identity(m.nrows(), m.ncols())).amax();
    if residual > INVERSE_TOLERANCE {
        return Err(Error::SingularIncidence);
    }
    Ok(inv)
}

/// Recomputes `M^-1` from the incidence matrix and checks `M * M^-1 = I`.
pub fn invert_incidence(topology: &FeederTopology) -> Result<DMatrix<f64>> {
    invert(topology.incidence())
}

/// Lossless line flows `f = M^-1 p`; positive flow runs sending to receiving end.
pub fn line_flows(topology: &FeederTopology, p: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(topology.bus_count(), p.len())?;
    Ok(topology.incidence_inverse() * p)
}

/// Per-line series impedance with a fixed R-to-X ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct LineParameters {
    pub r: DVector<f64>,
    pub x: DVector<f64>,
    pub alpha: DVector<f64>,
}

impl LineParameters {
    pub fn new(r: DVector<f64>, x: DVector<f64>) -> Result<Self> {
        check_len(x.len(), r.len())?;
        for (line, (&ri, &xi)) in r.iter().zip(x.iter()).enumerate() {
            if !(xi.is_finite() && xi > 0.0) {
                return Err(Error::InvalidLine {
                    line,
                    reason: format!("reactance must be positive, got {xi}"),
                });
            }
            if !(ri.is_finite() && ri >= 0.0) {
                return Err(Error::InvalidLine {
                    line,
                    reason: format!("resistance must be nonnegative, got {ri}"),
                });
            }
        }
        let alpha = r.component_div(&x);
        Ok(Self { r, x, alpha })
    }

    /// Builds parameters from reactances and known R-to-X ratios.
    pub fn from_reactance(x: DVector<f64>, alpha: DVector<f64>) -> Result<Self> {
        check_len(x.len(), alpha.len())?;
        let r = alpha.component_mul(&x);
        let params = Self::new(r, x)?;
        Ok(Self { alpha, ..params })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Scales line `idx`. With `preserve_alpha` both r and x scale; otherwise
    /// only x does and the ratio for that line changes.
    pub fn scale_line(&mut self, idx: usize, factor: f64, preserve_alpha: bool) -> Result<()> {
        if idx >= self.len() {
            return Err(Error::LineIndex {
                index: idx,
                count: self.len(),
            });
        }
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Invalid(format!("scale factor must be positive, got {factor}")));
        }
        self.x[idx] *= factor;
        if preserve_alpha {
            self.r[idx] = self.alpha[idx] * self.x[idx];
        } else {
            self.alpha[idx] = self.r[idx] / self.x[idx];
        }
        Ok(())
    }
}

/// Capacity bounds of the DER at every bus; buses without a DER carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct DerFleet {
    pub p_min: DVector<f64>,
    pub p_max: DVector<f64>,
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
}

impl DerFleet {
    pub fn empty(bus_count: usize) -> Self {
        Self {
            p_min: DVector::zeros(bus_count),
            p_max: DVector::zeros(bus_count),
            q_min: DVector::zeros(bus_count),
            q_max: DVector::zeros(bus_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p_min.len();
        for v in [&self.p_max, &self.q_min, &self.q_max] {
            check_len(n, v.len())?;
        }
        for i in 0..n {
            let vals = [self.p_min[i], self.p_max[i], self.q_min[i], self.q_max[i]];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("DER bounds at bus {} not finite", i + 1)));
            }
            if self.p_min[i] > self.p_max[i] || self.q_min[i] > self.q_max[i] {
                return Err(Error::Invalid(format!(
                    "DER bounds at bus {} have min above max",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Buses whose DER has any nonzero capability.
    pub fn der_buses(&self) -> Vec<usize> {
        (0..self.p_min.len())
            .filter(|&i| {
                self.p_min[i] != 0.0
                    || self.p_max[i] != 0.0
                    || self.q_min[i] != 0.0
                    || self.q_max[i] != 0.0
            })
            .map(|i| i + 1)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub p_d0: DVector<f64>,
    pub q_d0: DVector<f64>,
}

impl LoadProfile {
    pub fn validate(&self) -> Result<()> {
        check_len(self.p_d0.len(), self.q_d0.len())?;
        for (i, (&p, &q)) in self.p_d0.iter().zip(self.q_d0.iter()).enumerate() {
            if !(p.is_finite() && q.is_finite() && p >= 0.0 && q >= 0.0) {
                return Err(Error::Invalid(format!(
                    "nominal load at bus {} must be finite and nonnegative",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Everything read from a feeder file.
#[derive(Debug, Clone)]
pub struct Feeder {
    pub name: String,
    pub base_kv: f64,
    pub base_mva: f64,
    pub topology: FeederTopology,
    pub params: LineParameters,
    pub loads: LoadProfile,
    pub ders: DerFleet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    #[serde(default)]
    pub p_d0: f64,
    #[serde(default)]
    pub q_d0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerRecord {
    pub bus: usize,
    #[serde(default)]
    pub p_min: f64,
    #[serde(default)]
    pub p_max: f64,
    #[serde(default)]
    pub q_min: f64,
    #[serde(default)]
    pub q_max: f64,
}

/// On-disk feeder schema. All electrical quantities are per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederFile {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_base_kv")]
    pub base_kv: f64,
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub ders: Vec<DerRecord>,
}

fn default_base_kv() -> f64 {
    4.8
}

fn default_base_mva() -> f64 {
    2.5
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<Feeder> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Feeder::from_json(&text)
}

impl Feeder {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: FeederFile =
            serde_json::from_str(text).map_err(|e| Error::parse("feeder file", e))?;
        Self::from_file_format(&file)
    }

    pub fn from_file_format(file: &FeederFile) -> Result<Self> {
        let bus_count = file.buses.iter().filter(|b| b.id != 0).count();
        let mut seen = HashSet::new();
        let mut p_d0 = DVector::zeros(bus_count);
        let mut q_d0 = DVector::zeros(bus_count);
        for bus in &file.buses {
            if !seen.insert(bus.id) {
                return Err(Error::Invalid(format!("bus {} listed twice", bus.id)));
            }
            if bus.id == 0 {
                if bus.p_d0 != 0.0 || bus.q_d0 != 0.0 {
                    return Err(Error::Invalid("substation bus 0 cannot carry load".into()));
                }
                continue;
            }
            if bus.id > bus_count {
                return Err(Error::Invalid(format!(
                    "bus ids must be contiguous 1..={bus_count}, found {}",
                    bus.id
                )));
            }
            p_d0[bus.id - 1] = bus.p_d0;
            q_d0[bus.id - 1] = bus.q_d0;
        }

        let mut line_ids = HashSet::new();
        for l in &file.lines {
            if !line_ids.insert(l.id) {
                return Err(Error::Invalid(format!("line id {} listed twice", l.id)));
            }
        }
        let lines = file
            .lines
            .iter()
            .map(|l| Line {
                from: l.from,
                to: l.to,
            })
            .collect();
        let topology = FeederTopology::new(bus_count, lines)?;
        let r = DVector::from_iterator(file.lines.len(), file.lines.iter().map(|l| l.r_pu));
        let x = DVector::from_iterator(file.lines.len(), file.lines.iter().map(|l| l.x_pu));
        let params = LineParameters::new(r, x)?;

        let loads = LoadProfile { p_d0, q_d0 };
        loads.validate()?;

        let mut ders = DerFleet::empty(bus_count);
        let mut der_buses = HashSet::new();
        for d in &file.ders {
            if d.bus == 0 || d.bus > bus_count {
                return Err(Error::Invalid(format!("DER at unknown bus {}", d.bus)));
            }
            if !der_buses.insert(d.bus) {
                return Err(Error::Invalid(format!("two DERs at bus {}", d.bus)));
            }
            let i = d.bus - 1;
            ders.p_min[i] = d.p_min;
            ders.p_max[i] = d.p_max;
            ders.q_min[i] = d.q_min;
            ders.q_max[i] = d.q_max;
        }
        ders.validate()?;

        Ok(Self {
            name: file.name.clone(),
            base_kv: file.base_kv,
            base_mva: file.base_mva,
            topology,
            params,
            loads,
            ders,
        })
    }

    /// Canonical file form: buses by id, lines in index order, DERs by bus.
    pub fn to_file_format(&self) -> FeederFile {
        let buses = (1..=self.topology.bus_count())
            .map(|id| BusRecord {
                id,
                p_d0: self.loads.p_d0[id - 1],
                q_d0: self.loads.q_d0[id - 1],
            })
            .collect();
        let lines = self
            .topology
            .lines()
            .iter()
            .enumerate()
            .map(|(idx, l)| LineRecord {
                id: idx + 1,
                from: l.from,
                to: l.to,
                r_pu: self.params.r[idx],
                x_pu: self.params.x[idx],
            })
            .collect();
        let ders = self
            .ders
            .der_buses()
            .into_iter()
            .map(|bus| DerRecord {
                bus,
                p_min: self.ders.p_min[bus - 1],
                p_max: self.ders.p_max[bus - 1],
                q_min: self.ders.q_min[bus - 1],
                q_max: self.ders.q_max[bus - 1],
            })
            .collect();
        FeederFile {
            name: self.name.clone(),
            base_kv: self.base_kv,
            base_mva: self.base_mva,
            buses,
            lines,
            ders,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_format()).expect("feeder serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> FeederTopology {
        FeederTopology::new(2, vec![Line { from: 0, to: 1 }, Line { from: 1, to: 2 }]).unwrap()
    }

    #[test]
    fn single_line_feeder() {
        let text = r#"{"buses":[{"id":1,"p_d0":0.1,"q_d0":0.05}],
                       "lines":[{"id":1,"from":0,"to":1,"r_pu":0.2,"x_pu":0.4}]}"#;
        let f = Feeder::from_json(text).unwrap();
        assert_eq!(f.topology.bus_count(), 1);
        assert_eq!(f.topology.line_count(), 1);
        assert_eq!(f.topology.incidence()[(0, 0)], -1.0);
        assert_eq!(f.topology.path_set(1), &[0]);
        assert_eq!(f.topology.incidence_inverse()[(0, 0)], -1.0);
        assert!((f.params.alpha[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chain_incidence_and_paths() {
        let t = chain();
        let m = t.incidence();
        assert_eq!(m, &DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]));
        assert_eq!(t.path_set(1), &[0]);
        assert_eq!(t.path_set(2), &[0, 1]);
        let inv = invert_incidence(&t).unwrap();
        assert_eq!(inv, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 0.0, -1.0]));
    }

    #[test]
    fn chain_flows() {
        let t = chain();
        let f = line_flows(&t, &DVector::from_vec(vec![-0.1, -0.2])).unwrap();
        assert!((f[0] - 0.3).abs() < 1e-15 && (f[1] - 0.2).abs() < 1e-15);
        let f = line_flows(&t, &DVector::zeros(2)).unwrap();
        assert_eq!(f, DVector::zeros(2));
        assert!(matches!(
            line_flows(&t, &DVector::zeros(3)),
            Err(Error::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn single_line_full_load_flow() {
        let t = FeederTopology::new(1, vec![Line { from: 0, to: 1 }]).unwrap();
        let f = line_flows(&t, &DVector::from_vec(vec![-1.0])).unwrap();
        assert_eq!(f[0], 1.0);
    }

    #[test]
    fn rejects_mesh_and_disconnected() {
        // three lines for two buses
        let err = FeederTopology::new(
            2,
            vec![
                Line { from: 0, to: 1 },
                Line { from: 1, to: 2 },
                Line { from: 0, to: 2 },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonRadial(_)));

        // buses 1 and 2 feed each other; neither reaches the substation
        let err = FeederTopology::new(
            3,
            vec![
                Line { from: 0, to: 3 },
                Line { from: 2, to: 1 },
                Line { from: 1, to: 2 },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Disconnected(1)));

        let err = FeederTopology::new(2, vec![Line { from: 0, to: 1 }, Line { from: 0, to: 1 }])
            .unwrap_err();
        assert!(matches!(err, Error::NonRadial(_)));
    }

    #[test]
    fn rejects_negative_reactance() {
        let text = r#"{"buses":[{"id":1}],
                       "lines":[{"id":1,"from":0,"to":1,"r_pu":0.2,"x_pu":-0.4}]}"#;
        assert!(matches!(
            Feeder::from_json(text),
            Err(Error::InvalidLine { line: 0, .. })
        ));
    }

    #[test]
    fn rejects_malformed_json() {
        assert!(matches!(Feeder::from_json("{\"buses\": ["), Err(Error::Parse { .. })));
    }

    #[test]
    fn scale_line_keeps_or_breaks_alpha() {
        let mut p = LineParameters::new(
            DVector::from_vec(vec![0.1, 0.2]),
            DVector::from_vec(vec![0.2, 0.4]),
        )
        .unwrap();
        p.scale_line(1, 2.0, true).unwrap();
        assert_eq!(p.x[1], 0.8);
        assert!((p.r[1] - 0.4).abs() < 1e-15);
        assert_eq!(p.alpha[1], 0.5);
        p.scale_line(0, 2.0, false).unwrap();
        assert_eq!(p.r[0], 0.1);
        assert!((p.alpha[0] - 0.25).abs() < 1e-15);
        assert!(p.scale_line(5, 2.0, true).is_err());
    }

    #[test]
    fn find_line_either_direction() {
        let t = chain();
        assert_eq!(t.find_line(1, 2).unwrap(), 1);
        assert_eq!(t.find_line(2, 1).unwrap(), 1);
        assert!(matches!(t.find_line(0, 2), Err(Error::UnknownLine { .. })));
    }
}
