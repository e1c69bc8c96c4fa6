//! CSV persistence for traces, measurement logs and Monte Carlo tables.
//!
//! A trace file starts with `#`-prefixed header lines (`# config: {json}`,
//! `# der_buses: ...`, optionally `# termination: ...`) followed by an
//! ordinary CSV table with one row per step.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::metrics::BandReport;
use crate::plant::MeasurementSnapshot;
use crate::scenario::{MonteCarloTable, ScenarioConfig, SimulationTrace, StepRecord, StepStatus};

const CONFIG_TAG: &str = "# config: ";
const DER_TAG: &str = "# der_buses: ";
const TERMINATION_TAG: &str = "# termination: ";

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn trace_header(n: usize, lines: usize) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend(numbered("v_true", n));
    h.extend(numbered("v_meas", n));
    h.extend(numbered("p_g", n));
    h.extend(numbered("q_g", n));
    for name in [
        "mae_x",
        "mae_r",
        "mae_X",
        "mae_R",
        "violations",
        "max_violation",
        "solver_status",
        "effective_rank",
        "rank_deficient",
        "nonpositive_x",
        "measured_through",
        "sweeps",
        "model_gap",
    ] {
        h.push(name.to_string());
    }
    h.extend(numbered("x_hat", lines));
    h
}

pub fn write_trace<W: Write>(trace: &SimulationTrace, mut out: W) -> Result<()> {
    writeln!(out, "{CONFIG_TAG}{}", trace.config.to_json()).map_err(|e| Error::io("<trace>", e))?;
    let ders: Vec<String> = trace.der_buses.iter().map(|b| b.to_string()).collect();
    writeln!(out, "{DER_TAG}{}", ders.join(" ")).map_err(|e| Error::io("<trace>", e))?;
    if let Some(t) = &trace.termination {
        writeln!(out, "{TERMINATION_TAG}{}", t.replace('\n', " ")).map_err(|e| Error::io("<trace>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(trace.bus_count, trace.line_count))?;
    for r in &trace.records {
        let mut row = vec![r.step.to_string()];
        for v in [&r.v_true, &r.v_meas, &r.p_g, &r.q_g] {
            row.extend(v.iter().copied().map(fmt));
        }
        row.extend([r.mae_x, r.mae_r, r.mae_x_matrix, r.mae_r_matrix].map(fmt));
        row.push(r.band.violation_count.to_string());
        row.push(fmt(r.band.max_violation));
        row.push(r.status.label());
        row.push(r.effective_rank.to_string());
        row.push(r.rank_deficient.to_string());
        row.push(r.nonpositive_x.to_string());
        row.push(r.measured_through.to_string());
        row.push(r.sweeps.to_string());
        row.push(fmt(r.model_gap));
        row.extend(r.x_hat.iter().copied().map(fmt));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn save_trace(trace: &SimulationTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, BufWriter::new(file))
}

/// Splits leading `#` lines from the CSV body.
fn split_comments(text: &str) -> (Vec<&str>, &str) {
    let mut comments = Vec::new();
    let mut rest = text;
    while rest.starts_with('#') {
        let end = rest.find('\n').map(|i| i + 1).unwrap_or(rest.len());
        comments.push(rest[..end].trim_end_matches(['\r', '\n']));
        rest = &rest[end..];
    }
    (comments, rest)
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    line: usize,
}

impl Row<'_> {
    fn str(&self, col: usize) -> Result<&str> {
        self.record
            .get(col)
            .ok_or_else(|| Error::parse("trace", format!("row {}: missing column {col}", self.line)))
    }

    fn parse<T: std::str::FromStr>(&self, col: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let s = self.str(col)?;
        s.trim()
            .parse()
            .map_err(|e| Error::parse("trace", format!("row {}: column {col} = {s:?}: {e}", self.line)))
    }

    fn floats(&self, start: usize, n: usize) -> Result<Vec<f64>> {
        (start..start + n).map(|c| self.parse(c)).collect()
    }
}

/// Reads a trace written by [`write_trace`]. Snapshots are not stored in
/// trace files and come back empty.
pub fn read_trace<R: Read>(mut input: R) -> Result<SimulationTrace> {
    let mut text = String::new();
    input.read_to_string(&mut text).map_err(|e| Error::io("<trace>", e))?;
    let (comments, body) = split_comments(&text);
    let mut config = None;
    let mut der_buses = Vec::new();
    let mut termination = None;
    for c in comments {
        if let Some(json) = c.strip_prefix(CONFIG_TAG) {
            config = Some(ScenarioConfig::from_json(json)?);
        } else if let Some(list) = c.strip_prefix(DER_TAG) {
            der_buses = list
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| Error::parse("trace der_buses", e)))
                .collect::<Result<_>>()?;
        } else if let Some(t) = c.strip_prefix(TERMINATION_TAG) {
            termination = Some(t.to_string());
        }
    }
    let config = config.ok_or_else(|| Error::parse("trace", "missing `# config:` header"))?;

    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let count = |prefix: &str| headers.iter().filter(|h| h.starts_with(prefix)).count();
    let n = count("v_true_");
    let lines = count("x_hat_");
    let expected = trace_header(n, lines);
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::parse("trace", "unexpected column layout"));
    }

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = Row { record: &rec, line: i + 1 };
        let mut c = 1;
        let mut next = |k: usize| {
            let s = c;
            c += k;
            s
        };
        let (vt, vm, pg, qg) = (next(n), next(n), next(n), next(n));
        let tail = next(0);
        records.push(StepRecord {
            step: row.parse(0)?,
            v_true: row.floats(vt, n)?,
            v_meas: row.floats(vm, n)?,
            p_g: row.floats(pg, n)?,
            q_g: row.floats(qg, n)?,
            mae_x: row.parse(tail)?,
            mae_r: row.parse(tail + 1)?,
            mae_x_matrix: row.parse(tail + 2)?,
            mae_r_matrix: row.parse(tail + 3)?,
            band: BandReport {
                violation_count: row.parse(tail + 4)?,
                max_violation: row.parse(tail + 5)?,
            },
            status: StepStatus::parse(row.str(tail + 6)?),
            effective_rank: row.parse(tail + 7)?,
            rank_deficient: row.parse(tail + 8)?,
            nonpositive_x: row.parse(tail + 9)?,
            measured_through: row.parse(tail + 10)?,
            sweeps: row.parse(tail + 11)?,
            model_gap: row.parse(tail + 12)?,
            x_hat: row.floats(tail + 13, lines)?,
        });
    }
    for (i, r) in records.iter().enumerate() {
        if r.step != i as u64 + 1 {
            return Err(Error::parse("trace", format!("step {} out of sequence", r.step)));
        }
    }
    Ok(SimulationTrace {
        config,
        bus_count: n,
        line_count: lines,
        der_buses,
        records,
        snapshots: Vec::new(),
        termination,
    })
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<SimulationTrace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(file)
}

pub fn write_snapshots<W: Write>(snapshots: &[MeasurementSnapshot], out: W) -> Result<()> {
    let n = snapshots.first().map_or(0, |s| s.bus_count());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "u0".to_string()];
    header.extend(numbered("u", n));
    header.extend(numbered("p", n));
    header.extend(numbered("q", n));
    w.write_record(&header)?;
    for s in snapshots {
        let mut row = vec![s.step.to_string(), fmt(s.u0)];
        for v in [&s.u, &s.p, &s.q] {
            row.extend(v.iter().copied().map(fmt));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<snapshots>", e))?;
    Ok(())
}

pub fn save_snapshots(snapshots: &[MeasurementSnapshot], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshots(snapshots, BufWriter::new(file))
}

pub fn read_snapshots<R: Read>(input: R) -> Result<Vec<MeasurementSnapshot>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || (headers.len() - 2) % 3 != 0 {
        return Err(Error::parse("snapshots", "expected step, u0 and three blocks of bus columns"));
    }
    let n = (headers.len() - 2) / 3;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = Row { record: &rec, line: i + 1 };
        out.push(MeasurementSnapshot {
            step: row.parse(0)?,
            u0: row.parse(1)?,
            u: DVector::from_vec(row.floats(2, n)?),
            p: DVector::from_vec(row.floats(2 + n, n)?),
            q: DVector::from_vec(row.floats(2 + 2 * n, n)?),
        });
    }
    Ok(out)
}

pub fn load_snapshots(path: impl AsRef<Path>) -> Result<Vec<MeasurementSnapshot>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshots(file)
}

pub fn write_monte_carlo<W: Write>(table: &MonteCarloTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "window",
        "replicas",
        "failures",
        "mae_x_mean",
        "mae_x_var",
        "mae_X_mean",
        "mae_X_var",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.window.to_string(),
            r.replicas.to_string(),
            r.failures.to_string(),
            fmt(r.mae_x_mean),
            fmt(r.mae_x_var),
            fmt(r.mae_x_matrix_mean),
            fmt(r.mae_x_matrix_var),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<monte carlo>", e))?;
    Ok(())
}

/// One row per successful replica.
pub fn write_monte_carlo_samples<W: Write>(table: &MonteCarloTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window", "replica", "seed", "mae_x", "mae_X"])?;
    for r in &table.rows {
        for (i, s) in r.samples.iter().enumerate() {
            w.write_record([
                r.window.to_string(),
                i.to_string(),
                s.seed.to_string(),
                fmt(s.mae_x),
                fmt(s.mae_x_matrix),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<monte carlo>", e))?;
    Ok(())
}

fn write_csv(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the per-figure tables derived from a trace into `dir`:
/// parameter error over time, voltage profiles and envelope, DER reactive
/// power, and estimated line reactances. Returns the files written.
pub fn write_plot_data(trace: &SimulationTrace, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let recs = &trace.records;
    let n = trace.bus_count;
    let mut written = Vec::new();

    let path = dir.join("mae_evolution.csv");
    write_csv(
        &path,
        ["step", "mae_x", "mae_r", "mae_X", "mae_R"].map(String::from).to_vec(),
        recs.iter().map(|r| {
            let mut row = vec![r.step.to_string()];
            row.extend([r.mae_x, r.mae_r, r.mae_x_matrix, r.mae_r_matrix].map(fmt));
            row
        }),
    )?;
    written.push(path);

    let path = dir.join("voltage_profiles.csv");
    let mut header = vec!["step".to_string()];
    header.extend(numbered("v", n));
    write_csv(
        &path,
        header,
        recs.iter().map(|r| {
            let mut row = vec![r.step.to_string()];
            row.extend(r.v_true.iter().copied().map(fmt));
            row
        }),
    )?;
    written.push(path);

    let path = dir.join("voltage_envelope.csv");
    let (lo, hi) = (trace.config.v_min, trace.config.v_max);
    write_csv(
        &path,
        ["step", "v_min", "bus_min", "v_max", "bus_max", "band_lo", "band_hi", "violations"]
            .map(String::from)
            .to_vec(),
        recs.iter().map(|r| {
            let (mut imin, mut imax) = (0, 0);
            for (i, v) in r.v_true.iter().enumerate() {
                if *v < r.v_true[imin] {
                    imin = i;
                }
                if *v > r.v_true[imax] {
                    imax = i;
                }
            }
            vec![
                r.step.to_string(),
                fmt(r.v_true.get(imin).copied().unwrap_or(f64::NAN)),
                (imin + 1).to_string(),
                fmt(r.v_true.get(imax).copied().unwrap_or(f64::NAN)),
                (imax + 1).to_string(),
                fmt(lo),
                fmt(hi),
                r.band.violation_count.to_string(),
            ]
        }),
    )?;
    written.push(path);

    let path = dir.join("reactive_power.csv");
    let mut header = vec!["step".to_string()];
    header.extend(trace.der_buses.iter().map(|b| format!("q_g_{b}")));
    write_csv(
        &path,
        header,
        recs.iter().map(|r| {
            let mut row = vec![r.step.to_string()];
            row.extend(trace.der_buses.iter().map(|&b| fmt(r.q_g[b - 1])));
            row
        }),
    )?;
    written.push(path);

    let path = dir.join("line_parameters.csv");
    let mut header = vec!["step".to_string()];
    header.extend(numbered("x_hat", trace.line_count));
    write_csv(
        &path,
        header,
        recs.iter().map(|r| {
            let mut row = vec![r.step.to_string()];
            row.extend(r.x_hat.iter().copied().map(fmt));
            row
        }),
    )?;
    written.push(path);

    Ok(written)
}
