//! Closed-loop experiment driver and Monte Carlo accuracy study.
//!
//! One closed-loop step, in order: redraw loads, fire due events, solve the
//! plant under the set-points commanded last step, measure, update the
//! window and estimate, solve the controller, record. Set-points commanded
//! at step `k` act on the plant from step `k + 1`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{solve_control, ControlProblem, SolveStatus};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatedParameters, MeasurementWindow};
use crate::lindistflow::{
    build_sensitivities, predict_voltages, sensitivities_from_vectors, SensitivityMatrices,
    VoltageState,
};
use crate::metrics::{band_report, mae_matrix, mae_vector, BandReport};
use crate::network::{load_feeder, DerFleet, DerRecord, Feeder, LineParameters};
use crate::plant::{solve_power_flow, MeasurementSnapshot, NoiseModel, PerturbationEvent, Plant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    /// Dispatch against the latest window estimate.
    EstimatedModel,
    /// Dispatch against the true parameters as they were at step 0.
    FrozenTrueModel,
    /// DERs stay idle.
    NoControl,
}

/// Physics used to generate the plant's voltages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthModel {
    /// Lossy branch-flow equations, backward/forward sweep.
    Nonlinear,
    /// The lossless linear model itself.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlowLimit {
    Uniform(f64),
    PerLine(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Feeder file; relative paths resolve against the config file.
    pub feeder: PathBuf,
    #[serde(default = "defaults::horizon")]
    pub horizon: u64,
    #[serde(default = "defaults::window")]
    pub window: usize,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::v_min")]
    pub v_min: f64,
    #[serde(default = "defaults::v_max")]
    pub v_max: f64,
    /// Tightening of the controller's band on each side, p.u. of V. The band
    /// used for reporting violations is always `[v_min, v_max]`.
    #[serde(default)]
    pub control_margin: f64,
    #[serde(default = "defaults::sigma_d")]
    pub sigma_d: f64,
    #[serde(default = "defaults::sigma_m")]
    pub sigma_m: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::mode")]
    pub mode: ControllerMode,
    #[serde(default = "defaults::truth_model")]
    pub truth_model: TruthModel,
    #[serde(default)]
    pub events: Vec<PerturbationEvent>,
    #[serde(default)]
    pub f_max: Option<FlowLimit>,
    /// Relative error of the initial reactance guess used before the first
    /// estimate is available.
    #[serde(default)]
    pub initial_guess_error: f64,
    #[serde(default = "defaults::estimate_every")]
    pub estimate_every: u64,
    /// Squared substation voltage.
    #[serde(default = "defaults::u0")]
    pub u0: f64,
    /// Replaces the feeder file's DER section when present.
    #[serde(default)]
    pub ders: Option<Vec<DerRecord>>,
}

mod defaults {
    use super::{ControllerMode, TruthModel};

    pub fn horizon() -> u64 {
        150
    }
    pub fn window() -> usize {
        20
    }
    pub fn gamma() -> f64 {
        1000.0
    }
    pub fn v_min() -> f64 {
        0.95
    }
    pub fn v_max() -> f64 {
        1.05
    }
    pub fn sigma_d() -> f64 {
        0.01
    }
    pub fn sigma_m() -> f64 {
        2e-4
    }
    pub fn mode() -> ControllerMode {
        ControllerMode::EstimatedModel
    }
    pub fn truth_model() -> TruthModel {
        TruthModel::Nonlinear
    }
    pub fn estimate_every() -> u64 {
        1
    }
    pub fn u0() -> f64 {
        1.0
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("scenario config", e))
    }

    /// Reads a config and resolves its feeder path against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.feeder.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.feeder = dir.join(&cfg.feeder);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            sigma_d: self.sigma_d,
            sigma_m: self.sigma_m,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.horizon < 1 {
            errors.push("horizon must be at least 1".to_string());
        }
        if self.window < 1 {
            errors.push("window must be at least 1".to_string());
        }
        if self.estimate_every < 1 {
            errors.push("estimate_every must be at least 1".to_string());
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            errors.push(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_max && self.v_max.is_finite()) {
            errors.push(format!("invalid voltage band [{}, {}]", self.v_min, self.v_max));
        }
        if !(self.control_margin >= 0.0
            && self.v_min + self.control_margin < self.v_max - self.control_margin)
        {
            errors.push(format!("control margin {} empties the band", self.control_margin));
        }
        if !(self.sigma_d >= 0.0 && self.sigma_m >= 0.0) {
            errors.push("noise levels must be nonnegative".to_string());
        }
        if self.initial_guess_error.is_nan() || self.initial_guess_error < 0.0 {
            errors.push("initial_guess_error must be nonnegative".to_string());
        }
        if !(self.u0.is_finite() && self.u0 > 0.0) {
            errors.push(format!("u0 must be positive, got {}", self.u0));
        }
        for ev in &self.events {
            if ev.step < 1 || ev.step > self.horizon {
                errors.push(format!("event step {} outside 1..={}", ev.step, self.horizon));
            }
            if !(ev.factor.is_finite() && ev.factor > 0.0) {
                errors.push(format!("event factor must be positive, got {}", ev.factor));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errors.join("; ")))
        }
    }

    /// Controller band `[(v_min + margin)^2, (v_max - margin)^2]`.
    pub fn control_band(&self, bus_count: usize) -> (DVector<f64>, DVector<f64>) {
        let lo = (self.v_min + self.control_margin).powi(2);
        let hi = (self.v_max - self.control_margin).powi(2);
        (
            DVector::from_element(bus_count, lo),
            DVector::from_element(bus_count, hi),
        )
    }

    /// Reporting band `[v_min^2, v_max^2]`.
    pub fn report_band(&self, bus_count: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(bus_count, self.v_min.powi(2)),
            DVector::from_element(bus_count, self.v_max.powi(2)),
        )
    }
}

/// Feeder plus the config-level overrides applied to it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub feeder: Feeder,
    pub ders: DerFleet,
    pub f_max: DVector<f64>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig, feeder: Feeder) -> Result<Self> {
        config.validate()?;
        let n = feeder.topology.bus_count();
        let ders = match &config.ders {
            None => feeder.ders.clone(),
            Some(records) => {
                let mut fleet = DerFleet::empty(n);
                for d in records {
                    if d.bus == 0 || d.bus > n {
                        return Err(Error::Invalid(format!("DER at unknown bus {}", d.bus)));
                    }
                    let i = d.bus - 1;
                    fleet.p_min[i] = d.p_min;
                    fleet.p_max[i] = d.p_max;
                    fleet.q_min[i] = d.q_min;
                    fleet.q_max[i] = d.q_max;
                }
                fleet.validate()?;
                fleet
            }
        };
        let lines = feeder.topology.line_count();
        let f_max = match &config.f_max {
            None => DVector::from_element(lines, f64::INFINITY),
            Some(FlowLimit::Uniform(f)) => DVector::from_element(lines, *f),
            Some(FlowLimit::PerLine(v)) => {
                if v.len() != lines {
                    return Err(Error::Dimension {
                        expected: lines,
                        got: v.len(),
                    });
                }
                DVector::from_column_slice(v)
            }
        };
        if f_max.iter().any(|f| f.is_nan() || *f <= 0.0) {
            return Err(Error::Invalid("flow limits must be positive".into()));
        }
        for ev in &config.events {
            feeder.topology.find_line(ev.line[0], ev.line[1])?;
        }
        Ok(Self {
            config,
            feeder,
            ders,
            f_max,
        })
    }

    pub fn load(config: ScenarioConfig) -> Result<Self> {
        let feeder = load_feeder(&config.feeder)?;
        Self::new(config, feeder)
    }

    fn truth_voltages(&self, params: &LineParameters, p: &DVector<f64>, q: &DVector<f64>) -> Result<(VoltageState, usize)> {
        let topology = &self.feeder.topology;
        match self.config.truth_model {
            TruthModel::Nonlinear => {
                let sol = solve_power_flow(topology, params, p, q, self.config.u0)?;
                Ok((sol.voltages, sol.iterations))
            }
            TruthModel::Linear => {
                let s = build_sensitivities(topology, params)?;
                Ok((predict_voltages(&s, p, q, self.config.u0)?, 0))
            }
        }
    }

    /// True parameters after every event scheduled at or before `step`.
    pub fn true_parameters_at(&self, step: u64) -> Result<LineParameters> {
        let mut params = self.feeder.params.clone();
        for ev in self.config.events.iter().filter(|e| e.step <= step) {
            let idx = self.feeder.topology.find_line(ev.line[0], ev.line[1])?;
            params.scale_line(idx, ev.factor, ev.preserve_alpha)?;
        }
        Ok(params)
    }

    fn initial_guess(&self) -> Result<SensitivityMatrices> {
        let truth = &self.feeder.params;
        let err = self.config.initial_guess_error;
        let x = if err == 0.0 {
            truth.x.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(3);
            truth.x.map(|v| {
                let nu: f64 = rng.sample(StandardNormal);
                v * (1.0 + err * nu)
            })
        };
        let r = truth.alpha.component_mul(&x);
        sensitivities_from_vectors(&self.feeder.topology, &r, &x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    /// No DER had freedom to move.
    Fixed,
    NoControl,
    /// Controller failed; previous set-points stay in force.
    Held(String),
}

impl StepStatus {
    pub fn label(&self) -> String {
        match self {
            StepStatus::Optimal => "optimal".into(),
            StepStatus::Fixed => "fixed".into(),
            StepStatus::NoControl => "no-control".into(),
            StepStatus::Held(reason) => format!("held: {reason}"),
        }
    }

    pub fn parse(label: &str) -> Self {
        match label {
            "optimal" => StepStatus::Optimal,
            "fixed" => StepStatus::Fixed,
            "no-control" => StepStatus::NoControl,
            other => StepStatus::Held(other.strip_prefix("held: ").unwrap_or(other).to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub v_true: Vec<f64>,
    pub v_meas: Vec<f64>,
    /// Set-points commanded at the end of this step; they act from the next step.
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub mae_x: f64,
    pub mae_r: f64,
    pub mae_x_matrix: f64,
    pub mae_r_matrix: f64,
    pub band: BandReport,
    pub status: StepStatus,
    pub effective_rank: usize,
    pub rank_deficient: bool,
    pub nonpositive_x: usize,
    /// Newest measurement step the controller saw.
    pub measured_through: u64,
    pub sweeps: usize,
    /// `max |u_plant - u_linear|` with the true current parameters.
    pub model_gap: f64,
    pub x_hat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub config: ScenarioConfig,
    pub bus_count: usize,
    pub line_count: usize,
    pub der_buses: Vec<usize>,
    pub records: Vec<StepRecord>,
    /// Every measurement taken, in order.
    pub snapshots: Vec<MeasurementSnapshot>,
    /// Set when the run stopped early.
    pub termination: Option<String>,
}

pub fn run_closed_loop(cfg: &ScenarioConfig) -> Result<SimulationTrace> {
    Scenario::load(cfg.clone())?.run_closed_loop()
}

impl Scenario {
    pub fn run_closed_loop(&self) -> Result<SimulationTrace> {
        let cfg = &self.config;
        let topology = &self.feeder.topology;
        let n = topology.bus_count();
        let alpha = self.feeder.params.alpha.clone();
        let frozen = build_sensitivities(topology, &self.feeder.params)?;
        let guess = self.initial_guess()?;
        let (u_lo, u_hi) = cfg.control_band(n);
        let (report_lo, report_hi) = cfg.report_band(n);

        let mut plant = Plant::new(
            self.feeder.params.clone(),
            self.feeder.loads.clone(),
            cfg.noise(),
        )?;
        let mut window = MeasurementWindow::new(cfg.window)?;
        let mut latest: Option<EstimatedParameters> = None;
        let mut records = Vec::with_capacity(cfg.horizon as usize);
        let mut termination = None;
        let mut snapshots = Vec::with_capacity(cfg.horizon as usize);

        for k in 1..=cfg.horizon {
            plant.step_loads();
            for ev in cfg.events.iter().filter(|e| e.step == k) {
                plant.apply_event(topology, ev)?;
            }
            let (p, q) = plant.state.net_injections();
            let (truth, sweeps) = match self.truth_voltages(&plant.state.params, &p, &q) {
                Ok(t) => t,
                Err(e) => {
                    termination = Some(format!("step {k}: {e}"));
                    break;
                }
            };
            let true_s = build_sensitivities(topology, &plant.state.params)?;
            let linear = predict_voltages(&true_s, &p, &q, cfg.u0)?;
            let model_gap = (&truth.u - &linear.u).amax();

            let snap = plant.measure(&truth);
            let p_d_meas = &plant.state.p_g - &snap.p;
            let q_d_meas = &plant.state.q_g - &snap.q;
            let u0_meas = snap.u0;
            let v_meas = snap.u.iter().map(|u| u.max(0.0).sqrt()).collect();
            let measured_through = snap.step;
            snapshots.push(snap.clone());
            window.push(snap)?;
            if (k - 1) % cfg.estimate_every == 0 {
                // a failed estimate keeps the previous one
                if let Ok(est) = estimate(&window, topology, &alpha) {
                    latest = Some(est);
                }
            }

            let model = match cfg.mode {
                ControllerMode::NoControl => None,
                ControllerMode::FrozenTrueModel => Some(&frozen),
                ControllerMode::EstimatedModel => {
                    Some(latest.as_ref().map(|e| &e.sensitivities).unwrap_or(&guess))
                }
            };
            let status = match model {
                None => StepStatus::NoControl,
                Some(model) => {
                    let prob = ControlProblem {
                        sensitivities: model.clone(),
                        p_d: p_d_meas,
                        q_d: q_d_meas,
                        u0: u0_meas,
                        ders: self.ders.clone(),
                        u_lo: u_lo.clone(),
                        u_hi: u_hi.clone(),
                        f_max: self.f_max.clone(),
                        incidence_inv: topology.incidence_inverse().clone(),
                        gamma: cfg.gamma,
                    };
                    match solve_control(&prob) {
                        Ok(sp) => {
                            plant.apply_setpoints(&sp.p_g, &sp.q_g)?;
                            match sp.status {
                                SolveStatus::Optimal => StepStatus::Optimal,
                                SolveStatus::Fixed => StepStatus::Fixed,
                            }
                        }
                        Err(e) => StepStatus::Held(e.to_string()),
                    }
                }
            };

            let true_params = &plant.state.params;
            let (mae_x, mae_r, mae_xm, mae_rm, rank, deficient, nonpos, x_hat) = match &latest {
                Some(est) => (
                    mae_vector(est.x.as_slice(), true_params.x.as_slice())?,
                    mae_vector(est.r.as_slice(), true_params.r.as_slice())?,
                    mae_matrix(&est.sensitivities.x, &true_s.x)?,
                    mae_matrix(&est.sensitivities.r, &true_s.r)?,
                    est.effective_rank,
                    est.rank_deficient,
                    est.nonpositive_lines.len(),
                    est.x.as_slice().to_vec(),
                ),
                None => (
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                    0,
                    true,
                    0,
                    vec![f64::NAN; topology.line_count()],
                ),
            };
            records.push(StepRecord {
                step: k,
                v_true: truth.magnitudes().as_slice().to_vec(),
                v_meas,
                p_g: plant.state.p_g.as_slice().to_vec(),
                q_g: plant.state.q_g.as_slice().to_vec(),
                mae_x,
                mae_r,
                mae_x_matrix: mae_xm,
                mae_r_matrix: mae_rm,
                band: band_report(&truth, &report_lo, &report_hi),
                status,
                effective_rank: rank,
                rank_deficient: deficient,
                nonpositive_x: nonpos,
                measured_through,
                sweeps,
                model_gap,
                x_hat,
            });
        }

        Ok(SimulationTrace {
            config: cfg.clone(),
            bus_count: n,
            line_count: topology.line_count(),
            der_buses: self.ders.der_buses(),
            records,
            snapshots,
            termination,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaResult {
    pub seed: u64,
    pub mae_x: f64,
    pub mae_x_matrix: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRow {
    pub window: usize,
    pub replicas: usize,
    pub failures: usize,
    pub mae_x_mean: f64,
    pub mae_x_var: f64,
    pub mae_x_matrix_mean: f64,
    pub mae_x_matrix_var: f64,
    /// Successful replicas, in seed order.
    pub samples: Vec<ReplicaResult>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloTable {
    pub rows: Vec<MonteCarloRow>,
}

pub fn run_monte_carlo(cfg: &ScenarioConfig, windows: &[usize], replicas: usize) -> Result<MonteCarloTable> {
    Scenario::load(cfg.clone())?.run_monte_carlo(windows, replicas)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() < 2 {
        f64::NAN
    } else {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

impl Scenario {
    /// For each window size, fills `replicas` independent windows from the
    /// plant with idle DERs and scores the resulting estimate.
    pub fn run_monte_carlo(&self, windows: &[usize], replicas: usize) -> Result<MonteCarloTable> {
        if replicas < 2 {
            return Err(Error::Invalid("Monte Carlo needs at least 2 replicas".into()));
        }
        if windows.contains(&0) {
            return Err(Error::Invalid("window sizes must be at least 1".into()));
        }
        let topology = &self.feeder.topology;
        let truth_s = build_sensitivities(topology, &self.feeder.params)?;
        let mut rows = Vec::with_capacity(windows.len());
        for &m in windows {
            let mut master = ChaCha8Rng::seed_from_u64(self.config.seed);
            master.set_stream(1_000 + m as u64);
            let seeds: Vec<u64> = (0..replicas).map(|_| master.next_u64()).collect();
            let outcomes: Vec<Result<ReplicaResult>> = seeds
                .par_iter()
                .map(|&seed| self.replica(m, seed, &truth_s))
                .collect();
            let mut samples = Vec::new();
            let mut errors = Vec::new();
            for o in outcomes {
                match o {
                    Ok(r) => samples.push(r),
                    Err(e) => errors.push(e.to_string()),
                }
            }
            let (mae_x_mean, mae_x_var) =
                mean_var(&samples.iter().map(|s| s.mae_x).collect::<Vec<_>>());
            let (mae_x_matrix_mean, mae_x_matrix_var) =
                mean_var(&samples.iter().map(|s| s.mae_x_matrix).collect::<Vec<_>>());
            rows.push(MonteCarloRow {
                window: m,
                replicas,
                failures: errors.len(),
                mae_x_mean,
                mae_x_var,
                mae_x_matrix_mean,
                mae_x_matrix_var,
                samples,
                errors,
            });
        }
        Ok(MonteCarloTable { rows })
    }

    fn replica(&self, m: usize, seed: u64, truth_s: &SensitivityMatrices) -> Result<ReplicaResult> {
        let topology = &self.feeder.topology;
        let noise = NoiseModel {
            seed,
            ..self.config.noise()
        };
        let mut plant = Plant::new(self.feeder.params.clone(), self.feeder.loads.clone(), noise)?;
        let mut window = MeasurementWindow::new(m)?;
        for _ in 0..m {
            plant.step_loads();
            let (p, q) = plant.state.net_injections();
            let (truth, _) = self.truth_voltages(&plant.state.params, &p, &q)?;
            window.push(plant.measure(&truth))?;
        }
        let est = estimate(&window, topology, &self.feeder.params.alpha)?;
        Ok(ReplicaResult {
            seed,
            mae_x: mae_vector(est.x.as_slice(), self.feeder.params.x.as_slice())?,
            mae_x_matrix: mae_matrix(&est.sensitivities.x, &truth_s.x)?,
        })
    }
}
