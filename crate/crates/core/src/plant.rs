//! Ground-truth feeder simulator.
//!
//! The physical plant follows the full DistFlow recursion with series losses
//! and is solved by a backward/forward sweep. Loads fluctuate around their
//! nominal values and every measurement carries additive white noise.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::lindistflow::VoltageState;
use crate::network::{FeederTopology, LineParameters, LoadProfile};

pub const MAX_SWEEPS: usize = 100;
/// Convergence threshold on the voltage-magnitude update, p.u.
pub const SWEEP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub voltages: VoltageState,
    /// Sending-end active and reactive flows per line.
    pub p_flow: DVector<f64>,
    pub q_flow: DVector<f64>,
    pub iterations: usize,
    /// `max |dV|` after each sweep.
    pub residuals: Vec<f64>,
}

/// Solves the lossy branch-flow equations for net injections `p`, `q`.
pub fn solve_power_flow(
    topology: &FeederTopology,
    params: &LineParameters,
    p: &DVector<f64>,
    q: &DVector<f64>,
    u0: f64,
) -> Result<PowerFlowSolution> {
    let n = topology.bus_count();
    check_len(n, p.len())?;
    check_len(n, q.len())?;
    check_len(topology.line_count(), params.len())?;
    if !(u0.is_finite() && u0 > 0.0) {
        return Err(Error::Invalid(format!("substation voltage must be positive, got {u0}")));
    }

    let lines = topology.lines();
    let order = topology.sweep_order();
    // index 0 is the substation
    let mut u = vec![u0; n + 1];
    let mut p_send = vec![0.0; lines.len()];
    let mut q_send = vec![0.0; lines.len()];
    let mut current_sq = vec![0.0; lines.len()];
    let mut residuals = Vec::new();

    for sweep in 1..=MAX_SWEEPS {
        for &idx in order.iter().rev() {
            let j = lines[idx].to;
            let (mut p_rec, mut q_rec) = (-p[j - 1], -q[j - 1]);
            for &child in topology.child_lines(j) {
                p_rec += p_send[child];
                q_rec += q_send[child];
            }
            let l = (p_rec * p_rec + q_rec * q_rec) / u[j];
            current_sq[idx] = l;
            p_send[idx] = p_rec + params.r[idx] * l;
            q_send[idx] = q_rec + params.x[idx] * l;
        }

        let mut residual: f64 = 0.0;
        for &idx in order {
            let (from, to) = (lines[idx].from, lines[idx].to);
            let (r, x) = (params.r[idx], params.x[idx]);
            let next = u[from] - 2.0 * (r * p_send[idx] + x * q_send[idx])
                + (r * r + x * x) * current_sq[idx];
            if !(next.is_finite() && next > 0.0) {
                return Err(Error::NonConvergence {
                    iterations: sweep,
                    residual: f64::INFINITY,
                });
            }
            residual = residual.max((next.sqrt() - u[to].sqrt()).abs());
            u[to] = next;
        }
        residuals.push(residual);
        if residual <= SWEEP_TOLERANCE {
            return Ok(PowerFlowSolution {
                voltages: VoltageState {
                    u0,
                    u: DVector::from_column_slice(&u[1..]),
                },
                p_flow: DVector::from_vec(p_send),
                q_flow: DVector::from_vec(q_send),
                iterations: sweep,
                residuals,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_SWEEPS,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Relative load fluctuation.
    pub sigma_d: f64,
    /// Additive measurement noise, p.u.
    pub sigma_m: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d >= 0.0 && self.sigma_m >= 0.0) {
            return Err(Error::Invalid("noise standard deviations must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Endpoint-addressed line perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationEvent {
    pub step: u64,
    /// `[from, to]` bus pair; either orientation matches.
    pub line: [usize; 2],
    pub factor: f64,
    #[serde(default = "default_true")]
    pub preserve_alpha: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct PlantState {
    pub params: LineParameters,
    pub p_d: DVector<f64>,
    pub q_d: DVector<f64>,
    pub p_g: DVector<f64>,
    pub q_g: DVector<f64>,
    pub step: u64,
}

impl PlantState {
    /// Nominal loads, idle DERs, step 0.
    pub fn new(params: LineParameters, profile: &LoadProfile) -> Self {
        let n = profile.p_d0.len();
        Self {
            params,
            p_d: profile.p_d0.clone(),
            q_d: profile.q_d0.clone(),
            p_g: DVector::zeros(n),
            q_g: DVector::zeros(n),
            step: 0,
        }
    }

    pub fn net_injections(&self) -> (DVector<f64>, DVector<f64>) {
        (&self.p_g - &self.p_d, &self.q_g - &self.q_d)
    }
}

/// Redraws every load as `nominal * (1 + sigma_d * nu)` and advances the step.
pub fn step_loads<R: Rng>(
    state: &mut PlantState,
    profile: &LoadProfile,
    noise: &NoiseModel,
    rng: &mut R,
) {
    for (cur, &nom) in state.p_d.iter_mut().zip(profile.p_d0.iter()) {
        let nu: f64 = rng.sample(StandardNormal);
        *cur = nom * (1.0 + noise.sigma_d * nu);
    }
    for (cur, &nom) in state.q_d.iter_mut().zip(profile.q_d0.iter()) {
        let nu: f64 = rng.sample(StandardNormal);
        *cur = nom * (1.0 + noise.sigma_d * nu);
    }
    state.step += 1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSnapshot {
    pub step: u64,
    pub u0: f64,
    pub u: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl MeasurementSnapshot {
    pub fn bus_count(&self) -> usize {
        self.u.len()
    }
}

/// Noisy reading of squared voltages and net injections at the current step.
pub fn measure<R: Rng>(
    state: &PlantState,
    truth: &VoltageState,
    noise: &NoiseModel,
    rng: &mut R,
) -> MeasurementSnapshot {
    let mut eps = |v: f64| {
        if noise.sigma_m == 0.0 {
            v
        } else {
            let e: f64 = rng.sample(StandardNormal);
            v + noise.sigma_m * e
        }
    };
    let (p, q) = state.net_injections();
    let u0 = eps(truth.u0);
    let u = truth.u.map(&mut eps);
    let p = p.map(&mut eps);
    let q = q.map(&mut eps);
    MeasurementSnapshot {
        step: state.step,
        u0,
        u,
        p,
        q,
    }
}

pub fn apply_event(
    state: &mut PlantState,
    topology: &FeederTopology,
    event: &PerturbationEvent,
) -> Result<()> {
    let idx = topology.find_line(event.line[0], event.line[1])?;
    state.params.scale_line(idx, event.factor, event.preserve_alpha)
}

/// Plant with its own random streams: one for loads, one for sensors.
#[derive(Debug, Clone)]
pub struct Plant {
    pub state: PlantState,
    pub profile: LoadProfile,
    pub noise: NoiseModel,
    load_rng: ChaCha8Rng,
    meas_rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(params: LineParameters, profile: LoadProfile, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        profile.validate()?;
        check_len(profile.p_d0.len(), params.len())?;
        let mut load_rng = ChaCha8Rng::seed_from_u64(noise.seed);
        load_rng.set_stream(1);
        let mut meas_rng = ChaCha8Rng::seed_from_u64(noise.seed);
        meas_rng.set_stream(2);
        Ok(Self {
            state: PlantState::new(params, &profile),
            profile,
            noise,
            load_rng,
            meas_rng,
        })
    }

    pub fn step_loads(&mut self) {
        step_loads(&mut self.state, &self.profile, &self.noise, &mut self.load_rng);
    }

    pub fn measure(&mut self, truth: &VoltageState) -> MeasurementSnapshot {
        measure(&self.state, truth, &self.noise, &mut self.meas_rng)
    }

    pub fn apply_event(&mut self, topology: &FeederTopology, event: &PerturbationEvent) -> Result<()> {
        apply_event(&mut self.state, topology, event)
    }

    pub fn apply_setpoints(&mut self, p_g: &DVector<f64>, q_g: &DVector<f64>) -> Result<()> {
        check_len(self.state.p_g.len(), p_g.len())?;
        check_len(self.state.q_g.len(), q_g.len())?;
        self.state.p_g.copy_from(p_g);
        self.state.q_g.copy_from(q_g);
        Ok(())
    }

    pub fn solve(&self, topology: &FeederTopology, u0: f64) -> Result<PowerFlowSolution> {
        let (p, q) = self.state.net_injections();
        solve_power_flow(topology, &self.state.params, &p, &q, u0)
    }
}
