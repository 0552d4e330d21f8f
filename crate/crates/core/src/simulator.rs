//! Stochastic execution of a tracking policy and the NMSE noise sweep.

use nalgebra::DVector;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{stack, step_noisy, Control, NominalTrajectory, NoiseModel, State, SystemModel};
use crate::error::{Error, Result};
use crate::lqr::{LqrWeights, TrackingPolicy};
use crate::planner::{optimize_nominal, CostSpec, PlannerOptions};
use crate::rng::{derive_seed, tag, SimRng};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Tracking feedback `u^o_t − L_t (x_t − x^o_t)`, clamped.
    ClosedLoop,
    /// The planned controls `u^o_t`, regardless of state.
    OpenLoop,
}

impl ExecutionMode {
    fn stream_tag(self) -> u64 {
        match self {
            ExecutionMode::ClosedLoop => tag::CLOSED_LOOP,
            ExecutionMode::OpenLoop => tag::OPEN_LOOP,
        }
    }
}

/// One stochastic execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<State>,
    /// Controls actually applied (after clamping).
    pub controls: Vec<Control>,
    pub noises: Vec<State>,
    pub seed: u64,
    pub mode: ExecutionMode,
}

/// `max_t ‖u_t‖₂`, the reference scale for the process noise.
pub fn noise_scale(controls: &[Control]) -> Result<f64> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("control sequence is empty".into()));
    }
    Ok(controls.iter().map(|u| u.norm()).fold(0.0, f64::max))
}

fn apply(
    model: &dyn SystemModel,
    policy: &TrackingPolicy,
    mode: ExecutionMode,
    t: usize,
    x: &State,
) -> Result<Control> {
    match mode {
        ExecutionMode::ClosedLoop => policy.feedback_control(model, t, x),
        ExecutionMode::OpenLoop => Ok(policy.nominal.controls[t].clone()),
    }
}

/// Executes the policy once under i.i.d. Gaussian noise with per-component
/// standard deviation `epsilon · max_t ‖u^o_t‖`. The noise stream is seeded
/// from `seed` alone.
pub fn rollout(
    policy: &TrackingPolicy,
    model: &dyn SystemModel,
    epsilon: f64,
    mode: ExecutionMode,
    seed: u64,
) -> Result<Rollout> {
    let noise = NoiseModel::new(epsilon, noise_scale(&policy.nominal.controls)?, model.state_dim())?;
    let mut rng = SimRng::seed_from_u64(seed);
    let k = policy.horizon();
    let mut states = Vec::with_capacity(k + 1);
    let mut controls = Vec::with_capacity(k);
    let mut noises = Vec::with_capacity(k);
    states.push(policy.nominal.states[0].clone());
    for t in 0..k {
        let x = &states[t];
        let u = apply(model, policy, mode, t, x)?;
        let w = noise.sample(&mut rng);
        let next = step_noisy(model, x, &u, &w)?;
        states.push(next);
        controls.push(u);
        noises.push(w);
    }
    Ok(Rollout {
        states,
        controls,
        noises,
        seed,
        mode,
    })
}

/// Recomputes the states of a rollout from its recorded noises.
pub fn replay(policy: &TrackingPolicy, model: &dyn SystemModel, run: &Rollout) -> Result<Vec<State>> {
    let mut states = vec![policy.nominal.states[0].clone()];
    for (t, w) in run.noises.iter().enumerate() {
        let x = &states[t];
        let u = apply(model, policy, run.mode, t, x)?;
        let next = step_noisy(model, x, &u, w)?;
        states.push(next);
    }
    Ok(states)
}

/// `‖x^p − x^j‖² / ‖x^p‖² × 100` for one run, on stacked trajectories.
pub fn nmse_single(planned: &DVector<f64>, executed: &[State]) -> Result<f64> {
    let denom = planned.norm_squared();
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "planned trajectory has zero norm; NMSE undefined".into(),
        ));
    }
    let exec = stack(executed);
    if exec.len() != planned.len() {
        return Err(Error::DimensionMismatch {
            context: "executed trajectory",
            expected: planned.len(),
            got: exec.len(),
        });
    }
    Ok((planned - exec).norm_squared() / denom * 100.0)
}

/// Average NMSE (percent) of `runs` against the planned trajectory. Stacking
/// includes the initial state.
pub fn nmse(planned: &NominalTrajectory, runs: &[Rollout]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to average".into()));
    }
    let stacked = planned.stacked_states();
    let each = runs
        .iter()
        .map(|r| nmse_single(&stacked, &r.states))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::mean(&each))
}

/// Arithmetic noise-level grid `start, start + step, …, ≤ end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    pub start: f64,
    pub step: f64,
    pub end: f64,
}

impl EpsilonGrid {
    /// Desk-scale grid: 0.01 to 0.15 in steps of 0.01.
    pub const DESK: EpsilonGrid = EpsilonGrid {
        start: 0.01,
        step: 0.01,
        end: 0.15,
    };
    /// Fine grid: 0.001 to 0.1501 in steps of 0.001.
    pub const FULL: EpsilonGrid = EpsilonGrid {
        start: 0.001,
        step: 0.001,
        end: 0.1501,
    };

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.start > 0.0 && self.start.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon grid start must be > 0, got {}",
                self.start
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon grid step must be > 0, got {}",
                self.step
            )));
        }
        if !(self.end >= self.start && self.end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon grid end {} is below start {}",
                self.end, self.start
            )));
        }
        let count = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| self.start + i as f64 * self.step).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepModes {
    Both,
    Closed,
    Open,
}

impl SweepModes {
    fn includes(self, mode: ExecutionMode) -> bool {
        matches!(
            (self, mode),
            (SweepModes::Both, _)
                | (SweepModes::Closed, ExecutionMode::ClosedLoop)
                | (SweepModes::Open, ExecutionMode::OpenLoop)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// Percent; NaN when the mode was not run.
    pub avg_nmse_closed: f64,
    pub avg_nmse_open: f64,
    pub sd_closed: f64,
    pub sd_open: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn epsilons(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.epsilon).collect()
    }

    pub fn closed(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.avg_nmse_closed).collect()
    }

    pub fn open(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.avg_nmse_open).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub grid: EpsilonGrid,
    pub n_runs: usize,
    pub master_seed: u64,
    pub modes: SweepModes,
}

/// Seed of run `j` at grid index `i` in the given mode.
pub fn run_seed(master: u64, mode: ExecutionMode, grid_index: usize, run: usize) -> u64 {
    derive_seed(master, &[mode.stream_tag(), grid_index as u64, run as u64])
}

fn mode_stats(
    policy: &TrackingPolicy,
    model: &dyn SystemModel,
    stacked: &DVector<f64>,
    epsilon: f64,
    mode: ExecutionMode,
    grid_index: usize,
    cfg: &SweepConfig,
) -> Result<(f64, f64)> {
    let per_run = (0..cfg.n_runs)
        .into_par_iter()
        .map(|j| {
            let run = rollout(policy, model, epsilon, mode, run_seed(cfg.master_seed, mode, grid_index, j))?;
            nmse_single(stacked, &run.states)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((stats::mean(&per_run), stats::sample_sd(&per_run)))
}

/// Runs `n_runs` executions per mode at every grid point and reports the
/// average NMSE. Runs are independent and aggregated in index order, so the
/// result is identical for any thread count.
pub fn sweep_epsilon(policy: &TrackingPolicy, model: &dyn SystemModel, cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let stacked = policy.nominal.stacked_states();
    let mut rows = Vec::new();
    for (i, &eps) in cfg.grid.values()?.iter().enumerate() {
        let mut row = SweepRow {
            epsilon: eps,
            avg_nmse_closed: f64::NAN,
            avg_nmse_open: f64::NAN,
            sd_closed: f64::NAN,
            sd_open: f64::NAN,
            n_runs: cfg.n_runs,
        };
        let annotate = |e: Error| Error::Numerical(format!("sweep failed at epsilon = {eps}: {e}"));
        if cfg.modes.includes(ExecutionMode::ClosedLoop) {
            let (m, sd) = mode_stats(policy, model, &stacked, eps, ExecutionMode::ClosedLoop, i, cfg).map_err(annotate)?;
            row.avg_nmse_closed = m;
            row.sd_closed = sd;
        }
        if cfg.modes.includes(ExecutionMode::OpenLoop) {
            let (m, sd) = mode_stats(policy, model, &stacked, eps, ExecutionMode::OpenLoop, i, cfg).map_err(annotate)?;
            row.avg_nmse_open = m;
            row.sd_open = sd;
        }
        rows.push(row);
    }
    Ok(SweepResult { rows })
}

/// Least-squares coefficient `c` of `nmse ≈ c · ε²` (fit through the origin).
pub fn quadratic_nmse_coefficient(epsilons: &[f64], nmse: &[f64]) -> f64 {
    let num: f64 = epsilons.iter().zip(nmse).map(|(e, y)| e * e * y).sum();
    let den: f64 = epsilons.iter().map(|e| e.powi(4)).sum();
    num / den
}

/// Optional replanning during execution: when the tracking error exceeds
/// `threshold`, the remaining horizon is re-optimized from the current state
/// and a fresh tracking policy synthesized around it.
#[derive(Debug, Clone)]
pub struct ReplanHook {
    pub threshold: f64,
    pub cost: CostSpec,
    pub planner: PlannerOptions,
    pub wx: Vec<f64>,
    pub wu: Vec<f64>,
    pub wx_terminal: Vec<f64>,
}

/// Closed-loop execution with the replanning hook. Returns the rollout and
/// the time indices at which replanning fired.
pub fn rollout_with_replanning(
    policy: &TrackingPolicy,
    model: &dyn SystemModel,
    epsilon: f64,
    seed: u64,
    hook: &ReplanHook,
) -> Result<(Rollout, Vec<usize>)> {
    let noise = NoiseModel::new(epsilon, noise_scale(&policy.nominal.controls)?, model.state_dim())?;
    let mut rng = SimRng::seed_from_u64(seed);
    let k = policy.horizon();
    let mut active = policy.clone();
    let mut offset = 0;
    let mut fired = Vec::new();
    let mut states = vec![policy.nominal.states[0].clone()];
    let mut controls = Vec::with_capacity(k);
    let mut noises = Vec::with_capacity(k);
    for t in 0..k {
        let x = states[t].clone();
        let local = t - offset;
        if local > 0 && (&x - &active.nominal.states[local]).norm() > hook.threshold {
            let remaining = k - t;
            let init = active.nominal.controls[local..].to_vec();
            let (nominal, _) = optimize_nominal(model, &hook.cost, &x, &init, &hook.planner)?;
            let weights = LqrWeights::diagonal(remaining, &hook.wx, &hook.wu, &hook.wx_terminal)?;
            active = TrackingPolicy::synthesize(model, nominal, &weights)?;
            offset = t;
            fired.push(t);
        }
        let u = active.feedback_control(model, t - offset, &x)?;
        let w = noise.sample(&mut rng);
        states.push(step_noisy(model, &x, &u, &w)?);
        controls.push(u);
        noises.push(w);
    }
    Ok((
        Rollout {
            states,
            controls,
            noises,
            seed,
            mode: ExecutionMode::ClosedLoop,
        },
        fired,
    ))
}
