//! A configured experiment: planned nominal plus its tracking policy.

use crate::config::ExperimentConfig;
use crate::dynamics::CarModel;
use crate::error::Result;
use crate::large_deviations::{estimate_exit_probability, fit_rate, ExitEstimate, RateFit};
use crate::lqr::TrackingPolicy;
use crate::planner::{optimize_nominal, CostSpec, PlannerReport};
use crate::rng::{derive_seed, tag};
use crate::simulator::{sweep_epsilon, SweepModes, SweepResult};

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: CarModel,
    pub cost: CostSpec,
    pub policy: TrackingPolicy,
    pub report: PlannerReport,
}

#[derive(Debug, Clone)]
pub struct LdpRun {
    pub estimates: Vec<ExitEstimate>,
    pub fit: Result<RateFit>,
}

impl Experiment {
    /// Plans the nominal from the configured start and synthesizes the gains.
    /// A planner that stops on its iteration budget still yields a policy;
    /// check `report.converged`.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let model = config.build_model()?;
        let cost = config.cost_spec()?;
        let (nominal, report) = optimize_nominal(
            &model,
            &cost,
            &config.initial_state(),
            &config.initial_controls(),
            &config.planner_options(),
        )?;
        let policy = TrackingPolicy::synthesize(&model, nominal, &config.lqr_weights()?)?;
        Ok(Self {
            config: config.clone(),
            model,
            cost,
            policy,
            report,
        })
    }

    pub fn sweep(&self, modes: SweepModes, full_grid: bool) -> Result<SweepResult> {
        sweep_epsilon(&self.policy, &self.model, &self.config.sweep_config(modes, full_grid))
    }

    /// Exit estimates over the configured noise levels and the rate fit.
    /// Noise level `i` uses seed `(master_seed, i)`.
    pub fn ldp(&self) -> Result<LdpRun> {
        let l = &self.config.ldp;
        let estimates = l
            .epsilons
            .iter()
            .enumerate()
            .map(|(i, &eps)| {
                estimate_exit_probability(
                    &self.policy,
                    &self.model,
                    l.delta,
                    eps,
                    self.config.ldp_horizon_index(),
                    l.n_runs,
                    derive_seed(self.config.master_seed, &[tag::EXIT, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_rate(&estimates);
        Ok(LdpRun { estimates, fit })
    }
}
