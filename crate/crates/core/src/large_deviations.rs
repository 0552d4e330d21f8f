//! Small-noise asymptotics on the controller's step grid: the discrete
//! action functional, Monte Carlo tube-exit probabilities and the check that
//! `ln p` is affine in `1/ε²`.

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_noisy, NoiseModel, State, SystemModel};
use crate::error::{Error, Result};
use crate::lqr::TrackingPolicy;
use crate::rng::{derive_seed, tag, SimRng};
use crate::simulator::noise_scale;
use crate::stats::{linear_fit, wilson_interval};

type RateFn<'a> = dyn Fn(usize, &State) -> Result<State> + Send + Sync + 'a;

/// Drift `b(t, x)` of the perturbed system, in state units per second.
pub struct DriftField<'a> {
    rate: Box<RateFn<'a>>,
    dt: f64,
    nominal: Option<Vec<State>>,
}

impl std::fmt::Debug for DriftField<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftField")
            .field("dt", &self.dt)
            .field("nominal", &self.nominal.as_ref().map(Vec::len))
            .finish_non_exhaustive()
    }
}

impl<'a> DriftField<'a> {
    /// Drift given directly as a rate `b(t, x)`.
    pub fn from_rate<F>(dt: f64, rate: F) -> Result<Self>
    where
        F: Fn(usize, &State) -> State + Send + Sync + 'a,
    {
        check_dt(dt)?;
        Ok(Self {
            rate: Box::new(move |t, x| Ok(rate(t, x))),
            dt,
            nominal: None,
        })
    }

    /// Drift of a one-step map `g(t, x)`: `b = (g(t, x) − x) / dt`.
    pub fn from_map<F>(dt: f64, map: F) -> Result<Self>
    where
        F: Fn(usize, &State) -> Result<State> + Send + Sync + 'a,
    {
        check_dt(dt)?;
        Ok(Self {
            rate: Box::new(move |t, x| Ok((map(t, x)? - x) / dt)),
            dt,
            nominal: None,
        })
    }

    /// Feedback-compensated closed loop `g(t, x) = f(x, u^o_t − L_t (x − x^o_t))`.
    /// Its fixed path is the policy's nominal trajectory.
    pub fn from_policy(model: &'a dyn SystemModel, policy: &'a TrackingPolicy) -> Result<Self> {
        let mut field = Self::from_map(model.step_period(), move |t, x| {
            Ok(model.transition(x, &policy.feedback_control(model, t, x)?))
        })?;
        field.nominal = Some(policy.nominal.states.clone());
        Ok(field)
    }

    pub fn with_nominal(mut self, nominal: Vec<State>) -> Self {
        self.nominal = Some(nominal);
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nominal(&self) -> Option<&[State]> {
        self.nominal.as_deref()
    }

    pub fn rate(&self, t: usize, x: &State) -> Result<State> {
        (self.rate)(t, x)
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step period must be > 0, got {dt}")))
    }
}

/// A path `φ_0..φ_K` sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub path: Vec<State>,
    pub dt: f64,
}

impl PathSample {
    pub fn new(path: Vec<State>, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        if path.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "path needs at least 2 points, got {}",
                path.len()
            )));
        }
        Ok(Self { path, dt })
    }
}

/// `(1/2ε²) Σ_t ‖(φ_{t+1} − φ_t)/dt − b(t, φ_t)‖² dt` (left-endpoint sum).
pub fn action_functional(drift: &DriftField<'_>, path: &PathSample, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if path.path.len() < 2 {
        return Err(Error::InvalidArgument("path needs at least 2 points".into()));
    }
    let dt = path.dt;
    let mut sum = 0.0;
    for (t, w) in path.path.windows(2).enumerate() {
        let velocity = (&w[1] - &w[0]) / dt;
        let b = drift.rate(t, &w[0])?;
        sum += (velocity - b).norm_squared() * dt;
    }
    Ok(sum / (2.0 * epsilon * epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    pub delta: f64,
    pub epsilon: f64,
    pub n_runs: usize,
    pub n_exits: usize,
    pub p_hat: f64,
    /// 95% Wilson score interval.
    pub wilson_interval: (f64, f64),
}

impl ExitEstimate {
    pub fn from_counts(delta: f64, epsilon: f64, n_exits: usize, n_runs: usize) -> Self {
        Self {
            delta,
            epsilon,
            n_runs,
            n_exits,
            p_hat: n_exits as f64 / n_runs as f64,
            wilson_interval: wilson_interval(n_exits, n_runs, 1.959_963_984_540_054),
        }
    }
}

/// For each of `n_runs` closed-loop executions, `max_{s ≤ t} ‖x_s − x^o_s‖`.
/// Run `j` draws its noise from a stream derived from `(seed, j)`.
pub fn tube_excursions(
    policy: &TrackingPolicy,
    model: &dyn SystemModel,
    epsilon: f64,
    horizon_index: usize,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if horizon_index > policy.horizon() {
        return Err(Error::InvalidArgument(format!(
            "horizon index {horizon_index} exceeds the horizon {}",
            policy.horizon()
        )));
    }
    let noise = NoiseModel::new(epsilon, noise_scale(&policy.nominal.controls)?, model.state_dim())?;
    let nominal = &policy.nominal.states;
    (0..n_runs)
        .into_par_iter()
        .map(|j| {
            let mut rng = SimRng::seed_from_u64(derive_seed(seed, &[tag::EXIT, j as u64]));
            let mut x = nominal[0].clone();
            let mut worst = 0.0_f64;
            for t in 0..horizon_index {
                let u = policy.feedback_control(model, t, &x)?;
                let w = noise.sample(&mut rng);
                x = step_noisy(model, &x, &u, &w)?;
                worst = worst.max((&x - &nominal[t + 1]).norm());
            }
            Ok(worst)
        })
        .collect()
}

/// Fraction of runs whose excursion exceeds `delta`.
pub fn exit_estimate_from_excursions(excursions: &[f64], delta: f64, epsilon: f64) -> ExitEstimate {
    let exits = excursions.iter().filter(|&&d| d > delta).count();
    ExitEstimate::from_counts(delta, epsilon, exits, excursions.len())
}

/// Monte Carlo probability that the closed loop leaves the radius-`delta`
/// tube around the nominal by step `horizon_index`.
pub fn estimate_exit_probability(
    policy: &TrackingPolicy,
    model: &dyn SystemModel,
    delta: f64,
    epsilon: f64,
    horizon_index: usize,
    n_runs: usize,
    seed: u64,
) -> Result<ExitEstimate> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let excursions = tube_excursions(policy, model, epsilon, horizon_index, n_runs, seed)?;
    Ok(exit_estimate_from_excursions(&excursions, delta, epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Coefficient of `1/ε²` in `ln p̂`; negative when exits are exponentially rare.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Least-squares fit of `ln p̂` against `1/ε²` over the estimates with
/// `0 < p̂ < 1`.
pub fn fit_rate(estimates: &[ExitEstimate]) -> Result<RateFit> {
    let usable: Vec<_> = estimates
        .iter()
        .filter(|e| e.p_hat > 0.0 && e.p_hat < 1.0 && e.epsilon > 0.0)
        .collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs 3 estimates with 0 < p_hat < 1, got {}",
            usable.len()
        )));
    }
    let x: Vec<f64> = usable.iter().map(|e| 1.0 / (e.epsilon * e.epsilon)).collect();
    let y: Vec<f64> = usable.iter().map(|e| e.p_hat.ln()).collect();
    let fit = linear_fit(&x, &y);
    Ok(RateFit {
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n_points: usable.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn line(n: usize, duration: f64, start: &[f64], velocity: &[f64]) -> PathSample {
        let dt = duration / n as f64;
        let path = (0..=n)
            .map(|i| v(start) + v(velocity) * (i as f64 * dt))
            .collect();
        PathSample::new(path, dt).unwrap()
    }

    #[test]
    fn unit_speed_line_under_zero_drift() {
        let drift = DriftField::from_rate(0.1, |_, x| x * 0.0).unwrap();
        let path = line(10, 1.0, &[0.0], &[1.0]);
        let s = action_functional(&drift, &path, 1.0).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        let quarter = action_functional(&drift, &path, 0.5).unwrap();
        assert!((quarter - 4.0 * s).abs() < 1e-12);
        assert!(action_functional(&drift, &path, 0.0).is_err());
        assert!(action_functional(&drift, &path, -1.0).is_err());
    }

    #[test]
    fn refinement_changes_action_little() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.0, -0.3]);
        let drift = DriftField::from_rate(0.01, move |_, x| &a * x).unwrap();
        let coarse = action_functional(&drift, &line(100, 1.0, &[1.0, -0.5], &[0.7, 0.4]), 0.1).unwrap();
        let fine = action_functional(&drift, &line(200, 1.0, &[1.0, -0.5], &[0.7, 0.4]), 0.1).unwrap();
        assert!(coarse > 0.0);
        assert!(((fine - coarse) / fine).abs() <= 0.01);
    }

    #[test]
    fn path_of_the_map_has_zero_action() {
        let drift = DriftField::from_map(0.5, |_, x: &State| Ok(x * 0.9 + v(&[0.1]))).unwrap();
        let mut path = vec![v(&[2.0])];
        for _ in 0..10 {
            let next = path.last().unwrap() * 0.9 + v(&[0.1]);
            path.push(next);
        }
        let s = action_functional(&drift, &PathSample::new(path, 0.5).unwrap(), 0.05).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn rate_fit_recovers_synthetic_exponent() {
        let est: Vec<_> = [0.05, 0.1, 0.15]
            .iter()
            .map(|&e: &f64| {
                let mut x = ExitEstimate::from_counts(0.3, e, 1, 2);
                x.p_hat = (-0.02 / (e * e)).exp();
                x
            })
            .collect();
        let fit = fit_rate(&est).unwrap();
        assert!((fit.slope + 0.02).abs() <= 1e-10);
        assert!((fit.r_squared - 1.0).abs() <= 1e-10);
        let flat: Vec<_> = [0.05, 0.1, 0.15]
            .iter()
            .map(|&e| ExitEstimate::from_counts(0.3, e, 10, 40))
            .collect();
        assert!(fit_rate(&flat).unwrap().slope.abs() < 1e-12);
    }

    #[test]
    fn rate_fit_needs_three_interior_points() {
        let est = vec![
            ExitEstimate::from_counts(0.3, 0.05, 0, 100),
            ExitEstimate::from_counts(0.3, 0.1, 5, 100),
            ExitEstimate::from_counts(0.3, 0.15, 100, 100),
            ExitEstimate::from_counts(0.3, 0.2, 50, 100),
        ];
        assert!(matches!(fit_rate(&est), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn exit_counts_are_nested_in_delta() {
        let excursions = [0.1, 0.25, 0.4, 0.05, 0.31];
        let counts: Vec<_> = [0.0, 0.1, 0.2, 0.3, 0.5, f64::INFINITY]
            .iter()
            .map(|&d| exit_estimate_from_excursions(&excursions, d, 0.1).n_exits)
            .collect();
        assert_eq!(counts, vec![5, 3, 3, 2, 0, 0]);
        let none = exit_estimate_from_excursions(&excursions, f64::INFINITY, 0.1);
        assert_eq!(none.p_hat, 0.0);
        assert!(none.wilson_interval.1 > 0.0);
    }
}
