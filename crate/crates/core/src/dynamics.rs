//! Discrete-time nonlinear process models `x_{t+1} = f(x_t, u_t) + w_t`.
//!
//! A [`SystemModel`] exposes its noise-free transition map together with the
//! Jacobians `A = ∂f/∂x` and `B = ∂f/∂u`. The public operations in this module
//! ([`step`], [`step_noisy`], [`jacobian_state`], [`jacobian_control`],
//! [`rollout_nominal`]) validate dimensions and admissibility before calling
//! into the model; the raw trait methods skip the admissibility check so that
//! the planner can evaluate penalized, temporarily infeasible iterates.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

/// Numerical integrator used to discretize continuous kinematics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

pub trait SystemModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Time discretization period in seconds.
    fn step_period(&self) -> f64;

    /// Checks the control against the admissible set.
    fn check_control(&self, _u: &Control) -> Result<()> {
        Ok(())
    }

    /// Projects a control onto the admissible set.
    fn clamp_control(&self, u: &Control) -> Control {
        u.clone()
    }

    /// Checks that `(x, u)` lies in the region where the Jacobians are defined.
    fn check_smooth(&self, _x: &State, _u: &Control) -> Result<()> {
        Ok(())
    }

    /// Noise-free transition without admissibility checks. Inputs must have
    /// the model's dimensions.
    fn transition(&self, x: &State, u: &Control) -> State;

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)` without admissibility checks.
    fn transition_jacobians(&self, x: &State, u: &Control) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    fn state_labels(&self) -> Vec<&'static str>;
    fn control_labels(&self) -> Vec<&'static str>;
}

/// Kinematic car-like robot with rear-axle reference point:
///
/// ```text
/// ẋ = v cos θ,   ẏ = v sin θ,   θ̇ = (v / L) tan φ
/// ```
///
/// State `(x, y, θ)`, control `(v, φ)`. Admissible controls satisfy
/// `|v| ≤ v_max` and `|φ| < φ_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarModel {
    pub wheelbase: f64,
    pub dt: f64,
    pub v_max: f64,
    pub phi_max: f64,
    #[serde(default)]
    pub integrator: Integrator,
}

/// Steering commands are clamped this far inside the open bound `|φ| < φ_max`.
const STEER_MARGIN: f64 = 1e-9;

impl CarModel {
    pub fn new(wheelbase: f64, dt: f64, v_max: f64, phi_max: f64) -> Result<Self> {
        if !(wheelbase > 0.0 && wheelbase.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "wheelbase must be positive, got {wheelbase}"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step period must be positive, got {dt}"
            )));
        }
        if !(v_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "v_max must be positive, got {v_max}"
            )));
        }
        if !(phi_max > 0.0 && phi_max <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "phi_max must lie in (0, pi/2], got {phi_max}"
            )));
        }
        Ok(Self {
            wheelbase,
            dt,
            v_max,
            phi_max,
            integrator: Integrator::Euler,
        })
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    fn rate(&self, x: &State, u: &Control) -> State {
        let (theta, v, phi) = (x[2], u[0], u[1]);
        State::from_vec(vec![
            v * theta.cos(),
            v * theta.sin(),
            v / self.wheelbase * phi.tan(),
        ])
    }

    fn rate_jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let (theta, v, phi) = (x[2], u[0], u[1]);
        let (s, c) = theta.sin_cos();
        let cphi = phi.cos();
        #[rustfmt::skip]
        let bx = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.0, -v * s,
            0.0, 0.0, v * c,
            0.0, 0.0, 0.0,
        ]);
        #[rustfmt::skip]
        let bu = DMatrix::from_row_slice(3, 2, &[
            c, 0.0,
            s, 0.0,
            phi.tan() / self.wheelbase, v / (self.wheelbase * cphi * cphi),
        ]);
        (bx, bu)
    }
}

impl SystemModel for CarModel {
    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn step_period(&self) -> f64 {
        self.dt
    }

    fn check_control(&self, u: &Control) -> Result<()> {
        if !(u[0].abs() <= self.v_max) {
            return Err(Error::BoundViolation {
                component: "v",
                value: u[0],
                bound: self.v_max,
            });
        }
        if !(u[1].abs() < self.phi_max) {
            return Err(Error::BoundViolation {
                component: "phi",
                value: u[1],
                bound: self.phi_max,
            });
        }
        Ok(())
    }

    fn clamp_control(&self, u: &Control) -> Control {
        let steer = self.phi_max - STEER_MARGIN;
        Control::from_vec(vec![
            u[0].clamp(-self.v_max, self.v_max),
            u[1].clamp(-steer, steer),
        ])
    }

    fn check_smooth(&self, _x: &State, u: &Control) -> Result<()> {
        if u[1].abs() >= self.phi_max {
            return Err(Error::Domain(format!(
                "steering angle {} at or beyond the singular bound {}",
                u[1], self.phi_max
            )));
        }
        Ok(())
    }

    fn transition(&self, x: &State, u: &Control) -> State {
        let h = self.dt;
        match self.integrator {
            Integrator::Euler => x + self.rate(x, u) * h,
            Integrator::Rk4 => {
                let k1 = self.rate(x, u);
                let k2 = self.rate(&(x + &k1 * (h / 2.0)), u);
                let k3 = self.rate(&(x + &k2 * (h / 2.0)), u);
                let k4 = self.rate(&(x + &k3 * h), u);
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        }
    }

    fn transition_jacobians(&self, x: &State, u: &Control) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if u[1].cos().abs() < 1e-12 {
            return Err(Error::Domain(format!(
                "steering angle {} makes tan(phi) singular",
                u[1]
            )));
        }
        let h = self.dt;
        let eye = DMatrix::<f64>::identity(3, 3);
        match self.integrator {
            Integrator::Euler => {
                let (bx, bu) = self.rate_jacobians(x, u);
                Ok((eye + bx * h, bu * h))
            }
            Integrator::Rk4 => {
                // Chain rule through the four stages.
                let k1 = self.rate(x, u);
                let (bx1, bu1) = self.rate_jacobians(x, u);
                let x2 = x + &k1 * (h / 2.0);
                let k2 = self.rate(&x2, u);
                let (bx2, bu2) = self.rate_jacobians(&x2, u);
                let x3 = x + &k2 * (h / 2.0);
                let k3 = self.rate(&x3, u);
                let (bx3, bu3) = self.rate_jacobians(&x3, u);
                let x4 = x + &k3 * h;
                let (bx4, bu4) = self.rate_jacobians(&x4, u);

                let dk1x = bx1;
                let dk2x = &bx2 * (&eye + &dk1x * (h / 2.0));
                let dk3x = &bx3 * (&eye + &dk2x * (h / 2.0));
                let dk4x = &bx4 * (&eye + &dk3x * h);
                let a = &eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);

                let dk1u = bu1;
                let dk2u = &bx2 * &dk1u * (h / 2.0) + bu2;
                let dk3u = &bx3 * &dk2u * (h / 2.0) + bu3;
                let dk4u = &bx4 * &dk3u * h + bu4;
                let b = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (h / 6.0);
                Ok((a, b))
            }
        }
    }

    fn state_labels(&self) -> Vec<&'static str> {
        vec!["x", "y", "theta"]
    }

    fn control_labels(&self) -> Vec<&'static str> {
        vec!["v", "phi"]
    }
}

/// Linear time-invariant test model `x_{t+1} = A x_t + B u_t` with no bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dt: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidArgument("A must be square and nonempty".into()));
        }
        check_len("linear model B rows", a.nrows(), b.nrows())?;
        if b.ncols() == 0 {
            return Err(Error::InvalidArgument("B must have at least one column".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step period must be positive, got {dt}"
            )));
        }
        Ok(Self { a, b, dt })
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step_period(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &State, u: &Control) -> State {
        &self.a * x + &self.b * u
    }

    fn transition_jacobians(&self, _x: &State, _u: &Control) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }

    fn state_labels(&self) -> Vec<&'static str> {
        (0..self.state_dim()).map(|_| "x").collect()
    }

    fn control_labels(&self) -> Vec<&'static str> {
        (0..self.control_dim()).map(|_| "u").collect()
    }
}

fn check_dims(model: &dyn SystemModel, x: &State, u: &Control) -> Result<()> {
    check_len("state", model.state_dim(), x.len())?;
    check_len("control", model.control_dim(), u.len())
}

/// Noise-free transition `f(x, u)` with dimension and bound checks.
pub fn step(model: &dyn SystemModel, x: &State, u: &Control) -> Result<State> {
    check_dims(model, x, u)?;
    model.check_control(u)?;
    Ok(model.transition(x, u))
}

/// `f(x, u) + w`.
pub fn step_noisy(model: &dyn SystemModel, x: &State, u: &Control, w: &State) -> Result<State> {
    check_len("noise", model.state_dim(), w.len())?;
    Ok(step(model, x, u)? + w)
}

pub fn jacobian_state(model: &dyn SystemModel, x: &State, u: &Control) -> Result<DMatrix<f64>> {
    check_dims(model, x, u)?;
    model.check_smooth(x, u)?;
    Ok(model.transition_jacobians(x, u)?.0)
}

pub fn jacobian_control(model: &dyn SystemModel, x: &State, u: &Control) -> Result<DMatrix<f64>> {
    check_dims(model, x, u)?;
    model.check_smooth(x, u)?;
    Ok(model.transition_jacobians(x, u)?.1)
}

/// Paired state/control sequences satisfying the noise-free dynamics:
/// `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    /// Cost of the trajectory under the planner's objective, once evaluated.
    pub nominal_cost: Option<f64>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn initial_state(&self) -> &State {
        &self.states[0]
    }

    pub fn terminal_state(&self) -> &State {
        &self.states[self.states.len() - 1]
    }

    /// Largest entrywise gap between the stored states and a fresh
    /// noise-free rollout of the stored controls.
    pub fn feasibility_gap(&self, model: &dyn SystemModel) -> f64 {
        let mut x = self.states[0].clone();
        let mut gap = 0.0_f64;
        for (t, u) in self.controls.iter().enumerate() {
            x = model.transition(&x, u);
            gap = gap.max((&x - &self.states[t + 1]).amax());
        }
        gap
    }

    /// States stacked into one vector of length `(K + 1) · n_x`.
    pub fn stacked_states(&self) -> DVector<f64> {
        stack(&self.states)
    }
}

pub(crate) fn stack(v: &[State]) -> DVector<f64> {
    let n = v.first().map_or(0, |x| x.len());
    DVector::from_iterator(v.len() * n, v.iter().flat_map(|x| x.iter().copied()))
}

/// Propagates `x0` through the noise-free dynamics under `controls`.
pub fn rollout_nominal(
    model: &dyn SystemModel,
    x0: &State,
    controls: &[Control],
) -> Result<NominalTrajectory> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("control sequence is empty".into()));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for u in controls {
        let next = step(model, states.last().unwrap(), u)?;
        states.push(next);
    }
    Ok(NominalTrajectory {
        states,
        controls: controls.to_vec(),
        nominal_cost: None,
    })
}

/// Rollout without admissibility checks, used on penalized planner iterates.
pub(crate) fn rollout_unchecked(model: &dyn SystemModel, x0: &State, controls: &[Control]) -> Vec<State> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for u in controls {
        let next = model.transition(states.last().unwrap(), u);
        states.push(next);
    }
    states
}

/// Additive isotropic Gaussian process noise with standard deviation
/// `epsilon · base_sigma` per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub epsilon: f64,
    pub base_sigma: f64,
    pub dim: usize,
}

impl NoiseModel {
    pub fn new(epsilon: f64, base_sigma: f64, dim: usize) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        if !(base_sigma >= 0.0 && base_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base sigma must be nonnegative, got {base_sigma}"
            )));
        }
        Ok(Self {
            epsilon,
            base_sigma,
            dim,
        })
    }

    pub fn std_dev(&self) -> f64 {
        self.epsilon * self.base_sigma
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.std_dev().powi(2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let sd = self.std_dev();
        if sd == 0.0 {
            return State::zeros(self.dim);
        }
        State::from_fn(self.dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
    }
}
