//! Deterministic open-loop trajectory optimization.
//!
//! The planner minimizes the nominal cost
//!
//! ```text
//! J(u_0..u_{K-1}) = Σ_t c_t(x_t, u_t) + c_K(x_K),   x_{t+1} = f(x_t, u_t),  x_0 fixed
//! ```
//!
//! by direct single shooting: the decision variables are the controls, the
//! gradient comes from a backward adjoint sweep, and the search direction from
//! a limited-memory BFGS update with a backtracking Armijo line search. Goal
//! reaching and control bounds enter the objective as penalties.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout_nominal, rollout_unchecked, Control, NominalTrajectory, State, SystemModel};
use crate::error::{check_len, Error, Result};

/// Stage and terminal costs with gradient access.
pub trait CostFunction: Send + Sync {
    fn stage(&self, t: usize, x: &State, u: &Control) -> f64;
    /// `(∇_x c_t, ∇_u c_t)`.
    fn stage_gradient(&self, t: usize, x: &State, u: &Control) -> (DVector<f64>, DVector<f64>);
    fn terminal(&self, x: &State) -> f64;
    fn terminal_gradient(&self, x: &State) -> DVector<f64>;
}

/// Penalized quadratic objective:
///
/// * stage: `r_u ‖u‖² + r_b Σ_i max(0, |u_i| − bound_i)²`
/// * terminal: `r_g (x − x_g)ᵀ W (x − x_g)` with diagonal `W`
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub effort_weight: f64,
    pub goal_weight: f64,
    pub goal: Option<State>,
    /// Diagonal of `W`.
    pub goal_metric: DVector<f64>,
    pub bound_weight: f64,
    /// Per-component magnitude bounds on the control, if any.
    pub control_bounds: Option<DVector<f64>>,
}

pub const DEFAULT_EFFORT_WEIGHT: f64 = 0.1;
pub const DEFAULT_GOAL_WEIGHT: f64 = 100.0;
pub const DEFAULT_BOUND_WEIGHT: f64 = 100.0;

impl CostSpec {
    pub fn new(
        effort_weight: f64,
        goal_weight: f64,
        goal: Option<State>,
        goal_metric: DVector<f64>,
        bound_weight: f64,
        control_bounds: Option<DVector<f64>>,
    ) -> Result<Self> {
        for (name, w) in [
            ("effort weight", effort_weight),
            ("goal weight", goal_weight),
            ("bound weight", bound_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {w}")));
            }
        }
        if goal_metric.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("goal metric entries must be nonnegative".into()));
        }
        if let Some(g) = &goal {
            check_len("goal metric", g.len(), goal_metric.len())?;
            if goal_weight <= 0.0 {
                return Err(Error::InvalidArgument(
                    "goal weight must be positive when a goal is declared".into(),
                ));
            }
        }
        if let Some(b) = &control_bounds {
            if b.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::InvalidArgument("control bounds must be positive".into()));
            }
        }
        Ok(Self {
            effort_weight,
            goal_weight,
            goal,
            goal_metric,
            bound_weight,
            control_bounds,
        })
    }

    /// Default weights for the car: heading weighted half as much as position.
    pub fn car(goal: State, v_max: f64, phi_max: f64) -> Self {
        Self {
            effort_weight: DEFAULT_EFFORT_WEIGHT,
            goal_weight: DEFAULT_GOAL_WEIGHT,
            goal: Some(goal),
            goal_metric: DVector::from_vec(vec![1.0, 1.0, 0.5]),
            bound_weight: DEFAULT_BOUND_WEIGHT,
            control_bounds: Some(DVector::from_vec(vec![v_max, phi_max])),
        }
    }

    /// Returns a copy with every weight multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            effort_weight: self.effort_weight * lambda,
            goal_weight: self.goal_weight * lambda,
            bound_weight: self.bound_weight * lambda,
            ..self.clone()
        }
    }

    fn hinge(&self, u: &Control) -> (f64, DVector<f64>) {
        let mut grad = DVector::zeros(u.len());
        let Some(bounds) = &self.control_bounds else {
            return (0.0, grad);
        };
        let mut value = 0.0;
        for i in 0..u.len().min(bounds.len()) {
            let excess = u[i].abs() - bounds[i];
            if excess > 0.0 {
                value += excess * excess;
                grad[i] = 2.0 * self.bound_weight * excess * u[i].signum();
            }
        }
        (self.bound_weight * value, grad)
    }
}

impl CostFunction for CostSpec {
    fn stage(&self, _t: usize, _x: &State, u: &Control) -> f64 {
        self.effort_weight * u.norm_squared() + self.hinge(u).0
    }

    fn stage_gradient(&self, _t: usize, x: &State, u: &Control) -> (DVector<f64>, DVector<f64>) {
        let gu = u * (2.0 * self.effort_weight) + self.hinge(u).1;
        (DVector::zeros(x.len()), gu)
    }

    fn terminal(&self, x: &State) -> f64 {
        match &self.goal {
            Some(g) => {
                let e = x - g;
                self.goal_weight * e.component_mul(&self.goal_metric).dot(&e)
            }
            None => 0.0,
        }
    }

    fn terminal_gradient(&self, x: &State) -> DVector<f64> {
        match &self.goal {
            Some(g) => (x - g).component_mul(&self.goal_metric) * (2.0 * self.goal_weight),
            None => DVector::zeros(x.len()),
        }
    }
}

fn validate(model: &dyn SystemModel, x0: &State, controls: &[Control]) -> Result<()> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    check_len("initial state", model.state_dim(), x0.len())?;
    for u in controls {
        check_len("control", model.control_dim(), u.len())?;
    }
    Ok(())
}

fn cost_along(cost: &dyn CostFunction, states: &[State], controls: &[Control]) -> f64 {
    let running: f64 = controls
        .iter()
        .enumerate()
        .map(|(t, u)| cost.stage(t, &states[t], u))
        .sum();
    running + cost.terminal(&states[controls.len()])
}

/// `Σ_t c_t(x_t, u_t) + c_K(x_K)` along the noise-free rollout of `controls`,
/// penalty terms included.
pub fn nominal_cost(
    model: &dyn SystemModel,
    cost: &dyn CostFunction,
    x0: &State,
    controls: &[Control],
) -> Result<f64> {
    validate(model, x0, controls)?;
    let states = rollout_unchecked(model, x0, controls);
    Ok(cost_along(cost, &states, controls))
}

/// Gradient of [`nominal_cost`] with respect to every control, via the
/// discrete adjoint recursion `λ_K = ∇c_K`, `λ_t = ∇_x c_t + A_tᵀ λ_{t+1}`,
/// `∂J/∂u_t = ∇_u c_t + B_tᵀ λ_{t+1}`.
pub fn cost_gradient(
    model: &dyn SystemModel,
    cost: &dyn CostFunction,
    x0: &State,
    controls: &[Control],
) -> Result<Vec<DVector<f64>>> {
    validate(model, x0, controls)?;
    let states = rollout_unchecked(model, x0, controls);
    gradient_along(model, cost, &states, controls)
}

fn gradient_along(
    model: &dyn SystemModel,
    cost: &dyn CostFunction,
    states: &[State],
    controls: &[Control],
) -> Result<Vec<DVector<f64>>> {
    let k = controls.len();
    let mut lambda = cost.terminal_gradient(&states[k]);
    let mut grad = vec![DVector::zeros(model.control_dim()); k];
    for t in (0..k).rev() {
        let (a, b) = model.transition_jacobians(&states[t], &controls[t])?;
        let (gx, gu) = cost.stage_gradient(t, &states[t], &controls[t]);
        grad[t] = gu + b.tr_mul(&lambda);
        lambda = gx + a.tr_mul(&lambda);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub tolerance: f64,
    pub max_iters: usize,
    pub step_floor: f64,
    /// Number of curvature pairs kept by the quasi-Newton update.
    pub memory: usize,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iters: 500,
            step_floor: 1e-12,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerReport {
    pub iterations: usize,
    pub final_cost: f64,
    /// Euclidean norm of the terminal position error (first two state components).
    pub terminal_position_error: f64,
    /// Absolute terminal heading error (third state component), 0 for models without one.
    pub terminal_heading_error: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Penalized cost after each accepted iteration, starting with the initial guess.
    pub cost_history: Vec<f64>,
}

fn flatten(controls: &[Control]) -> DVector<f64> {
    DVector::from_iterator(
        controls.iter().map(|u| u.len()).sum(),
        controls.iter().flat_map(|u| u.iter().copied()),
    )
}

fn unflatten(z: &DVector<f64>, n_u: usize) -> Vec<Control> {
    z.as_slice()
        .chunks(n_u)
        .map(Control::from_column_slice)
        .collect()
}

struct Objective<'a> {
    model: &'a dyn SystemModel,
    cost: &'a dyn CostFunction,
    x0: &'a State,
    n_u: usize,
}

impl Objective<'_> {
    fn value(&self, z: &DVector<f64>) -> f64 {
        let controls = unflatten(z, self.n_u);
        let states = rollout_unchecked(self.model, self.x0, &controls);
        cost_along(self.cost, &states, &controls)
    }

    fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let controls = unflatten(z, self.n_u);
        let states = rollout_unchecked(self.model, self.x0, &controls);
        let value = cost_along(self.cost, &states, &controls);
        let grad = gradient_along(self.model, self.cost, &states, &controls)?;
        Ok((value, flatten(&grad)))
    }
}

/// Two-loop recursion: applies the inverse-Hessian approximation to `g`.
fn lbfgs_direction(g: &DVector<f64>, pairs: &VecDeque<(DVector<f64>, DVector<f64>)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let alpha = rho * s.dot(&q);
        q -= y * alpha;
        alphas.push((rho, alpha));
    }
    if let Some((s, y)) = pairs.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y), (rho, alpha)) in pairs.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * y.dot(&q);
        q += s * (alpha - beta);
    }
    -q
}

fn summarize(
    cost: &CostSpec,
    trajectory: &NominalTrajectory,
    iterations: usize,
    gradient_norm: f64,
    converged: bool,
    cost_history: Vec<f64>,
) -> PlannerReport {
    let xk = trajectory.terminal_state();
    let (pos, heading) = match &cost.goal {
        Some(g) => {
            let e = xk - g;
            let n = e.len();
            let pos = e.rows(0, n.min(2)).norm();
            let heading = if n >= 3 { e[2].abs() } else { 0.0 };
            (pos, heading)
        }
        None => (0.0, 0.0),
    };
    PlannerReport {
        iterations,
        final_cost: trajectory.nominal_cost.unwrap_or(f64::NAN),
        terminal_position_error: pos,
        terminal_heading_error: heading,
        gradient_norm,
        converged,
        cost_history,
    }
}

/// Solves the deterministic trajectory planning problem from `init_controls`.
///
/// Non-convergence within `max_iters` is not an error: the best iterate is
/// returned with `converged = false`. The returned controls are projected onto
/// the model's admissible set and the trajectory re-rolled, so it is exactly
/// feasible under [`crate::dynamics::step`].
pub fn optimize_nominal(
    model: &dyn SystemModel,
    cost: &CostSpec,
    x0: &State,
    init_controls: &[Control],
    options: &PlannerOptions,
) -> Result<(NominalTrajectory, PlannerReport)> {
    validate(model, x0, init_controls)?;
    let n_u = model.control_dim();
    let obj = Objective {
        model,
        cost,
        x0,
        n_u,
    };

    let mut z = flatten(init_controls);
    let (mut f, mut g) = obj.value_and_gradient(&z)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite cost {f} at the initial iterate; controls = {:?}",
            z.as_slice()
        )));
    }

    let mut history = vec![f];
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = g.norm() <= options.tolerance;

    while !converged && iterations < options.max_iters {
        let mut dir = lbfgs_direction(&g, &pairs);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir = -&g;
            slope = g.dot(&dir);
        }
        let mut alpha = if pairs.is_empty() {
            (1.0 / g.norm()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        while alpha >= options.step_floor {
            let trial = &z + &dir * alpha;
            let ft = obj.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }

        let Some((z_new, _)) = accepted else {
            if !pairs.is_empty() {
                // Retry from steepest descent before declaring a collapse.
                pairs.clear();
                continue;
            }
            // Step-size collapse: no descent available at working precision.
            converged = true;
            break;
        };

        let (f_new, g_new) = obj.value_and_gradient(&z_new)?;
        if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite cost or gradient at iteration {}; controls = {:?}",
                iterations + 1,
                z_new.as_slice()
            )));
        }
        let s = &z_new - &z;
        let y = &g_new - &g;
        if s.dot(&y) > 1e-16 * s.norm() * y.norm() {
            if pairs.len() == options.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y));
        }
        z = z_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        history.push(f);
        converged = g.norm() <= options.tolerance;
    }

    let mut controls = unflatten(&z, n_u);
    for u in controls.iter_mut() {
        *u = model.clamp_control(u);
    }
    let mut trajectory = rollout_nominal(model, x0, &controls)?;
    let final_cost = cost_along(cost, &trajectory.states, &controls);
    trajectory.nominal_cost = Some(final_cost);
    let grad_norm = flatten(&gradient_along(model, cost, &trajectory.states, &controls)?).norm();
    let report = summarize(cost, &trajectory, iterations, grad_norm, converged, history);
    Ok((trajectory, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CarModel, LinearModel};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn car() -> CarModel {
        CarModel::new(0.5, 0.7, 0.6, FRAC_PI_2).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn car_cost() -> CostSpec {
        CostSpec::car(v(&[-0.5, 1.0, 0.0]), 0.6, FRAC_PI_2)
    }

    fn fd_gradient(model: &dyn SystemModel, cost: &dyn CostFunction, x0: &State, controls: &[Control]) -> DVector<f64> {
        let z = flatten(controls);
        let n_u = model.control_dim();
        let h = 1e-5;
        DVector::from_fn(z.len(), |i, _| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fp = nominal_cost(model, cost, x0, &unflatten(&zp, n_u)).unwrap();
            let fm = nominal_cost(model, cost, x0, &unflatten(&zm, n_u)).unwrap();
            (fp - fm) / (2.0 * h)
        })
    }

    #[test]
    fn cost_at_goal_is_zero() {
        let x0 = v(&[-1.5, 0.5, 0.0]);
        let cost = CostSpec::new(0.0, 1.0, Some(x0.clone()), v(&[1.0, 1.0, 1.0]), 0.0, None).unwrap();
        let j = nominal_cost(&car(), &cost, &x0, &vec![v(&[0.0, 0.0]); 20]).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn terminal_cost_of_zero_controls() {
        let x0 = v(&[-1.5, 0.5, 0.0]);
        let goal = v(&[-0.5, 1.0, 0.0]);
        let cost = CostSpec::new(0.1, 1.0, Some(goal.clone()), v(&[1.0, 1.0, 1.0]), 100.0, None).unwrap();
        let controls = vec![v(&[0.0, 0.0]); 20];
        let j = nominal_cost(&car(), &cost, &x0, &controls).unwrap();
        assert!((j - 1.25).abs() < 1e-12);
        let doubled = CostSpec { goal_weight: 2.0, ..cost };
        let j2 = nominal_cost(&car(), &doubled, &x0, &controls).unwrap();
        assert!((j2 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn effort_only_gradient_is_2_r_u_u() {
        let cost = CostSpec::new(0.3, 0.0, None, v(&[1.0, 1.0, 1.0]), 0.0, None).unwrap();
        let controls = vec![v(&[0.2, -0.1]), v(&[0.5, 0.4]), v(&[-0.3, 0.0])];
        let g = cost_gradient(&car(), &cost, &v(&[0.0, 0.0, 0.3]), &controls).unwrap();
        for (gt, u) in g.iter().zip(&controls) {
            assert!((gt - u * 0.6).amax() < 1e-15);
        }
    }

    #[test]
    fn hinge_penalty_is_active_only_outside_bounds() {
        let cost = car_cost();
        assert_eq!(cost.hinge(&v(&[0.5, 1.0])).0, 0.0);
        let (value, grad) = cost.hinge(&v(&[-0.7, 0.0]));
        assert!((value - 100.0 * 0.01).abs() < 1e-12);
        assert!((grad[0] + 2.0 * 100.0 * 0.1).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn adjoint_gradient_matches_finite_differences(
            raw in prop::collection::vec((-0.8f64..0.8, -1.2f64..1.2), 20),
            theta0 in -3.0f64..3.0,
        ) {
            let model = car();
            let cost = car_cost();
            let x0 = v(&[-1.5, 0.5, theta0]);
            let controls: Vec<Control> = raw.iter().map(|&(a, b)| v(&[a, b])).collect();
            let g = flatten(&cost_gradient(&model, &cost, &x0, &controls).unwrap());
            let fd = fd_gradient(&model, &cost, &x0, &controls);
            let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
            prop_assert!(rel <= 1e-5, "relative gradient error {rel}");
        }
    }

    #[test]
    fn goal_at_start_returns_zero_controls() {
        let x0 = v(&[-1.5, 0.5, 0.0]);
        let cost = CostSpec { goal: Some(x0.clone()), ..car_cost() };
        let (traj, report) =
            optimize_nominal(&car(), &cost, &x0, &vec![v(&[0.0, 0.0]); 20], &PlannerOptions::default()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 1);
        assert_eq!(report.final_cost, 0.0);
        assert!(traj.controls.iter().all(|u| u.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn car_reaches_goal() {
        let model = car();
        let cost = car_cost();
        let x0 = v(&[-1.5, 0.5, 0.0]);
        let opts = PlannerOptions::default();
        let (traj, report) = optimize_nominal(&model, &cost, &x0, &vec![v(&[0.0, 0.0]); 20], &opts).unwrap();
        assert!(report.converged, "{report:?}");
        assert!(report.terminal_position_error <= 0.05, "{report:?}");
        assert!(report.terminal_heading_error <= 0.1, "{report:?}");
        assert!(report.gradient_norm <= opts.tolerance || report.converged);
        assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(traj.feasibility_gap(&model) <= 1e-12);
        let recomputed = nominal_cost(&model, &cost, &x0, &traj.controls).unwrap();
        assert!((recomputed - traj.nominal_cost.unwrap()).abs() <= 1e-10 * recomputed.abs());
        for u in &traj.controls {
            assert!(u[0].abs() <= 0.6 + 1e-3 && u[1].abs() < FRAC_PI_2);
        }
    }

    #[test]
    fn budget_exhaustion_returns_best_iterate() {
        let opts = PlannerOptions { max_iters: 3, ..Default::default() };
        let x0 = v(&[-1.5, 0.5, 0.0]);
        let (_, report) = optimize_nominal(&car(), &car_cost(), &x0, &vec![v(&[0.0, 0.0]); 20], &opts).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 3);
        assert!(report.final_cost < report.cost_history[0]);
    }

    #[test]
    fn nan_cost_is_a_numerical_failure() {
        let x0 = v(&[f64::NAN, 0.5, 0.0]);
        let err = optimize_nominal(&car(), &car_cost(), &x0, &vec![v(&[0.0, 0.0]); 5], &PlannerOptions::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    /// Minimizer of `r_u Σ‖u_t‖² + r_g ‖x_K − x_g‖²` for a linear model, by
    /// stacking the controls and solving the normal equations.
    fn least_squares_optimum(model: &LinearModel, x0: &State, goal: &State, k: usize, r_u: f64, r_g: f64) -> DVector<f64> {
        let (n, m) = (model.a.nrows(), model.b.ncols());
        let mut big = DMatrix::zeros(n, k * m);
        let mut power = DMatrix::identity(n, n);
        for t in (0..k).rev() {
            big.view_mut((0, t * m), (n, m)).copy_from(&(&power * &model.b));
            power = &power * &model.a;
        }
        let free = &power * x0;
        let lhs = DMatrix::identity(k * m, k * m) * r_u + big.tr_mul(&big) * r_g;
        let rhs = big.tr_mul(&(goal - free)) * r_g;
        lhs.cholesky().unwrap().solve(&rhs)
    }

    #[test]
    fn weight_scaling_leaves_argmin_unchanged() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            0.1,
        )
        .unwrap();
        let x0 = v(&[1.0, 0.0]);
        let goal = v(&[0.0, 0.0]);
        let k = 10;
        let base = CostSpec::new(0.1, 10.0, Some(goal.clone()), v(&[1.0, 1.0]), 0.0, None).unwrap();
        let exact = least_squares_optimum(&model, &x0, &goal, k, 0.1, 10.0);
        let opts = PlannerOptions { tolerance: 1e-10, max_iters: 2000, ..Default::default() };
        for lambda in [1.0, 0.25, 8.0] {
            let cost = base.scaled(lambda);
            let (traj, _) = optimize_nominal(&model, &cost, &x0, &vec![v(&[0.0]); k], &opts).unwrap();
            let got = flatten(&traj.controls);
            assert!((&got - &exact).amax() < 1e-6, "lambda {lambda}: {}", (&got - &exact).amax());
        }
    }
}
