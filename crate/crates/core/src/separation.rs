//! First-order error analysis of a tracking policy around its nominal.
//!
//! With the feedback law `ũ_t = −L_t x̃_t` the linearized error dynamics are
//! `x̃_{t+1} = D_t x̃_t + ω_t` with `D_t = A_t − B_t L_t` and `x̃_0 = 0`.
//! Unrolled, every deviation is a fixed linear map of the noises:
//!
//! ```text
//! x̃_{t+1} = Σ_{s=0}^{t} D̃_{s+1:t} ω_s,          D̃_{t1:t2} = D_{t2} ⋯ D_{t1}  (I if t2 < t1)
//! ũ_{t+1} = −Σ_{s=0}^{t} L_{t+1} D̃_{s+1:t} ω_s
//! ```
//!
//! and so is the first-order cost error
//! `J̃₁ = Σ_t (C^x_t x̃_t + C^u_t ũ_t) + C^x_K x̃_K = Σ_{t,s} w_{s,t}ᵀ ω_s`.
//! Its expectation is zero for any zero-mean noise, and it is exactly Gaussian
//! for Gaussian noise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{NominalTrajectory, NoiseModel, State, SystemModel};
use crate::error::{check_len, Error, Result};
use crate::lqr::{LtvSystem, TrackingPolicy};
use crate::planner::CostFunction;
use crate::rng::{stream, tag};
use crate::simulator::noise_scale;
use crate::stats;

/// `D_0 = A_0`, `D_t = A_t − B_t L_t` for `t ≥ 1`.
///
/// `D_0` never influences the deviations because `x̃_0 = 0`.
pub fn closed_loop_matrices(sys: &LtvSystem, gains: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    check_len("gain sequence", sys.horizon(), gains.len())?;
    let mut d = Vec::with_capacity(sys.horizon());
    for (t, ((a, b), l)) in sys.a.iter().zip(&sys.b).zip(gains).enumerate() {
        check_len("gain rows", b.ncols(), l.nrows())?;
        check_len("gain cols", a.ncols(), l.ncols())?;
        d.push(if t == 0 { a.clone() } else { a - b * l });
    }
    Ok(d)
}

/// Products of closed-loop matrices, precomputed for every `(s, t)` pair.
#[derive(Debug, Clone)]
pub struct TransitionProducts {
    d: Vec<DMatrix<f64>>,
    /// `noise_maps[t][s] = D̃_{s+1:t}` for `0 ≤ s ≤ t ≤ K − 1`.
    noise_maps: Vec<Vec<DMatrix<f64>>>,
}

impl TransitionProducts {
    pub fn new(d: Vec<DMatrix<f64>>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::InvalidArgument("empty closed-loop sequence".into()));
        }
        let n = d[0].nrows();
        for m in &d {
            check_len("closed-loop rows", n, m.nrows())?;
            check_len("closed-loop cols", n, m.ncols())?;
        }
        let mut noise_maps: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(d.len());
        for t in 0..d.len() {
            let mut row: Vec<DMatrix<f64>> = match noise_maps.last() {
                Some(prev) => prev.iter().map(|m| &d[t] * m).collect(),
                None => Vec::new(),
            };
            row.push(DMatrix::identity(n, n));
            noise_maps.push(row);
        }
        Ok(Self { d, noise_maps })
    }

    pub fn horizon(&self) -> usize {
        self.d.len()
    }

    pub fn dim(&self) -> usize {
        self.d[0].nrows()
    }

    pub fn closed_loop(&self) -> &[DMatrix<f64>] {
        &self.d
    }

    /// `D̃_{t1:t2} = D_{t2} ⋯ D_{t1}`, identity when `t2 < t1`.
    pub fn product(&self, t1: usize, t2: usize) -> DMatrix<f64> {
        let mut p = DMatrix::identity(self.dim(), self.dim());
        if t2 < t1 {
            return p;
        }
        for t in t1..=t2 {
            p = &self.d[t] * p;
        }
        p
    }

    /// `D̃^ω_{s,t} = D̃_{s+1:t}` for `s ≤ t ≤ K − 1`.
    pub fn noise_map(&self, s: usize, t: usize) -> &DMatrix<f64> {
        &self.noise_maps[t][s]
    }
}

fn check_noises(products: &TransitionProducts, noises: &[DVector<f64>]) -> Result<()> {
    if noises.is_empty() {
        return Err(Error::InvalidArgument("need at least one noise vector".into()));
    }
    if noises.len() > products.horizon() {
        return Err(Error::DimensionMismatch {
            context: "noise sequence longer than horizon",
            expected: products.horizon(),
            got: noises.len(),
        });
    }
    for w in noises {
        check_len("noise", products.dim(), w.len())?;
    }
    Ok(())
}

/// `x̃_{t+1} = Σ_{s=0}^{t} D̃^ω_{s,t} ω_s` where `t + 1 = noises.len()`.
pub fn state_error_nonrecursive(products: &TransitionProducts, noises: &[DVector<f64>]) -> Result<State> {
    check_noises(products, noises)?;
    let t = noises.len() - 1;
    let mut x = DVector::zeros(products.dim());
    for (s, w) in noises.iter().enumerate() {
        x += products.noise_map(s, t) * w;
    }
    Ok(x)
}

/// `ũ_{t+1} = −Σ_{s=0}^{t} L_{t+1} D̃^ω_{s,t} ω_s` where `t + 1 = noises.len()`.
pub fn control_error_nonrecursive(
    products: &TransitionProducts,
    gains: &[DMatrix<f64>],
    noises: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let t1 = noises.len();
    if t1 >= gains.len() {
        return Err(Error::InvalidArgument(format!(
            "control error at t = {t1} needs a gain; horizon is {}",
            gains.len()
        )));
    }
    let x = state_error_nonrecursive(products, noises)?;
    Ok(-(&gains[t1] * x))
}

/// First-order state and control deviations `x̃_0..x̃_K`, `ũ_0..ũ_{K−1}`
/// produced by `K` noise vectors.
pub fn deviations(
    products: &TransitionProducts,
    gains: &[DMatrix<f64>],
    noises: &[DVector<f64>],
) -> Result<(Vec<State>, Vec<DVector<f64>>)> {
    let k = products.horizon();
    check_len("noise sequence", k, noises.len())?;
    check_len("gain sequence", k, gains.len())?;
    let n_u = gains[0].nrows();
    let mut xs = vec![DVector::zeros(products.dim())];
    let mut us = vec![DVector::zeros(n_u)];
    for t in 0..k {
        xs.push(state_error_nonrecursive(products, &noises[..=t])?);
        if t + 1 < k {
            us.push(control_error_nonrecursive(products, gains, &noises[..=t])?);
        }
    }
    Ok((xs, us))
}

/// Cost gradients along the nominal.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLinearization {
    /// `C^x_t` as column vectors, `t = 0..K−1`.
    pub cx: Vec<DVector<f64>>,
    /// `C^u_t`, `t = 0..K−1`.
    pub cu: Vec<DVector<f64>>,
    pub cx_terminal: DVector<f64>,
    pub nominal_cost: f64,
}

impl CostLinearization {
    pub fn horizon(&self) -> usize {
        self.cx.len()
    }
}

pub fn linearize_cost(cost: &dyn CostFunction, nominal: &NominalTrajectory) -> Result<CostLinearization> {
    let k = nominal.horizon();
    let mut cx = Vec::with_capacity(k);
    let mut cu = Vec::with_capacity(k);
    let mut total = 0.0;
    for t in 0..k {
        let (x, u) = (&nominal.states[t], &nominal.controls[t]);
        let (gx, gu) = cost.stage_gradient(t, x, u);
        if gx.iter().chain(gu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("stage cost not differentiable at t = {t}")));
        }
        total += cost.stage(t, x, u);
        cx.push(gx);
        cu.push(gu);
    }
    let xk = nominal.terminal_state();
    let cx_terminal = cost.terminal_gradient(xk);
    if cx_terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("terminal cost not differentiable".into()));
    }
    total += cost.terminal(xk);
    Ok(CostLinearization {
        cx,
        cu,
        cx_terminal,
        nominal_cost: total,
    })
}

/// `J̃₁ = Σ_{t<K} (C^x_t x̃_t + C^u_t ũ_t) + C^x_K x̃_K`.
pub fn first_order_cost_error(lin: &CostLinearization, xs: &[State], us: &[DVector<f64>]) -> Result<f64> {
    let k = lin.horizon();
    check_len("state deviations", k + 1, xs.len())?;
    check_len("control deviations", k, us.len())?;
    let mut j = 0.0;
    for t in 0..k {
        j += lin.cx[t].dot(&xs[t]) + lin.cu[t].dot(&us[t]);
    }
    Ok(j + lin.cx_terminal.dot(&xs[k]))
}

/// Coefficient table expressing `J̃₁` as a linear form in the noises.
#[derive(Debug, Clone, PartialEq)]
pub struct CostErrorCoefficients {
    /// `table[t][s] = w_{s,t}` for `1 ≤ t ≤ K`, `0 ≤ s ≤ t − 1`; `table[0]` is empty.
    table: Vec<Vec<DVector<f64>>>,
}

impl CostErrorCoefficients {
    pub fn horizon(&self) -> usize {
        self.table.len() - 1
    }

    pub fn get(&self, s: usize, t: usize) -> &DVector<f64> {
        &self.table[t][s]
    }

    /// `Σ_{t > s} w_{s,t}`: the total sensitivity of `J̃₁` to `ω_s`.
    pub fn aggregated(&self, s: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.table[s + 1][s].len());
        for row in &self.table[s + 1..] {
            acc += &row[s];
        }
        acc
    }

    /// `Σ_{t,s} w_{s,t}ᵀ ω_s`.
    pub fn evaluate(&self, noises: &[DVector<f64>]) -> Result<f64> {
        check_len("noise sequence", self.horizon(), noises.len())?;
        Ok((0..self.horizon()).map(|s| self.aggregated(s).dot(&noises[s])).sum())
    }

    /// `E[J̃₁] = Σ w_{s,t}ᵀ E[ω_s]` for noise with per-step means `means`.
    pub fn expectation(&self, means: &[DVector<f64>]) -> Result<f64> {
        self.evaluate(means)
    }

    /// Variance of `J̃₁` under i.i.d. isotropic noise with per-component
    /// standard deviation `sigma`.
    pub fn variance(&self, sigma: f64) -> f64 {
        let ss: f64 = (0..self.horizon()).map(|s| self.aggregated(s).norm_squared()).sum();
        sigma * sigma * ss
    }
}

pub fn cost_error_coefficients(
    lin: &CostLinearization,
    products: &TransitionProducts,
    gains: &[DMatrix<f64>],
) -> Result<CostErrorCoefficients> {
    let k = lin.horizon();
    check_len("closed-loop horizon", k, products.horizon())?;
    check_len("gain sequence", k, gains.len())?;
    let mut table = vec![Vec::new()];
    for t in 1..=k {
        let mut row = Vec::with_capacity(t);
        for s in 0..t {
            let map = products.noise_map(s, t - 1);
            let w = if t < k {
                // (C^x_t D̃^ω_{s,t−1} − C^u_t L_t D̃^ω_{s,t−1})ᵀ
                map.tr_mul(&lin.cx[t]) - (&gains[t] * map).tr_mul(&lin.cu[t])
            } else {
                map.tr_mul(&lin.cx_terminal)
            };
            row.push(w);
        }
        table.push(row);
    }
    Ok(CostErrorCoefficients { table })
}

/// Empirical check that `J̃₁` is a pure linear form in the noises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearityCertificate {
    /// `J̃₁` at zero noise (constant term).
    pub constant_term: f64,
    /// Largest relative gap between direct evaluation and the coefficient form.
    pub reconstruction_error: f64,
    /// Largest relative deviation from `J̃₁(a + b) = J̃₁(a) + J̃₁(b)`.
    pub additivity_error: f64,
}

/// Compares direct evaluation of `J̃₁` (via the propagated deviations) against
/// the coefficient form on `trials` random noise draws.
pub fn certify_linearity(
    lin: &CostLinearization,
    products: &TransitionProducts,
    gains: &[DMatrix<f64>],
    coeffs: &CostErrorCoefficients,
    trials: usize,
    seed: u64,
) -> Result<LinearityCertificate> {
    let k = lin.horizon();
    let n = products.dim();
    let direct = |noises: &[DVector<f64>]| -> Result<f64> {
        let (xs, us) = deviations(products, gains, noises)?;
        first_order_cost_error(lin, &xs, &us)
    };
    let zero = vec![DVector::zeros(n); k];
    let constant_term = direct(&zero)?;
    let unit = NoiseModel::new(1.0, 1.0, n)?;
    let mut reconstruction_error = 0.0_f64;
    let mut additivity_error = 0.0_f64;
    for i in 0..trials {
        let mut rng = stream(seed, &[tag::THEOREM3, 1, i as u64]);
        let a: Vec<_> = (0..k).map(|_| unit.sample(&mut rng)).collect();
        let b: Vec<_> = (0..k).map(|_| unit.sample(&mut rng)).collect();
        let ab: Vec<_> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ja, jb, jab) = (direct(&a)?, direct(&b)?, direct(&ab)?);
        let ca = coeffs.evaluate(&a)?;
        let scale = ja.abs().max(ca.abs()).max(1e-300);
        reconstruction_error = reconstruction_error.max((ja - ca).abs() / scale);
        let scale = ja.abs().max(jb.abs()).max(jab.abs()).max(1e-300);
        additivity_error = additivity_error.max((jab - ja - jb).abs() / scale);
    }
    Ok(LinearityCertificate {
        constant_term,
        reconstruction_error,
        additivity_error,
    })
}

/// Sample statistics of `J̃₁` under Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Stats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// `mean / (sd / √n)`; 0 when `sd = 0`.
    pub z: f64,
    pub skewness: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
    pub epsilon: f64,
    /// Standard deviation predicted by the coefficient table.
    #[serde(skip)]
    pub predicted_sd: f64,
}

/// Samples `n_samples` Gaussian noise sequences with standard deviation
/// `epsilon · max_t ‖u^o_t‖` and evaluates `J̃₁` for each through the
/// non-recursive propagation. Sample `i` uses a stream derived from
/// `(seed, i)`, so the result does not depend on the thread count.
pub fn verify_theorem3(
    policy: &TrackingPolicy,
    cost: &dyn CostFunction,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Theorem3Stats> {
    if n_samples < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 samples, got {n_samples}"
        )));
    }
    let lin = linearize_cost(cost, &policy.nominal)?;
    let products = TransitionProducts::new(closed_loop_matrices(&policy.system, &policy.gains)?)?;
    let coeffs = cost_error_coefficients(&lin, &products, &policy.gains)?;
    let noise = NoiseModel::new(epsilon, noise_scale(&policy.nominal.controls)?, products.dim())?;
    let k = policy.horizon();

    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[tag::THEOREM3, i as u64]);
            let noises: Vec<_> = (0..k).map(|_| noise.sample(&mut rng)).collect();
            let (xs, us) = deviations(&products, &policy.gains, &noises)?;
            first_order_cost_error(&lin, &xs, &us)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mean = stats::mean(&samples);
    let sd = stats::sample_sd(&samples);
    let (skewness, kurtosis) = stats::shape_moments(&samples);
    let z = if sd > 0.0 {
        mean / (sd / (n_samples as f64).sqrt())
    } else {
        0.0
    };
    Ok(Theorem3Stats {
        n: n_samples,
        mean,
        sd,
        z,
        skewness,
        kurtosis,
        epsilon,
        predicted_sd: coeffs.variance(noise.std_dev()).sqrt(),
    })
}

/// Mean over `n_runs` of `max_t ‖(x_t − x^o_t) − x̃^{lin}_t‖`: the gap between
/// the nonlinear closed-loop deviation and its first-order prediction driven
/// by the same noise.
pub fn linearization_gap(
    model: &dyn SystemModel,
    policy: &TrackingPolicy,
    epsilon: f64,
    n_runs: usize,
    seed: u64,
) -> Result<f64> {
    let products = TransitionProducts::new(closed_loop_matrices(&policy.system, &policy.gains)?)?;
    let noise = NoiseModel::new(epsilon, noise_scale(&policy.nominal.controls)?, model.state_dim())?;
    let k = policy.horizon();
    let gaps = (0..n_runs)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, &[tag::GAP, j as u64]);
            let noises: Vec<_> = (0..k).map(|_| noise.sample(&mut rng)).collect();
            let mut x = policy.nominal.states[0].clone();
            let mut worst = 0.0_f64;
            for t in 0..k {
                let u = policy.feedback_control(model, t, &x)?;
                x = model.transition(&x, &u) + &noises[t];
                let predicted = state_error_nonrecursive(&products, &noises[..=t])?;
                let actual = &x - &policy.nominal.states[t + 1];
                worst = worst.max((actual - predicted).norm());
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean(&gaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::CarModel;
    use crate::lqr::{riccati_backward, LqrWeights};
    use crate::planner::CostSpec;
    use rand::Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn sv(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn closed_loop_examples() {
        let sys = LtvSystem::new(vec![scalar(1.0); 3], vec![scalar(1.0); 3]).unwrap();
        let d = closed_loop_matrices(&sys, &vec![scalar(0.5); 3]).unwrap();
        assert_eq!(d[0], scalar(1.0));
        assert_eq!(d[1], scalar(0.5));
        assert_eq!(d[2], scalar(0.5));
        let d = closed_loop_matrices(&sys, &vec![scalar(0.0); 3]).unwrap();
        assert!(d.iter().all(|m| *m == scalar(1.0)));
        let sys0 = LtvSystem::new(vec![scalar(0.7); 2], vec![scalar(0.0); 2]).unwrap();
        let d = closed_loop_matrices(&sys0, &vec![scalar(3.0); 2]).unwrap();
        assert!(d.iter().all(|m| *m == scalar(0.7)));
        assert!(closed_loop_matrices(&sys, &vec![scalar(0.5); 2]).is_err());
    }

    #[test]
    fn product_table_conventions() {
        let d = vec![scalar(2.0), scalar(3.0), scalar(5.0)];
        let p = TransitionProducts::new(d).unwrap();
        assert_eq!(p.product(1, 1), scalar(3.0));
        assert_eq!(p.product(2, 1), scalar(1.0));
        assert_eq!(p.product(0, 2), scalar(30.0));
        assert_eq!(*p.noise_map(0, 2), scalar(15.0));
        assert_eq!(*p.noise_map(2, 2), scalar(1.0));
    }

    #[test]
    fn scalar_state_and_control_errors() {
        let p = TransitionProducts::new(vec![scalar(1.0), scalar(0.5), scalar(0.5)]).unwrap();
        let x2 = state_error_nonrecursive(&p, &[sv(1.0), sv(1.0)]).unwrap();
        assert!((x2[0] - 1.5).abs() < 1e-15);
        let gains = vec![scalar(0.5); 3];
        let u2 = control_error_nonrecursive(&p, &gains, &[sv(1.0), sv(1.0)]).unwrap();
        assert!((u2[0] + 0.75).abs() < 1e-15);
        let zero = state_error_nonrecursive(&p, &vec![sv(0.0); 3]).unwrap();
        assert_eq!(zero[0], 0.0);
        assert!(control_error_nonrecursive(&p, &gains, &vec![sv(0.0); 3]).is_err());
        assert!(state_error_nonrecursive(&p, &vec![sv(0.0); 4]).is_err());
    }

    #[test]
    fn scalar_coefficient_table() {
        // K = 2, C^x = (1, 1, 1), C^u = 0, D_1 = 0.5
        let lin = CostLinearization {
            cx: vec![sv(1.0), sv(1.0)],
            cu: vec![sv(0.0), sv(0.0)],
            cx_terminal: sv(1.0),
            nominal_cost: 0.0,
        };
        let p = TransitionProducts::new(vec![scalar(1.0), scalar(0.5)]).unwrap();
        let w = cost_error_coefficients(&lin, &p, &vec![scalar(0.5); 2]).unwrap();
        assert_eq!(w.get(0, 1)[0], 1.0);
        assert_eq!(w.get(0, 2)[0], 0.5);
        assert_eq!(w.get(1, 2)[0], 1.0);
    }

    #[test]
    fn zero_gradients_give_zero_coefficients() {
        let lin = CostLinearization {
            cx: vec![DVector::zeros(2); 3],
            cu: vec![DVector::zeros(1); 3],
            cx_terminal: DVector::zeros(2),
            nominal_cost: 1.0,
        };
        let d = vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]); 3];
        let p = TransitionProducts::new(d).unwrap();
        let w = cost_error_coefficients(&lin, &p, &vec![DMatrix::from_element(1, 2, 0.3); 3]).unwrap();
        for t in 1..=3 {
            for s in 0..t {
                assert_eq!(w.get(s, t).amax(), 0.0);
            }
        }
    }

    #[test]
    fn first_order_error_is_linear_in_deviations() {
        let lin = CostLinearization {
            cx: vec![sv(0.3), sv(-1.0)],
            cu: vec![sv(2.0), sv(0.5)],
            cx_terminal: sv(4.0),
            nominal_cost: 0.0,
        };
        let xs = vec![sv(0.0), sv(0.2), sv(-0.1)];
        let us = vec![sv(0.0), sv(0.4)];
        assert_eq!(first_order_cost_error(&lin, &vec![sv(0.0); 3], &vec![sv(0.0); 2]).unwrap(), 0.0);
        let j = first_order_cost_error(&lin, &xs, &us).unwrap();
        let scaled_x: Vec<_> = xs.iter().map(|x| x * 3.0).collect();
        let scaled_u: Vec<_> = us.iter().map(|u| u * 3.0).collect();
        let j3 = first_order_cost_error(&lin, &scaled_x, &scaled_u).unwrap();
        assert!((j3 - 3.0 * j).abs() < 1e-14);
        assert!(first_order_cost_error(&lin, &xs[..2], &us).is_err());
    }

    #[test]
    fn cost_rows_for_effort_and_goal() {
        let cost = CostSpec::new(0.2, 1.0, Some(DVector::from_vec(vec![1.0, 2.0, 0.0])), DVector::from_vec(vec![1.0, 1.0, 1.0]), 0.0, None).unwrap();
        let nominal = NominalTrajectory {
            states: vec![DVector::zeros(3), DVector::from_vec(vec![1.0, 2.0, 0.0])],
            controls: vec![DVector::from_vec(vec![0.5, -0.25])],
            nominal_cost: None,
        };
        let lin = linearize_cost(&cost, &nominal).unwrap();
        assert!((&lin.cu[0] - DVector::from_vec(vec![0.2, -0.1])).amax() < 1e-15);
        assert_eq!(lin.cx[0].amax(), 0.0);
        assert_eq!(lin.cx_terminal.amax(), 0.0);
    }

    fn random_setup(seed: u64) -> (LtvSystem, Vec<DMatrix<f64>>, CostLinearization) {
        let mut rng = stream(seed, &[tag::INSTANCES]);
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=2);
        let k = rng.random_range(1..=20);
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let sys = LtvSystem::new((0..k).map(|_| mat(n, n)).collect(), (0..k).map(|_| mat(n, m)).collect()).unwrap();
        let lin = CostLinearization {
            cx: (0..k).map(|_| mat(n, 1).column(0).into_owned()).collect(),
            cu: (0..k).map(|_| mat(m, 1).column(0).into_owned()).collect(),
            cx_terminal: mat(n, 1).column(0).into_owned(),
            nominal_cost: 0.0,
        };
        let gains = riccati_backward(&sys, &LqrWeights::identity(k, n, m)).unwrap().gains;
        (sys, gains, lin)
    }

    #[test]
    fn coefficient_form_matches_direct_evaluation() {
        for seed in 0..200 {
            let (sys, gains, lin) = random_setup(seed);
            let p = TransitionProducts::new(closed_loop_matrices(&sys, &gains).unwrap()).unwrap();
            let w = cost_error_coefficients(&lin, &p, &gains).unwrap();
            let cert = certify_linearity(&lin, &p, &gains, &w, 5, seed).unwrap();
            assert_eq!(cert.constant_term, 0.0);
            assert!(cert.reconstruction_error <= 1e-9, "seed {seed}: {cert:?}");
            assert!(cert.additivity_error <= 1e-9, "seed {seed}: {cert:?}");
            let zero_means = vec![DVector::zeros(p.dim()); p.horizon()];
            assert_eq!(w.expectation(&zero_means).unwrap(), 0.0);
        }
    }

    #[test]
    fn initial_closed_loop_matrix_is_irrelevant() {
        let (sys, gains, _) = random_setup(3);
        let mut d = closed_loop_matrices(&sys, &gains).unwrap();
        let p1 = TransitionProducts::new(d.clone()).unwrap();
        d[0] = DMatrix::from_element(d[0].nrows(), d[0].ncols(), 123.0);
        let p2 = TransitionProducts::new(d).unwrap();
        let mut rng = stream(5, &[1]);
        let noises: Vec<_> = (0..p1.horizon())
            .map(|_| DVector::from_fn(p1.dim(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let (x1, _) = deviations(&p1, &gains, &noises).unwrap();
        let (x2, _) = deviations(&p2, &gains, &noises).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn zero_epsilon_gives_degenerate_statistics() {
        let car = CarModel::new(0.5, 0.7, 0.6, std::f64::consts::FRAC_PI_2).unwrap();
        let x0 = DVector::from_vec(vec![-1.5, 0.5, 0.0]);
        let nominal = crate::dynamics::rollout_nominal(&car, &x0, &vec![DVector::from_vec(vec![0.1, 0.05]); 5]).unwrap();
        let policy = TrackingPolicy::synthesize(&car, nominal, &LqrWeights::identity(5, 3, 2)).unwrap();
        let cost = CostSpec::car(DVector::from_vec(vec![-0.5, 1.0, 0.0]), 0.6, std::f64::consts::FRAC_PI_2);
        let stats = verify_theorem3(&policy, &cost, 0.0, 100, 1).unwrap();
        assert_eq!((stats.mean, stats.sd, stats.z), (0.0, 0.0, 0.0));
        assert!(verify_theorem3(&policy, &cost, 0.1, 99, 1).is_err());
    }
}
