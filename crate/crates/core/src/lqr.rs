//! Finite-horizon time-varying LQR tracking around a nominal trajectory.
//!
//! Given the linearization `x̃_{t+1} = A_t x̃_t + B_t ũ_t` along the nominal,
//! the backward Riccati recursion
//!
//! ```text
//! P_K = W^x_K
//! L_t = (W^u_t + B_tᵀ P_{t+1} B_t)⁻¹ B_tᵀ P_{t+1} A_t
//! P_t = A_tᵀ P_{t+1} A_t − A_tᵀ P_{t+1} B_t L_t + W^x_t
//! ```
//!
//! yields gains for the tracking law `u_t = u^o_t − L_t (x_t − x^o_t)`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Control, NominalTrajectory, State, SystemModel};
use crate::error::{check_len, Error, Result};

/// Jacobians `A_t`, `B_t` along a trajectory, `t = 0..K-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl LtvSystem {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        check_len("LTV sequence", a.len(), b.len())?;
        if a.is_empty() {
            return Err(Error::InvalidArgument("LTV system needs at least one step".into()));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for (at, bt) in a.iter().zip(&b) {
            check_len("A rows", n, at.nrows())?;
            check_len("A cols", n, at.ncols())?;
            check_len("B rows", n, bt.nrows())?;
            check_len("B cols", m, bt.ncols())?;
        }
        Ok(Self { a, b })
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }
}

/// Tracking weights. `wx` has `K + 1` entries, the last being the terminal
/// weight; `wu` has `K` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub wx: Vec<DMatrix<f64>>,
    pub wu: Vec<DMatrix<f64>>,
}

impl LqrWeights {
    pub fn new(wx: Vec<DMatrix<f64>>, wu: Vec<DMatrix<f64>>) -> Result<Self> {
        check_len("state weight sequence", wu.len() + 1, wx.len())?;
        for w in &wx {
            if !w.is_square() || min_eigenvalue(w) < -1e-12 {
                return Err(Error::InvalidArgument(
                    "state weights must be symmetric positive semidefinite".into(),
                ));
            }
        }
        for w in &wu {
            if !w.is_square() || w.clone().cholesky().is_none() {
                return Err(Error::InvalidArgument(
                    "control weights must be symmetric positive definite".into(),
                ));
            }
        }
        Ok(Self { wx, wu })
    }

    /// Time-invariant diagonal weights over a horizon of `k` steps.
    pub fn diagonal(k: usize, wx: &[f64], wu: &[f64], wx_terminal: &[f64]) -> Result<Self> {
        check_len("terminal state weight", wx.len(), wx_terminal.len())?;
        let stage_x = DMatrix::from_diagonal(&DVector::from_column_slice(wx));
        let stage_u = DMatrix::from_diagonal(&DVector::from_column_slice(wu));
        let mut wx_seq = vec![stage_x; k];
        wx_seq.push(DMatrix::from_diagonal(&DVector::from_column_slice(wx_terminal)));
        Self::new(wx_seq, vec![stage_u; k])
    }

    pub fn identity(k: usize, n_x: usize, n_u: usize) -> Self {
        Self {
            wx: vec![DMatrix::identity(n_x, n_x); k + 1],
            wu: vec![DMatrix::identity(n_u, n_u); k],
        }
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Output of the backward Riccati sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `L_t`, `t = 0..K-1`, each `n_u × n_x`.
    pub gains: Vec<DMatrix<f64>>,
    /// `P_t`, `t = 0..K`.
    pub riccati: Vec<DMatrix<f64>>,
    /// `A_t − B_t L_t`, `t = 0..K-1`.
    pub closed_loop: Vec<DMatrix<f64>>,
}

/// Jacobians of the model along a nominal trajectory.
pub fn linearize_along(model: &dyn SystemModel, nominal: &NominalTrajectory) -> Result<LtvSystem> {
    let mut a = Vec::with_capacity(nominal.horizon());
    let mut b = Vec::with_capacity(nominal.horizon());
    for (x, u) in nominal.states.iter().zip(&nominal.controls) {
        a.push(crate::dynamics::jacobian_state(model, x, u)?);
        b.push(crate::dynamics::jacobian_control(model, x, u)?);
    }
    LtvSystem::new(a, b)
}

pub fn riccati_backward(sys: &LtvSystem, w: &LqrWeights) -> Result<RiccatiSolution> {
    let k = sys.horizon();
    let (n, m) = (sys.state_dim(), sys.control_dim());
    check_len("control weights", k, w.wu.len())?;
    check_len("state weights", k + 1, w.wx.len())?;

    let mut riccati = vec![DMatrix::zeros(n, n); k + 1];
    let mut gains = vec![DMatrix::zeros(m, n); k];
    riccati[k] = w.wx[k].clone();
    for t in (0..k).rev() {
        let (a, b) = (&sys.a[t], &sys.b[t]);
        let p_next = &riccati[t + 1];
        let pb = p_next * b;
        let pa = p_next * a;
        let s = &w.wu[t] + b.tr_mul(&pb);
        let chol = s.cholesky().ok_or_else(|| {
            Error::Numerical(format!("W^u + BᵀPB is not positive definite at t = {t}"))
        })?;
        let gain = chol.solve(&b.tr_mul(&pa));
        let p = a.tr_mul(&pa) - a.tr_mul(&pb) * &gain + &w.wx[t];
        riccati[t] = (&p + p.transpose()) * 0.5;
        gains[t] = gain;
    }
    let closed_loop = sys
        .a
        .iter()
        .zip(&sys.b)
        .zip(&gains)
        .map(|((a, b), l)| a - b * l)
        .collect();
    Ok(RiccatiSolution {
        gains,
        riccati,
        closed_loop,
    })
}

/// Nominal trajectory plus time-varying feedback gains.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingPolicy {
    pub nominal: NominalTrajectory,
    pub gains: Vec<DMatrix<f64>>,
    pub riccati: Vec<DMatrix<f64>>,
    pub closed_loop: Vec<DMatrix<f64>>,
    /// The linearization the gains were computed for.
    pub system: LtvSystem,
}

impl TrackingPolicy {
    /// Linearizes along `nominal` and runs the Riccati sweep.
    pub fn synthesize(model: &dyn SystemModel, nominal: NominalTrajectory, w: &LqrWeights) -> Result<Self> {
        let system = linearize_along(model, &nominal)?;
        let sol = riccati_backward(&system, w)?;
        Ok(Self::from_parts(nominal, system, sol))
    }

    pub fn from_parts(nominal: NominalTrajectory, system: LtvSystem, sol: RiccatiSolution) -> Self {
        Self {
            nominal,
            gains: sol.gains,
            riccati: sol.riccati,
            closed_loop: sol.closed_loop,
            system,
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// `u^o_t − L_t (x − x^o_t)` before any clamping.
    pub fn feedback_unclamped(&self, t: usize, x: &State) -> Result<Control> {
        if t >= self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "time index {t} outside the horizon 0..{}",
                self.horizon()
            )));
        }
        check_len("state", self.nominal.states[t].len(), x.len())?;
        let dx = x - &self.nominal.states[t];
        Ok(&self.nominal.controls[t] - &self.gains[t] * dx)
    }

    /// Tracking control at time `t`, clamped to the model's admissible set.
    pub fn feedback_control(&self, model: &dyn SystemModel, t: usize, x: &State) -> Result<Control> {
        Ok(model.clamp_control(&self.feedback_unclamped(t, x)?))
    }
}
