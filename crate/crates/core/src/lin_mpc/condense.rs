use nalgebra::{DMatrix, DVector};

use super::model::{LtiModel, SteadyState};
use super::polytope::Polytope;
use crate::error::{Error, Result};

/// Finite-horizon tracking MPC problem over a linear model.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub model: LtiModel,
    pub horizon: usize,
    pub state_cost: DMatrix<f64>,
    pub input_cost: DMatrix<f64>,
    pub terminal_cost: DMatrix<f64>,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub terminal_set: Polytope,
    pub reference: SteadyState,
    pub initial_state: DVector<f64>,
}

impl MpcProblem {
    pub fn check_dimensions(&self) -> Result<()> {
        let n = self.model.state_dim();
        let p = self.model.input_dim();
        let mut bad = Vec::new();
        if self.horizon == 0 {
            bad.push("horizon must be positive".to_string());
        }
        for (name, m, d) in [
            ("state_cost", &self.state_cost, n),
            ("input_cost", &self.input_cost, p),
            ("terminal_cost", &self.terminal_cost, n),
        ] {
            if m.nrows() != d || m.ncols() != d {
                bad.push(format!("{name} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols()));
            }
        }
        for (name, set, d) in [
            ("state_set", &self.state_set, n),
            ("input_set", &self.input_set, p),
            ("terminal_set", &self.terminal_set, n),
        ] {
            if set.dim() != d {
                bad.push(format!("{name} has dimension {}, expected {d}", set.dim()));
            }
        }
        if self.reference.state.len() != n || self.reference.input.len() != p {
            bad.push("reference dimensions".to_string());
        }
        if self.initial_state.len() != n {
            bad.push("initial state dimension".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(bad.join("; ")))
        }
    }

    /// Full invariant check: dimensions, equilibrium reference, and strict interiority of the
    /// reference in the state and input sets.
    pub fn validate(&self) -> Result<()> {
        self.check_dimensions()?;
        let res = self.reference.residual(&self.model);
        if res > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "reference is not an equilibrium (residual {res:e})"
            )));
        }
        if !self.state_set.contains_strictly(&self.reference.state) {
            return Err(Error::InvalidParameter("reference state is not interior".into()));
        }
        if !self.input_set.contains_strictly(&self.reference.input) {
            return Err(Error::InvalidParameter("reference input is not interior".into()));
        }
        Ok(())
    }

    /// Predicted states `z_0 .. z_N` for a stacked input sequence.
    pub fn rollout(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let p = self.model.input_dim();
        let mut z = self.initial_state.clone();
        let mut traj = Vec::with_capacity(self.horizon + 1);
        traj.push(z.clone());
        for k in 0..self.horizon {
            let uk = u.rows(k * p, p).into_owned();
            z = self.model.step(&z, &uk);
            traj.push(z.clone());
        }
        traj
    }

    /// Tracking cost evaluated by simulating the model forward.
    pub fn trajectory_cost(&self, u: &DVector<f64>) -> f64 {
        let p = self.model.input_dim();
        let traj = self.rollout(u);
        let zr = &self.reference.state;
        let ur = &self.reference.input;
        let mut cost = 0.0;
        for k in 0..self.horizon {
            let dz = &traj[k] - zr;
            let du = u.rows(k * p, p) - ur;
            cost += (dz.transpose() * &self.state_cost * &dz)[0];
            cost += (du.transpose() * &self.input_cost * &du)[0];
        }
        let dz = &traj[self.horizon] - zr;
        cost += (dz.transpose() * &self.terminal_cost * &dz)[0];
        cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    State,
    Input,
    Terminal,
}

/// Where a condensed row came from and the positive factor it was divided by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowOrigin {
    pub kind: RowKind,
    pub stage: usize,
    pub index: usize,
    pub scale: f64,
}

/// Strongly convex QP `min ½ uᵀHu + fᵀu + c  s.t.  η_i·u + g_i <= 0`.
#[derive(Debug, Clone)]
pub struct CondensedQP {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub const_term: f64,
    /// Row normals stacked as a `c̄ × pN` matrix.
    pub eta: DMatrix<f64>,
    pub g: DVector<f64>,
    pub origins: Vec<RowOrigin>,
    /// Width of one stage input; the planner applies the first `input_dim` entries.
    pub input_dim: usize,
    /// Stacked equilibrium input used to seed feasibility search.
    pub nominal: DVector<f64>,
}

impl CondensedQP {
    /// Builds a QP directly from its data. `h` must be symmetric positive definite.
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        const_term: f64,
        eta: DMatrix<f64>,
        g: DVector<f64>,
        input_dim: usize,
    ) -> Result<Self> {
        let n = h.nrows();
        if !h.is_square() || f.len() != n || eta.ncols() != n || eta.nrows() != g.len() {
            return Err(Error::DimensionMismatch("condensed QP data".into()));
        }
        if input_dim == 0 || n % input_dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "input_dim {input_dim} does not divide {n}"
            )));
        }
        let asym = (&h - h.transpose()).amax();
        if asym > 1e-9 * h.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite(format!("H asymmetric by {asym:e}")));
        }
        if h.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Cholesky of H failed".into()));
        }
        let origins = (0..g.len())
            .map(|i| RowOrigin {
                kind: RowKind::State,
                stage: 0,
                index: i,
                scale: 1.0,
            })
            .collect();
        Ok(Self {
            h,
            f,
            const_term,
            eta,
            g,
            origins,
            input_dim,
            nominal: DVector::zeros(n),
        })
    }

    pub fn with_nominal(mut self, nominal: DVector<f64>) -> Self {
        self.nominal = nominal;
        self
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_rows(&self) -> usize {
        self.g.len()
    }

    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u) + self.const_term
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.f
    }

    pub fn row_values(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.eta * u + &self.g
    }

    /// Largest row value; negative infinity for an unconstrained QP.
    pub fn max_row_value(&self, u: &DVector<f64>) -> f64 {
        self.row_values(u).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn first_input(&self, u: &DVector<f64>) -> DVector<f64> {
        u.rows(0, self.input_dim).into_owned()
    }

    pub fn row(&self, i: usize) -> (DVector<f64>, f64) {
        (self.eta.row(i).transpose(), self.g[i])
    }
}

/// Substitutes the dynamics into the cost and constraints.
///
/// Rows are emitted as state rows for κ = 0..N-1 (stage-major, polytope row order within a
/// stage), then input rows for κ = 0..N-1, then terminal rows at κ = N. Each row with a
/// nonzero normal is divided by its normal's Euclidean norm; the factor is kept in
/// [`RowOrigin::scale`]. Rows at κ = 0 do not depend on the inputs and keep their raw offset.
pub fn condense(problem: &MpcProblem) -> Result<CondensedQP> {
    problem.check_dimensions()?;
    let model = &problem.model;
    let n = model.state_dim();
    let p = model.input_dim();
    let horizon = problem.horizon;
    let dim = p * horizon;

    // Prediction z_k = phi_k z0 + gamma_k u.
    let mut phi = Vec::with_capacity(horizon + 1);
    let mut gamma = Vec::with_capacity(horizon + 1);
    phi.push(DMatrix::<f64>::identity(n, n));
    gamma.push(DMatrix::<f64>::zeros(n, dim));
    for k in 0..horizon {
        let next_phi = model.a() * &phi[k];
        let mut next_gamma = model.a() * &gamma[k];
        next_gamma.view_mut((0, k * p), (n, p)).copy_from(model.b());
        phi.push(next_phi);
        gamma.push(next_gamma);
    }
    let z0 = &problem.initial_state;
    let zr = &problem.reference.state;
    let ur = &problem.reference.input;

    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut f = DVector::<f64>::zeros(dim);
    let mut const_term = 0.0;
    for k in 0..=horizon {
        let q = if k < horizon {
            &problem.state_cost
        } else {
            &problem.terminal_cost
        };
        let offset = &phi[k] * z0 - zr;
        let qg = q * &gamma[k];
        h += gamma[k].transpose() * &qg;
        f += qg.transpose() * &offset;
        const_term += (offset.transpose() * q * &offset)[0];
    }
    for k in 0..horizon {
        let mut block = h.view_mut((k * p, k * p), (p, p));
        block += &problem.input_cost;
        let ru = &problem.input_cost * ur;
        let mut fb = f.rows_mut(k * p, p);
        fb -= &ru;
        const_term += (ur.transpose() * &ru)[0];
    }
    h *= 2.0;
    f *= 2.0;
    let h = (&h + h.transpose()) * 0.5;

    let n_rows = horizon * problem.state_set.len()
        + horizon * problem.input_set.len()
        + problem.terminal_set.len();
    let mut eta = DMatrix::<f64>::zeros(n_rows, dim);
    let mut g = DVector::<f64>::zeros(n_rows);
    let mut origins = Vec::with_capacity(n_rows);
    let mut r = 0;
    let mut emit = |eta_row: DVector<f64>, offset: f64, kind: RowKind, stage: usize, index: usize| {
        let norm = eta_row.norm();
        let scale = if norm > 1e-12 { norm } else { 1.0 };
        eta.row_mut(r).copy_from(&(eta_row / scale).transpose());
        g[r] = offset / scale;
        origins.push(RowOrigin { kind, stage, index, scale });
        r += 1;
    };
    for k in 0..horizon {
        for (i, row) in problem.state_set.rows().iter().enumerate() {
            let eta_row = gamma[k].transpose() * &row.normal;
            let offset = row.normal.dot(&(&phi[k] * z0)) + row.offset;
            emit(eta_row, offset, RowKind::State, k, i);
        }
    }
    for k in 0..horizon {
        for (i, row) in problem.input_set.rows().iter().enumerate() {
            let mut eta_row = DVector::zeros(dim);
            eta_row.rows_mut(k * p, p).copy_from(&row.normal);
            emit(eta_row, row.offset, RowKind::Input, k, i);
        }
    }
    for (i, row) in problem.terminal_set.rows().iter().enumerate() {
        let eta_row = gamma[horizon].transpose() * &row.normal;
        let offset = row.normal.dot(&(&phi[horizon] * z0)) + row.offset;
        emit(eta_row, offset, RowKind::Terminal, horizon, i);
    }

    if h.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("condensed Hessian".into()));
    }
    let mut nominal = DVector::zeros(dim);
    for k in 0..horizon {
        nominal.rows_mut(k * p, p).copy_from(ur);
    }
    Ok(CondensedQP {
        h,
        f,
        const_term,
        eta,
        g,
        origins,
        input_dim: p,
        nominal,
    })
}
