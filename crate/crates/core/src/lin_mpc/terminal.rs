use nalgebra::{DMatrix, DVector};

use super::model::{LtiModel, SteadyState};
use super::polytope::{Halfspace, Polytope};
use crate::error::{Error, Result};

pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub cost: DMatrix<f64>,
    pub set: Polytope,
}

/// One application of the discrete Riccati map.
pub fn riccati_map(
    model: &LtiModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a = model.a();
    let b = model.b();
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("R + BᵀPB".into()))?
        .solve(&(&bt_p * a));
    let next = q + a.transpose() * p * a - a.transpose() * p * b * gain;
    Ok((&next + next.transpose()) * 0.5)
}

/// Fixed-point iteration of the discrete algebraic Riccati equation, started at `Q`.
pub fn solve_dare(
    model: &LtiModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = riccati_map(model, q, r, &p)?;
        residual = (&next - &p).amax() / next.amax().max(1.0);
        p = next;
        if residual <= tol {
            return Ok(p);
        }
    }
    Err(Error::RiccatiNonConvergence {
        iters: max_iters,
        residual,
    })
}

/// Terminal weight and terminal set for the tracking problem.
///
/// The weight is the stabilizing Riccati solution for `(A, B, L_x, L_u)`. The set is the
/// largest axis-aligned cube centred at the reference state that fits inside `state_set`,
/// scaled by `shrink ∈ [0, 1]`, and intersected with `state_set`.
pub fn terminal_ingredients(
    model: &LtiModel,
    state_cost: &DMatrix<f64>,
    input_cost: &DMatrix<f64>,
    state_set: &Polytope,
    reference: &SteadyState,
    shrink: f64,
) -> Result<TerminalIngredients> {
    if !(0.0..=1.0).contains(&shrink) {
        return Err(Error::InvalidParameter(format!("shrink {shrink} outside [0, 1]")));
    }
    if input_cost.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("input cost".into()));
    }
    let cost = solve_dare(model, state_cost, input_cost, RICCATI_TOL, RICCATI_MAX_ITERS)?;
    if cost.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("terminal cost".into()));
    }

    let n = model.state_dim();
    let zr = &reference.state;
    let mut half_width = f64::INFINITY;
    for row in state_set.rows() {
        let slack = -row.value(zr);
        if slack <= 0.0 {
            return Err(Error::InvalidParameter(
                "reference state is not interior to the state set".into(),
            ));
        }
        let l1 = row.normal.iter().map(|v| v.abs()).sum::<f64>();
        if l1 > 0.0 {
            half_width = half_width.min(slack / l1);
        }
    }
    if !half_width.is_finite() {
        return Err(Error::InvalidParameter(
            "state set does not bound the terminal box".into(),
        ));
    }
    let w = half_width * shrink;
    let mut rows = Vec::with_capacity(2 * n + state_set.len());
    for j in 0..n {
        let mut up = DVector::zeros(n);
        up[j] = 1.0;
        rows.push(Halfspace::new(up, -(zr[j] + w)));
        let mut down = DVector::zeros(n);
        down[j] = -1.0;
        rows.push(Halfspace::new(down, zr[j] - w));
    }
    rows.extend(state_set.rows().iter().cloned());
    Ok(TerminalIngredients {
        cost,
        set: Polytope::new(n, rows)?,
    })
}
