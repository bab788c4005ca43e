use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lin_mpc::{interior_point, CondensedQP};

/// Smallest log argument an accepted primal step may produce.
pub const ARG_FLOOR: f64 = 1e-12;
pub const MAX_HALVINGS: usize = 40;
/// Dual value assigned to every row by [`feasible_init`].
pub const INITIAL_DUAL: f64 = 1e-3;
/// Strict-feasibility margin certified by [`feasible_init`].
const INIT_MARGIN: f64 = 1e-6;
const FIXED_POINT_TOL: f64 = 1e-12;
/// Row values are updated incrementally and recomputed from scratch this often.
const ROW_REFRESH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    /// Barrier sharpness β.
    pub beta: f64,
    /// Tightening ω; active rows settle at `η·u + g = −1/ω`.
    pub omega: f64,
    /// Flow speed ζ.
    pub zeta: f64,
    /// Euler step Δρ.
    pub step: f64,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self {
            beta: 100.0,
            omega: 200.0,
            zeta: 1.0,
            step: 1e-3,
        }
    }
}

impl BarrierParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("omega", self.omega),
            ("zeta", self.zeta),
            ("step", self.step),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta / self.omega >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "beta/omega = {} must be below 1",
                self.beta / self.omega
            )));
        }
        Ok(())
    }

    fn log_arg(&self, row_value: f64) -> f64 {
        -self.beta * (row_value + 1.0 / self.omega) + 1.0
    }
}

/// Flow variables `(û, λ̂)` and the number of steps taken to reach them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub u_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub iters_used: usize,
}

/// Iteration budget standing in for planner computation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerBudget {
    pub max_iters: usize,
}

impl PlannerBudget {
    pub fn iters(max_iters: usize) -> Self {
        Self { max_iters }
    }
}

pub fn barrier_value(
    qp: &CondensedQP,
    params: &BarrierParams,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<f64> {
    if u.len() != qp.dim() || lambda.len() != qp.n_rows() {
        return Err(Error::DimensionMismatch("barrier arguments".into()));
    }
    let s = qp.row_values(u);
    let mut value = qp.cost(u);
    for i in 0..s.len() {
        let arg = params.log_arg(s[i]);
        if arg <= 0.0 {
            return Err(Error::BarrierDomain { row: i, arg });
        }
        if lambda[i] != 0.0 {
            value -= lambda[i] * arg.ln();
        }
    }
    Ok(value)
}

/// One explicit Euler step of the flow.
///
/// The primal step is halved until no row is pushed above zero (rows that are moving inwards
/// are always accepted) and every log argument stays at or above [`ARG_FLOOR`]. The dual step
/// is projected onto `λ >= 0`: a component at zero with negative derivative stays at zero.
pub fn flow_step(
    qp: &CondensedQP,
    params: &BarrierParams,
    state: &PrimalDualState,
) -> Result<PrimalDualState> {
    let s = qp.row_values(&state.u_hat);
    advance(qp, &qp.eta.transpose(), params, state, &s).map(|(next, _)| next)
}

/// [`flow_step`] given the current row values; also returns the row values after the step,
/// which move linearly along the primal direction.
fn advance(
    qp: &CondensedQP,
    eta_t: &DMatrix<f64>,
    params: &BarrierParams,
    state: &PrimalDualState,
    s: &DVector<f64>,
) -> Result<(PrimalDualState, DVector<f64>)> {
    let n_rows = s.len();
    let mut weights = DVector::zeros(n_rows);
    let mut dual_grad = DVector::zeros(n_rows);
    for i in 0..n_rows {
        let arg = params.log_arg(s[i]);
        if arg <= 0.0 {
            return Err(Error::BarrierDomain { row: i, arg });
        }
        weights[i] = state.lambda_hat[i] * params.beta / arg;
        dual_grad[i] = -arg.ln();
    }
    let mut grad = qp.gradient(&state.u_hat);
    grad.gemv(1.0, eta_t, &weights, 1.0);
    // Row values move linearly along the step direction.
    let slope = &qp.eta * &grad;

    let h = params.zeta * params.step;
    let acceptable = |t: f64| {
        (0..n_rows).all(|i| {
            let next = s[i] - t * slope[i];
            (next <= 0.0 || slope[i] >= 0.0) && params.log_arg(next) >= ARG_FLOOR
        })
    };
    let mut t = h;
    let mut halvings = 0;
    while !acceptable(t) {
        if halvings == MAX_HALVINGS {
            // Fall back to half the distance to the nearest row being approached.
            let to_boundary = (0..n_rows)
                .filter(|&i| slope[i] < 0.0)
                .map(|i| (s[i] / slope[i]).max(0.0))
                .fold(h, f64::min);
            t = 0.5 * to_boundary;
            break;
        }
        t *= 0.5;
        halvings += 1;
    }
    let u_hat = &state.u_hat - grad * t;
    let lambda_hat = DVector::from_iterator(
        n_rows,
        (0..n_rows).map(|i| {
            let lam = state.lambda_hat[i];
            let d = if lam <= 0.0 && dual_grad[i] < 0.0 {
                0.0
            } else {
                dual_grad[i]
            };
            (lam + h * d).max(0.0)
        }),
    );
    if t == 0.0 && lambda_hat == state.lambda_hat {
        return Err(Error::StalledStep { halvings });
    }
    let s_next = s - &slope * t;
    Ok((
        PrimalDualState {
            u_hat,
            lambda_hat,
            iters_used: state.iters_used + 1,
        },
        s_next,
    ))
}

/// Strictly feasible starting point with small positive duals.
///
/// Returns the stacked nominal input when it already clears every row by 1e-6, otherwise
/// runs a phase-I search from it.
pub fn feasible_init(qp: &CondensedQP) -> Result<PrimalDualState> {
    let u0 = qp.nominal.clone();
    let u_hat = if qp.n_rows() == 0 || qp.max_row_value(&u0) <= -INIT_MARGIN {
        u0
    } else {
        interior_point(&qp.eta, &qp.g, u0, INIT_MARGIN)?
    };
    Ok(PrimalDualState {
        u_hat,
        lambda_hat: DVector::from_element(qp.n_rows(), INITIAL_DUAL),
        iters_used: 0,
    })
}

fn check_warm(qp: &CondensedQP, warm: &PrimalDualState) -> Result<()> {
    if warm.u_hat.len() != qp.dim() || warm.lambda_hat.len() != qp.n_rows() {
        return Err(Error::DimensionMismatch("warm start".into()));
    }
    if warm.lambda_hat.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::InvalidParameter("warm-start duals must be nonnegative".into()));
    }
    let s = qp.row_values(&warm.u_hat);
    if let Some((row, &violation)) = s
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 1e-9)
        .max_by(|a, b| a.1.total_cmp(b.1))
    {
        return Err(Error::InfeasibleWarmStart { row, violation });
    }
    Ok(())
}

/// Runs the flow for `budget.max_iters` steps, or until a step moves no variable by more
/// than 1e-12. The returned state is feasible for any budget, including zero.
pub fn solve(
    qp: &CondensedQP,
    params: &BarrierParams,
    warm: Option<&PrimalDualState>,
    budget: PlannerBudget,
) -> Result<PrimalDualState> {
    solve_observed(qp, params, warm, budget, |_| {})
}

/// [`solve`], calling `observer` on the starting point and after every step.
pub fn solve_observed(
    qp: &CondensedQP,
    params: &BarrierParams,
    warm: Option<&PrimalDualState>,
    budget: PlannerBudget,
    mut observer: impl FnMut(&PrimalDualState),
) -> Result<PrimalDualState> {
    params.validate()?;
    let mut state = match warm {
        Some(w) => {
            check_warm(qp, w)?;
            PrimalDualState {
                iters_used: 0,
                ..w.clone()
            }
        }
        None => feasible_init(qp)?,
    };
    observer(&state);
    let eta_t = qp.eta.transpose();
    let mut s = qp.row_values(&state.u_hat);
    for k in 0..budget.max_iters {
        if k % ROW_REFRESH == 0 {
            s = qp.row_values(&state.u_hat);
        }
        let (next, s_next) = advance(qp, &eta_t, params, &state, &s)?;
        s = s_next;
        let moved = (&next.u_hat - &state.u_hat)
            .amax()
            .max((&next.lambda_hat - &state.lambda_hat).amax());
        state = next;
        observer(&state);
        if moved < FIXED_POINT_TOL {
            break;
        }
    }
    Ok(state)
}

/// Maps a wall-clock allowance to an iteration budget by timing a short calibration run.
pub fn calibrate_budget(
    qp: &CondensedQP,
    params: &BarrierParams,
    millis: f64,
) -> Result<PlannerBudget> {
    const PROBE_ITERS: usize = 200;
    let mut state = feasible_init(qp)?;
    let start = Instant::now();
    for _ in 0..PROBE_ITERS {
        state = flow_step(qp, params, &state)?;
    }
    let per_iter_ms = start.elapsed().as_secs_f64() * 1e3 / PROBE_ITERS as f64;
    let iters = if per_iter_ms > 0.0 {
        (millis / per_iter_ms).floor() as usize
    } else {
        usize::MAX
    };
    Ok(PlannerBudget::iters(iters))
}
