use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::flow::{feasible_init, solve, BarrierParams, PlannerBudget, PrimalDualState};
use crate::error::{Error, Result};
use crate::lin_mpc::{
    condense, interior_point, solve_dare, CondensedQP, Halfspace, LtiModel, MpcProblem, Polytope,
    RowKind, SteadyState, RICCATI_MAX_ITERS, RICCATI_TOL,
};
use crate::nav_env::{dist, DistanceField, PrivilegedInfo};

/// Progress per step demanded from a position outside the tightened set.
const RECOVERY: f64 = 0.004;
/// Value given to current-state rows, which hold no decision variables.
const MEASURED_ROW: f64 = -1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub barrier: BarrierParams,
    pub budget_iters: usize,
    /// Per-axis input bound.
    pub input_bound: f64,
    /// Clearance kept beyond the robot radius in the state constraints.
    pub safety_margin: f64,
    pub state_weight: f64,
    pub input_weight: f64,
    /// Clearance of the route guide that places the tracking reference.
    pub route_clearance: f64,
    pub route_resolution: f64,
    /// How far down the route the reference is placed.
    pub lookahead: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            barrier: BarrierParams::default(),
            budget_iters: 300,
            input_bound: 0.5,
            safety_margin: 0.05,
            state_weight: 1.0,
            input_weight: 1.0,
            route_clearance: 0.08,
            route_resolution: 0.02,
            lookahead: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    /// First stage input `u†`.
    pub u: [f64; 2],
    pub state: PrimalDualState,
    /// Tracking cost of the returned sequence.
    pub cost: f64,
    /// Smallest slack `−(η_i·u + g_i)` over all rows.
    pub min_slack: f64,
    pub reference: [f64; 2],
    /// Number of state rows loosened to pass through the current position.
    pub relaxed_rows: usize,
}

/// Receding-horizon planner for the navigation arena.
///
/// Each cycle linearizes every obstacle at the point of its inflated disk nearest the robot,
/// tightens the walls by the robot radius plus a safety margin, and tracks a waypoint placed
/// down a precomputed geodesic route. The terminal set is the tightened state set itself
/// and the terminal weight solves the Riccati equation of the tracking cost.
#[derive(Debug, Clone)]
pub struct NavPlanner {
    cfg: PlannerConfig,
    model: LtiModel,
    robot_radius: f64,
    info: PrivilegedInfo,
    route: DistanceField,
    state_cost: DMatrix<f64>,
    input_cost: DMatrix<f64>,
    terminal_cost: DMatrix<f64>,
    input_set: Polytope,
}

impl NavPlanner {
    pub fn new(cfg: PlannerConfig, info: PrivilegedInfo, robot_radius: f64, dt: f64) -> Result<Self> {
        cfg.barrier.validate()?;
        if cfg.horizon == 0 || !(cfg.input_bound > 0.0) || !(cfg.safety_margin >= 0.0) || !(cfg.lookahead > 0.0) {
            return Err(Error::InvalidParameter(format!("planner config {cfg:?}")));
        }
        let model = LtiModel::single_integrator(2, dt);
        let state_cost = DMatrix::identity(2, 2) * cfg.state_weight;
        let input_cost = DMatrix::identity(2, 2) * cfg.input_weight;
        let terminal_cost = solve_dare(&model, &state_cost, &input_cost, RICCATI_TOL, RICCATI_MAX_ITERS)?;
        let input_set = Polytope::symmetric_box(2, cfg.input_bound)?;
        let route = DistanceField::new(&info, robot_radius, cfg.route_clearance, cfg.route_resolution)?;
        Ok(Self { cfg, model, robot_radius, info, route, state_cost, input_cost, terminal_cost, input_set })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn info(&self) -> &PrivilegedInfo {
        &self.info
    }

    pub fn route(&self) -> &DistanceField {
        &self.route
    }

    /// Tightened state constraints linearized at `z`.
    ///
    /// The model residual can push the robot past a tightened row. Such a row is loosened
    /// just enough that the predicted states must recover `RECOVERY` of the violation per
    /// step, or fully when the violation is smaller. Errors when `z` is in contact.
    pub fn state_set(&self, z: [f64; 2]) -> Result<(Polytope, usize)> {
        let mut rows = Vec::with_capacity(self.info.obstacles.len() + 4);
        let mut relaxed = 0;
        let mut push = |normal: [f64; 2], offset: f64, rows: &mut Vec<Halfspace>| {
            let value = normal[0] * z[0] + normal[1] * z[1] + offset;
            let offset = if value > RECOVERY {
                relaxed += 1;
                offset - (value - RECOVERY)
            } else {
                offset
            };
            rows.push(Halfspace::new(DVector::from_row_slice(&normal), offset));
        };
        for (i, o) in self.info.obstacles.iter().enumerate() {
            let d = dist(z, o.center);
            if d <= o.radius + self.robot_radius {
                return Err(Error::InfeasibleState { row: i, violation: o.radius + self.robot_radius - d });
            }
            let n = [(z[0] - o.center[0]) / d, (z[1] - o.center[1]) / d];
            let reach = o.radius + self.robot_radius + self.cfg.safety_margin;
            // n·(z − o) >= reach
            push([-n[0], -n[1]], n[0] * o.center[0] + n[1] * o.center[1] + reach, &mut rows);
        }
        for (k, b) in self.info.boundaries.iter().enumerate() {
            let slack = b.clearance(z) - self.robot_radius;
            if slack <= 0.0 {
                return Err(Error::InfeasibleState { row: self.info.obstacles.len() + k, violation: -slack });
            }
            push(b.normal, self.robot_radius + self.cfg.safety_margin - b.offset, &mut rows);
        }
        Ok((Polytope::new(2, rows)?, relaxed))
    }

    /// Tracking reference for position `z`.
    pub fn reference(&self, z: [f64; 2]) -> [f64; 2] {
        self.route.carrot(z, self.cfg.lookahead).unwrap_or(self.info.goal)
    }

    pub fn build_problem(&self, z: [f64; 2]) -> Result<(MpcProblem, usize)> {
        let (state_set, relaxed) = self.state_set(z)?;
        let carrot = self.reference(z);
        let problem = MpcProblem {
            model: self.model.clone(),
            horizon: self.cfg.horizon,
            state_cost: self.state_cost.clone(),
            input_cost: self.input_cost.clone(),
            terminal_cost: self.terminal_cost.clone(),
            terminal_set: state_set.clone(),
            state_set,
            input_set: self.input_set.clone(),
            reference: SteadyState { state: DVector::from_row_slice(&carrot), input: DVector::zeros(2) },
            initial_state: DVector::from_row_slice(&z),
        };
        Ok((problem, relaxed))
    }

    /// One planning cycle at `z`, warm-started from the previous cycle when given.
    pub fn plan(&self, z: [f64; 2], prev: Option<&PrimalDualState>, budget: PlannerBudget) -> Result<PlanOutput> {
        let (problem, relaxed_rows) = self.build_problem(z)?;
        let mut qp = condense(&problem)?;
        for (i, o) in qp.origins.iter().enumerate() {
            if o.kind == RowKind::State && o.stage == 0 {
                qp.g[i] = qp.g[i].min(MEASURED_ROW);
            }
        }
        let start = match prev {
            Some(p) => self.shift_warm_start(&qp, p)?,
            None => feasible_init(&qp)?,
        };
        let state = solve(&qp, &self.cfg.barrier, Some(&start), budget)?;
        let first = qp.first_input(&state.u_hat);
        let u = [first[0], first[1]];
        let min_slack = -qp.max_row_value(&state.u_hat);
        Ok(PlanOutput {
            u,
            cost: qp.cost(&state.u_hat),
            min_slack,
            reference: [problem.reference.state[0], problem.reference.state[1]],
            relaxed_rows,
            state,
        })
    }

    /// Drops the first stage of `prev`, appends the equilibrium input, and moves the result
    /// back inside the new constraints if it left them.
    pub fn shift_warm_start(&self, qp: &CondensedQP, prev: &PrimalDualState) -> Result<PrimalDualState> {
        let p = qp.input_dim;
        let dim = qp.dim();
        if prev.u_hat.len() != dim || prev.lambda_hat.len() != qp.n_rows() {
            return feasible_init(qp);
        }
        let mut u = DVector::zeros(dim);
        u.rows_mut(0, dim - p).copy_from(&prev.u_hat.rows(p, dim - p));
        u.rows_mut(dim - p, p).copy_from(&qp.nominal.rows(dim - p, p));
        let mut lambda = prev.lambda_hat.clone();
        // Rows are grouped by kind and stage with a fixed count per stage.
        for kind in [RowKind::State, RowKind::Input] {
            let idx: Vec<usize> = (0..qp.n_rows()).filter(|&i| qp.origins[i].kind == kind).collect();
            let per_stage = idx.len() / self.cfg.horizon;
            for (pos, &i) in idx.iter().enumerate() {
                let src = pos + per_stage;
                if src < idx.len() {
                    lambda[i] = prev.lambda_hat[idx[src]];
                }
            }
        }
        let u = if qp.max_row_value(&u) <= 0.0 {
            u
        } else {
            interior_point(&qp.eta, &qp.g, u, 1e-6)?
        };
        Ok(PrimalDualState { u_hat: u, lambda_hat: lambda, iters_used: 0 })
    }
}
