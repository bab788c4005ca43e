//! Anytime-feasible solver for condensed MPC problems.
//!
//! The solver integrates a primal–dual gradient flow on the barrier
//!
//! ```text
//! B(u, λ) = J(u) − Σ_i λ_i · log(−β(η_iᵀu + g_i + 1/ω) + 1)
//! du/dρ = −ζ ∇_u B,    dλ/dρ = ζ (∇_λ B + Ψ)
//! ```
//!
//! with explicit Euler steps. Started from a strictly feasible point, every iterate satisfies
//! the condensed constraints, so the flow can be stopped after any number of iterations and
//! its first stage input applied.

mod flow;
pub mod planner;

pub use flow::{
    barrier_value, calibrate_budget, feasible_init, flow_step, solve, solve_observed,
    BarrierParams, PlannerBudget, PrimalDualState, ARG_FLOOR, INITIAL_DUAL, MAX_HALVINGS,
};
pub use planner::{NavPlanner, PlanOutput, PlannerConfig};
