//! Linear MPC construction: models, polyhedral sets, terminal ingredients and condensation of
//! the finite-horizon tracking problem into a QP over the stacked input sequence.

mod condense;
mod model;
mod polytope;
mod terminal;

pub use condense::{condense, CondensedQP, MpcProblem, RowKind, RowOrigin};
pub use model::{steady_state, LtiModel, SteadyState};
pub use polytope::{interior_point, Halfspace, Polytope};
pub use terminal::{
    riccati_map, solve_dare, terminal_ingredients, TerminalIngredients, RICCATI_MAX_ITERS,
    RICCATI_TOL,
};
