//! Stops the barrier flow after increasing budgets on one random QP and compares each
//! iterate with the exact optimum.
//!
//!     cargo run --release --example anytime_qp -- [seed]

use pripg::harness::verify::{budget_ladder, random_certification_qp, tightened};
use pripg::qp_oracle::solve_exact;
use pripg::reap::{feasible_init, solve, BarrierParams, PlannerBudget};
use pripg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let qp = random_certification_qp(&mut ChaCha8Rng::seed_from_u64(seed));
    let params = BarrierParams::default();
    let star = solve_exact(&tightened(&qp, &params))?;
    println!("dim {} rows {} active at optimum {}", qp.dim(), qp.n_rows(), star.active_rows.len());

    let start = feasible_init(&qp)?;
    println!("{:>7} {:>12} {:>12} {:>12}", "budget", "max row", "cost", "first gap");
    for budget in budget_ladder() {
        let s = solve(&qp, &params, Some(&start), PlannerBudget::iters(budget))?;
        let gap = (qp.first_input(&s.u_hat) - qp.first_input(&star.u_star)).norm();
        println!("{budget:>7} {:>12.3e} {:>12.5} {gap:>12.3e}", qp.max_row_value(&s.u_hat), qp.cost(&s.u_hat));
    }
    Ok(())
}
