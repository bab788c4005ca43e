//! Builds the navigation MPC problem at one position, condenses it, and checks the condensed
//! cost against a simulated rollout.
//!
//!     cargo run --example condense_navigation

use nalgebra::DVector;
use pripg::harness::run::build_world;
use pripg::harness::{Preset, RunConfig};
use pripg::lin_mpc::{condense, RowKind};
use pripg::p2p_sac::Algorithm;
use pripg::Result;

fn main() -> Result<()> {
    let cfg = RunConfig::preset(Preset::Paper, Algorithm::ReapOnly);
    let (env, planner) = build_world(&cfg)?;
    let (state, _) = env.reset(0)?;
    let z = state.position;
    let (problem, relaxed) = planner.build_problem(z)?;
    let qp = condense(&problem)?;

    let count = |k: RowKind| qp.origins.iter().filter(|o| o.kind == k).count();
    println!("position ({:.3}, {:.3}) reference ({:.3}, {:.3})", z[0], z[1], problem.reference.state[0], problem.reference.state[1]);
    println!(
        "decision variables {} rows {} (state {}, input {}, terminal {}), relaxed {relaxed}",
        qp.dim(),
        qp.n_rows(),
        count(RowKind::State),
        count(RowKind::Input),
        count(RowKind::Terminal)
    );

    let u = DVector::from_fn(qp.dim(), |i, _| if i % 2 == 0 { 0.2 } else { 0.4 });
    let (condensed, simulated) = (qp.cost(&u), problem.trajectory_cost(&u));
    println!("cost condensed {condensed:.12} simulated {simulated:.12} diff {:.2e}", (condensed - simulated).abs());
    Ok(())
}
