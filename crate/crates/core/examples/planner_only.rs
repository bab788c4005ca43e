//! Drives the robot with the anytime planner alone and writes one trajectory CSV per episode.
//!
//!     cargo run --release --example planner_only -- [episodes] [budget] [out_dir]

use std::path::PathBuf;

use pripg::harness::run::run_plan;
use pripg::harness::{Preset, RunConfig};
use pripg::nav_env::episode_metrics;
use pripg::p2p_sac::Algorithm;
use pripg::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let episodes = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let budget = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from);

    let mut cfg = RunConfig::preset(Preset::Desk, Algorithm::ReapOnly);
    cfg.planner.budget_iters = budget;
    let (summary, trajs) = run_plan(&cfg, episodes, out.as_deref())?;
    for (k, t) in trajs.iter().enumerate() {
        let m = episode_metrics(t, &cfg.arena)?;
        println!("episode {k}: {:<8} steps {:>4} optimality {:.3}", t.outcome().as_str(), t.steps.len(), m.path_optimality);
    }
    println!("success {:.0}% crash {:.0}% mean optimality {:.3}", 100.0 * summary.success, 100.0 * summary.crash, summary.path_optimality);
    Ok(())
}
