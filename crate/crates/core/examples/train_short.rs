//! A short desk-scale training run that prints the evaluation curve as it goes.
//!
//!     cargo run --release --example train_short -- [p2p-sac|sac|accel-sac] [steps] [seed]

use pripg::harness::run::build_world;
use pripg::harness::{Preset, RunConfig};
use pripg::p2p_sac::{train, Algorithm};
use pripg::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let algo = Algorithm::parse(&args.next().unwrap_or_else(|| "p2p-sac".into()))?;
    let mut cfg = RunConfig::preset(Preset::Desk, algo);
    cfg.total_steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    cfg.seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    // Reach the handover inside a short run.
    cfg.schedule.t_p = cfg.schedule.t_p.min(cfg.total_steps / 2);
    cfg.eval_every = (cfg.total_steps / 10).max(1);
    cfg.validate()?;

    let (env, planner) = build_world(&cfg)?;
    let out = train::<f32>(&cfg.train_config(), &env, &planner, |p, agent| {
        println!(
            "{:>7} reward {:>8.2} success {:.2} crash {:.2} gate {:.3} alpha {:.4}",
            p.steps,
            p.reward,
            p.success,
            p.crash,
            p.gate_mean,
            agent.alpha()
        );
    })?;
    println!("{:?}", out.counters);
    if let Some((step, best, _)) = out.best {
        println!("best at {step}: success {:.2} reward {:.2}", best.success, best.reward);
    }
    Ok(())
}
