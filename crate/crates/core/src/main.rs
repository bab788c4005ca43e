use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pripg::harness::{run, verify, Preset, RunConfig};
use pripg::p2p_sac::{Algorithm, EvalSummary};
use pripg::{Error, Result};

#[derive(Parser)]
#[command(name = "pripg", version, about = "Planner-guided SAC with an anytime barrier-MPC teacher")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one seed and write curve, checkpoints and summary.
    Train(Common),
    /// Evaluate a checkpoint, or the planner for reap-only, on held-out seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Planner-only rollouts with one trajectory CSV per episode.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Run the oracle suites: QP feasibility and convergence, decomposition, gradients.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Only the decomposition suite.
        #[arg(long)]
        theorem1: bool,
    },
    /// Aggregate seed curves under DIR into DIR/<algo>/curves.csv.
    ExportCurves(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON document overriding preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "paper")]
    preset: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Flow iterations per planner query.
    #[arg(long)]
    budget_iters: Option<usize>,
    #[arg(long)]
    float64: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overlay = match &self.config {
            Some(p) => Some(serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(p)?)?),
            None => None,
        };
        let from_file = overlay.as_ref().and_then(|o| o.get("algorithm")).and_then(|v| v.as_str());
        let algo = Algorithm::parse(self.algo.as_deref().or(from_file).unwrap_or("p2p-sac"))?;
        let mut cfg = RunConfig::preset(Preset::parse(&self.preset)?, algo);
        if let Some(o) = &overlay {
            cfg = cfg.with_overlay(o)?;
        }
        cfg.algorithm = algo;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget_iters {
            cfg.planner.budget_iters = b;
        }
        cfg.float64 |= self.float64;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_eval(label: &str, e: &EvalSummary) {
    println!(
        "{label}: episodes {} success {:.1}% crash {:.1}% reward {:.2} optimality {:.3} duration {:.2}s velocity {:.3}",
        e.episodes,
        100.0 * e.success,
        100.0 * e.crash,
        e.reward,
        e.path_optimality,
        e.duration_s,
        e.avg_velocity
    );
}

fn verdict(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn run_verify(cfg: &RunConfig, out: &Path, theorem_only: bool) -> Result<bool> {
    let seed = cfg.seed;
    let th = verify::theorem_suite(1000, seed)?;
    let mut ok = verdict(
        "decomposition",
        th.passed(),
        format!(
            "{} instances, grad gap {:.2e}, loss gap {:.2e}, constant drift {:.2e}, bound failures {}",
            th.instances, th.worst_grad_gap, th.worst_loss_gap, th.worst_constant_drift, th.bound_failures
        ),
    );
    if theorem_only {
        return Ok(ok);
    }
    let feas = verify::feasibility_suite(1000, 5000, seed)?;
    ok &= verdict(
        "anytime feasibility",
        feas.passed(),
        format!("{} problems, {} iterates, worst row {:.2e}", feas.problems, feas.iterates, feas.worst_row),
    );
    let conv = verify::convergence_suite(100, seed)?;
    std::fs::create_dir_all(out)?;
    conv.write_csv(std::fs::File::create(out.join("qp_gaps.csv"))?)?;
    ok &= verdict(
        "convergence",
        conv.passed(),
        format!(
            "worst relative first-input gap {:.2e}, ladder violations {}, limit offset {:.2e}",
            conv.worst_final, conv.ladder_violations, conv.worst_limit_offset
        ),
    );
    let grads = verify::gradient_suite(seed)?;
    for c in &grads.checks {
        ok &= verdict(&format!("gradient {}", c.loss), c.rel_err <= verify::FD_TOL, format!("relative error {:.2e}", c.rel_err));
    }
    Ok(ok)
}

fn dispatch(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train(c) => {
            let cfg = c.resolve()?;
            let summary = run::run_train(&cfg, &c.out, |p| {
                eprintln!("{:>9} reward {:>9.2} success {:.2} crash {:.2} gate {:.3}", p.steps, p.reward, p.success, p.crash, p.gate_mean);
            })?;
            println!("config {} seed {} best step {}", summary.config_hash, summary.seed, summary.best_step);
            print_eval("held-out", &summary.final_eval);
            println!("wrote {}", run::run_dir(&c.out, cfg.algorithm, cfg.seed).display());
            Ok(true)
        }
        Cmd::Eval { common, checkpoint, episodes } => {
            let cfg = common.resolve()?;
            let e = run::run_eval(&cfg, checkpoint.as_deref(), episodes.unwrap_or(cfg.eval_episodes))?;
            print_eval(cfg.algorithm.as_str(), &e);
            Ok(true)
        }
        Cmd::Plan { common, episodes } => {
            let mut cfg = common.resolve()?;
            cfg.algorithm = Algorithm::ReapOnly;
            let (e, _) = run::run_plan(&cfg, episodes, Some(&common.out))?;
            print_eval("reap-only", &e);
            Ok(true)
        }
        Cmd::Verify { common, theorem1 } => {
            let mut cfg = common.resolve()?;
            cfg.float64 = true;
            run_verify(&cfg, &common.out, theorem1)
        }
        Cmd::ExportCurves(c) => {
            let written = run::export_curves(&c.out)?;
            if written.is_empty() {
                return Err(Error::Config(format!("no seed curves under {}", c.out.display())));
            }
            for (algo, rows) in written {
                println!("{algo}: {} rows -> {}", rows.len(), c.out.join(&algo).join("curves.csv").display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
