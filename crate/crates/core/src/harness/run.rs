//! Experiment orchestration: train, evaluate, plan, and curve export on disk.
//!
//! A run writes `DIR/<algo>/seed<k>/` with `config.json`, `curve.csv`, `best.pripg`,
//! `final.pripg` and `summary.json`. None of these contain wall-clock values, so a run is
//! reproduced byte for byte by its config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{agent_checkpoint, agent_from_checkpoint, Checkpoint, TrainingMeta};
use super::config::RunConfig;
use super::curves::{aggregate, read_seed_curve, write_curves, write_seed_curve, CurveRow};
use crate::error::{Error, Result};
use crate::nav_env::{NavEnv, Trajectory};
use crate::nn::Scalar;
use crate::p2p_sac::{eval_seeds, evaluate, summarize, train, Algorithm, Counters, CurvePoint, EvalSummary};
use crate::reap::{NavPlanner, PlannerBudget};

/// Offset of the held-out evaluation seeds; training-time evaluations use the run seed.
pub const HELD_OUT_BASE: u64 = 1_000_000;
pub const SELECTION_RULE: &str = "highest evaluation success rate, ties broken by mean reward";

pub fn held_out_seeds(seed: u64, n: usize) -> Vec<u64> {
    eval_seeds(HELD_OUT_BASE + seed, n)
}

pub fn run_dir(out: &Path, algorithm: Algorithm, seed: u64) -> PathBuf {
    out.join(algorithm.as_str()).join(format!("seed{seed}"))
}

pub fn build_world(cfg: &RunConfig) -> Result<(NavEnv, NavPlanner)> {
    let env = NavEnv::new(cfg.arena.clone())?;
    let (s0, _) = env.reset(0)?;
    let (_, info) = env.planner_view(&s0);
    let planner = NavPlanner::new(cfg.planner.clone(), info, cfg.arena.robot_radius, cfg.arena.dt)?;
    Ok((env, planner))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub float64: bool,
    pub selection_rule: &'static str,
    pub best_step: u64,
    /// Best checkpoint's score on the training-time evaluation seeds.
    pub best_train_eval: EvalSummary,
    /// Best checkpoint re-evaluated on held-out seeds.
    pub final_eval: EvalSummary,
    /// Mean gate over the curve rows in the final tenth of training.
    pub late_gate_mean: Option<f64>,
    pub counters: Counters,
}

/// Mean `gate_mean` over rows with `steps > 0.9 · total`, ignoring rows without a gate.
pub fn late_gate_mean(curve: &[CurvePoint], total_steps: u64) -> Option<f64> {
    let cut = total_steps as f64 * 0.9;
    let late: Vec<f64> =
        curve.iter().filter(|p| p.steps as f64 > cut && p.gate_mean.is_finite()).map(|p| p.gate_mean).collect();
    (!late.is_empty()).then(|| late.iter().sum::<f64>() / late.len() as f64)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn train_typed<T: Scalar>(cfg: &RunConfig, dir: &Path, mut progress: impl FnMut(&CurvePoint)) -> Result<RunSummary> {
    let (env, planner) = build_world(cfg)?;
    let tc = cfg.train_config();
    let out = train::<T>(&tc, &env, &planner, |p, _| progress(p))?;
    let (best_step, best_eval, best) = out.best.ok_or_else(|| Error::Config("no evaluation was run".into()))?;

    let meta = |step: u64| {
        let (beta, mature) = cfg.schedule.tick(step);
        TrainingMeta { step, beta, mature }
    };
    write_file(&dir.join("final.pripg"), &agent_checkpoint(&out.agent, meta(cfg.total_steps)).encode()?)?;
    write_file(&dir.join("best.pripg"), &agent_checkpoint(&best, meta(best_step)).encode()?)?;
    let mut csv = Vec::new();
    write_seed_curve(&out.curve, &mut csv)?;
    write_file(&dir.join("curve.csv"), &csv)?;

    let (final_eval, _) = evaluate(&best.policy, &env, &held_out_seeds(cfg.seed, cfg.final_eval_episodes))?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        float64: cfg.float64,
        selection_rule: SELECTION_RULE,
        best_step,
        best_train_eval: best_eval,
        final_eval,
        late_gate_mean: late_gate_mean(&out.curve, cfg.total_steps),
        counters: out.counters,
    };
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Trains one seed and writes its artifacts under [`run_dir`].
pub fn run_train(cfg: &RunConfig, out: &Path, progress: impl FnMut(&CurvePoint)) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.algorithm == Algorithm::ReapOnly {
        return Err(Error::Config("reap-only has nothing to train; use plan".into()));
    }
    let dir = run_dir(out, cfg.algorithm, cfg.seed);
    write_file(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;
    if cfg.float64 {
        train_typed::<f64>(cfg, &dir, progress)
    } else {
        train_typed::<f32>(cfg, &dir, progress)
    }
}

/// One planner-only episode with warm-started flows.
pub fn planner_episode(env: &NavEnv, planner: &NavPlanner, seed: u64, budget: usize) -> Result<Trajectory> {
    let (mut state, _) = env.reset(seed)?;
    let mut traj = Trajectory::new(state.position);
    let mut warm = None;
    loop {
        let plan = planner.plan(state.position, warm.as_ref(), PlannerBudget::iters(budget))?;
        let r = env.step(&mut state, plan.u)?;
        traj.push(state.t, &r, state.position);
        warm = Some(plan.state);
        if r.terminal.is_terminal() {
            return Ok(traj);
        }
    }
}

/// Planner-only rollouts on the held-out seeds, with one trajectory CSV per episode.
pub fn run_plan(cfg: &RunConfig, episodes: usize, out: Option<&Path>) -> Result<(EvalSummary, Vec<Trajectory>)> {
    cfg.validate()?;
    let (env, planner) = build_world(cfg)?;
    let trajs = held_out_seeds(cfg.seed, episodes)
        .into_iter()
        .map(|s| planner_episode(&env, &planner, s, cfg.planner.budget_iters))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&trajs, &env)?;
    if let Some(out) = out {
        let dir = run_dir(out, Algorithm::ReapOnly, cfg.seed);
        write_file(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;
        for (k, tr) in trajs.iter().enumerate() {
            let mut buf = Vec::new();
            tr.write_csv(&mut buf)?;
            write_file(&dir.join(format!("traj_{k:03}.csv")), &buf)?;
        }
        let doc = serde_json::json!({ "config_hash": cfg.hash(), "seed": cfg.seed, "eval": summary });
        write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&doc)?.as_bytes())?;
    }
    Ok((summary, trajs))
}

/// Deterministic evaluation of a checkpoint on the held-out seeds. A reap-only config
/// evaluates the planner instead and needs no checkpoint.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>, episodes: usize) -> Result<EvalSummary> {
    cfg.validate()?;
    if cfg.algorithm == Algorithm::ReapOnly {
        return Ok(run_plan(cfg, episodes, None)?.0);
    }
    let path = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let ckpt = Checkpoint::decode(&fs::read(path)?)?;
    let (env, _) = build_world(cfg)?;
    let seeds = held_out_seeds(cfg.seed, episodes);
    if cfg.float64 {
        let (agent, _) = agent_from_checkpoint::<f64>(&cfg.agent, &ckpt)?;
        Ok(evaluate(&agent.policy, &env, &seeds)?.0)
    } else {
        let (agent, _) = agent_from_checkpoint::<f32>(&cfg.agent, &ckpt)?;
        Ok(evaluate(&agent.policy, &env, &seeds)?.0)
    }
}

/// Aggregates `DIR/<algo>/seed*/curve.csv` into `DIR/<algo>/curves.csv` for every algorithm
/// directory present. Returns the algorithms written and their rows.
pub fn export_curves(out: &Path) -> Result<Vec<(String, Vec<CurveRow>)>> {
    let mut written = Vec::new();
    let mut algos: Vec<PathBuf> = fs::read_dir(out)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    algos.sort();
    for dir in algos {
        let mut seeds: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path().join("curve.csv")))
            .filter(|p| p.is_file())
            .collect();
        if seeds.is_empty() {
            continue;
        }
        seeds.sort();
        let curves = seeds.iter().map(|p| read_seed_curve(fs::File::open(p)?)).collect::<Result<Vec<_>>>()?;
        let rows = aggregate(&curves)?;
        let mut buf = Vec::new();
        write_curves(&rows, &mut buf)?;
        write_file(&dir.join("curves.csv"), &buf)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        written.push((name, rows));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Preset;

    fn tiny(algorithm: Algorithm) -> RunConfig {
        let mut cfg = RunConfig::preset(Preset::Desk, algorithm);
        cfg.agent.hidden = vec![8, 8];
        cfg.agent.batch_size = 16;
        cfg.total_steps = 300;
        cfg.eval_every = 150;
        cfg.eval_episodes = 1;
        cfg.final_eval_episodes = 1;
        cfg.schedule.t_p = 100;
        cfg.arena.max_steps = 60;
        cfg.planner.budget_iters = 20;
        cfg
    }

    #[test]
    fn train_writes_artifacts_and_reloads() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(Algorithm::P2pSac);
        let summary = run_train(&cfg, tmp.path(), |_| {}).unwrap();
        let dir = run_dir(tmp.path(), Algorithm::P2pSac, 0);
        for f in ["config.json", "curve.csv", "best.pripg", "final.pripg", "summary.json"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        let again = run_eval(&cfg, Some(&dir.join("best.pripg")), 1).unwrap();
        // Debug text, since NaN optimality compares unequal to itself.
        assert_eq!(format!("{again:?}"), format!("{:?}", summary.final_eval));
        let curve = read_seed_curve(fs::File::open(dir.join("curve.csv")).unwrap()).unwrap();
        assert_eq!(curve.iter().map(|p| p.steps).collect::<Vec<_>>(), vec![150, 300]);

        let rows = export_curves(tmp.path()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(tmp.path().join("p2p-sac/curves.csv").is_file());
    }

    #[test]
    fn reap_only_does_not_train() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(run_train(&tiny(Algorithm::ReapOnly), tmp.path(), |_| {}).is_err());
        let (summary, trajs) = run_plan(&tiny(Algorithm::ReapOnly), 2, Some(tmp.path())).unwrap();
        assert_eq!((summary.episodes, trajs.len()), (2, 2));
        assert!(run_dir(tmp.path(), Algorithm::ReapOnly, 0).join("traj_001.csv").is_file());
    }

    #[test]
    fn late_gate_ignores_early_and_missing_rows() {
        let pt = |steps, gate_mean| CurvePoint { steps, reward: 0.0, success: 0.0, crash: 0.0, gate_mean };
        let curve = [pt(50, 1.0), pt(95, 0.4), pt(100, 0.5)];
        assert_eq!(late_gate_mean(&curve, 100), Some(0.45));
        assert_eq!(late_gate_mean(&[pt(100, f64::NAN)], 100), None);
    }
}
