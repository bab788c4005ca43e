use std::fs;

use pripg::harness::run::{held_out_seeds, run_dir, run_eval, run_train};
use pripg::harness::{aggregate, agent_checkpoint, agent_from_checkpoint, Checkpoint, Preset, RunConfig, TrainingMeta};
use pripg::nav_env::NavEnv;
use pripg::p2p_sac::{evaluate, stream, Agent, Algorithm, CurvePoint};
use pripg::Error;
use rand::Rng;

fn tiny(algorithm: Algorithm) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk, algorithm);
    cfg.agent.hidden = vec![8, 8];
    cfg.agent.batch_size = 16;
    cfg.total_steps = 400;
    cfg.eval_every = 200;
    cfg.eval_episodes = 2;
    cfg.final_eval_episodes = 3;
    cfg.schedule.t_p = 150;
    cfg.arena.max_steps = 80;
    cfg.planner.budget_iters = 30;
    cfg
}

/// Oracle for the seed aggregate: Welford's single-pass recurrence, independent of the
/// two-pass formula used by `aggregate`.
fn welford(xs: &[f64]) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    (mean, (m2 / xs.len() as f64).sqrt())
}

#[test]
fn five_seed_envelopes_match_an_independent_recomputation() {
    let mut rng = stream(21, 0);
    let curves: Vec<Vec<CurvePoint>> = (0..5)
        .map(|_| {
            (1..=40)
                .map(|k| CurvePoint {
                    steps: k * 5_000,
                    reward: rng.random_range(-900.0..50.0),
                    success: rng.random_range(0..=10) as f64 / 10.0,
                    crash: rng.random_range(0..=10) as f64 / 10.0,
                    gate_mean: rng.random_range(0.0..1.0),
                })
                .collect()
        })
        .collect();
    let rows = aggregate(&curves).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let col = |f: fn(&CurvePoint) -> f64| curves.iter().map(|c| f(&c[i])).collect::<Vec<_>>();
        let (rm, rs) = welford(&col(|p| p.reward));
        let (sm, ss) = welford(&col(|p| p.success));
        assert!((row.rew_mean - rm).abs() <= 1e-9 && (row.rew_hi - row.rew_mean - rs).abs() <= 1e-9);
        assert!((row.rew_mean - row.rew_lo - rs).abs() <= 1e-9);
        assert!((row.suc_mean - sm).abs() <= 1e-9 && (row.suc_hi - row.suc_mean - ss).abs() <= 1e-9);
        assert!((row.crash_rate - welford(&col(|p| p.crash)).0).abs() <= 1e-9);
        assert!(row.rew_lo <= row.rew_mean && row.rew_mean <= row.rew_hi);
    }
    assert!(rows.windows(2).all(|w| w[0].steps < w[1].steps));
}

#[test]
fn checkpoint_evaluated_twice_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Algorithm::P2pSac);
    run_train(&cfg, tmp.path(), |_| {}).unwrap();
    let ckpt = run_dir(tmp.path(), Algorithm::P2pSac, 0).join("best.pripg");
    let a = run_eval(&cfg, Some(&ckpt), 3).unwrap();
    let b = run_eval(&cfg, Some(&ckpt), 3).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn outputs_record_hash_and_selection_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Algorithm::AccelSac);
    cfg.schedule.t_d = 100;
    cfg.seed = 4;
    let summary = run_train(&cfg, tmp.path(), |_| {}).unwrap();
    let dir = run_dir(tmp.path(), Algorithm::AccelSac, 4);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(doc["config_hash"].as_str(), Some(cfg.hash().as_str()));
    assert!(doc["selection_rule"].as_str().unwrap().contains("success"));
    assert_eq!(doc["late_gate_mean"], serde_json::Value::Null);
    assert_eq!(summary.final_eval.episodes, 3);
    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert!(curve.lines().skip(1).all(|l| l.ends_with(",NaN")), "ungated learner reports NaN gate");
}

#[test]
fn stored_policy_reproduces_in_memory_evaluation() {
    let cfg = tiny(Algorithm::Sac);
    let agent = Agent::<f32>::new(cfg.agent.clone(), &mut stream(9, 0)).unwrap();
    let bytes = agent_checkpoint(&agent, TrainingMeta { step: 12, beta: 10.0, mature: false }).encode().unwrap();
    let (back, meta) = agent_from_checkpoint::<f32>(&cfg.agent, &Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(meta.step, 12);
    assert_eq!(back, agent);
    let env = NavEnv::new(cfg.arena.clone()).unwrap();
    let seeds = held_out_seeds(0, 2);
    let (a, ta) = evaluate(&agent.policy, &env, &seeds).unwrap();
    let (b, tb) = evaluate(&back.policy, &env, &seeds).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(ta, tb);
}

#[test]
fn held_out_seeds_avoid_training_evaluations() {
    let train: std::collections::HashSet<u64> = (0..50).flat_map(|s| pripg::p2p_sac::eval_seeds(s, 100)).collect();
    assert!((0..50).flat_map(|s| held_out_seeds(s, 100)).all(|s| !train.contains(&s)));
}

#[test]
fn truncated_checkpoint_is_reported_with_offset() {
    let cfg = tiny(Algorithm::Sac);
    let agent = Agent::<f32>::new(cfg.agent.clone(), &mut stream(1, 0)).unwrap();
    let bytes = agent_checkpoint(&agent, TrainingMeta { step: 0, beta: 10.0, mature: false }).encode().unwrap();
    for cut in [0, 5, 9, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::decode(&bytes[..cut]) {
            Err(Error::CorruptContainer { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn json_reals_survive_a_round_trip_bit_for_bit() {
    let mut rng = stream(22, 0);
    for _ in 0..10_000 {
        let x: f64 = rng.random_range(0.0..1.0) * 10f64.powi(rng.random_range(-8..8));
        let back: f64 = serde_json::from_str(&serde_json::to_string(&x).unwrap()).unwrap();
        assert_eq!(back.to_bits(), x.to_bits(), "{x:e}");
    }
    let late = 0.495_448_746_447_265_16_f64;
    assert_eq!(serde_json::from_str::<f64>(&serde_json::to_string(&late).unwrap()).unwrap(), late);
}
