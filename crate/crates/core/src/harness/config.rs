//! Run configuration, presets, and the config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nav_env::Arena;
use crate::p2p_sac::{AgentConfig, Algorithm, ScheduleConfig, TrainConfig};
use crate::reap::PlannerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

/// Everything that determines a run. Serialized as one JSON document; missing keys take
/// the `paper` preset's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub total_steps: u64,
    pub eval_every: u64,
    /// Episodes per evaluation during training.
    pub eval_episodes: usize,
    /// Held-out episodes on which the best checkpoint is re-evaluated after training.
    pub final_eval_episodes: usize,
    /// Train in 64-bit arithmetic instead of 32-bit.
    pub float64: bool,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub planner_capacity: usize,
    pub online_capacity: usize,
    pub arena: Arena,
    pub planner: PlannerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper, Algorithm::P2pSac)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset, algorithm: Algorithm) -> Self {
        let train = TrainConfig::default();
        let mut cfg = Self {
            algorithm,
            seed: 0,
            total_steps: train.total_steps,
            eval_every: train.eval_every,
            eval_episodes: train.eval_episodes,
            final_eval_episodes: 20,
            float64: false,
            agent: AgentConfig::default(),
            schedule: ScheduleConfig::default(),
            planner_capacity: train.planner_capacity,
            online_capacity: train.online_capacity,
            arena: Arena::default(),
            planner: PlannerConfig::default(),
        };
        if algorithm == Algorithm::AccelSac {
            cfg.schedule.t_d = 50_000;
        }
        if preset == Preset::Desk {
            cfg.agent.hidden = vec![64, 64];
            cfg.total_steps = 200_000;
            cfg.schedule.t_p = 20_000;
            if algorithm == Algorithm::AccelSac {
                cfg.schedule.t_d = 10_000;
            }
            cfg.planner_capacity = 100_000;
            cfg.online_capacity = 100_000;
            cfg.eval_every = 5_000;
        }
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replaces every key present in `overlay`, recursing into objects, and keeps the rest.
    pub fn with_overlay(&self, overlay: &serde_json::Value) -> Result<Self> {
        fn merge(base: &mut serde_json::Value, top: &serde_json::Value) {
            match (base, top) {
                (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
                    for (k, v) in t {
                        merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
                    }
                }
                (b, t) => *b = t.clone(),
            }
        }
        let mut doc = serde_json::to_value(self)?;
        merge(&mut doc, overlay);
        Ok(serde_json::from_value(doc)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        self.planner.barrier.validate()?;
        if self.final_eval_episodes == 0 {
            return Err(Error::Config("final_eval_episodes must be positive".into()));
        }
        if self.algorithm != Algorithm::ReapOnly {
            self.train_config().validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            algorithm: self.algorithm,
            seed: self.seed,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            agent: self.agent.clone(),
            schedule: self.schedule,
            planner_capacity: self.planner_capacity,
            online_capacity: self.online_capacity,
            planner_budget: self.planner.budget_iters,
        }
    }

    /// SHA-256 of the canonical JSON with the seed zeroed, so seeds of one experiment share
    /// a hash and `(hash, seed)` names a run.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
