//! Flat `key=value` experiment configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::method::{MethodSettings, Selection};
use crate::pcil::{Aggregation, RefMode};
use crate::rl::{AgentConfig, LoopConfig};

/// Prefix of environment parameter overrides, e.g. `env.arena=2`.
pub const ENV_PREFIX: &str = "env.";
pub const METHODS: [&str; 4] = ["pcil", "dac", "bc", "env_reward"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: String,
    pub env_overrides: BTreeMap<String, f64>,
    pub method: String,
    pub representation: String,
    pub reward: String,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub stop_at_fraction: f64,
    pub buffer_capacity: usize,
    pub learning_starts: u64,
    pub update_every: u64,
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_decay: f64,
    pub hidden: usize,
    pub lr: f64,
    pub reward_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub shared_trunk: bool,
    pub embedding_dim: usize,
    pub temperature: f64,
    pub contrastive_batch: usize,
    pub disc_batch: usize,
    pub expert_ratio: f64,
    pub encode_action: bool,
    pub aggregation: Aggregation,
    pub reward_ref_mode: RefMode,
    pub gp_weight: f64,
    pub gp_center_zero: bool,
    pub gp_samples: usize,
    pub tcn_window: usize,
    pub tcn_negatives: usize,
    pub demos: String,
    pub demo_episodes: usize,
    pub demo_seed: u64,
    pub expert_return_floor: f64,
    pub bc_epochs: usize,
    pub bc_batch: usize,
    pub bc_lr: f64,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        let lp = LoopConfig::default();
        let m = MethodSettings::default();
        Self {
            env: "point_mass".into(),
            env_overrides: BTreeMap::new(),
            method: "pcil".into(),
            representation: "pcl".into(),
            reward: "sim".into(),
            seeds: vec![1, 2, 3],
            total_steps: lp.total_steps,
            eval_interval: lp.eval_interval,
            eval_episodes: 10,
            eval_seed: 1_000_000,
            stop_at_fraction: 0.0,
            buffer_capacity: lp.buffer_capacity,
            learning_starts: lp.learning_starts,
            update_every: lp.update_every,
            explore_start: lp.explore_start,
            explore_end: lp.explore_end,
            explore_decay: lp.explore_decay_fraction,
            hidden: agent.hidden,
            lr: agent.lr,
            reward_lr: m.lr,
            gamma: agent.gamma,
            tau: agent.tau,
            n_step: agent.n_step,
            batch_size: agent.batch_size,
            target_noise: agent.target_noise,
            target_noise_clip: agent.target_noise_clip,
            shared_trunk: agent.shared_trunk,
            embedding_dim: m.embedding_dim,
            temperature: m.temperature,
            contrastive_batch: m.contrastive_batch,
            disc_batch: m.disc_batch,
            expert_ratio: m.expert_ratio,
            encode_action: m.encode_action,
            aggregation: m.aggregation,
            reward_ref_mode: m.ref_mode,
            gp_weight: m.gp_weight,
            gp_center_zero: m.gp_center_zero,
            gp_samples: m.gp_samples.unwrap_or(0),
            tcn_window: m.tcn_window,
            tcn_negatives: m.tcn_negatives,
            demos: String::new(),
            demo_episodes: 10,
            demo_seed: 0,
            expert_return_floor: 0.0,
            bc_epochs: 200,
            bc_batch: 128,
            bc_lr: 1e-3,
            out_dir: "runs".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {v:?}"))),
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    v.split(',')
        .map(|s| parse_num::<u64>("seeds", s.trim()))
        .collect()
}

fn range(key: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

impl ExperimentConfig {
    /// Parses config text; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), "expected key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_ref(), "expected key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(param) = key.strip_prefix(ENV_PREFIX) {
            if param.is_empty() {
                return Err(Error::config(key, "missing environment parameter name"));
            }
            self.env_overrides.insert(param.to_string(), parse_num(key, v)?);
            return Ok(());
        }
        match key {
            "env" => self.env = v.to_string(),
            "method" => self.method = v.to_string(),
            "representation" => self.representation = v.to_string(),
            "reward" => self.reward = v.to_string(),
            "seeds" => self.seeds = parse_seeds(v)?,
            "total_steps" => self.total_steps = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "eval_seed" => self.eval_seed = parse_num(key, v)?,
            "stop_at_fraction" => self.stop_at_fraction = parse_num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, v)?,
            "learning_starts" => self.learning_starts = parse_num(key, v)?,
            "update_every" => self.update_every = parse_num(key, v)?,
            "explore_start" => self.explore_start = parse_num(key, v)?,
            "explore_end" => self.explore_end = parse_num(key, v)?,
            "explore_decay" => self.explore_decay = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "reward_lr" => self.reward_lr = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "n_step" => self.n_step = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "target_noise" => self.target_noise = parse_num(key, v)?,
            "target_noise_clip" => self.target_noise_clip = parse_num(key, v)?,
            "shared_trunk" => self.shared_trunk = parse_bool(key, v)?,
            "embedding_dim" => self.embedding_dim = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "contrastive_batch" => self.contrastive_batch = parse_num(key, v)?,
            "disc_batch" => self.disc_batch = parse_num(key, v)?,
            "expert_ratio" => self.expert_ratio = parse_num(key, v)?,
            "encode_action" => self.encode_action = parse_bool(key, v)?,
            "aggregation" => {
                self.aggregation = Aggregation::parse(v).map_err(|_| Error::config(key, "expected out or in"))?
            }
            "reward_ref_mode" => {
                self.reward_ref_mode = RefMode::parse(v).map_err(|_| Error::config(key, "expected sample or mean"))?
            }
            "gp_weight" => self.gp_weight = parse_num(key, v)?,
            "gp_center_zero" => self.gp_center_zero = parse_bool(key, v)?,
            "gp_samples" => self.gp_samples = parse_num(key, v)?,
            "tcn_window" => self.tcn_window = parse_num(key, v)?,
            "tcn_negatives" => self.tcn_negatives = parse_num(key, v)?,
            "demos" => self.demos = v.to_string(),
            "demo_episodes" => self.demo_episodes = parse_num(key, v)?,
            "demo_seed" => self.demo_seed = parse_num(key, v)?,
            "expert_return_floor" => self.expert_return_floor = parse_num(key, v)?,
            "bc_epochs" => self.bc_epochs = parse_num(key, v)?,
            "bc_batch" => self.bc_batch = parse_num(key, v)?,
            "bc_lr" => self.bc_lr = parse_num(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// All keys with their values in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out: Vec<(String, String)> = [
            ("env", self.env.clone()),
            ("method", self.method.clone()),
            ("representation", self.representation.clone()),
            ("reward", self.reward.clone()),
            ("seeds", seeds),
            ("total_steps", self.total_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("stop_at_fraction", self.stop_at_fraction.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("learning_starts", self.learning_starts.to_string()),
            ("update_every", self.update_every.to_string()),
            ("explore_start", self.explore_start.to_string()),
            ("explore_end", self.explore_end.to_string()),
            ("explore_decay", self.explore_decay.to_string()),
            ("hidden", self.hidden.to_string()),
            ("lr", self.lr.to_string()),
            ("reward_lr", self.reward_lr.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau", self.tau.to_string()),
            ("n_step", self.n_step.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("target_noise", self.target_noise.to_string()),
            ("target_noise_clip", self.target_noise_clip.to_string()),
            ("shared_trunk", self.shared_trunk.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("temperature", self.temperature.to_string()),
            ("contrastive_batch", self.contrastive_batch.to_string()),
            ("disc_batch", self.disc_batch.to_string()),
            ("expert_ratio", self.expert_ratio.to_string()),
            ("encode_action", self.encode_action.to_string()),
            ("aggregation", self.aggregation.as_str().to_string()),
            ("reward_ref_mode", self.reward_ref_mode.as_str().to_string()),
            ("gp_weight", self.gp_weight.to_string()),
            ("gp_center_zero", self.gp_center_zero.to_string()),
            ("gp_samples", self.gp_samples.to_string()),
            ("tcn_window", self.tcn_window.to_string()),
            ("tcn_negatives", self.tcn_negatives.to_string()),
            ("demos", self.demos.clone()),
            ("demo_episodes", self.demo_episodes.to_string()),
            ("demo_seed", self.demo_seed.to_string()),
            ("expert_return_floor", self.expert_return_floor.to_string()),
            ("bc_epochs", self.bc_epochs.to_string()),
            ("bc_batch", self.bc_batch.to_string()),
            ("bc_lr", self.bc_lr.to_string()),
            ("out_dir", self.out_dir.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (k, v) in &self.env_overrides {
            out.push((format!("{ENV_PREFIX}{k}"), v.to_string()));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Range checks on every field; environment overrides are checked when
    /// the environment is built.
    pub fn validate(&self) -> Result<()> {
        crate::envs::env_registry().get(&self.env)?;
        range("method", METHODS.contains(&self.method.as_str()), "expected pcil, dac, bc or env_reward")?;
        crate::method::representation_registry().get(&self.representation)?;
        crate::method::reward_head_registry().get(&self.reward)?;
        range("seeds", !self.seeds.is_empty(), "at least one seed required")?;
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        range("seeds", sorted.len() == self.seeds.len(), "seeds must be distinct")?;
        range("total_steps", self.total_steps >= 1, "must be positive")?;
        range("eval_interval", self.eval_interval >= 1, "must be positive")?;
        range("eval_episodes", self.eval_episodes >= 1, "must be positive")?;
        range("stop_at_fraction", (0.0..=1.0).contains(&self.stop_at_fraction), "must lie in [0, 1]")?;
        range("buffer_capacity", self.buffer_capacity >= self.n_step.max(1), "must hold at least n_step transitions")?;
        range("update_every", self.update_every >= 1, "must be positive")?;
        for (k, v) in [("explore_start", self.explore_start), ("explore_end", self.explore_end)] {
            range(k, v.is_finite() && v >= 0.0, "must be non-negative")?;
        }
        range("explore_decay", self.explore_decay > 0.0 && self.explore_decay <= 1.0, "must lie in (0, 1]")?;
        range("hidden", self.hidden >= 1, "must be positive")?;
        for (k, v) in [("lr", self.lr), ("reward_lr", self.reward_lr), ("bc_lr", self.bc_lr)] {
            range(k, v > 0.0 && v.is_finite(), "must be positive")?;
        }
        range("gamma", (0.0..1.0).contains(&self.gamma), "must lie in [0, 1)")?;
        range("tau", self.tau > 0.0 && self.tau <= 1.0, "must lie in (0, 1]")?;
        range("n_step", self.n_step >= 1, "must be positive")?;
        range("batch_size", self.batch_size >= 1, "must be positive")?;
        range("target_noise", self.target_noise >= 0.0, "must be non-negative")?;
        range("target_noise_clip", self.target_noise_clip >= 0.0, "must be non-negative")?;
        range("embedding_dim", self.embedding_dim >= 2, "must be at least 2")?;
        range("temperature", self.temperature > 0.0 && self.temperature.is_finite(), "must be positive")?;
        range("contrastive_batch", self.contrastive_batch >= 4, "must be at least 4")?;
        range("disc_batch", self.disc_batch >= 2, "must be at least 2")?;
        range("expert_ratio", self.expert_ratio > 0.0 && self.expert_ratio < 1.0, "must lie in (0, 1)")?;
        let ne = (self.contrastive_batch as f64 * self.expert_ratio).round() as usize;
        range(
            "expert_ratio",
            ne >= 2 && ne < self.contrastive_batch,
            "contrastive batch needs two expert and one agent item",
        )?;
        range("gp_weight", self.gp_weight >= 0.0 && self.gp_weight.is_finite(), "must be non-negative")?;
        range("tcn_window", self.tcn_window >= 1, "must be positive")?;
        range("tcn_negatives", self.tcn_negatives >= 1, "must be positive")?;
        range("demo_episodes", self.demo_episodes >= 1, "must be positive")?;
        range("bc_epochs", self.bc_epochs >= 1, "must be positive")?;
        range("bc_batch", self.bc_batch >= 1, "must be positive")?;
        range(
            "shared_trunk",
            !(self.shared_trunk && self.encode_action && self.method == "pcil"),
            "a shared trunk encodes states only; disable encode_action",
        )?;
        range("out_dir", !self.out_dir.is_empty(), "must be set")?;
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden,
            lr: self.lr,
            gamma: self.gamma,
            tau: self.tau,
            n_step: self.n_step,
            batch_size: self.batch_size,
            target_noise: self.target_noise,
            target_noise_clip: self.target_noise_clip,
            shared_trunk: self.shared_trunk,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            total_steps: self.total_steps,
            eval_interval: self.eval_interval,
            update_every: self.update_every,
            learning_starts: self.learning_starts,
            buffer_capacity: self.buffer_capacity,
            explore_start: self.explore_start,
            explore_end: self.explore_end,
            explore_decay_fraction: self.explore_decay,
        }
    }

    pub fn method_settings(&self) -> MethodSettings {
        MethodSettings {
            hidden: self.hidden,
            embedding_dim: self.embedding_dim,
            temperature: self.temperature,
            lr: self.reward_lr,
            contrastive_batch: self.contrastive_batch,
            expert_ratio: self.expert_ratio,
            encode_action: self.encode_action,
            aggregation: self.aggregation,
            ref_mode: self.reward_ref_mode,
            gp_weight: self.gp_weight,
            gp_center_zero: self.gp_center_zero,
            gp_samples: (self.gp_samples > 0).then_some(self.gp_samples),
            tcn_window: self.tcn_window,
            tcn_negatives: self.tcn_negatives,
            disc_batch: self.disc_batch,
        }
    }

    pub fn selection(&self) -> Selection {
        Selection {
            method: self.method.clone(),
            representation: self.representation.clone(),
            reward: self.reward.clone(),
        }
    }

    /// Directory name for this run's outputs.
    pub fn run_name(&self) -> String {
        match self.method.as_str() {
            "pcil" => format!("{}_{}_{}_{}", self.env, self.method, self.representation, self.reward),
            _ => format!("{}_{}", self.env, self.method),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_overrides_and_env_params() {
        let cfg = ExperimentConfig::parse(
            "# desk run\nenv = pendulum\nseeds=4,5\nenv.max_torque=3.5\nlr=3e-4\n\nreward_ref_mode=mean\n",
        )
        .unwrap();
        assert_eq!(cfg.env, "pendulum");
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.env_overrides["max_torque"], 3.5);
        assert_eq!(cfg.lr, 3e-4);
        assert_eq!(cfg.reward_ref_mode, RefMode::Mean);
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(ExperimentConfig::parse("learning_rate=1").is_err());
        assert!(ExperimentConfig::parse("hidden").is_err());
        assert!(ExperimentConfig::parse("hidden=-3").is_err());
        assert!(ExperimentConfig::parse("shared_trunk=maybe").is_err());
        assert!(ExperimentConfig::parse("aggregation=sideways").is_err());
    }

    #[test]
    fn validation_ranges() {
        let bad = [
            "method=gail",
            "representation=vae",
            "env=cartpole",
            "expert_ratio=1.5",
            "gamma=1",
            "seeds=1,1",
            "temperature=0",
            "eval_episodes=0",
        ];
        for b in bad {
            let cfg = ExperimentConfig::parse(b).unwrap();
            assert!(cfg.validate().is_err(), "{b} should be rejected");
        }
    }
}
