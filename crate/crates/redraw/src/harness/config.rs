//! Plain-text run configuration: `[section]` headers over `key = value`
//! lines, `#` comments, no quoting. Every key is known and validated before
//! any phase starts; a typo fails the run instead of silently training with a
//! default. The canonical text form round-trips through the parser and is
//! embedded into checkpoints, which makes them self-describing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapt::AdaptationMode;
use crate::agent::AcConfig;
use crate::draw::{DynInputs, WmConfig};
use crate::envs::{EnvId, Variant};
use crate::error::{Error, Result};
use crate::explore::ExploreConfig;

/// Who drives the environment during pretraining data collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollectDriver {
    Explorer,
    Exploit,
    Random,
}

impl CollectDriver {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "explorer" => Ok(CollectDriver::Explorer),
            "exploit" => Ok(CollectDriver::Exploit),
            "random" => Ok(CollectDriver::Random),
            other => Err(Error::Config(format!("unknown collect policy: {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CollectDriver::Explorer => "explorer",
            CollectDriver::Exploit => "exploit",
            CollectDriver::Random => "random",
        }
    }
}

/// Policy source for the standalone collect phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPolicy {
    Expert,
    Random,
    Checkpoint,
}

impl DatasetPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(DatasetPolicy::Expert),
            "random" => Ok(DatasetPolicy::Random),
            "checkpoint" => Ok(DatasetPolicy::Checkpoint),
            other => Err(Error::Config(format!("unknown dataset policy: {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetPolicy::Expert => "expert",
            DatasetPolicy::Random => "random",
            DatasetPolicy::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [run]
    pub env: EnvId,
    pub variant: Variant,
    pub seed: u64,
    pub env_horizon: usize,

    // [model]
    pub k: usize,
    pub n: usize,
    pub hidden: usize,
    pub unimix: f64,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    pub free_bits_per_factor: bool,
    pub dyn_inputs: DynInputs,
    pub adapt_hidden: usize,

    // [train]
    pub wm_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub batch: usize,
    pub seq: usize,
    pub train_ratio: f64,
    pub min_buffer: usize,
    pub buffer_capacity: usize,
    pub max_grad_norm: f64,
    pub imag_batch: usize,
    pub imag_horizon: usize,
    pub ac_hidden: usize,
    pub log_interval: usize,

    // [pretrain]
    pub env_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub checkpoint_interval: usize,
    pub early_stop_return: Option<f64>,

    // [explore]
    pub ens_heads: usize,
    pub ens_hidden: usize,
    pub ens_lr: f64,
    pub ens_final_std: f64,
    pub collect_policy: CollectDriver,

    // [collect]
    pub collect_steps: usize,
    pub dataset_policy: DatasetPolicy,
    pub with_rewards: bool,

    // [adapt]
    pub mode: AdaptationMode,
    pub adapt_updates: usize,
    pub adapt_eval_interval: usize,
    pub adapt_eval_episodes: usize,
    pub adapt_checkpoint_interval: usize,
    pub residual_lr: f64,
    pub finetune_lr: f64,
    pub clip_adapt_kl: bool,

    // [paths]
    pub out_dir: Option<String>,
    pub dataset: Option<String>,
    pub source_checkpoint: Option<String>,
    pub collect_out: Option<String>,
}

impl Default for RunConfig {
    /// Desk-scale defaults: pretrain 200k env steps against the large-scale
    /// reference schedule of millions, offline dataset 5k transitions,
    /// adaptation 50k updates evaluated every 1k.
    fn default() -> Self {
        RunConfig {
            env: EnvId::Pendulum,
            variant: Variant::Source,
            seed: 0,
            env_horizon: 200,

            k: 32,
            n: 4,
            hidden: 128,
            unimix: 0.01,
            beta_pred: 1.0,
            beta_dyn: 1.5,
            beta_rep: 0.5,
            free_bits_per_factor: false,
            dyn_inputs: DynInputs::Full,
            adapt_hidden: 128,

            wm_lr: 1e-4,
            actor_lr: 3e-5,
            critic_lr: 3e-5,
            gamma: 0.99,
            entropy_coef: 3e-4,
            batch: 16,
            seq: 16,
            train_ratio: 32.0,
            min_buffer: 1000,
            buffer_capacity: 1_000_000,
            max_grad_norm: 100.0,
            imag_batch: 16,
            imag_horizon: 15,
            ac_hidden: 128,
            log_interval: 50,

            env_steps: 200_000,
            eval_interval: 5000,
            eval_episodes: 10,
            checkpoint_interval: 10_000,
            early_stop_return: None,

            ens_heads: 8,
            ens_hidden: 128,
            ens_lr: 1e-3,
            ens_final_std: 0.05,
            collect_policy: CollectDriver::Explorer,

            collect_steps: 5000,
            dataset_policy: DatasetPolicy::Expert,
            with_rewards: false,

            mode: AdaptationMode::Residual,
            adapt_updates: 50_000,
            adapt_eval_interval: 1000,
            adapt_eval_episodes: 10,
            adapt_checkpoint_interval: 5000,
            residual_lr: 1e-2,
            finetune_lr: 1e-4,
            clip_adapt_kl: false,

            out_dir: None,
            dataset: None,
            source_checkpoint: None,
            collect_out: None,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an unsigned integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: malformed section header {line:?}", lineno + 1)))?;
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "run" | "model" | "train" | "pretrain" | "explore" | "collect" | "adapt" | "paths"
                ) {
                    return Err(Error::Config(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Config(format!("key {key} appears before any [section]")));
            }
            cfg.apply(&section, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        match (section, key) {
            ("run", "env") => self.env = EnvId::parse(v)?,
            ("run", "variant") => self.variant = Variant::parse(v)?,
            ("run", "seed") => self.seed = parse_u64(&full, v)?,
            ("run", "horizon") => self.env_horizon = parse_usize(&full, v)?,

            ("model", "k") => self.k = parse_usize(&full, v)?,
            ("model", "n") => self.n = parse_usize(&full, v)?,
            ("model", "hidden") => self.hidden = parse_usize(&full, v)?,
            ("model", "unimix") => self.unimix = parse_f64(&full, v)?,
            ("model", "beta_pred") => self.beta_pred = parse_f64(&full, v)?,
            ("model", "beta_dyn") => self.beta_dyn = parse_f64(&full, v)?,
            ("model", "beta_rep") => self.beta_rep = parse_f64(&full, v)?,
            ("model", "free_bits_per_factor") => self.free_bits_per_factor = parse_bool(&full, v)?,
            ("model", "dyn_inputs") => self.dyn_inputs = DynInputs::parse(v)?,
            ("model", "adapt_hidden") => self.adapt_hidden = parse_usize(&full, v)?,

            ("train", "wm_lr") => self.wm_lr = parse_f64(&full, v)?,
            ("train", "actor_lr") => self.actor_lr = parse_f64(&full, v)?,
            ("train", "critic_lr") => self.critic_lr = parse_f64(&full, v)?,
            ("train", "gamma") => self.gamma = parse_f64(&full, v)?,
            ("train", "entropy") => self.entropy_coef = parse_f64(&full, v)?,
            ("train", "batch") => self.batch = parse_usize(&full, v)?,
            ("train", "seq") => self.seq = parse_usize(&full, v)?,
            ("train", "train_ratio") => self.train_ratio = parse_f64(&full, v)?,
            ("train", "min_buffer") => self.min_buffer = parse_usize(&full, v)?,
            ("train", "buffer_capacity") => self.buffer_capacity = parse_usize(&full, v)?,
            ("train", "max_grad_norm") => self.max_grad_norm = parse_f64(&full, v)?,
            ("train", "imag_batch") => self.imag_batch = parse_usize(&full, v)?,
            ("train", "imag_horizon") => self.imag_horizon = parse_usize(&full, v)?,
            ("train", "ac_hidden") => self.ac_hidden = parse_usize(&full, v)?,
            ("train", "log_interval") => self.log_interval = parse_usize(&full, v)?,

            ("pretrain", "env_steps") => self.env_steps = parse_usize(&full, v)?,
            ("pretrain", "eval_interval") => self.eval_interval = parse_usize(&full, v)?,
            ("pretrain", "eval_episodes") => self.eval_episodes = parse_usize(&full, v)?,
            ("pretrain", "checkpoint_interval") => self.checkpoint_interval = parse_usize(&full, v)?,
            ("pretrain", "early_stop_return") => {
                self.early_stop_return =
                    if v == "none" { None } else { Some(parse_f64(&full, v)?) }
            }

            ("explore", "heads") => self.ens_heads = parse_usize(&full, v)?,
            ("explore", "hidden") => self.ens_hidden = parse_usize(&full, v)?,
            ("explore", "lr") => self.ens_lr = parse_f64(&full, v)?,
            ("explore", "final_std") => self.ens_final_std = parse_f64(&full, v)?,
            ("explore", "collect_policy") => self.collect_policy = CollectDriver::parse(v)?,

            ("collect", "steps") => self.collect_steps = parse_usize(&full, v)?,
            ("collect", "policy") => self.dataset_policy = DatasetPolicy::parse(v)?,
            ("collect", "with_rewards") => self.with_rewards = parse_bool(&full, v)?,

            ("adapt", "mode") => self.mode = AdaptationMode::parse(v)?,
            ("adapt", "updates") => self.adapt_updates = parse_usize(&full, v)?,
            ("adapt", "eval_interval") => self.adapt_eval_interval = parse_usize(&full, v)?,
            ("adapt", "eval_episodes") => self.adapt_eval_episodes = parse_usize(&full, v)?,
            ("adapt", "checkpoint_interval") => self.adapt_checkpoint_interval = parse_usize(&full, v)?,
            ("adapt", "residual_lr") => self.residual_lr = parse_f64(&full, v)?,
            ("adapt", "finetune_lr") => self.finetune_lr = parse_f64(&full, v)?,
            ("adapt", "clip_kl") => self.clip_adapt_kl = parse_bool(&full, v)?,

            ("paths", "out_dir") => self.out_dir = Some(v.to_string()),
            ("paths", "dataset") => self.dataset = Some(v.to_string()),
            ("paths", "source_checkpoint") => self.source_checkpoint = Some(v.to_string()),
            ("paths", "collect_out") => self.collect_out = Some(v.to_string()),

            _ => return Err(Error::Config(format!("unknown key {key} in section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("run.horizon", self.env_horizon),
            ("model.k", self.k),
            ("model.n", self.n),
            ("model.hidden", self.hidden),
            ("model.adapt_hidden", self.adapt_hidden),
            ("train.batch", self.batch),
            ("train.min_buffer", self.min_buffer),
            ("train.buffer_capacity", self.buffer_capacity),
            ("train.imag_batch", self.imag_batch),
            ("train.imag_horizon", self.imag_horizon),
            ("train.ac_hidden", self.ac_hidden),
            ("train.log_interval", self.log_interval),
            ("pretrain.env_steps", self.env_steps),
            ("pretrain.eval_interval", self.eval_interval),
            ("pretrain.eval_episodes", self.eval_episodes),
            ("pretrain.checkpoint_interval", self.checkpoint_interval),
            ("explore.heads", self.ens_heads),
            ("explore.hidden", self.ens_hidden),
            ("collect.steps", self.collect_steps),
            ("adapt.eval_interval", self.adapt_eval_interval),
            ("adapt.eval_episodes", self.adapt_eval_episodes),
            ("adapt.checkpoint_interval", self.adapt_checkpoint_interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.seq < 2 {
            return Err(Error::Config("train.seq must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.unimix) {
            return Err(Error::Config("model.unimix must lie in [0, 1)".into()));
        }
        let positive_f = [
            ("train.wm_lr", self.wm_lr),
            ("train.actor_lr", self.actor_lr),
            ("train.critic_lr", self.critic_lr),
            ("train.train_ratio", self.train_ratio),
            ("train.max_grad_norm", self.max_grad_norm),
            ("explore.lr", self.ens_lr),
            ("adapt.residual_lr", self.residual_lr),
            ("adapt.finetune_lr", self.finetune_lr),
        ];
        for (name, v) in positive_f {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        for (name, v) in [
            ("model.beta_pred", self.beta_pred),
            ("model.beta_dyn", self.beta_dyn),
            ("model.beta_rep", self.beta_rep),
            ("explore.final_std", self.ens_final_std),
            ("train.entropy", self.entropy_coef),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("train.gamma must lie in (0, 1)".into()));
        }
        if self.env_horizon + 1 < self.seq {
            return Err(Error::Config(format!(
                "run.horizon {} cannot supply windows of seq {}",
                self.env_horizon, self.seq
            )));
        }
        Ok(())
    }

    /// Canonical text rendering; `parse_str` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "env = {}", self.env.name());
        let _ = writeln!(s, "variant = {}", self.variant.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "horizon = {}", self.env_horizon);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "unimix = {:?}", self.unimix);
        let _ = writeln!(s, "beta_pred = {:?}", self.beta_pred);
        let _ = writeln!(s, "beta_dyn = {:?}", self.beta_dyn);
        let _ = writeln!(s, "beta_rep = {:?}", self.beta_rep);
        let _ = writeln!(s, "free_bits_per_factor = {}", self.free_bits_per_factor);
        let _ = writeln!(s, "dyn_inputs = {}", self.dyn_inputs.name());
        let _ = writeln!(s, "adapt_hidden = {}", self.adapt_hidden);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "wm_lr = {:?}", self.wm_lr);
        let _ = writeln!(s, "actor_lr = {:?}", self.actor_lr);
        let _ = writeln!(s, "critic_lr = {:?}", self.critic_lr);
        let _ = writeln!(s, "gamma = {:?}", self.gamma);
        let _ = writeln!(s, "entropy = {:?}", self.entropy_coef);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "seq = {}", self.seq);
        let _ = writeln!(s, "train_ratio = {:?}", self.train_ratio);
        let _ = writeln!(s, "min_buffer = {}", self.min_buffer);
        let _ = writeln!(s, "buffer_capacity = {}", self.buffer_capacity);
        let _ = writeln!(s, "max_grad_norm = {:?}", self.max_grad_norm);
        let _ = writeln!(s, "imag_batch = {}", self.imag_batch);
        let _ = writeln!(s, "imag_horizon = {}", self.imag_horizon);
        let _ = writeln!(s, "ac_hidden = {}", self.ac_hidden);
        let _ = writeln!(s, "log_interval = {}", self.log_interval);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "env_steps = {}", self.env_steps);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        match self.early_stop_return {
            Some(v) => {
                let _ = writeln!(s, "early_stop_return = {v:?}");
            }
            None => {
                let _ = writeln!(s, "early_stop_return = none");
            }
        }
        let _ = writeln!(s, "\n[explore]");
        let _ = writeln!(s, "heads = {}", self.ens_heads);
        let _ = writeln!(s, "hidden = {}", self.ens_hidden);
        let _ = writeln!(s, "lr = {:?}", self.ens_lr);
        let _ = writeln!(s, "final_std = {:?}", self.ens_final_std);
        let _ = writeln!(s, "collect_policy = {}", self.collect_policy.name());
        let _ = writeln!(s, "\n[collect]");
        let _ = writeln!(s, "steps = {}", self.collect_steps);
        let _ = writeln!(s, "policy = {}", self.dataset_policy.name());
        let _ = writeln!(s, "with_rewards = {}", self.with_rewards);
        let _ = writeln!(s, "\n[adapt]");
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "updates = {}", self.adapt_updates);
        let _ = writeln!(s, "eval_interval = {}", self.adapt_eval_interval);
        let _ = writeln!(s, "eval_episodes = {}", self.adapt_eval_episodes);
        let _ = writeln!(s, "checkpoint_interval = {}", self.adapt_checkpoint_interval);
        let _ = writeln!(s, "residual_lr = {:?}", self.residual_lr);
        let _ = writeln!(s, "finetune_lr = {:?}", self.finetune_lr);
        let _ = writeln!(s, "clip_kl = {}", self.clip_adapt_kl);
        let _ = writeln!(s, "\n[paths]");
        if let Some(v) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {v}");
        }
        if let Some(v) = &self.dataset {
            let _ = writeln!(s, "dataset = {v}");
        }
        if let Some(v) = &self.source_checkpoint {
            let _ = writeln!(s, "source_checkpoint = {v}");
        }
        if let Some(v) = &self.collect_out {
            let _ = writeln!(s, "collect_out = {v}");
        }
        s
    }

    pub fn wm_config(&self, obs_dim: usize, act_dim: usize) -> WmConfig {
        WmConfig {
            obs_dim,
            act_dim,
            k: self.k,
            n: self.n,
            hidden: self.hidden,
            unimix: self.unimix,
            beta_pred: self.beta_pred,
            beta_dyn: self.beta_dyn,
            beta_rep: self.beta_rep,
            free_bits_per_factor: self.free_bits_per_factor,
            dyn_inputs: self.dyn_inputs,
        }
    }

    pub fn ac_config(&self) -> AcConfig {
        let mut cfg = AcConfig::desk();
        cfg.horizon = self.imag_horizon;
        cfg.hidden = self.ac_hidden;
        cfg.actor_lr = self.actor_lr;
        cfg.critic_lr = self.critic_lr;
        cfg.gamma = self.gamma;
        cfg.entropy_coef = self.entropy_coef;
        cfg
    }

    pub fn explore_config(&self) -> ExploreConfig {
        ExploreConfig {
            heads: self.ens_heads,
            hidden: self.ens_hidden,
            lr: self.ens_lr,
            final_std: self.ens_final_std,
        }
    }
}
