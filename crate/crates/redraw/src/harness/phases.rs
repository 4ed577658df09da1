//! Phase orchestration: pretrain, collect, adapt, evaluate. Each phase owns
//! its run directory (single writer); evaluation only reads. All randomness
//! flows through purpose-keyed streams derived from the config seed, so a
//! repeated run with the same config writes a byte-identical metrics file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adapt::{Adapter, AdaptationMode};
use crate::agent::{encode_starts, ActMode, ActorCritic};
use crate::draw::{wm_update, WorldModel, WM_GROUPS};
use crate::envs::{Episode, EnvSpec, Variant};
use crate::error::{Error, Result};
use crate::explore::Explorer;
use crate::gradcore::{Adam, Array, ParameterStore, RngStream, StreamId};

use super::buffer::ReplayBuffer;
use super::config::{CollectDriver, DatasetPolicy, RunConfig};
use super::formats::{
    write_dataset, Checkpoint, DatasetMeta, MetricsWriter, OfflineDataset, RewardDataset,
    StoredDataset, TimingsWriter,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";

// ---------------------------------------------------------------------------
// Shared helpers.

/// Runs one episode, cutting at the spec horizon and additionally at `cap`
/// steps when given (a budget cut is a time limit: `continues` stays true).
fn run_episode(
    spec: &EnvSpec,
    reset_rng: &mut RngStream,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    cap: Option<usize>,
) -> Result<Episode> {
    let mut ep = Episode::default();
    let mut obs = spec.reset(reset_rng);
    ep.obs.push(obs.clone());
    let limit = cap.map_or(spec.horizon, |c| spec.horizon.min(c));
    for _ in 0..limit {
        let action = policy(&obs)?;
        let out = spec.step(&obs, &action)?;
        ep.actions.push(action);
        ep.rewards.push(out.reward);
        ep.continues.push(out.cont);
        ep.obs.push(out.obs.clone());
        obs = out.obs;
        if !out.cont {
            break;
        }
    }
    Ok(ep)
}

fn uniform_bin_action(act_dim: usize, bins: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..act_dim)
        .map(|_| {
            let i = rng.gen_range_usize(bins);
            -1.0 + 2.0 * i as f64 / (bins - 1) as f64
        })
        .collect()
}

/// Deterministic evaluation summary. Returns are aggregated by episode index,
/// so any episode-parallel driver producing the same per-index results would
/// summarize identically.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub mean: f64,
    pub stderr: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl EvalSummary {
    fn from_episodes(episodes: &[Episode]) -> Self {
        let n = episodes.len();
        let returns: Vec<f64> = episodes.iter().map(|e| e.ret()).collect();
        let lengths: Vec<usize> = episodes.iter().map(|e| e.len()).collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        EvalSummary { mean, stderr, returns, lengths }
    }

    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<usize>() as f64 / self.lengths.len() as f64
    }
}

/// Mode-action evaluation of a policy in `spec`. A fresh Eval stream keyed by
/// `seed` drives the resets, so repeated calls see the same episodes.
pub fn evaluate_policy(
    spec: &EnvSpec,
    model: &WorldModel,
    ac: &ActorCritic,
    store: &ParameterStore,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut reset_rng = RngStream::new(seed, StreamId::Eval);
    // Mode acting draws nothing; the stream exists to satisfy the signature.
    let mut act_rng = RngStream::new(seed, StreamId::Scratch);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = run_episode(
            spec,
            &mut reset_rng,
            |obs| ac.act(model, store, obs, &mut act_rng, ActMode::Mode),
            None,
        )?;
        eps.push(ep);
    }
    Ok(EvalSummary::from_episodes(&eps))
}

/// Scripted-expert return under the same protocol, the yardstick the trained
/// policies are compared against.
pub fn expert_return(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut reset_rng = RngStream::new(seed, StreamId::Eval);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = run_episode(spec, &mut reset_rng, |obs| Ok(spec.scripted_expert(obs)), None)?;
        eps.push(ep);
    }
    Ok(EvalSummary::from_episodes(&eps))
}

fn env_spec(cfg: &RunConfig, variant: Variant) -> EnvSpec {
    let mut spec = EnvSpec::new(cfg.env, variant);
    spec.horizon = cfg.env_horizon;
    spec
}

// ---------------------------------------------------------------------------
// Checkpoint contents beyond raw parameters.

/// A checkpoint restored far enough to act: the embedded config, the model,
/// the exploit actor-critic, and every stored parameter.
pub struct LoadedPolicy {
    pub cfg: RunConfig,
    pub model: WorldModel,
    pub exploit: ActorCritic,
    pub store: ParameterStore,
    pub ck: Checkpoint,
}

pub fn load_policy(path: &Path) -> Result<LoadedPolicy> {
    let ck = Checkpoint::load(path)?;
    let text = ck.string("meta/config")?;
    let cfg = RunConfig::parse_str(&text)
        .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))?;
    let spec = env_spec(&cfg, cfg.variant);
    let model = WorldModel::new(cfg.wm_config(spec.obs_dim(), spec.act_dim()));
    let mut exploit =
        ActorCritic::new("actor", "critic", model.cfg.latent_dim(), spec.act_dim(), cfg.ac_config());
    exploit.norm.ema = ck.scalar("norm/exploit/ema")?;
    let store = ck.restore_store()?;
    for group in WM_GROUPS.iter().chain(&["actor", "critic"]) {
        if !store.group_names().contains(*group) {
            return Err(Error::Checkpoint(format!("checkpoint has no {group} parameters")));
        }
    }
    Ok(LoadedPolicy { cfg, model, exploit, store, ck })
}

// ---------------------------------------------------------------------------
// Pretraining.

struct PretrainState {
    cfg: RunConfig,
    spec: EnvSpec,
    model: WorldModel,
    exploit: ActorCritic,
    explorer: Explorer,
    /// Identity view of the source dynamics for imagination during
    /// pretraining; never initialized, so nothing gets frozen.
    imaginer: Adapter,
    store: ParameterStore,
    wm_opt: Adam,
    actor_opt: Adam,
    critic_opt: Adam,
    exp_actor_opt: Adam,
    exp_critic_opt: Adam,
    ens_opt: Adam,
    rng_env: RngStream,
    rng_collect: RngStream,
    rng_model: RngStream,
    rng_imag_exploit: RngStream,
    rng_imag_explorer: RngStream,
    rng_buffer: RngStream,
    buffer: ReplayBuffer,
    env_steps: usize,
    rounds: u64,
    owed: f64,
    next_eval: usize,
    next_ck: usize,
}

struct RoundLog {
    wm_total: f64,
    wm_pred: f64,
    wm_dyn: f64,
    wm_rep: f64,
    actor: f64,
    critic: f64,
    exp_actor: f64,
    exp_critic: f64,
    ensemble: f64,
}

impl PretrainState {
    fn build(cfg: &RunConfig) -> Result<Self> {
        let spec = env_spec(cfg, cfg.variant);
        let (obs_dim, act_dim) = (spec.obs_dim(), spec.act_dim());
        let model = WorldModel::new(cfg.wm_config(obs_dim, act_dim));
        let latent = model.cfg.latent_dim();
        let exploit = ActorCritic::new("actor", "critic", latent, act_dim, cfg.ac_config());
        let explorer = Explorer::new(latent, act_dim, cfg.explore_config(), cfg.ac_config());
        let imaginer = Adapter::new(AdaptationMode::Zeroshot, model.clone(), 1);
        let buffer = ReplayBuffer::new(cfg.buffer_capacity, obs_dim, act_dim)?;
        let seed = cfg.seed;
        Ok(PretrainState {
            cfg: cfg.clone(),
            spec,
            model,
            exploit,
            explorer,
            imaginer,
            store: ParameterStore::new(),
            wm_opt: Adam::new(cfg.wm_lr),
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
            exp_actor_opt: Adam::new(cfg.actor_lr),
            exp_critic_opt: Adam::new(cfg.critic_lr),
            ens_opt: Adam::new(cfg.ens_lr),
            rng_env: RngStream::new(seed, StreamId::EnvReset),
            rng_collect: RngStream::new(seed, StreamId::Collect),
            rng_model: RngStream::new(seed, StreamId::ModelSample),
            rng_imag_exploit: RngStream::new(seed, StreamId::ImagineExploit),
            rng_imag_explorer: RngStream::new(seed, StreamId::ImagineExplorer),
            rng_buffer: RngStream::new(seed, StreamId::Buffer),
            buffer,
            env_steps: 0,
            rounds: 0,
            owed: 0.0,
            next_eval: cfg.eval_interval,
            next_ck: cfg.checkpoint_interval,
        })
    }

    fn fresh(cfg: &RunConfig) -> Result<Self> {
        let mut st = Self::build(cfg)?;
        let mut init_rng = RngStream::new(cfg.seed, StreamId::Init);
        st.model.init(&mut st.store, &mut init_rng)?;
        st.exploit.init(&mut st.store, &mut init_rng)?;
        st.explorer.init(&mut st.store, &mut init_rng)?;
        Ok(st)
    }

    /// Rebuilds from a checkpoint written by `save_checkpoint`. Counters,
    /// parameters, optimizer moments, and rng positions continue exactly;
    /// the replay buffer is not persisted and refills from fresh collection.
    fn resume(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let embedded = RunConfig::parse_str(&ck.string("meta/config")?)
            .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))?;
        let same_shape = embedded.env == cfg.env
            && embedded.variant == cfg.variant
            && embedded.k == cfg.k
            && embedded.n == cfg.n
            && embedded.hidden == cfg.hidden
            && embedded.ac_hidden == cfg.ac_hidden
            && embedded.ens_heads == cfg.ens_heads
            && embedded.ens_hidden == cfg.ens_hidden
            && embedded.adapt_hidden == cfg.adapt_hidden
            && embedded.dyn_inputs == cfg.dyn_inputs;
        if !same_shape {
            return Err(Error::Checkpoint(
                "config does not match the checkpoint it would resume".into(),
            ));
        }
        let mut st = Self::build(cfg)?;
        st.store = ck.restore_store()?;
        st.wm_opt = ck.restore_adam("opt/wm", cfg.wm_lr);
        st.actor_opt = ck.restore_adam("opt/actor", cfg.actor_lr);
        st.critic_opt = ck.restore_adam("opt/critic", cfg.critic_lr);
        st.exp_actor_opt = ck.restore_adam("opt/exp_actor", cfg.actor_lr);
        st.exp_critic_opt = ck.restore_adam("opt/exp_critic", cfg.critic_lr);
        st.ens_opt = ck.restore_adam("opt/ensemble", cfg.ens_lr);
        st.rng_env.set_word_pos(ck.u128("rng/env_reset")?);
        st.rng_collect.set_word_pos(ck.u128("rng/collect")?);
        st.rng_model.set_word_pos(ck.u128("rng/model_sample")?);
        st.rng_imag_exploit.set_word_pos(ck.u128("rng/imag_exploit")?);
        st.rng_imag_explorer.set_word_pos(ck.u128("rng/imag_explorer")?);
        st.rng_buffer.set_word_pos(ck.u128("rng/buffer")?);
        st.exploit.norm.ema = ck.scalar("norm/exploit/ema")?;
        st.explorer.ac.norm.ema = ck.scalar("norm/explorer/ema")?;
        st.env_steps = ck.scalar("meta/env_steps")? as usize;
        st.rounds = ck.scalar("meta/rounds")? as u64;
        st.owed = ck.scalar("meta/owed")?;
        st.next_eval = ck.scalar("meta/next_eval")? as usize;
        st.next_ck = ck.scalar("meta/next_ck")? as usize;
        Ok(st)
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.put_store(&self.store)?;
        ck.put_adam("opt/wm", &self.wm_opt)?;
        ck.put_adam("opt/actor", &self.actor_opt)?;
        ck.put_adam("opt/critic", &self.critic_opt)?;
        ck.put_adam("opt/exp_actor", &self.exp_actor_opt)?;
        ck.put_adam("opt/exp_critic", &self.exp_critic_opt)?;
        ck.put_adam("opt/ensemble", &self.ens_opt)?;
        ck.put_string("meta/config", &self.cfg.to_text())?;
        ck.put_scalar("meta/env_steps", self.env_steps as f64)?;
        ck.put_scalar("meta/rounds", self.rounds as f64)?;
        ck.put_scalar("meta/owed", self.owed)?;
        ck.put_scalar("meta/next_eval", self.next_eval as f64)?;
        ck.put_scalar("meta/next_ck", self.next_ck as f64)?;
        ck.put_scalar("norm/exploit/ema", self.exploit.norm.ema)?;
        ck.put_scalar("norm/explorer/ema", self.explorer.ac.norm.ema)?;
        ck.put_u128("rng/env_reset", self.rng_env.word_pos())?;
        ck.put_u128("rng/collect", self.rng_collect.word_pos())?;
        ck.put_u128("rng/model_sample", self.rng_model.word_pos())?;
        ck.put_u128("rng/imag_exploit", self.rng_imag_exploit.word_pos())?;
        ck.put_u128("rng/imag_explorer", self.rng_imag_explorer.word_pos())?;
        ck.put_u128("rng/buffer", self.rng_buffer.word_pos())?;
        ck.save(path)
    }

    fn collect_episode(&mut self, cap: usize) -> Result<Episode> {
        let driver = self.cfg.collect_policy;
        let bins = self.exploit.policy.bins;
        let act_dim = self.spec.act_dim();
        let spec = &self.spec;
        let model = &self.model;
        let store = &self.store;
        let exploit = &self.exploit;
        let explorer = &self.explorer;
        let rng_collect = &mut self.rng_collect;
        run_episode(
            spec,
            &mut self.rng_env,
            |obs| match driver {
                CollectDriver::Random => Ok(uniform_bin_action(act_dim, bins, rng_collect)),
                CollectDriver::Exploit => exploit.act(model, store, obs, rng_collect, ActMode::Sample),
                CollectDriver::Explorer => {
                    explorer.ac.act(model, store, obs, rng_collect, ActMode::Sample)
                }
            },
            Some(cap),
        )
    }

    /// One update round in the fixed order wm, exploit actor-critic,
    /// explorer actor-critic, ensemble; the wm batch is reused for the
    /// ensemble so a round replays exactly batch*seq steps.
    fn train_round(&mut self) -> Result<RoundLog> {
        let cfg = &self.cfg;
        let batch = self.buffer.sample_batch(&mut self.rng_buffer, cfg.batch, cfg.seq)?;
        let wm = wm_update(
            &self.model,
            &mut self.store,
            &mut self.wm_opt,
            &batch,
            &mut self.rng_model,
            cfg.max_grad_norm,
        )?;

        let obs_x = self.buffer.sample_obs(&mut self.rng_buffer, cfg.imag_batch)?;
        let z0x = encode_starts(&self.model, &self.store, &obs_x, &mut self.rng_imag_exploit)?;
        let (actor, critic) = self.exploit.ac_update(
            &self.imaginer,
            &mut self.store,
            &mut self.actor_opt,
            &mut self.critic_opt,
            &z0x,
            &mut self.rng_imag_exploit,
            cfg.max_grad_norm,
        )?;

        let obs_e = self.buffer.sample_obs(&mut self.rng_buffer, cfg.imag_batch)?;
        let z0e = encode_starts(&self.model, &self.store, &obs_e, &mut self.rng_imag_explorer)?;
        let (exp_actor, exp_critic) = self.explorer.explorer_update(
            &self.imaginer,
            &mut self.store,
            &mut self.exp_actor_opt,
            &mut self.exp_critic_opt,
            &z0e,
            &mut self.rng_imag_explorer,
            cfg.max_grad_norm,
        )?;

        let ensemble = self.explorer.ensemble.ensemble_update(
            &self.model,
            &mut self.store,
            &mut self.ens_opt,
            &batch,
            &mut self.rng_model,
            cfg.max_grad_norm,
        )?;

        Ok(RoundLog {
            wm_total: wm.total,
            wm_pred: wm.pred,
            wm_dyn: wm.dyn_term,
            wm_rep: wm.rep_term,
            actor,
            critic,
            exp_actor,
            exp_critic,
            ensemble,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub env_steps: usize,
    pub rounds: u64,
    pub final_return: f64,
}

/// Online pretraining in the source environment. If `out_dir` already holds a
/// checkpoint, training resumes from it with counters continuing exactly.
/// A NaN anywhere in an update aborts the run with an error; the checkpoint
/// written at the last interval stays on disk (all writes go tmp+rename).
pub fn pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let mut st = if ck_path.exists() {
        PretrainState::resume(cfg, &Checkpoint::load(&ck_path)?)?
    } else {
        PretrainState::fresh(cfg)?
    };
    let mut metrics = MetricsWriter::open_or_create(&out_dir.join(METRICS_FILE), cfg.seed)?;
    let mut timings = TimingsWriter::open(&out_dir.join(TIMINGS_FILE))?;
    let started = Instant::now();
    let per_round = (cfg.batch * cfg.seq) as f64;
    let mut early_stop = false;

    while st.env_steps < cfg.env_steps && !early_stop {
        let cap = cfg.env_steps - st.env_steps;
        let ep = st.collect_episode(cap)?;
        st.env_steps += ep.len();
        st.owed += ep.len() as f64 * cfg.train_ratio;
        st.buffer.push(ep)?;

        if st.buffer.total_steps() >= cfg.min_buffer && st.buffer.has_window(cfg.seq) {
            while st.owed >= per_round {
                st.owed -= per_round;
                st.rounds += 1;
                let log = st.train_round()?;
                if st.rounds % cfg.log_interval as u64 == 0 {
                    let step = st.env_steps as u64;
                    metrics.record("pretrain", step, "wm_total", log.wm_total)?;
                    metrics.record("pretrain", step, "wm_pred", log.wm_pred)?;
                    metrics.record("pretrain", step, "wm_dyn", log.wm_dyn)?;
                    metrics.record("pretrain", step, "wm_rep", log.wm_rep)?;
                    metrics.record("pretrain", step, "actor_loss", log.actor)?;
                    metrics.record("pretrain", step, "critic_loss", log.critic)?;
                    metrics.record("pretrain", step, "exp_actor_loss", log.exp_actor)?;
                    metrics.record("pretrain", step, "exp_critic_loss", log.exp_critic)?;
                    metrics.record("pretrain", step, "ensemble_loss", log.ensemble)?;
                }
            }
        }

        while st.env_steps >= st.next_eval {
            let ev = evaluate_policy(
                &st.spec,
                &st.model,
                &st.exploit,
                &st.store,
                cfg.eval_episodes,
                cfg.seed,
            )?;
            let step = st.env_steps as u64;
            metrics.record("pretrain", step, "eval_return", ev.mean)?;
            metrics.record("pretrain", step, "eval_stderr", ev.stderr)?;
            metrics.record("pretrain", step, "eval_length", ev.mean_length())?;
            metrics.flush()?;
            timings.note("pretrain", step, started.elapsed().as_millis())?;
            st.next_eval += cfg.eval_interval;
            if let Some(threshold) = cfg.early_stop_return {
                if ev.mean >= threshold {
                    early_stop = true;
                }
            }
        }
        while st.env_steps >= st.next_ck {
            st.save_checkpoint(&ck_path)?;
            st.next_ck += cfg.checkpoint_interval;
        }
    }

    let fin = evaluate_policy(&st.spec, &st.model, &st.exploit, &st.store, cfg.eval_episodes, cfg.seed)?;
    metrics.record("pretrain", st.env_steps as u64, "final_return", fin.mean)?;
    metrics.flush()?;
    st.save_checkpoint(&ck_path)?;
    timings.note("pretrain", st.env_steps as u64, started.elapsed().as_millis())?;
    Ok(PretrainOutcome {
        checkpoint: ck_path,
        env_steps: st.env_steps,
        rounds: st.rounds,
        final_return: fin.mean,
    })
}

// ---------------------------------------------------------------------------
// Collection.

#[derive(Clone, Debug)]
pub struct CollectOutcome {
    pub path: PathBuf,
    pub episodes: usize,
    pub steps: usize,
}

/// Gathers exactly `n_steps` transitions in `variant` and writes them as a
/// dataset. Episodes are whole; only the last one may be cut short, by the
/// step budget acting as a time limit. `source_checkpoint` is required for
/// the checkpoint policy and ignored otherwise.
pub fn collect(
    cfg: &RunConfig,
    variant: Variant,
    policy: DatasetPolicy,
    n_steps: usize,
    source_checkpoint: Option<&Path>,
    out_path: &Path,
    with_rewards: bool,
) -> Result<CollectOutcome> {
    cfg.validate()?;
    if n_steps == 0 {
        return Err(Error::Config("collect needs a positive step budget".into()));
    }
    let spec = env_spec(cfg, variant);
    let act_dim = spec.act_dim();
    let loaded = match policy {
        DatasetPolicy::Checkpoint => {
            let path = source_checkpoint.ok_or_else(|| {
                Error::Config("checkpoint policy needs a source checkpoint".into())
            })?;
            let lp = load_policy(path)?;
            if lp.cfg.env != cfg.env {
                return Err(Error::Config(format!(
                    "checkpoint was trained on {}, collect targets {}",
                    lp.cfg.env.name(),
                    cfg.env.name()
                )));
            }
            Some(lp)
        }
        _ => None,
    };

    let mut reset_rng = RngStream::new(cfg.seed, StreamId::EnvReset);
    let mut act_rng = RngStream::new(cfg.seed, StreamId::Collect);
    let bins = cfg.ac_config().bins;
    let mut episodes = Vec::new();
    let mut steps = 0;
    while steps < n_steps {
        let cap = n_steps - steps;
        let ep = run_episode(
            &spec,
            &mut reset_rng,
            |obs| match (&policy, &loaded) {
                (DatasetPolicy::Expert, _) => Ok(spec.scripted_expert(obs)),
                (DatasetPolicy::Random, _) => Ok(uniform_bin_action(act_dim, bins, &mut act_rng)),
                (DatasetPolicy::Checkpoint, Some(lp)) => {
                    lp.exploit.act(&lp.model, &lp.store, obs, &mut act_rng, ActMode::Sample)
                }
                (DatasetPolicy::Checkpoint, None) => unreachable!("checked above"),
            },
            Some(cap),
        )?;
        steps += ep.len();
        episodes.push(ep);
    }

    let meta = DatasetMeta {
        policy_id: policy.name().to_string(),
        env: cfg.env.name().to_string(),
        variant: variant.name().to_string(),
        seed: cfg.seed,
    };
    write_dataset(out_path, &episodes, &meta, with_rewards)?;
    Ok(CollectOutcome { path: out_path.to_path_buf(), episodes: episodes.len(), steps })
}

// ---------------------------------------------------------------------------
// Adaptation.

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    pub updates: usize,
    pub evals: Vec<(u64, f64)>,
    pub final_adapt_loss: f64,
}

fn wm_snapshots(
    store: &ParameterStore,
    frozen_groups: &[&'static str],
) -> BTreeMap<&'static str, BTreeMap<String, Array>> {
    frozen_groups
        .iter()
        .map(|&gr| (gr, store.group_snapshot(gr)))
        .collect()
}

fn check_frozen(
    store: &ParameterStore,
    snapshots: &BTreeMap<&'static str, BTreeMap<String, Array>>,
    when: &str,
) -> Result<()> {
    for (group, snap) in snapshots {
        if !store.group_bits_eq(group, snap) {
            return Err(Error::Checkpoint(format!(
                "frozen group {group} drifted by {when}"
            )));
        }
    }
    Ok(())
}

/// Offline adaptation against a shifted environment. Interleaves one
/// adaptation update with one actor-critic update on rectified imagination,
/// evaluating in the target variant on a fixed cadence. The source model
/// stays frozen in every mode that promises so, and that promise is checked
/// bit-for-bit at each checkpoint.
pub fn adapt(
    cfg: &RunConfig,
    out_dir: &Path,
    mode: AdaptationMode,
    source_checkpoint: &Path,
    dataset_path: &Path,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let lp = load_policy(source_checkpoint)?;
    if lp.cfg.env != cfg.env {
        return Err(Error::Config(format!(
            "checkpoint was pretrained on {}, config says {}",
            lp.cfg.env.name(),
            cfg.env.name()
        )));
    }
    let model = lp.model;
    let mut store = lp.store;
    let mut exploit = lp.exploit;
    let spec = env_spec(cfg, cfg.variant);

    // Schema is enforced at load time: the reward-free loader refuses
    // reward-bearing files and vice versa.
    let ds: StoredDataset = if mode.requires_rewards() {
        RewardDataset::load(dataset_path)?.0
    } else {
        OfflineDataset::load(dataset_path)?.0
    };
    if ds.meta.env != cfg.env.name() {
        return Err(Error::Schema(format!(
            "dataset was collected on {}, config says {}",
            ds.meta.env,
            cfg.env.name()
        )));
    }

    let adapter =
        Adapter::new(mode, model.clone(), cfg.adapt_hidden).with_clipped_kl(cfg.clip_adapt_kl);
    let mut init_rng = RngStream::new(cfg.seed, StreamId::Init);
    adapter.init(&mut store, &mut init_rng)?;

    let trainable = mode.trainable_groups();
    let frozen_wm: Vec<&'static str> = WM_GROUPS
        .iter()
        .copied()
        .filter(|gr| !trainable.contains(gr))
        .collect();
    let snapshots = wm_snapshots(&store, &frozen_wm);

    let adapt_lr = match mode {
        AdaptationMode::FinetuneDyn | AdaptationMode::FinetuneAll => cfg.finetune_lr,
        _ => cfg.residual_lr,
    };
    let mut adapt_opt = Adam::new(adapt_lr);
    let mut actor_opt = lp.ck.restore_adam("opt/actor", cfg.actor_lr);
    let mut critic_opt = lp.ck.restore_adam("opt/critic", cfg.critic_lr);

    let mut rng_buffer = RngStream::new(cfg.seed, StreamId::Buffer);
    let mut rng_model = RngStream::new(cfg.seed, StreamId::ModelSample);
    let mut rng_imag = RngStream::new(cfg.seed, StreamId::ImagineExploit);

    let mut metrics = MetricsWriter::open_or_create(&out_dir.join(METRICS_FILE), cfg.seed)?;
    let mut timings = TimingsWriter::open(&out_dir.join(TIMINGS_FILE))?;
    let started = Instant::now();
    let ck_path = out_dir.join(CHECKPOINT_FILE);

    let save = |store: &ParameterStore,
                exploit: &ActorCritic,
                adapt_opt: &Adam,
                actor_opt: &Adam,
                critic_opt: &Adam,
                updates: usize,
                cfg_text: &str|
     -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.put_store(store)?;
        ck.put_adam("opt/adapt", adapt_opt)?;
        ck.put_adam("opt/actor", actor_opt)?;
        ck.put_adam("opt/critic", critic_opt)?;
        ck.put_string("meta/config", cfg_text)?;
        ck.put_scalar("meta/adapt_updates", updates as f64)?;
        ck.put_scalar("norm/exploit/ema", exploit.norm.ema)?;
        ck.save(&ck_path)
    };
    // The embedded config records the mode actually run (the CLI may have
    // overridden the file's choice).
    let mut effective = cfg.clone();
    effective.mode = mode;
    let cfg_text = effective.to_text();

    let mut evals = Vec::new();
    let eval_now = |store: &ParameterStore,
                        exploit: &ActorCritic,
                        upd: usize,
                        metrics: &mut MetricsWriter,
                        evals: &mut Vec<(u64, f64)>|
     -> Result<EvalSummary> {
        let ev = evaluate_policy(&spec, &model, exploit, store, cfg.adapt_eval_episodes, cfg.seed)?;
        metrics.record("adapt", upd as u64, "eval_return", ev.mean)?;
        metrics.record("adapt", upd as u64, "eval_stderr", ev.stderr)?;
        metrics.flush()?;
        evals.push((upd as u64, ev.mean));
        Ok(ev)
    };

    // Update 0 is the zero-shot point of the curve for every mode.
    eval_now(&store, &exploit, 0, &mut metrics, &mut evals)?;

    let updates = if mode == AdaptationMode::Zeroshot { 0 } else { cfg.adapt_updates };
    let mut last_loss = 0.0;
    for upd in 1..=updates {
        let batch = ds.sample_batch(&mut rng_buffer, cfg.batch, cfg.seq)?;
        last_loss =
            adapter.update(&mut store, &mut adapt_opt, &batch, &mut rng_model, cfg.max_grad_norm)?;

        let obs = ds.sample_obs(&mut rng_buffer, cfg.imag_batch)?;
        let z0 = encode_starts(&model, &store, &obs, &mut rng_imag)?;
        let (actor_loss, critic_loss) = exploit.ac_update(
            &adapter,
            &mut store,
            &mut actor_opt,
            &mut critic_opt,
            &z0,
            &mut rng_imag,
            cfg.max_grad_norm,
        )?;

        if upd % cfg.adapt_eval_interval == 0 {
            metrics.record("adapt", upd as u64, "adapt_loss", last_loss)?;
            metrics.record("adapt", upd as u64, "actor_loss", actor_loss)?;
            metrics.record("adapt", upd as u64, "critic_loss", critic_loss)?;
            eval_now(&store, &exploit, upd, &mut metrics, &mut evals)?;
            timings.note("adapt", upd as u64, started.elapsed().as_millis())?;
        }
        if upd % cfg.adapt_checkpoint_interval == 0 {
            check_frozen(&store, &snapshots, &format!("update {upd}"))?;
            save(&store, &exploit, &adapt_opt, &actor_opt, &critic_opt, upd, &cfg_text)?;
        }
    }

    check_frozen(&store, &snapshots, "the end of adaptation")?;
    save(&store, &exploit, &adapt_opt, &actor_opt, &critic_opt, updates, &cfg_text)?;
    timings.note("adapt", updates as u64, started.elapsed().as_millis())?;
    Ok(AdaptOutcome { checkpoint: ck_path, updates, evals, final_adapt_loss: last_loss })
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Loads a checkpoint and runs mode-action episodes in the given variant.
pub fn evaluate(
    checkpoint: &Path,
    variant: Variant,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let lp = load_policy(checkpoint)?;
    let spec = env_spec(&lp.cfg, variant);
    evaluate_policy(&spec, &lp.model, &lp.exploit, &lp.store, episodes, seed)
}
