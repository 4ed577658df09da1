//! Episode storage and subsequence sampling. The buffer holds whole episodes
//! and evicts FIFO at episode granularity; sampled windows never cross an
//! episode boundary.

use std::collections::VecDeque;

use crate::draw::SeqBatch;
use crate::envs::Episode;
use crate::error::{Error, Result};
use crate::gradcore::{Array, RngStream};

use super::formats::StoredDataset;

/// Replay storage with a step-count capacity. Eviction drops the oldest
/// whole episode until the total fits; a single episode larger than the
/// capacity is kept (the buffer never goes empty by evicting).
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    steps: usize,
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 || act_dim == 0 {
            return Err(Error::Config("replay buffer dims and capacity must be positive".into()));
        }
        Ok(ReplayBuffer { episodes: VecDeque::new(), steps: 0, capacity, obs_dim, act_dim })
    }

    pub fn push(&mut self, ep: Episode) -> Result<()> {
        let n = ep.len();
        let ok = n > 0
            && ep.obs.len() == n + 1
            && ep.rewards.len() == n
            && ep.continues.len() == n
            && ep.obs.iter().all(|o| o.len() == self.obs_dim)
            && ep.actions.iter().all(|a| a.len() == self.act_dim);
        if !ok {
            return Err(Error::Config("malformed episode pushed to replay buffer".into()));
        }
        self.steps += n;
        self.episodes.push_back(ep);
        while self.steps > self.capacity && self.episodes.len() > 1 {
            if let Some(old) = self.episodes.pop_front() {
                self.steps -= old.len();
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// True once at least one window of `t` consecutive states exists.
    pub fn has_window(&self, t: usize) -> bool {
        self.episodes.iter().any(|e| e.obs.len() >= t)
    }

    /// B windows of T states, uniform over all admissible (episode, offset)
    /// pairs, as a t-major batch with reward labels.
    pub fn sample_batch(&self, rng: &mut RngStream, b: usize, t: usize) -> Result<SeqBatch> {
        let eps: Vec<&Episode> = self.episodes.iter().collect();
        sample_windows(&eps, rng, b, t, true, self.obs_dim, self.act_dim)
    }

    /// S observation rows drawn uniformly over every stored state (terminal
    /// states included); imagination can start anywhere experience exists.
    pub fn sample_obs(&self, rng: &mut RngStream, s: usize) -> Result<Array> {
        let eps: Vec<&Episode> = self.episodes.iter().collect();
        sample_obs_rows(&eps, rng, s, self.obs_dim)
    }
}

/// Dataset-side sampling mirrors the buffer; reward labels are attached only
/// when the file carried them.
impl StoredDataset {
    pub fn sample_batch(&self, rng: &mut RngStream, b: usize, t: usize) -> Result<SeqBatch> {
        let eps: Vec<&Episode> = self.episodes.iter().collect();
        sample_windows(&eps, rng, b, t, self.has_rewards, self.obs_dim, self.act_dim)
    }

    pub fn sample_obs(&self, rng: &mut RngStream, s: usize) -> Result<Array> {
        let eps: Vec<&Episode> = self.episodes.iter().collect();
        sample_obs_rows(&eps, rng, s, self.obs_dim)
    }
}

/// Draws `b` windows of `t` states and lays them out t-major (row index
/// `step*b + i`). Row conventions follow the training batch contract: entry
/// `step` carries the action/reward/continue of the transition that led into
/// state `step`, so a window opening at an episode start has zeros (and
/// continue 1) at its first row.
fn sample_windows(
    episodes: &[&Episode],
    rng: &mut RngStream,
    b: usize,
    t: usize,
    with_rewards: bool,
    obs_dim: usize,
    act_dim: usize,
) -> Result<SeqBatch> {
    if b == 0 || t < 2 {
        return Err(Error::Config("batch needs b >= 1 and t >= 2".into()));
    }
    // Episode with L transitions has L+1 states and L+2-t windows of t states.
    let counts: Vec<usize> = episodes
        .iter()
        .map(|e| (e.obs.len() + 1).saturating_sub(t))
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config(format!("no stored episode admits a window of {t} states")));
    }

    let mut picks = Vec::with_capacity(b);
    for _ in 0..b {
        let mut idx = rng.gen_range_usize(total);
        let mut ep = 0;
        while idx >= counts[ep] {
            idx -= counts[ep];
            ep += 1;
        }
        picks.push((ep, idx));
    }

    let rows = b * t;
    let mut obs = vec![0.0; rows * obs_dim];
    let mut acts = vec![0.0; rows * act_dim];
    let mut rewards = vec![0.0; rows];
    let mut continues = vec![1.0; rows];
    for step in 0..t {
        for (i, &(ep_idx, s)) in picks.iter().enumerate() {
            let ep = episodes[ep_idx];
            let row = step * b + i;
            let state = s + step;
            obs[row * obs_dim..(row + 1) * obs_dim].copy_from_slice(&ep.obs[state]);
            if state > 0 {
                acts[row * act_dim..(row + 1) * act_dim].copy_from_slice(&ep.actions[state - 1]);
                continues[row] = ep.continues[state - 1] as u8 as f64;
                if with_rewards {
                    rewards[row] = ep.rewards[state - 1];
                }
            }
        }
    }
    Ok(SeqBatch {
        b,
        t,
        obs: Array::new(vec![rows, obs_dim], obs)?,
        prev_actions: Array::new(vec![rows, act_dim], acts)?,
        rewards: with_rewards.then(|| Array::new(vec![rows], rewards)).transpose()?,
        continues: Array::new(vec![rows], continues)?,
    })
}

fn sample_obs_rows(
    episodes: &[&Episode],
    rng: &mut RngStream,
    s: usize,
    obs_dim: usize,
) -> Result<Array> {
    if s == 0 {
        return Err(Error::Config("need at least one observation row".into()));
    }
    let counts: Vec<usize> = episodes.iter().map(|e| e.obs.len()).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("no stored observations to sample".into()));
    }
    let mut out = vec![0.0; s * obs_dim];
    for i in 0..s {
        let mut idx = rng.gen_range_usize(total);
        let mut ep = 0;
        while idx >= counts[ep] {
            idx -= counts[ep];
            ep += 1;
        }
        out[i * obs_dim..(i + 1) * obs_dim].copy_from_slice(&episodes[ep].obs[idx]);
    }
    Array::new(vec![s, obs_dim], out)
}
