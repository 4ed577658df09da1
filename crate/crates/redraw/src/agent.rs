//! Actor-critic trained on imagined rollouts inside the (possibly rectified)
//! world model. Deployment uses the encoder and actor only and is
//! non-recurrent: each action depends on the current observation alone.
//!
//! Actions are discretized into factored categoricals (11 bins per dimension
//! spanning [-1, 1]), which makes the policy-gradient objective exact and the
//! entropy closed-form. Imagination extracts plain value arrays from its
//! graph; actor and critic losses are then built in a fresh graph in which
//! every latent sample is a constant, so no gradient can reach the world
//! model or residual parameters by construction.

use crate::adapt::Adapter;
use crate::draw::WorldModel;
use crate::error::{Error, Result};
use crate::gradcore::{
    clip_global_norm, Adam, Array, Binder, Graph, Mlp, NodeId, ParameterStore, RngStream,
};

#[derive(Clone, Debug)]
pub struct AcConfig {
    pub bins: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub horizon: usize,
    pub hidden: usize,
    pub unimix: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// EMA decay for the return-range normalizer.
    pub return_ema_decay: f64,
}

impl AcConfig {
    pub fn desk() -> Self {
        AcConfig {
            bins: 11,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 3e-4,
            horizon: 40,
            hidden: 128,
            unimix: 0.01,
            actor_lr: 3e-5,
            critic_lr: 3e-5,
            return_ema_decay: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mode,
}

/// MLP z -> factored categorical logits over action bins.
#[derive(Clone, Debug)]
pub struct Policy {
    mlp: Mlp,
    pub act_dim: usize,
    pub bins: usize,
    pub unimix: f64,
}

impl Policy {
    pub fn new(group: &'static str, latent: usize, act_dim: usize, cfg: &AcConfig) -> Self {
        let prefix = format!("{group}/net");
        Policy {
            mlp: Mlp::new(group, &prefix, latent, cfg.hidden, 2, act_dim * cfg.bins),
            act_dim,
            bins: cfg.bins,
            unimix: cfg.unimix,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.mlp.init(store, rng)
    }

    /// Bin probabilities, rows [S * act_dim, bins]. A fresh policy is exactly
    /// uniform (zero-initialized final layer plus softmax).
    pub fn probs(&self, g: &mut Graph, binder: &mut Binder, z: NodeId) -> Result<NodeId> {
        let rows = g.value(z).shape()[0];
        let logits = self.mlp.forward(g, binder, z)?;
        let per_dim = g.reshape(logits, vec![rows * self.act_dim, self.bins])?;
        let probs = g.softmax_rows(per_dim)?;
        if self.unimix > 0.0 {
            let scaled = g.scale(probs, 1.0 - self.unimix)?;
            g.add_scalar(scaled, self.unimix / self.bins as f64)
        } else {
            Ok(probs)
        }
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.bins - 1) as f64
    }
}

/// MLP z -> scalar value.
#[derive(Clone, Debug)]
pub struct Critic {
    mlp: Mlp,
}

impl Critic {
    pub fn new(group: &'static str, latent: usize, cfg: &AcConfig) -> Self {
        let prefix = format!("{group}/net");
        Critic {
            mlp: Mlp::new(group, &prefix, latent, cfg.hidden, 2, 1),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.mlp.init(store, rng)
    }

    /// Values [S, 1].
    pub fn value(&self, g: &mut Graph, binder: &mut Binder, z: NodeId) -> Result<NodeId> {
        self.mlp.forward(g, binder, z)
    }
}

/// Tracks an exponential moving average of the 5th-95th percentile range of
/// lambda-returns; the advantage divisor is that average floored at 1.
#[derive(Clone, Debug)]
pub struct ReturnNormalizer {
    pub ema: f64,
    pub decay: f64,
}

impl ReturnNormalizer {
    pub fn new(decay: f64) -> Self {
        ReturnNormalizer { ema: 0.0, decay }
    }

    pub fn update_and_scale(&mut self, returns: &[f64]) -> f64 {
        if !returns.is_empty() {
            let range = percentile(returns, 0.95) - percentile(returns, 0.05);
            self.ema = self.decay * self.ema + (1.0 - self.decay) * range;
        }
        self.ema.max(1.0)
    }
}

/// Linear-interpolation percentile on a copy of the data.
fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted: Vec<f64> = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// One imagined batch of rollouts, as plain values. States h = 0..=H,
/// actions h = 0..H; rewards/continues/values are per state.
#[derive(Clone, Debug)]
pub struct ImaginedTrajectory {
    pub s: usize,
    pub h: usize,
    /// H+1 of [S, K*N]: the belief fed to (or produced by) the dynamics.
    pub beliefs: Vec<Array>,
    /// H+1 of [S, K*N]: straight-through one-hot samples.
    pub samples: Vec<Array>,
    /// H of [S, act_dim]: continuous actions (bin centers).
    pub actions: Vec<Array>,
    /// H of [S * act_dim]: the sampled bin indices.
    pub action_bins: Vec<Vec<usize>>,
    /// H+1 of [S]: reward-head predictions.
    pub rewards: Vec<Vec<f64>>,
    /// H+1 of [S]: continue probabilities.
    pub continues: Vec<Vec<f64>>,
    /// H+1 of [S]: critic values.
    pub values: Vec<Vec<f64>>,
}

/// R_h = r_{h+1} + gamma * c_{h+1} * ((1 - lambda) * v_{h+1} + lambda * R_{h+1}),
/// bootstrapped with R_H = v_H. Returns H vectors of [S] (h = 0..H).
pub fn lambda_returns(
    rewards: &[Vec<f64>],
    continues: &[Vec<f64>],
    values: &[Vec<f64>],
    gamma: f64,
    lambda: f64,
) -> Vec<Vec<f64>> {
    let h = values.len() - 1;
    let s = values[0].len();
    let mut out = vec![vec![0.0; s]; h];
    let mut next = values[h].clone();
    for step in (0..h).rev() {
        let mut r = vec![0.0; s];
        for i in 0..s {
            let mix = (1.0 - lambda) * values[step + 1][i] + lambda * next[i];
            r[i] = rewards[step + 1][i] + gamma * continues[step + 1][i] * mix;
        }
        out[step] = r.clone();
        next = r;
    }
    out
}

pub struct ActorCritic {
    pub policy: Policy,
    pub critic: Critic,
    pub cfg: AcConfig,
    pub norm: ReturnNormalizer,
    actor_group: &'static str,
    critic_group: &'static str,
}

impl ActorCritic {
    pub fn new(
        actor_group: &'static str,
        critic_group: &'static str,
        latent: usize,
        act_dim: usize,
        cfg: AcConfig,
    ) -> Self {
        let policy = Policy::new(actor_group, latent, act_dim, &cfg);
        let critic = Critic::new(critic_group, latent, &cfg);
        let norm = ReturnNormalizer::new(cfg.return_ema_decay);
        ActorCritic { policy, critic, cfg, norm, actor_group, critic_group }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.policy.init(store, rng)?;
        self.critic.init(store, rng)
    }

    pub fn groups(&self) -> [&'static str; 2] {
        [self.actor_group, self.critic_group]
    }

    /// Autoregressive rollout under the adapter's dynamics. `z0` is a batch
    /// of one-hot samples encoded from real states; the initial dynamics
    /// belief is uniform, matching the teacher-forced training chain. No
    /// parameters are mutated and no gradients are taken here.
    pub fn imagine(
        &self,
        adapter: &Adapter,
        store: &ParameterStore,
        z0: &Array,
        horizon: usize,
        rng: &mut RngStream,
    ) -> Result<ImaginedTrajectory> {
        if horizon == 0 {
            return Err(Error::Config("imagination horizon must be at least 1".into()));
        }
        let model = &adapter.model;
        let latent = model.cfg.latent_dim();
        let s = z0.shape()[0];
        if z0.shape() != [s, latent] {
            return Err(Error::ShapeMismatch {
                op: "imagine",
                detail: format!("z0 shape {:?}, want [{s}, {latent}]", z0.shape()),
            });
        }

        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let uniform = {
            let u = model.uniform_belief(&mut g, s)?;
            g.reshape(u, vec![s, latent])?
        };

        let mut beliefs = vec![g.value(uniform).clone()];
        let mut samples = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut action_bins = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon + 1);
        let mut continues = Vec::with_capacity(horizon + 1);
        let mut values = Vec::with_capacity(horizon + 1);

        let mut z = g.constant(z0.clone())?;
        let mut belief = uniform;
        samples.push(g.value(z).clone());
        self.eval_heads(&mut g, &mut binder, model, z, &mut rewards, &mut continues, &mut values)?;

        for _ in 0..horizon {
            // a_h ~ pi(.|z_h): sample bin indices from the policy values.
            let probs = self.policy.probs(&mut g, &mut binder, z)?;
            let pv = g.value(probs);
            let (a_dim, bins) = (self.policy.act_dim, self.policy.bins);
            let mut bins_taken = Vec::with_capacity(s * a_dim);
            let mut act = vec![0.0; s * a_dim];
            for row in 0..s * a_dim {
                let p = &pv.data()[row * bins..(row + 1) * bins];
                let idx = rng.categorical(p);
                bins_taken.push(idx);
                act[row] = self.policy.bin_center(idx);
            }
            let a = g.constant(Array::new(vec![s, a_dim], act)?)?;
            actions.push(g.value(a).clone());
            action_bins.push(bins_taken);

            let next_belief_rows = adapter.predicted_belief(&mut g, &mut binder, z, belief, a, rng)?;
            let z_next_rows = g.sample_onehot_st(next_belief_rows, rng)?;
            let z_next = g.reshape(z_next_rows, vec![s, latent])?;
            let belief_next = g.reshape(next_belief_rows, vec![s, latent])?;

            beliefs.push(g.value(belief_next).clone());
            samples.push(g.value(z_next).clone());
            self.eval_heads(&mut g, &mut binder, model, z_next, &mut rewards, &mut continues, &mut values)?;
            z = z_next;
            belief = belief_next;
        }

        Ok(ImaginedTrajectory {
            s,
            h: horizon,
            beliefs,
            samples,
            actions,
            action_bins,
            rewards,
            continues,
            values,
        })
    }

    fn eval_heads(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        model: &WorldModel,
        z: NodeId,
        rewards: &mut Vec<Vec<f64>>,
        continues: &mut Vec<Vec<f64>>,
        values: &mut Vec<Vec<f64>>,
    ) -> Result<()> {
        let r = model.predict_reward(g, binder, z)?;
        rewards.push(g.value(r).data().to_vec());
        let cl = model.continue_logit(g, binder, z)?;
        let c = g.sigmoid(cl)?;
        continues.push(g.value(c).data().to_vec());
        let v = self.critic.value(g, binder, z)?;
        values.push(g.value(v).data().to_vec());
        Ok(())
    }

    /// Actor and critic loss nodes for a trajectory, with `returns` already
    /// computed and `scale` fixed. Exposed for gradient audits; training goes
    /// through [`ActorCritic::update_from_trajectory`].
    pub fn build_losses(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        traj: &ImaginedTrajectory,
        returns: &[Vec<f64>],
        scale: f64,
    ) -> Result<(NodeId, NodeId)> {
        let (s, h) = (traj.s, traj.h);
        let (a_dim, bins) = (self.policy.act_dim, self.policy.bins);

        let mut actor_terms = Vec::with_capacity(h);
        let mut critic_terms = Vec::with_capacity(h);
        for step in 0..h {
            let z = g.constant(traj.samples[step].clone())?;
            let probs = self.policy.probs(g, binder, z)?;

            // ln pi(a|z): pick the taken bin per dimension, sum over dims.
            let mut onehot = vec![0.0; s * a_dim * bins];
            for (row, &idx) in traj.action_bins[step].iter().enumerate() {
                onehot[row * bins + idx] = 1.0;
            }
            let sel = g.constant(Array::new(vec![s * a_dim, bins], onehot)?)?;
            let picked = g.mul(probs, sel)?;
            let taken = g.sum_last_axis(picked)?;
            let logp_dim = g.ln(taken)?;
            let logp_wide = g.reshape(logp_dim, vec![s, a_dim])?;
            let logp = g.sum_last_axis(logp_wide)?;

            // Factored entropy: sum over dims of -sum_b p ln p.
            let lnp = g.ln(probs)?;
            let plnp = g.mul(probs, lnp)?;
            let ent_dim = g.sum_last_axis(plnp)?;
            let ent_wide = g.reshape(ent_dim, vec![s, a_dim])?;
            let neg_ent = g.sum_last_axis(ent_wide)?;

            let adv: Vec<f64> = (0..s)
                .map(|i| (returns[step][i] - traj.values[step][i]) / scale)
                .collect();
            let adv = g.constant(Array::new(vec![s], adv)?)?;
            let pg = g.mul(adv, logp)?;
            let neg_pg = g.scale(pg, -1.0)?;
            let ent_term = g.scale(neg_ent, self.cfg.entropy_coef)?;
            actor_terms.push(g.add(neg_pg, ent_term)?);

            let v = self.critic.value(g, binder, z)?;
            let v_flat = g.reshape(v, vec![s])?;
            let target = g.constant(Array::new(vec![s], returns[step].clone())?)?;
            let diff = g.sub(v_flat, target)?;
            let sq = g.mul(diff, diff)?;
            critic_terms.push(sq);
        }
        let actor_cat = concat_vecs(g, &actor_terms)?;
        let critic_cat = concat_vecs(g, &critic_terms)?;
        let actor_loss = g.mean(actor_cat)?;
        let critic_loss = g.mean(critic_cat)?;
        Ok((actor_loss, critic_loss))
    }

    /// One Adam step each for actor and critic, with the given per-state
    /// rewards (the trajectory's own reward-head predictions for the exploit
    /// policy; intrinsic rewards for the explorer). Returns pre-update
    /// (actor loss, critic loss).
    pub fn update_from_trajectory(
        &mut self,
        store: &mut ParameterStore,
        opt_actor: &mut Adam,
        opt_critic: &mut Adam,
        traj: &ImaginedTrajectory,
        rewards: &[Vec<f64>],
        max_grad_norm: f64,
    ) -> Result<(f64, f64)> {
        if rewards.len() != traj.h + 1 {
            return Err(Error::ShapeMismatch {
                op: "update_from_trajectory",
                detail: format!("{} reward steps for horizon {}", rewards.len(), traj.h),
            });
        }
        store.set_frozen(self.actor_group, false);
        store.set_frozen(self.critic_group, false);

        let returns = lambda_returns(rewards, &traj.continues, &traj.values, self.cfg.gamma, self.cfg.lambda);
        let flat: Vec<f64> = returns.iter().flatten().copied().collect();
        let scale = self.norm.update_and_scale(&flat);

        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let (actor_loss, critic_loss) = self.build_losses(&mut g, &mut binder, traj, &returns, scale)?;
        let av = g.value(actor_loss).item();
        let cv = g.value(critic_loss).item();

        let a_grads = g.backward(actor_loss)?;
        let mut a_named = binder.named_grads(&g, &a_grads);
        a_named.retain(|name, _| matches!(store.group_of(name), Ok(gr) if gr == self.actor_group));
        clip_global_norm(&mut a_named, max_grad_norm);

        let c_grads = g.backward(critic_loss)?;
        let mut c_named = binder.named_grads(&g, &c_grads);
        c_named.retain(|name, _| matches!(store.group_of(name), Ok(gr) if gr == self.critic_group));
        clip_global_norm(&mut c_named, max_grad_norm);

        opt_actor.step(store, &a_named)?;
        opt_critic.step(store, &c_named)?;
        Ok((av, cv))
    }

    /// imagine + train on the model's own reward predictions.
    pub fn ac_update(
        &mut self,
        adapter: &Adapter,
        store: &mut ParameterStore,
        opt_actor: &mut Adam,
        opt_critic: &mut Adam,
        z0: &Array,
        rng: &mut RngStream,
        max_grad_norm: f64,
    ) -> Result<(f64, f64)> {
        let horizon = self.cfg.horizon;
        let traj = self.imagine(adapter, store, z0, horizon, rng)?;
        let rewards = traj.rewards.clone();
        self.update_from_trajectory(store, opt_actor, opt_critic, &traj, &rewards, max_grad_norm)
    }

    /// Deployment path: encoder + actor only, non-recurrent. Mode acting
    /// takes the argmax latent and the argmax bin; Sample draws both.
    pub fn act(
        &self,
        model: &WorldModel,
        store: &ParameterStore,
        obs: &[f64],
        rng: &mut RngStream,
        mode: ActMode,
    ) -> Result<Vec<f64>> {
        let (k, n, latent) = (model.cfg.k, model.cfg.n, model.cfg.latent_dim());
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let x = g.constant(Array::new(vec![1, model.cfg.obs_dim], obs.to_vec())?)?;
        let (_, sigma) = model.encode(&mut g, &mut binder, x)?;
        let sv = g.value(sigma);

        let mut z = vec![0.0; latent];
        for f in 0..k {
            let p = &sv.data()[f * n..(f + 1) * n];
            let idx = match mode {
                ActMode::Sample => rng.categorical(p),
                ActMode::Mode => argmax(p),
            };
            z[f * n + idx] = 1.0;
        }
        let zn = g.constant(Array::new(vec![1, latent], z)?)?;
        let probs = self.policy.probs(&mut g, &mut binder, zn)?;
        let pv = g.value(probs);

        let mut action = Vec::with_capacity(self.policy.act_dim);
        for d in 0..self.policy.act_dim {
            let p = &pv.data()[d * self.policy.bins..(d + 1) * self.policy.bins];
            let idx = match mode {
                ActMode::Sample => rng.categorical(p),
                ActMode::Mode => argmax(p),
            };
            action.push(self.policy.bin_center(idx));
        }
        Ok(action)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn concat_vecs(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let cols: Vec<NodeId> = parts
        .iter()
        .map(|&p| {
            let len = g.value(p).numel();
            g.reshape(p, vec![len, 1])
        })
        .collect::<Result<_>>()?;
    g.concat_rows(&cols)
}

/// Encodes a batch of observations and samples one-hot latents: the starting
/// states for imagination.
pub fn encode_starts(
    model: &WorldModel,
    store: &ParameterStore,
    obs: &Array,
    rng: &mut RngStream,
) -> Result<Array> {
    let mut g = Graph::new();
    let mut binder = Binder::new(store);
    let s = obs.shape()[0];
    let x = g.constant(obs.clone())?;
    let (_, sigma) = model.encode(&mut g, &mut binder, x)?;
    let z_rows = g.sample_onehot_st(sigma, rng)?;
    let z = g.reshape(z_rows, vec![s, model.cfg.latent_dim()])?;
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::AdaptationMode;
    use crate::draw::WmConfig;
    use crate::gradcore::StreamId;

    fn tiny_setup(mode: AdaptationMode) -> (Adapter, ActorCritic, ParameterStore) {
        let mut cfg = WmConfig::desk(3, 1);
        cfg.k = 4;
        cfg.n = 4;
        cfg.hidden = 16;
        let model = WorldModel::new(cfg);
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(1, StreamId::Init);
        model.init(&mut store, &mut rng).unwrap();
        let adapter = Adapter::new(mode, model, 8);
        adapter.init(&mut store, &mut rng).unwrap();
        let mut ac_cfg = AcConfig::desk();
        ac_cfg.hidden = 16;
        ac_cfg.horizon = 5;
        let ac = ActorCritic::new("actor", "critic", 16, 1, ac_cfg);
        ac.init(&mut store, &mut rng).unwrap();
        (adapter, ac, store)
    }

    fn some_z0(s: usize, k: usize, n: usize, seed: u64) -> Array {
        let mut rng = RngStream::new(seed, StreamId::Scratch);
        let mut v = vec![0.0; s * k * n];
        for row in 0..s {
            for f in 0..k {
                let idx = rng.gen_range_usize(n);
                v[row * k * n + f * n + idx] = 1.0;
            }
        }
        Array::new(vec![s, k * n], v).unwrap()
    }

    #[test]
    fn lambda_returns_hand_example() {
        // H=2, r=(1,1), v=(0,0,10), gamma=0.9, lambda=0.5, c=1.
        let rewards = vec![vec![0.0], vec![1.0], vec![1.0]];
        let continues = vec![vec![1.0]; 3];
        let values = vec![vec![0.0], vec![0.0], vec![10.0]];
        let r = lambda_returns(&rewards, &continues, &values, 0.9, 0.5);
        assert!((r[1][0] - 10.0).abs() < 1e-12);
        assert!((r[0][0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn lambda_returns_gamma_zero_and_mc_limit() {
        let mut rng = RngStream::new(7, StreamId::Scratch);
        let h = 6;
        let rewards: Vec<Vec<f64>> = (0..=h).map(|_| vec![rng.uniform_in(-1.0, 1.0)]).collect();
        let continues = vec![vec![1.0]; h + 1];
        let values: Vec<Vec<f64>> = (0..=h).map(|_| vec![rng.uniform_in(-1.0, 1.0)]).collect();

        let r0 = lambda_returns(&rewards, &continues, &values, 0.0, 0.5);
        for step in 0..h {
            assert!((r0[step][0] - rewards[step + 1][0]).abs() < 1e-12);
        }

        // lambda = 1: discounted Monte-Carlo sum plus terminal value.
        let gamma = 0.9;
        let r1 = lambda_returns(&rewards, &continues, &values, gamma, 1.0);
        for step in 0..h {
            let mut want = 0.0;
            for j in (step + 1)..=h {
                want += gamma.powi((j - step - 1) as i32) * rewards[j][0];
            }
            want += gamma.powi((h - step) as i32) * values[h][0];
            assert!((r1[step][0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn imagine_shapes_and_h1() {
        let (adapter, ac, store) = tiny_setup(AdaptationMode::Zeroshot);
        let z0 = some_z0(3, 4, 4, 11);
        let mut rng = RngStream::new(5, StreamId::ImagineExploit);
        let t = ac.imagine(&adapter, &store, &z0, 1, &mut rng).unwrap();
        assert_eq!(t.h, 1);
        assert_eq!(t.beliefs.len(), 2);
        assert_eq!(t.samples.len(), 2);
        assert_eq!(t.actions.len(), 1);
        assert_eq!(t.rewards.len(), 2);
        assert_eq!(t.values.len(), 2);
        assert_eq!(t.samples[1].shape(), &[3, 16]);
    }

    #[test]
    fn identity_residual_reproduces_source_imagination() {
        let (src, ac, store) = tiny_setup(AdaptationMode::Zeroshot);
        let res = Adapter::new(AdaptationMode::Residual, src.model.clone(), 8);
        let mut store2 = store.clone();
        let mut rng_init = RngStream::new(9, StreamId::Init);
        res.init(&mut store2, &mut rng_init).unwrap();

        let z0 = some_z0(4, 4, 4, 13);
        let mut r1 = RngStream::new(21, StreamId::ImagineExploit);
        let mut r2 = RngStream::new(21, StreamId::ImagineExploit);
        let a = ac.imagine(&src, &store, &z0, 6, &mut r1).unwrap();
        let b = ac.imagine(&res, &store2, &z0, 6, &mut r2).unwrap();
        for h in 0..=6 {
            assert!(a.beliefs[h].bits_eq(&b.beliefs[h]));
            assert!(a.samples[h].bits_eq(&b.samples[h]));
            assert_eq!(a.rewards[h], b.rewards[h]);
        }
        for h in 0..6 {
            assert!(a.actions[h].bits_eq(&b.actions[h]));
        }
    }

    #[test]
    fn zero_advantage_leaves_entropy_term_only() {
        // Fresh critic outputs exactly 0 and we feed zero rewards, so R = v
        // and the policy-gradient term vanishes; the fresh policy is uniform,
        // so the actor loss is -eta * act_dim * ln(bins).
        let (adapter, mut ac, mut store) = tiny_setup(AdaptationMode::Zeroshot);
        ac.cfg.gamma = 0.9;
        let z0 = some_z0(4, 4, 4, 17);
        let mut rng = RngStream::new(3, StreamId::ImagineExploit);
        let traj = ac.imagine(&adapter, &store, &z0, 4, &mut rng).unwrap();
        let zero_rewards = vec![vec![0.0; 4]; 5];
        let mut oa = Adam::new(ac.cfg.actor_lr);
        let mut oc = Adam::new(ac.cfg.critic_lr);
        let (al, cl) = ac
            .update_from_trajectory(&mut store, &mut oa, &mut oc, &traj, &zero_rewards, 100.0)
            .unwrap();
        let want = -ac.cfg.entropy_coef * (11.0f64).ln();
        assert!((al - want).abs() < 1e-12, "actor loss {al}, want {want}");
        assert_eq!(cl, 0.0);
    }

    #[test]
    fn critic_loss_constant_offset() {
        // gamma = 0 makes R_h = r_{h+1}; constant rewards c against a fresh
        // critic (v = 0) give critic loss exactly c^2.
        let (adapter, mut ac, mut store) = tiny_setup(AdaptationMode::Zeroshot);
        ac.cfg.gamma = 0.0;
        let z0 = some_z0(3, 4, 4, 19);
        let mut rng = RngStream::new(3, StreamId::ImagineExploit);
        let traj = ac.imagine(&adapter, &store, &z0, 3, &mut rng).unwrap();
        let c = 0.5;
        let rewards = vec![vec![c; 3]; 4];
        let mut oa = Adam::new(ac.cfg.actor_lr);
        let mut oc = Adam::new(ac.cfg.critic_lr);
        let (_, cl) = ac
            .update_from_trajectory(&mut store, &mut oa, &mut oc, &traj, &rewards, 100.0)
            .unwrap();
        assert!((cl - c * c).abs() < 1e-12);
    }

    #[test]
    fn gradients_stay_inside_actor_and_critic() {
        let (adapter, ac, mut store) = tiny_setup(AdaptationMode::Zeroshot);
        let z0 = some_z0(4, 4, 4, 23);
        let mut rng = RngStream::new(3, StreamId::ImagineExploit);
        let traj = ac.imagine(&adapter, &store, &z0, 4, &mut rng).unwrap();
        let returns = lambda_returns(&traj.rewards, &traj.continues, &traj.values, 0.99, 0.95);

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let (al, cl) = ac.build_losses(&mut g, &mut binder, &traj, &returns, 1.0).unwrap();
        for loss in [al, cl] {
            let grads = g.backward(loss).unwrap();
            let named = binder.named_grads(&g, &grads);
            for name in named.keys() {
                assert!(
                    name.starts_with("actor/") || name.starts_with("critic/"),
                    "gradient leaked to {name}"
                );
            }
        }

        // And a real update leaves every world-model group bit-identical.
        let snaps: Vec<_> = crate::draw::WM_GROUPS
            .iter()
            .map(|gr| (gr, store.group_snapshot(gr)))
            .collect();
        let mut ac2 = ac;
        let mut oa = Adam::new(3e-5);
        let mut oc = Adam::new(3e-5);
        let rewards = traj.rewards.clone();
        ac2.update_from_trajectory(&mut store, &mut oa, &mut oc, &traj, &rewards, 100.0)
            .unwrap();
        for (gr, snap) in snaps {
            assert!(store.group_bits_eq(gr, &snap), "group {gr} drifted");
        }
        assert_eq!(oa.step_count(), 1);
        assert_eq!(oc.step_count(), 1);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let (adapter, ac, mut store) = tiny_setup(AdaptationMode::Zeroshot);
        // Give the critic nonzero outputs so the loss surface is curved.
        store.set_frozen("critic", false);
        if let Ok(w) = store.get_mut("critic/net/w2") {
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = ((i % 5) as f64 - 2.0) * 0.1;
            }
        }
        let z0 = some_z0(3, 4, 4, 29);
        let mut rng = RngStream::new(3, StreamId::ImagineExploit);
        let traj = ac.imagine(&adapter, &store, &z0, 3, &mut rng).unwrap();
        let returns = lambda_returns(&traj.rewards, &traj.continues, &traj.values, 0.99, 0.95);

        let eval = |store: &ParameterStore| -> f64 {
            let mut g = Graph::new();
            let mut binder = Binder::new(store);
            let (_, cl) = ac.build_losses(&mut g, &mut binder, &traj, &returns, 1.0).unwrap();
            g.value(cl).item()
        };
        let grad = {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let (_, cl) = ac.build_losses(&mut g, &mut binder, &traj, &returns, 1.0).unwrap();
            let grads = g.backward(cl).unwrap();
            binder.named_grads(&g, &grads)["critic/net/b2"].clone()
        };
        let eps = 1e-5;
        let base = store.get("critic/net/b2").unwrap().data()[0];
        store.get_mut("critic/net/b2").unwrap().data_mut()[0] = base + eps;
        let up = eval(&store);
        store.get_mut("critic/net/b2").unwrap().data_mut()[0] = base - eps;
        let down = eval(&store);
        store.get_mut("critic/net/b2").unwrap().data_mut()[0] = base;
        let fd = (up - down) / (2.0 * eps);
        let a = grad.data()[0];
        assert!(
            (a - fd).abs() / (a.abs() + fd.abs() + 1e-12) < 1e-6,
            "analytic {a}, finite difference {fd}"
        );
    }

    #[test]
    fn act_deploy_is_deterministic_and_stateless() {
        let (adapter, ac, store) = tiny_setup(AdaptationMode::Zeroshot);
        let obs = [0.3, -0.2, 0.8];
        let mut r1 = RngStream::new(4, StreamId::Eval);
        let a1 = ac.act(&adapter.model, &store, &obs, &mut r1, ActMode::Mode).unwrap();
        let mut r2 = RngStream::new(999, StreamId::Eval);
        let a2 = ac.act(&adapter.model, &store, &obs, &mut r2, ActMode::Mode).unwrap();
        assert_eq!(a1, a2);

        let mut r3 = RngStream::new(4, StreamId::Eval);
        let mut r4 = RngStream::new(4, StreamId::Eval);
        let s1 = ac.act(&adapter.model, &store, &obs, &mut r3, ActMode::Sample).unwrap();
        let s2 = ac.act(&adapter.model, &store, &obs, &mut r4, ActMode::Sample).unwrap();
        assert_eq!(s1, s2);

        assert_eq!(ac.policy.bin_center(0), -1.0);
        assert_eq!(ac.policy.bin_center(10), 1.0);
        assert!((ac.policy.bin_center(5) - 0.0).abs() < 1e-15);
        assert!((ac.policy.bin_center(7) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn updates_stay_finite_over_many_steps() {
        let (adapter, mut ac, mut store) = tiny_setup(AdaptationMode::Zeroshot);
        let mut oa = Adam::new(ac.cfg.actor_lr);
        let mut oc = Adam::new(ac.cfg.critic_lr);
        let mut rng = RngStream::new(31, StreamId::ImagineExploit);
        for i in 0..60 {
            let z0 = some_z0(4, 4, 4, 200 + i);
            let (al, cl) = ac
                .ac_update(&adapter, &mut store, &mut oa, &mut oc, &z0, &mut rng, 100.0)
                .unwrap();
            assert!(al.is_finite() && cl.is_finite());
        }
        assert_eq!(oa.step_count(), 60);
    }

    #[test]
    fn return_normalizer_floors_at_one() {
        let mut n = ReturnNormalizer::new(0.99);
        let small = vec![0.0, 0.01, 0.02];
        assert_eq!(n.update_and_scale(&small), 1.0);
        let mut n2 = ReturnNormalizer::new(0.0);
        // decay 0: ema = current range. P95 - P5 of 0..=100 is 90.
        let wide: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let s = n2.update_and_scale(&wide);
        assert!((s - 90.0).abs() < 1e-9);
    }
}
