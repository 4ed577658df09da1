//! The world model: encoder to categorical beliefs, forward dynamics over
//! (sample, previous belief, action), reward/continue/decoder heads, and the
//! three-term training loss with free-bits clipping.
//!
//! Latents are K independent categoricals of N classes. In graphs a belief or
//! sample batch over R rows is stored as [R*K, N] (row ops see factors) and
//! flattened to [R, K*N] for MLP inputs. Sequence batches are t-major: row
//! t*B + b, so every per-step slice is contiguous.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::{
    clip_global_norm, Adam, Array, Binder, Graph, Mlp, NodeId, ParameterStore, RngStream,
};

/// Which inputs the forward dynamics sees. `Full` is the default; the other
/// two reproduce the input ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynInputs {
    /// (z_prev, predicted belief, action)
    Full,
    /// (z_prev, action)
    Minimal,
    /// (z_prev, encoder belief, action); falls back to the predicted belief
    /// in imagination, where no encoder belief exists.
    EncoderBelief,
}

impl DynInputs {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DynInputs::Full),
            "minimal" => Ok(DynInputs::Minimal),
            "encoder_belief" => Ok(DynInputs::EncoderBelief),
            other => Err(Error::Config(format!("unknown dynamics input mode: {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DynInputs::Full => "full",
            DynInputs::Minimal => "minimal",
            DynInputs::EncoderBelief => "encoder_belief",
        }
    }
}

#[derive(Clone, Debug)]
pub struct WmConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub k: usize,
    pub n: usize,
    pub hidden: usize,
    pub unimix: f64,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    /// false: free-bits floor on the KL summed over the K factors (default);
    /// true: floor applied to each factor's KL separately.
    pub free_bits_per_factor: bool,
    pub dyn_inputs: DynInputs,
}

impl WmConfig {
    pub fn desk(obs_dim: usize, act_dim: usize) -> Self {
        WmConfig {
            obs_dim,
            act_dim,
            k: 32,
            n: 4,
            hidden: 128,
            unimix: 0.01,
            beta_pred: 1.0,
            beta_dyn: 1.5,
            beta_rep: 0.5,
            free_bits_per_factor: false,
            dyn_inputs: DynInputs::Full,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.k * self.n
    }

    fn dyn_in_dim(&self) -> usize {
        match self.dyn_inputs {
            DynInputs::Minimal => self.latent_dim() + self.act_dim,
            _ => 2 * self.latent_dim() + self.act_dim,
        }
    }
}

pub const WM_GROUPS: [&str; 5] = ["encoder", "dynamics", "reward", "continue", "decoder"];

/// Encoder, dynamics, and heads as named parameter groups. The struct itself
/// is weight-free; all state lives in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WmConfig,
    encoder: Mlp,
    dynamics: Mlp,
    reward: Mlp,
    cont: Mlp,
    decoder: Mlp,
}

impl WorldModel {
    pub fn new(cfg: WmConfig) -> Self {
        let latent = cfg.latent_dim();
        let encoder = Mlp::new("encoder", "encoder/net", cfg.obs_dim, cfg.hidden, 2, latent);
        let dynamics = Mlp::new("dynamics", "dynamics/net", cfg.dyn_in_dim(), cfg.hidden, 1, latent);
        let reward = Mlp::new("reward", "reward/net", latent, cfg.hidden, 2, 1);
        let cont = Mlp::new("continue", "continue/net", latent, cfg.hidden, 2, 1);
        let decoder = Mlp::new("decoder", "decoder/net", latent, cfg.hidden, 2, cfg.obs_dim);
        WorldModel { cfg, encoder, dynamics, reward, cont, decoder }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.encoder.init(store, rng)?;
        self.dynamics.init(store, rng)?;
        self.reward.init(store, rng)?;
        self.cont.init(store, rng)?;
        self.decoder.init(store, rng)
    }

    /// (1 - unimix) * probs + unimix / N, rows of shape [rows, N].
    pub fn unimix(&self, g: &mut Graph, probs: NodeId) -> Result<NodeId> {
        let scaled = g.scale(probs, 1.0 - self.cfg.unimix)?;
        g.add_scalar(scaled, self.cfg.unimix / self.cfg.n as f64)
    }

    /// Logits -> belief rows: softmax over classes plus the uniform mix.
    pub fn belief(&self, g: &mut Graph, logits: NodeId) -> Result<NodeId> {
        let sm = g.softmax_rows(logits)?;
        self.unimix(g, sm)
    }

    /// x [R, D] -> (logits [R*K, N], belief sigma [R*K, N]).
    pub fn encode(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let rows = g.value(x).shape()[0];
        let flat = self.encoder.forward(g, binder, x)?;
        let logits = g.reshape(flat, vec![rows * self.cfg.k, self.cfg.n])?;
        let sigma = self.belief(g, logits)?;
        Ok((logits, sigma))
    }

    /// Forward dynamics logits for one step.
    /// z_prev [R, K*N], belief_prev [R, K*N], action [R, A] -> u-hat [R*K, N].
    pub fn dynamics_forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        z_prev: NodeId,
        belief_prev: NodeId,
        action: NodeId,
    ) -> Result<NodeId> {
        let rows = g.value(z_prev).shape()[0];
        let input = match self.cfg.dyn_inputs {
            DynInputs::Minimal => g.concat_cols(&[z_prev, action])?,
            _ => g.concat_cols(&[z_prev, belief_prev, action])?,
        };
        let flat = self.dynamics.forward(g, binder, input)?;
        g.reshape(flat, vec![rows * self.cfg.k, self.cfg.n])
    }

    /// z [R, K*N] -> predicted reward [R, 1].
    pub fn predict_reward(&self, g: &mut Graph, binder: &mut Binder, z: NodeId) -> Result<NodeId> {
        self.reward.forward(g, binder, z)
    }

    /// z [R, K*N] -> continue logit [R, 1] (sigmoid gives the probability).
    pub fn continue_logit(&self, g: &mut Graph, binder: &mut Binder, z: NodeId) -> Result<NodeId> {
        self.cont.forward(g, binder, z)
    }

    /// z [R, K*N] -> reconstructed observation [R, D].
    pub fn decode(&self, g: &mut Graph, binder: &mut Binder, z: NodeId) -> Result<NodeId> {
        self.decoder.forward(g, binder, z)
    }

    /// Constant uniform belief rows: [rows*K, N] of 1/N.
    pub fn uniform_belief(&self, g: &mut Graph, rows: usize) -> Result<NodeId> {
        g.constant(Array::full(
            vec![rows * self.cfg.k, self.cfg.n],
            1.0 / self.cfg.n as f64,
        ))
    }
}

/// Batch of B sequences of length T in t-major layout: row index t*B + b.
/// `prev_actions` row t holds the action that led from step t-1 to step t
/// (zeros at t=0 when an episode starts there).
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub b: usize,
    pub t: usize,
    pub obs: Array,
    pub prev_actions: Array,
    pub rewards: Option<Array>,
    pub continues: Array,
}

impl SeqBatch {
    pub fn validate(&self, obs_dim: usize, act_dim: usize) -> Result<()> {
        let rows = self.b * self.t;
        let ok = self.obs.shape() == [rows, obs_dim]
            && self.prev_actions.shape() == [rows, act_dim]
            && self.continues.shape() == [rows]
            && self.rewards.as_ref().map_or(true, |r| r.shape() == [rows]);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "SeqBatch::validate",
                detail: format!(
                    "b={} t={} obs {:?} act {:?}",
                    self.b,
                    self.t,
                    self.obs.shape(),
                    self.prev_actions.shape()
                ),
            });
        }
        Ok(())
    }
}

/// Teacher-forced rollout nodes. `sigma` are encoder beliefs for all T steps;
/// `sigma_hat[i]` is the forward belief for step i+1, chained through the
/// sequence from a uniform initial belief. The chain consumes stop-gradded
/// encoder samples, so prediction-loss gradients reach the dynamics group
/// only; the encoder is trained by the pred and rep terms.
pub struct Rollout {
    pub sigma: NodeId,
    pub z: NodeId,
    pub sigma_hat: Vec<NodeId>,
    pub uhat: Vec<NodeId>,
}

impl WorldModel {
    pub fn teacher_forced_rollout(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &SeqBatch,
        rng: &mut RngStream,
    ) -> Result<Rollout> {
        batch.validate(self.cfg.obs_dim, self.cfg.act_dim)?;
        let (b, t) = (batch.b, batch.t);
        if t < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        let latent = self.cfg.latent_dim();

        let x = g.constant(batch.obs.clone())?;
        let actions = g.constant(batch.prev_actions.clone())?;
        let (_logits, sigma) = self.encode(g, binder, x)?;
        let z_rows = g.sample_onehot_st(sigma, rng)?;
        let z = g.reshape(z_rows, vec![t * b, latent])?;
        let z_sg = g.stop_grad(z)?;
        let sigma_sg = g.stop_grad(sigma)?;

        let mut sigma_hat = Vec::with_capacity(t - 1);
        let mut uhat = Vec::with_capacity(t - 1);
        let mut belief_prev = {
            let u = self.uniform_belief(g, b)?;
            g.reshape(u, vec![b, latent])?
        };
        for step in 1..t {
            let z_prev = g.slice_rows(z_sg, (step - 1) * b, b)?;
            let a_prev = g.slice_rows(actions, step * b, b)?;
            let belief_in = match self.cfg.dyn_inputs {
                DynInputs::EncoderBelief => {
                    let enc_prev = g.slice_rows(sigma_sg, (step - 1) * b * self.cfg.k, b * self.cfg.k)?;
                    g.reshape(enc_prev, vec![b, latent])?
                }
                _ => belief_prev,
            };
            let u = self.dynamics_forward(g, binder, z_prev, belief_in, a_prev)?;
            let s_hat = self.belief(g, u)?;
            uhat.push(u);
            sigma_hat.push(s_hat);
            belief_prev = g.reshape(s_hat, vec![b, latent])?;
        }
        Ok(Rollout { sigma, z, sigma_hat, uhat })
    }
}

/// Scalar nodes of the world-model loss, still in the graph.
pub struct LossNodes {
    pub total: NodeId,
    pub pred: NodeId,
    pub dyn_term: NodeId,
    pub rep_term: NodeId,
}

/// Evaluated loss values. `dyn_kl_per_t` / `rep_kl_per_t` are the pre-clip
/// KLs summed over factors, averaged over the batch, one entry per predicted
/// step.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred: f64,
    pub dyn_term: f64,
    pub rep_term: f64,
    pub dyn_kl_per_t: Vec<f64>,
    pub rep_kl_per_t: Vec<f64>,
}

impl WorldModel {
    /// Sum over factors then clip, or clip per factor then sum, yielding [B].
    fn free_bits(&self, g: &mut Graph, kl_rows: NodeId, b: usize) -> Result<NodeId> {
        if self.cfg.free_bits_per_factor {
            let clipped = g.clip_floor_one(kl_rows)?;
            let wide = g.reshape(clipped, vec![b, self.cfg.k])?;
            g.sum_last_axis(wide)
        } else {
            let wide = g.reshape(kl_rows, vec![b, self.cfg.k])?;
            let summed = g.sum_last_axis(wide)?;
            g.clip_floor_one(summed)
        }
    }

    /// Mean over batch of the pre-clip factor-summed KL, as a plain value.
    fn mean_kl(&self, g: &Graph, kl_rows: NodeId, b: usize) -> f64 {
        g.value(kl_rows).data().iter().sum::<f64>() / b as f64
    }

    /// The three-term loss over a rollout. Requires reward labels.
    pub fn world_model_loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &SeqBatch,
        roll: &Rollout,
    ) -> Result<(LossNodes, LossBreakdown)> {
        let (b, t) = (batch.b, batch.t);
        let rewards = batch
            .rewards
            .as_ref()
            .ok_or_else(|| Error::Config("world-model loss requires reward labels".into()))?;

        // Prediction losses over all T steps at once.
        let x = g.constant(batch.obs.clone())?;
        let xhat = self.decode(g, binder, roll.z)?;
        let dx = g.sub(xhat, x)?;
        let dx2 = g.mul(dx, dx)?;
        let obs_row = g.sum_last_axis(dx2)?;

        let r_target = g.constant(Array::new(vec![t * b, 1], rewards.data().to_vec())?)?;
        let rhat = self.predict_reward(g, binder, roll.z)?;
        let dr = g.sub(rhat, r_target)?;
        let dr2 = g.mul(dr, dr)?;
        let rew_row = g.sum_last_axis(dr2)?;

        // Bernoulli log-loss: c*softplus(-l) + (1-c)*softplus(l).
        let c = g.constant(Array::new(vec![t * b], batch.continues.data().to_vec())?)?;
        let one_minus_c_arr: Vec<f64> = batch.continues.data().iter().map(|v| 1.0 - v).collect();
        let omc = g.constant(Array::new(vec![t * b], one_minus_c_arr)?)?;
        let logit = self.continue_logit(g, binder, roll.z)?;
        let logit_flat = g.reshape(logit, vec![t * b])?;
        let neg_logit = g.scale(logit_flat, -1.0)?;
        let sp_neg = g.softplus(neg_logit)?;
        let sp_pos = g.softplus(logit_flat)?;
        let bce_a = g.mul(c, sp_neg)?;
        let bce_b = g.mul(omc, sp_pos)?;
        let cont_row = g.add(bce_a, bce_b)?;

        let obs_half = g.scale(obs_row, 0.5)?;
        let rew_half = g.scale(rew_row, 0.5)?;
        let pred_rows = {
            let s = g.add(obs_half, rew_half)?;
            g.add(s, cont_row)?
        };
        let pred = g.mean(pred_rows)?;

        // KL terms over the T-1 predicted steps.
        let mut dyn_parts = Vec::with_capacity(t - 1);
        let mut rep_parts = Vec::with_capacity(t - 1);
        let mut dyn_kl_per_t = Vec::with_capacity(t - 1);
        let mut rep_kl_per_t = Vec::with_capacity(t - 1);
        for step in 1..t {
            let sigma_t = g.slice_rows(roll.sigma, step * b * self.cfg.k, b * self.cfg.k)?;
            let sigma_t_sg = g.stop_grad(sigma_t)?;
            let s_hat = roll.sigma_hat[step - 1];
            let s_hat_sg = g.stop_grad(s_hat)?;

            let kl_dyn = g.kl_rows(sigma_t_sg, s_hat)?;
            dyn_kl_per_t.push(self.mean_kl(g, kl_dyn, b));
            dyn_parts.push(self.free_bits(g, kl_dyn, b)?);

            let kl_rep = g.kl_rows(sigma_t, s_hat_sg)?;
            rep_kl_per_t.push(self.mean_kl(g, kl_rep, b));
            rep_parts.push(self.free_bits(g, kl_rep, b)?);
        }
        let dyn_cat = concat_flat(g, &dyn_parts)?;
        let rep_cat = concat_flat(g, &rep_parts)?;
        let dyn_term = g.mean(dyn_cat)?;
        let rep_term = g.mean(rep_cat)?;

        let wp = g.scale(pred, self.cfg.beta_pred)?;
        let wd = g.scale(dyn_term, self.cfg.beta_dyn)?;
        let wr = g.scale(rep_term, self.cfg.beta_rep)?;
        let total = {
            let s = g.add(wp, wd)?;
            g.add(s, wr)?
        };

        let breakdown = LossBreakdown {
            total: g.value(total).item(),
            pred: g.value(pred).item(),
            dyn_term: g.value(dyn_term).item(),
            rep_term: g.value(rep_term).item(),
            dyn_kl_per_t,
            rep_kl_per_t,
        };
        Ok((
            LossNodes { total, pred, dyn_term, rep_term },
            breakdown,
        ))
    }
}

fn concat_flat(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let cols: Vec<NodeId> = parts
        .iter()
        .map(|&p| {
            let len = g.value(p).numel();
            g.reshape(p, vec![len, 1])
        })
        .collect::<Result<_>>()?;
    g.concat_rows(&cols)
}

/// One optimizer step on the unfrozen world-model groups. Returns the
/// pre-update loss.
pub fn wm_update(
    model: &WorldModel,
    store: &mut ParameterStore,
    opt: &mut Adam,
    batch: &SeqBatch,
    rng: &mut RngStream,
    max_grad_norm: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut binder = Binder::new(store);
    let roll = model.teacher_forced_rollout(&mut g, &mut binder, batch, rng)?;
    let (nodes, breakdown) = model.world_model_loss(&mut g, &mut binder, batch, &roll)?;
    let grads = g.backward(nodes.total)?;
    let mut named = binder.named_grads(&g, &grads);
    clip_global_norm(&mut named, max_grad_norm);
    opt.step(store, &named)?;
    Ok(breakdown)
}

/// Gradients of one loss node with respect to every bound trainable
/// parameter; exposes loss wiring to tests without an optimizer step.
pub fn loss_grads(
    g: &Graph,
    binder: &Binder,
    loss: NodeId,
) -> Result<BTreeMap<String, Array>> {
    let grads = g.backward(loss)?;
    Ok(binder.named_grads(g, &grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::StreamId;

    fn tiny_model() -> (WorldModel, ParameterStore) {
        let mut cfg = WmConfig::desk(3, 1);
        cfg.k = 4;
        cfg.n = 4;
        cfg.hidden = 16;
        let model = WorldModel::new(cfg);
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(1, StreamId::Init);
        model.init(&mut store, &mut rng).unwrap();
        (model, store)
    }

    fn tiny_batch(b: usize, t: usize, seed: u64) -> SeqBatch {
        let mut rng = RngStream::new(seed, StreamId::Scratch);
        let rows = b * t;
        let obs: Vec<f64> = (0..rows * 3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let act: Vec<f64> = (0..rows).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let rew: Vec<f64> = (0..rows).map(|_| rng.uniform_in(-0.1, 1.0)).collect();
        SeqBatch {
            b,
            t,
            obs: Array::new(vec![rows, 3], obs).unwrap(),
            prev_actions: Array::new(vec![rows, 1], act).unwrap(),
            rewards: Some(Array::new(vec![rows], rew).unwrap()),
            continues: Array::full(vec![rows], 1.0),
        }
    }

    #[test]
    fn fresh_encoder_gives_uniform_beliefs() {
        let (model, store) = tiny_model();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let x = g
            .constant(Array::new(vec![2, 3], vec![0.3, -0.5, 0.9, 0.0, 0.1, -0.2]).unwrap())
            .unwrap();
        let (_, sigma) = model.encode(&mut g, &mut binder, x).unwrap();
        let v = g.value(sigma);
        assert_eq!(v.shape(), &[2 * 4, 4]);
        for &p in v.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn belief_rows_sum_to_one_and_respect_floor() {
        let (model, store) = tiny_model();
        let mut g = Graph::new();
        let _ = &store;
        let mut rng = RngStream::new(3, StreamId::Scratch);
        let logits: Vec<f64> = (0..40).map(|_| rng.uniform_in(-6.0, 6.0)).collect();
        let l = g.constant(Array::new(vec![10, 4], logits).unwrap()).unwrap();
        let sigma = model.belief(&mut g, l).unwrap();
        let v = g.value(sigma);
        let floor = model.cfg.unimix / model.cfg.n as f64;
        for row in 0..10 {
            let r = &v.data()[row * 4..(row + 1) * 4];
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for &p in r {
                assert!(p >= floor - 1e-15);
            }
        }
    }

    #[test]
    fn belief_closed_form_without_unimix() {
        let mut cfg = WmConfig::desk(3, 1);
        cfg.k = 1;
        cfg.n = 2;
        cfg.unimix = 0.0;
        let model = WorldModel::new(cfg);
        let mut g = Graph::new();
        let l = g
            .constant(Array::new(vec![1, 2], vec![3.0_f64.ln(), 0.0]).unwrap())
            .unwrap();
        let sigma = model.belief(&mut g, l).unwrap();
        let v = g.value(sigma).data();
        assert!((v[0] - 0.75).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn onehot_belief_samples_itself() {
        let mut g = Graph::new();
        let mut rng = RngStream::new(5, StreamId::ModelSample);
        let p = g
            .constant(Array::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let z = g.sample_onehot_st(p, &mut rng).unwrap();
        assert_eq!(g.value(z).data(), g.value(p).data());
    }

    #[test]
    fn factors_sample_independently() {
        // K=2 rows with marginals (0.7, 0.3); joint frequency of (0,0) over
        // 1e5 draws should be near 0.49.
        let mut g = Graph::new();
        let mut rng = RngStream::new(9, StreamId::ModelSample);
        let n = 100_000;
        let mut joint = 0usize;
        let probs = Array::new(vec![2, 2], vec![0.7, 0.3, 0.7, 0.3]).unwrap();
        for _ in 0..n {
            let p = g.constant(probs.clone()).unwrap();
            let z = g.sample_onehot_st(p, &mut rng).unwrap();
            let v = g.value(z).data();
            if v[0] == 1.0 && v[2] == 1.0 {
                joint += 1;
            }
        }
        let freq = joint as f64 / n as f64;
        assert!((freq - 0.49).abs() < 0.01, "joint freq {freq}");
    }

    #[test]
    fn rollout_t2_has_one_prediction_from_uniform_start() {
        let (model, store) = tiny_model();
        let batch = tiny_batch(3, 2, 11);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let mut rng = RngStream::new(2, StreamId::ModelSample);
        let roll = model
            .teacher_forced_rollout(&mut g, &mut binder, &batch, &mut rng)
            .unwrap();
        assert_eq!(roll.sigma_hat.len(), 1);
        // Zero-init dynamics final layer: u-hat = 0, so sigma-hat is uniform.
        for &p in g.value(roll.sigma_hat[0]).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_total_is_weighted_sum() {
        let (model, store) = tiny_model();
        let batch = tiny_batch(4, 6, 13);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let mut rng = RngStream::new(2, StreamId::ModelSample);
        let roll = model
            .teacher_forced_rollout(&mut g, &mut binder, &batch, &mut rng)
            .unwrap();
        let (_, bd) = model
            .world_model_loss(&mut g, &mut binder, &batch, &roll)
            .unwrap();
        let expect = model.cfg.beta_pred * bd.pred
            + model.cfg.beta_dyn * bd.dyn_term
            + model.cfg.beta_rep * bd.rep_term;
        assert!((bd.total - expect).abs() < 1e-9);
        assert_eq!(bd.dyn_kl_per_t.len(), 5);
    }

    #[test]
    fn fresh_model_kl_terms_floor_to_one() {
        // Zero-init final layers make encoder and dynamics beliefs both
        // uniform: KL = 0, floored to exactly 1 per step.
        let (model, store) = tiny_model();
        let batch = tiny_batch(4, 5, 17);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let mut rng = RngStream::new(2, StreamId::ModelSample);
        let roll = model
            .teacher_forced_rollout(&mut g, &mut binder, &batch, &mut rng)
            .unwrap();
        let (_, bd) = model
            .world_model_loss(&mut g, &mut binder, &batch, &roll)
            .unwrap();
        assert_eq!(bd.dyn_term, 1.0);
        assert_eq!(bd.rep_term, 1.0);
        for kl in bd.dyn_kl_per_t {
            assert!(kl.abs() < 1e-12);
        }
    }

    #[test]
    fn missing_rewards_is_a_config_error() {
        let (model, store) = tiny_model();
        let mut batch = tiny_batch(2, 3, 19);
        batch.rewards = None;
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let mut rng = RngStream::new(2, StreamId::ModelSample);
        let roll = model
            .teacher_forced_rollout(&mut g, &mut binder, &batch, &mut rng)
            .unwrap();
        assert!(model
            .world_model_loss(&mut g, &mut binder, &batch, &roll)
            .is_err());
    }

    #[test]
    fn update_decreases_loss_on_fixed_batch() {
        let (model, mut store) = tiny_model();
        let batch = tiny_batch(4, 8, 23);
        let mut opt = Adam::new(3e-3);
        let mut first = None;
        let mut last = None;
        for i in 0..200 {
            let mut rng = RngStream::new(2, StreamId::ModelSample);
            let bd = wm_update(&model, &mut store, &mut opt, &batch, &mut rng, 100.0).unwrap();
            if i == 0 {
                first = Some(bd.total);
            }
            last = Some(bd.total);
        }
        assert_eq!(opt.step_count(), 200);
        assert!(
            last.unwrap() < first.unwrap(),
            "no descent: {} -> {}",
            first.unwrap(),
            last.unwrap()
        );
    }

    #[test]
    fn frozen_groups_do_not_move_and_counters_tick() {
        let (model, mut store) = tiny_model();
        store.set_frozen("encoder", true);
        store.set_frozen("decoder", true);
        let enc_before = store.group_snapshot("encoder");
        let dec_before = store.group_snapshot("decoder");
        let batch = tiny_batch(3, 4, 29);
        let mut opt = Adam::new(1e-3);
        for _ in 0..3 {
            let mut rng = RngStream::new(2, StreamId::ModelSample);
            wm_update(&model, &mut store, &mut opt, &batch, &mut rng, 100.0).unwrap();
        }
        assert!(store.group_bits_eq("encoder", &enc_before));
        assert!(store.group_bits_eq("decoder", &dec_before));
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn loss_is_deterministic_given_seed() {
        let (model, store) = tiny_model();
        let batch = tiny_batch(4, 6, 31);
        let run = || {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let mut rng = RngStream::new(77, StreamId::ModelSample);
            let roll = model
                .teacher_forced_rollout(&mut g, &mut binder, &batch, &mut rng)
                .unwrap();
            let (_, bd) = model
                .world_model_loss(&mut g, &mut binder, &batch, &roll)
                .unwrap();
            bd
        };
        let (a, b) = (run(), run());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.pred.to_bits(), b.pred.to_bits());
    }
}
