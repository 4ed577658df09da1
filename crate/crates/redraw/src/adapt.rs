//! Adaptation of a frozen world model to shifted dynamics from reward-free
//! data. The main mechanism is a residual network whose output is added to
//! the frozen dynamics logits before the softmax; baselines replace the
//! dynamics output entirely or finetune parts of the model.

use std::collections::BTreeMap;

use crate::draw::{SeqBatch, WorldModel};
use crate::error::{Error, Result};
use crate::gradcore::{
    clip_global_norm, Adam, Binder, Graph, Mlp, NodeId, ParameterStore, RngStream,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptationMode {
    Zeroshot,
    Residual,
    ResidualInSigma,
    ResidualInPrior,
    FinetuneDyn,
    FinetuneAll,
    NewDynA,
    NewDynB,
    NewDynC,
}

impl AdaptationMode {
    pub fn parse(s: &str) -> Result<Self> {
        use AdaptationMode::*;
        match s {
            "zeroshot" => Ok(Zeroshot),
            "residual" => Ok(Residual),
            "residual_in_sigma" => Ok(ResidualInSigma),
            "residual_in_prior" => Ok(ResidualInPrior),
            "finetune_dyn" => Ok(FinetuneDyn),
            "finetune_all" => Ok(FinetuneAll),
            "new_dyn_a" => Ok(NewDynA),
            "new_dyn_b" => Ok(NewDynB),
            "new_dyn_c" => Ok(NewDynC),
            other => Err(Error::Config(format!("unknown adaptation mode: {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        use AdaptationMode::*;
        match self {
            Zeroshot => "zeroshot",
            Residual => "residual",
            ResidualInSigma => "residual_in_sigma",
            ResidualInPrior => "residual_in_prior",
            FinetuneDyn => "finetune_dyn",
            FinetuneAll => "finetune_all",
            NewDynA => "new_dyn_a",
            NewDynB => "new_dyn_b",
            NewDynC => "new_dyn_c",
        }
    }

    /// Only full finetuning may (and must) see reward labels; every other
    /// mode is defined on reward-free data.
    pub fn requires_rewards(self) -> bool {
        self == AdaptationMode::FinetuneAll
    }

    pub fn uses_residual(self) -> bool {
        matches!(
            self,
            AdaptationMode::Residual
                | AdaptationMode::ResidualInSigma
                | AdaptationMode::ResidualInPrior
        )
    }

    pub fn uses_newdyn(self) -> bool {
        matches!(
            self,
            AdaptationMode::NewDynA | AdaptationMode::NewDynB | AdaptationMode::NewDynC
        )
    }

    /// Parameter groups this mode trains; everything else gets frozen.
    pub fn trainable_groups(self) -> Vec<&'static str> {
        use AdaptationMode::*;
        match self {
            Zeroshot => vec![],
            Residual | ResidualInSigma | ResidualInPrior => vec!["residual"],
            FinetuneDyn => vec!["dynamics"],
            FinetuneAll => vec!["encoder", "dynamics", "reward", "continue", "decoder"],
            NewDynA | NewDynB | NewDynC => vec!["newdyn"],
        }
    }
}

/// The residual MLP. Input is the flattened previous sample and action, plus
/// one extra belief vector for the input ablations. Zero-initialized final
/// layer: a fresh residual is exactly inactive.
#[derive(Clone, Debug)]
pub struct ResidualNet {
    mlp: Mlp,
    k: usize,
    n: usize,
}

impl ResidualNet {
    pub fn new(mode: AdaptationMode, k: usize, n: usize, act_dim: usize, hidden: usize) -> Self {
        let latent = k * n;
        let in_dim = match mode {
            AdaptationMode::ResidualInSigma | AdaptationMode::ResidualInPrior => {
                2 * latent + act_dim
            }
            _ => latent + act_dim,
        };
        ResidualNet {
            mlp: Mlp::new("residual", "residual/net", in_dim, hidden, 1, latent),
            k,
            n,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.mlp.init(store, rng)
    }

    /// e-hat rows [R*K, N]. `extra_belief` is Some only for the input
    /// ablations: the chained rectified belief (in_sigma) or the source
    /// prediction at the current step (in_prior), both [R, K*N].
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        z_prev: NodeId,
        extra_belief: Option<NodeId>,
       a_prev: NodeId,
    ) -> Result<NodeId> {
        let rows = g.value(z_prev).shape()[0];
        let input = match extra_belief {
            Some(b) => g.concat_cols(&[z_prev, b, a_prev])?,
            None => g.concat_cols(&[z_prev, a_prev])?,
        };
        let flat = self.mlp.forward(g, binder, input)?;
        g.reshape(flat, vec![rows * self.k, self.n])
    }
}

/// Replacement dynamics g_psi (same capacity as the residual). Variant (a)
/// sees (z_prev, a); (b) additionally the frozen source belief prediction for
/// the current step; (c) additionally a sample from that prediction.
#[derive(Clone, Debug)]
pub struct NewDynNet {
    mlp: Mlp,
    k: usize,
    n: usize,
}

impl NewDynNet {
    pub fn new(mode: AdaptationMode, k: usize, n: usize, act_dim: usize, hidden: usize) -> Self {
        let latent = k * n;
        let in_dim = match mode {
            AdaptationMode::NewDynA => latent + act_dim,
            _ => 2 * latent + act_dim,
        };
        NewDynNet {
            mlp: Mlp::new("newdyn", "newdyn/net", in_dim, hidden, 1, latent),
            k,
            n,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.mlp.init(store, rng)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        z_prev: NodeId,
        extra: Option<NodeId>,
        a_prev: NodeId,
    ) -> Result<NodeId> {
        let rows = g.value(z_prev).shape()[0];
        let input = match extra {
            Some(e) => g.concat_cols(&[e, z_prev, a_prev])?,
            None => g.concat_cols(&[z_prev, a_prev])?,
        };
        let flat = self.mlp.forward(g, binder, input)?;
        g.reshape(flat, vec![rows * self.k, self.n])
    }
}

/// unimix(softmax(u-hat + e-hat)): the rectified belief.
pub fn rectify(
    model: &WorldModel,
    g: &mut Graph,
    uhat: NodeId,
    ehat: NodeId,
) -> Result<NodeId> {
    let sum = g.add(uhat, ehat)?;
    model.belief(g, sum)
}

/// A world model plus whatever adaptation machinery the mode needs. The
/// model's own parameters are frozen according to the mode before every
/// update; `psi` nets are registered separately.
pub struct Adapter {
    pub mode: AdaptationMode,
    pub model: WorldModel,
    pub residual: Option<ResidualNet>,
    pub newdyn: Option<NewDynNet>,
    /// Clip the adaptation KL at the free-bits floor instead of leaving it
    /// unclipped (off by default; the error signal on shifted dynamics is
    /// exactly what adaptation needs to see).
    pub clip_kl: bool,
}

impl Adapter {
    pub fn new(mode: AdaptationMode, model: WorldModel, adapt_hidden: usize) -> Self {
        let (k, n, a) = (model.cfg.k, model.cfg.n, model.cfg.act_dim);
        let residual = mode
            .uses_residual()
            .then(|| ResidualNet::new(mode, k, n, a, adapt_hidden));
        let newdyn = mode
            .uses_newdyn()
            .then(|| NewDynNet::new(mode, k, n, a, adapt_hidden));
        Adapter { mode, model, residual, newdyn, clip_kl: false }
    }

    pub fn with_clipped_kl(mut self, on: bool) -> Self {
        self.clip_kl = on;
        self
    }

    /// Registers fresh psi parameters (if any) and sets the freeze flags.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        if let Some(r) = &self.residual {
            r.init(store, rng)?;
        }
        if let Some(nd) = &self.newdyn {
            nd.init(store, rng)?;
        }
        self.apply_freezes(store);
        Ok(())
    }

    pub fn apply_freezes(&self, store: &mut ParameterStore) {
        store.freeze_all_except(&self.mode.trainable_groups());
    }

    fn check_schema(&self, batch: &SeqBatch) -> Result<()> {
        match (self.mode.requires_rewards(), batch.rewards.is_some()) {
            (true, false) => Err(Error::Schema(format!(
                "mode {} requires reward labels",
                self.mode.name()
            ))),
            (false, true) => Err(Error::Schema(format!(
                "mode {} is reward-free but the batch carries rewards",
                self.mode.name()
            ))),
            _ => Ok(()),
        }
    }

    /// Rectified (or replaced) teacher-forced belief chain and the unclipped
    /// adaptation KL. Returns (loss node, mean KL value). Public so gradient
    /// audits can rebuild the loss; training goes through [`Adapter::update`].
    pub fn adaptation_loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &SeqBatch,
        rng: &mut RngStream,
    ) -> Result<(NodeId, f64)> {
        let model = &self.model;
        let (b, t) = (batch.b, batch.t);
        if t < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        let (k, latent) = (model.cfg.k, model.cfg.latent_dim());

        let x = g.constant(batch.obs.clone())?;
        let actions = g.constant(batch.prev_actions.clone())?;
        let (_, sigma) = model.encode(g, binder, x)?;
        let sigma_sg = g.stop_grad(sigma)?;
        let z_rows = g.sample_onehot_st(sigma, rng)?;
        let z_flat = g.reshape(z_rows, vec![t * b, latent])?;
        let z_sg = g.stop_grad(z_flat)?;

        let mut kl_parts = Vec::with_capacity(t - 1);
        let mut belief_prev = {
            let u = model.uniform_belief(g, b)?;
            g.reshape(u, vec![b, latent])?
        };
        for step in 1..t {
            let z_prev = g.slice_rows(z_sg, (step - 1) * b, b)?;
            let a_prev = g.slice_rows(actions, step * b, b)?;
            let belief_next = self.predicted_belief(
                g, binder, z_prev, belief_prev, a_prev, rng,
            )?;
            let sigma_t = g.slice_rows(sigma_sg, step * b * k, b * k)?;
            let kl = g.kl_rows(sigma_t, belief_next)?;
            let wide = g.reshape(kl, vec![b, k])?;
            let summed = g.sum_last_axis(wide)?;
            kl_parts.push(if self.clip_kl { g.clip_floor_one(summed)? } else { summed });
            belief_prev = g.reshape(belief_next, vec![b, latent])?;
        }
        let cols: Vec<NodeId> = kl_parts
            .iter()
            .map(|&p| g.reshape(p, vec![b, 1]))
            .collect::<Result<_>>()?;
        let cat = g.concat_rows(&cols)?;
        let loss = g.mean(cat)?;
        let value = g.value(loss).item();
        Ok((loss, value))
    }

    /// One belief prediction step under this mode's dynamics. Shapes:
    /// z_prev [R, K*N], belief_prev [R, K*N] (the mode's own chained belief),
    /// a_prev [R, A]; output [R*K, N].
    ///
    /// All modes consume the rng stream identically (no draws except variant
    /// new_dyn_c), so belief chains are comparable across modes under a
    /// shared stream.
    pub fn predicted_belief(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        z_prev: NodeId,
        belief_prev: NodeId,
        a_prev: NodeId,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        let model = &self.model;
        let rows = g.value(z_prev).shape()[0];
        let latent = model.cfg.latent_dim();
        match self.mode {
            AdaptationMode::Zeroshot | AdaptationMode::FinetuneDyn | AdaptationMode::FinetuneAll => {
                let u = model.dynamics_forward(g, binder, z_prev, belief_prev, a_prev)?;
                model.belief(g, u)
            }
            AdaptationMode::Residual => {
                let u = model.dynamics_forward(g, binder, z_prev, belief_prev, a_prev)?;
                let e = self.residual.as_ref().unwrap().forward(g, binder, z_prev, None, a_prev)?;
                rectify(model, g, u, e)
            }
            AdaptationMode::ResidualInSigma => {
                let u = model.dynamics_forward(g, binder, z_prev, belief_prev, a_prev)?;
                let e = self.residual.as_ref().unwrap().forward(
                    g, binder, z_prev, Some(belief_prev), a_prev,
                )?;
                rectify(model, g, u, e)
            }
            AdaptationMode::ResidualInPrior => {
                let u = model.dynamics_forward(g, binder, z_prev, belief_prev, a_prev)?;
                let prior = model.belief(g, u)?;
                let prior_flat = g.reshape(prior, vec![rows, latent])?;
                let e = self.residual.as_ref().unwrap().forward(
                    g, binder, z_prev, Some(prior_flat), a_prev,
                )?;
                rectify(model, g, u, e)
            }
            AdaptationMode::NewDynA => {
                self.newdyn_belief(g, binder, z_prev, None, a_prev)
            }
            AdaptationMode::NewDynB => {
                let u = model.dynamics_forward(g, binder, z_prev, belief_prev, a_prev)?;
                let src = model.belief(g, u)?;
                let src_flat = g.reshape(src, vec![rows, latent])?;
                self.newdyn_belief(g, binder, z_prev, Some(src_flat), a_prev)
            }
            AdaptationMode::NewDynC => {
                let u = model.dynamics_forward(g, binder, z_prev, belief_prev, a_prev)?;
                let src = model.belief(g, u)?;
                let zhat_rows = g.sample_onehot_st(src, rng)?;
                let zhat = g.reshape(zhat_rows, vec![rows, latent])?;
                self.newdyn_belief(g, binder, z_prev, Some(zhat), a_prev)
            }
        }
    }

    fn newdyn_belief(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        z_prev: NodeId,
        extra: Option<NodeId>,
        a_prev: NodeId,
    ) -> Result<NodeId> {
        let logits = self
            .newdyn
            .as_ref()
            .unwrap()
            .forward(g, binder, z_prev, extra, a_prev)?;
        self.model.belief(g, logits)
    }

    /// The mode's belief chain during teacher forcing vs imagination differs
    /// in one point for new_dyn_b/c: the source dynamics needs its own
    /// chained belief. `belief_prev` here is the mode's predicted belief, and
    /// for those modes it doubles as the source-chain input; this couples the
    /// chains, which matches the replacement setting (the source model is an
    /// input provider only).
    ///
    /// One adaptation update. Returns the pre-update loss value.
    pub fn update(
        &self,
        store: &mut ParameterStore,
        opt: &mut Adam,
        batch: &SeqBatch,
        rng: &mut RngStream,
        max_grad_norm: f64,
    ) -> Result<f64> {
        self.check_schema(batch)?;
        self.apply_freezes(store);
        if self.mode == AdaptationMode::Zeroshot {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let (loss, value) = match self.mode {
            AdaptationMode::FinetuneDyn => {
                let roll = self.model.teacher_forced_rollout(&mut g, &mut binder, batch, rng)?;
                // L_dyn alone: clipped KL(sg(sigma) || sigma-hat), averaged.
                let (b, t) = (batch.b, batch.t);
                let k = self.model.cfg.k;
                let mut parts = Vec::with_capacity(t - 1);
                for step in 1..t {
                    let sigma_t = g.slice_rows(roll.sigma, step * b * k, b * k)?;
                    let sigma_sg = g.stop_grad(sigma_t)?;
                    let kl = g.kl_rows(sigma_sg, roll.sigma_hat[step - 1])?;
                    let wide = g.reshape(kl, vec![b, k])?;
                    let summed = g.sum_last_axis(wide)?;
                    parts.push(g.clip_floor_one(summed)?);
                }
                let cols: Vec<NodeId> = parts
                    .iter()
                    .map(|&p| g.reshape(p, vec![b, 1]))
                    .collect::<Result<_>>()?;
                let cat = g.concat_rows(&cols)?;
                let loss = g.mean(cat)?;
                let value = g.value(loss).item();
                (loss, value)
            }
            AdaptationMode::FinetuneAll => {
                let roll = self.model.teacher_forced_rollout(&mut g, &mut binder, batch, rng)?;
                let (nodes, bd) = self.model.world_model_loss(&mut g, &mut binder, batch, &roll)?;
                (nodes.total, bd.total)
            }
            _ => self.adaptation_loss(&mut g, &mut binder, batch, rng)?,
        };
        let grads = g.backward(loss)?;
        let mut named = binder.named_grads(&g, &grads);
        clip_global_norm(&mut named, max_grad_norm);
        opt.step(store, &named)?;
        Ok(value)
    }

    /// Evaluates the adaptation KL without updating (for metrics and the
    /// ranking tests).
    pub fn eval_loss(
        &self,
        store: &ParameterStore,
        batch: &SeqBatch,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let (_, value) = self.adaptation_loss(&mut g, &mut binder, batch, rng)?;
        Ok(value)
    }

    /// Gradient audit helper: named gradients of the adaptation loss.
    pub fn loss_grads(
        &self,
        store: &ParameterStore,
        batch: &SeqBatch,
        rng: &mut RngStream,
    ) -> Result<BTreeMap<String, crate::gradcore::Array>> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let (loss, _) = self.adaptation_loss(&mut g, &mut binder, batch, rng)?;
        let grads = g.backward(loss)?;
        Ok(binder.named_grads(&g, &grads))
    }
}
