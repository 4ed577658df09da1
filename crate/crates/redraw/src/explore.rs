//! Intrinsic exploration for source-environment data collection: an ensemble
//! of dynamics heads is trained to predict the next encoder belief, and a
//! separate explorer actor-critic maximizes the ensemble's disagreement
//! (mean variance across heads) in imagination.

use crate::adapt::Adapter;
use crate::agent::{ActorCritic, ImaginedTrajectory};
use crate::draw::{SeqBatch, WorldModel};
use crate::error::{Error, Result};
use crate::gradcore::{
    clip_global_norm, Adam, Array, Binder, Graph, ParameterStore, RngStream,
};
use crate::gradcore::Mlp;

#[derive(Clone, Debug)]
pub struct ExploreConfig {
    pub heads: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Std of the heads' final-layer init; nonzero so heads disagree from
    /// the start.
    pub final_std: f64,
}

impl ExploreConfig {
    pub fn desk() -> Self {
        ExploreConfig { heads: 8, hidden: 128, lr: 1e-3, final_std: 0.05 }
    }
}

/// E independent heads, each (z_prev, a_prev) -> a prediction of the next
/// encoder belief (flattened [K*N]). Heads share no parameters.
#[derive(Clone, Debug)]
pub struct Ensemble {
    heads: Vec<Mlp>,
    cfg: ExploreConfig,
}

impl Ensemble {
    pub fn new(latent: usize, act_dim: usize, cfg: ExploreConfig) -> Self {
        let heads = (0..cfg.heads)
            .map(|i| {
                let prefix = format!("ensemble/h{i}");
                Mlp::new("ensemble", &prefix, latent + act_dim, cfg.hidden, 1, latent)
            })
            .collect();
        Ensemble { heads, cfg }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        for h in &self.heads {
            h.init_with_final_std(store, rng, self.cfg.final_std)?;
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// All head predictions at (z_prev, a_prev), as values: E arrays of
    /// [S, latent].
    pub fn predictions(
        &self,
        store: &ParameterStore,
        z_prev: &Array,
        a_prev: &Array,
    ) -> Result<Vec<Array>> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let z = g.constant(z_prev.clone())?;
        let a = g.constant(a_prev.clone())?;
        let input = g.concat_cols(&[z, a])?;
        let mut out = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let p = h.forward(&mut g, &mut binder, input)?;
            out.push(g.value(p).clone());
        }
        Ok(out)
    }

    /// Mean over output entries of the across-head variance (population
    /// variance, divisor E). Zero exactly when every head output coincides.
    pub fn intrinsic_reward(
        &self,
        store: &ParameterStore,
        z_prev: &Array,
        a_prev: &Array,
    ) -> Result<Vec<f64>> {
        let preds = self.predictions(store, z_prev, a_prev)?;
        let e = preds.len() as f64;
        let s = z_prev.shape()[0];
        let d = preds[0].numel() / s;
        let mut rewards = vec![0.0; s];
        for row in 0..s {
            let mut acc = 0.0;
            for j in 0..d {
                // Variance via deviations from head 0: exactly zero when all
                // heads coincide (a plain mean would round).
                let x0 = preds[0].data()[row * d + j];
                let (mut sum, mut sum_sq) = (0.0, 0.0);
                for p in &preds {
                    let dev = p.data()[row * d + j] - x0;
                    sum += dev;
                    sum_sq += dev * dev;
                }
                let var = (sum_sq / e - (sum / e) * (sum / e)).max(0.0);
                acc += var;
            }
            rewards[row] = acc / d as f64;
        }
        Ok(rewards)
    }

    /// One Adam step on all heads: squared error to the stop-gradded next
    /// encoder belief over every (t-1, t) pair in the batch. Returns the
    /// mean per-head loss.
    pub fn ensemble_update(
        &self,
        model: &WorldModel,
        store: &mut ParameterStore,
        opt: &mut Adam,
        batch: &SeqBatch,
        rng: &mut RngStream,
        max_grad_norm: f64,
    ) -> Result<f64> {
        let (b, t) = (batch.b, batch.t);
        if t < 2 {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        let latent = model.cfg.latent_dim();
        store.set_frozen("ensemble", false);

        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let x = g.constant(batch.obs.clone())?;
        let actions = g.constant(batch.prev_actions.clone())?;
        let (_, sigma) = model.encode(&mut g, &mut binder, x)?;
        let sigma_sg = g.stop_grad(sigma)?;
        let z_rows = g.sample_onehot_st(sigma, rng)?;
        let z_flat = g.reshape(z_rows, vec![t * b, latent])?;
        let z_sg = g.stop_grad(z_flat)?;

        // Inputs: rows 0..t-1; targets: belief rows 1..t.
        let z_prev = g.slice_rows(z_sg, 0, (t - 1) * b)?;
        let a_prev = g.slice_rows(actions, b, (t - 1) * b)?;
        let input = g.concat_cols(&[z_prev, a_prev])?;
        let sigma_wide = g.reshape(sigma_sg, vec![t * b, latent])?;
        let target = g.slice_rows(sigma_wide, b, (t - 1) * b)?;

        let mut losses = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let pred = h.forward(&mut g, &mut binder, input)?;
            let diff = g.sub(pred, target)?;
            let sq = g.mul(diff, diff)?;
            losses.push(g.mean(sq)?);
        }
        let total = {
            let cols: Vec<_> = losses
                .iter()
                .map(|&l| g.reshape(l, vec![1, 1]))
                .collect::<Result<_>>()?;
            let cat = g.concat_rows(&cols)?;
            g.mean(cat)?
        };
        let value = g.value(total).item();

        let grads = g.backward(total)?;
        let mut named = binder.named_grads(&g, &grads);
        named.retain(|name, _| matches!(store.group_of(name), Ok(gr) if gr == "ensemble"));
        clip_global_norm(&mut named, max_grad_norm);
        opt.step(store, &named)?;
        Ok(value)
    }
}

/// Ensemble plus the explorer actor-critic (groups exp_actor/exp_critic).
pub struct Explorer {
    pub ensemble: Ensemble,
    pub ac: ActorCritic,
}

impl Explorer {
    pub fn new(
        latent: usize,
        act_dim: usize,
        explore_cfg: ExploreConfig,
        ac_cfg: crate::agent::AcConfig,
    ) -> Self {
        let ensemble = Ensemble::new(latent, act_dim, explore_cfg);
        let ac = ActorCritic::new("exp_actor", "exp_critic", latent, act_dim, ac_cfg);
        Explorer { ensemble, ac }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut RngStream) -> Result<()> {
        self.ensemble.init(store, rng)?;
        self.ac.init(store, rng)
    }

    /// Intrinsic rewards along an imagined trajectory: the reward arriving
    /// at state h+1 is the disagreement at (z_h, a_h); state 0 gets 0.
    pub fn intrinsic_along(
        &self,
        store: &ParameterStore,
        traj: &ImaginedTrajectory,
    ) -> Result<Vec<Vec<f64>>> {
        let mut rewards = Vec::with_capacity(traj.h + 1);
        rewards.push(vec![0.0; traj.s]);
        for h in 0..traj.h {
            rewards.push(self.ensemble.intrinsic_reward(
                store,
                &traj.samples[h],
                &traj.actions[h],
            )?);
        }
        Ok(rewards)
    }

    /// Identical machinery to the exploit update, with the reward head's
    /// predictions replaced by ensemble disagreement.
    pub fn explorer_update(
        &mut self,
        adapter: &Adapter,
        store: &mut ParameterStore,
        opt_actor: &mut Adam,
        opt_critic: &mut Adam,
        z0: &Array,
        rng: &mut RngStream,
        max_grad_norm: f64,
    ) -> Result<(f64, f64)> {
        let horizon = self.ac.cfg.horizon;
        let traj = self.ac.imagine(adapter, store, z0, horizon, rng)?;
        let rewards = self.intrinsic_along(store, &traj)?;
        self.ac
            .update_from_trajectory(store, opt_actor, opt_critic, &traj, &rewards, max_grad_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::AdaptationMode;
    use crate::agent::AcConfig;
    use crate::draw::WmConfig;
    use crate::gradcore::StreamId;

    fn tiny_cfg() -> ExploreConfig {
        ExploreConfig { heads: 3, hidden: 8, lr: 1e-3, final_std: 0.05 }
    }

    fn tiny_world() -> (WorldModel, ParameterStore) {
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
        SeqBatch {
            b,
            t,
            obs: Array::new(vec![rows, 3], obs).unwrap(),
            prev_actions: Array::new(vec![rows, 1], act).unwrap(),
            rewards: None,
            continues: Array::full(vec![rows], 1.0),
        }
    }

    fn copy_head_params(store: &mut ParameterStore, heads: usize) {
        // Overwrite every head's parameters with head 0's.
        for i in 1..heads {
            for layer in 0..2 {
                for kind in ["w", "b"] {
                    let src = format!("ensemble/h0/{kind}{layer}");
                    let dst = format!("ensemble/h{i}/{kind}{layer}");
                    let v = store.get(&src).unwrap().clone();
                    *store.get_mut(&dst).unwrap() = v;
                }
            }
        }
    }

    #[test]
    fn identical_heads_give_exactly_zero_reward() {
        let (_, mut store) = tiny_world();
        let ens = Ensemble::new(16, 1, tiny_cfg());
        let mut rng = RngStream::new(2, StreamId::Init);
        ens.init(&mut store, &mut rng).unwrap();
        copy_head_params(&mut store, 3);
        let z = Array::full(vec![4, 16], 0.25);
        let a = Array::full(vec![4, 1], 0.5);
        let r = ens.intrinsic_reward(&store, &z, &a).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_variance_example() {
        // Two heads outputting constants 0 and 1 everywhere: variance 0.25
        // per entry, reward 0.25.
        let mut cfg = tiny_cfg();
        cfg.heads = 2;
        let ens = Ensemble::new(16, 1, cfg);
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(2, StreamId::Init);
        ens.init(&mut store, &mut rng).unwrap();
        for name in ["ensemble/h0/w0", "ensemble/h0/w1", "ensemble/h1/w0", "ensemble/h1/w1"] {
            for v in store.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        for v in store.get_mut("ensemble/h1/b1").unwrap().data_mut() {
            *v = 1.0;
        }
        let z = Array::full(vec![2, 16], 0.25);
        let a = Array::full(vec![2, 1], -0.3);
        let r = ens.intrinsic_reward(&store, &z, &a).unwrap();
        for v in r {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fresh_heads_disagree() {
        let (_, mut store) = tiny_world();
        let ens = Ensemble::new(16, 1, tiny_cfg());
        let mut rng = RngStream::new(2, StreamId::Init);
        ens.init(&mut store, &mut rng).unwrap();
        let w0 = store.get("ensemble/h0/w0").unwrap();
        let w1 = store.get("ensemble/h1/w0").unwrap();
        assert!(w0.max_abs_diff(w1) > 0.0);
        let z = Array::full(vec![1, 16], 0.25);
        let a = Array::full(vec![1, 1], 0.0);
        let r = ens.intrinsic_reward(&store, &z, &a).unwrap();
        assert!(r[0] > 0.0);
    }

    #[test]
    fn ensemble_overfits_a_fixed_mapping() {
        let (model, mut store) = tiny_world();
        let ens = Ensemble::new(16, 1, tiny_cfg());
        let mut rng = RngStream::new(2, StreamId::Init);
        ens.init(&mut store, &mut rng).unwrap();
        let mut opt = Adam::new(1e-2);
        let batch = tiny_batch(1, 2, 5);
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..800 {
            let mut srng = RngStream::new(9 + i, StreamId::ModelSample);
            let loss = ens
                .ensemble_update(&model, &mut store, &mut opt, &batch, &mut srng, 100.0)
                .unwrap();
            assert!(loss >= 0.0);
            if i == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(
            last < 1e-4 && last < first * 0.01,
            "no overfit: first {first}, last {last}"
        );
    }

    #[test]
    fn ensemble_update_touches_only_ensemble_params() {
        let (model, mut store) = tiny_world();
        let ens = Ensemble::new(16, 1, tiny_cfg());
        let mut rng = RngStream::new(2, StreamId::Init);
        ens.init(&mut store, &mut rng).unwrap();
        let snaps: Vec<_> = crate::draw::WM_GROUPS
            .iter()
            .map(|gr| (gr, store.group_snapshot(gr)))
            .collect();
        let mut opt = Adam::new(1e-3);
        let batch = tiny_batch(2, 3, 5);
        let mut srng = RngStream::new(9, StreamId::ModelSample);
        ens.ensemble_update(&model, &mut store, &mut opt, &batch, &mut srng, 100.0)
            .unwrap();
        for (gr, snap) in snaps {
            assert!(store.group_bits_eq(gr, &snap), "group {gr} drifted");
        }
    }

    #[test]
    fn zero_disagreement_leaves_entropy_only_explorer_loss() {
        let (model, mut store) = tiny_world();
        let mut ac_cfg = AcConfig::desk();
        ac_cfg.hidden = 16;
        ac_cfg.horizon = 4;
        let mut explorer = Explorer::new(16, 1, tiny_cfg(), ac_cfg);
        let mut rng = RngStream::new(2, StreamId::Init);
        explorer.init(&mut store, &mut rng).unwrap();
        copy_head_params(&mut store, 3);
        let adapter = Adapter::new(AdaptationMode::Zeroshot, model, 8);

        let mut z0v = vec![0.0; 2 * 16];
        for row in 0..2 {
            for f in 0..4 {
                z0v[row * 16 + f * 4 + (row + f) % 4] = 1.0;
            }
        }
        let z0 = Array::new(vec![2, 16], z0v).unwrap();
        let mut oa = Adam::new(3e-5);
        let mut oc = Adam::new(3e-5);
        let mut irng = RngStream::new(4, StreamId::ImagineExplorer);
        let (al, cl) = explorer
            .explorer_update(&adapter, &mut store, &mut oa, &mut oc, &z0, &mut irng, 100.0)
            .unwrap();
        let want = -explorer.ac.cfg.entropy_coef * (11.0f64).ln();
        assert!((al - want).abs() < 1e-12);
        assert_eq!(cl, 0.0);
    }

    #[test]
    fn explorer_training_moves_only_explorer_groups() {
        let (model, mut store) = tiny_world();
        let mut ac_cfg = AcConfig::desk();
        ac_cfg.hidden = 16;
        ac_cfg.horizon = 4;
        let mut explorer = Explorer::new(16, 1, tiny_cfg(), ac_cfg);
        let mut rng = RngStream::new(2, StreamId::Init);
        explorer.init(&mut store, &mut rng).unwrap();
        let adapter = Adapter::new(AdaptationMode::Zeroshot, model, 8);

        let exp_actor_before = store.group_snapshot("exp_actor");
        let wm_snaps: Vec<_> = crate::draw::WM_GROUPS
            .iter()
            .map(|gr| (gr, store.group_snapshot(gr)))
            .collect();
        let mut oa = Adam::new(1e-3);
        let mut oc = Adam::new(1e-3);
        let mut irng = RngStream::new(4, StreamId::ImagineExplorer);
        let mut z0v = vec![0.0; 2 * 16];
        for row in 0..2 {
            for f in 0..4 {
                z0v[row * 16 + f * 4 + (row + f) % 4] = 1.0;
            }
        }
        let z0 = Array::new(vec![2, 16], z0v).unwrap();
        for _ in 0..5 {
            explorer
                .explorer_update(&adapter, &mut store, &mut oa, &mut oc, &z0, &mut irng, 100.0)
                .unwrap();
        }
        assert!(!store.group_bits_eq("exp_actor", &exp_actor_before));
        for (gr, snap) in wm_snaps {
            assert!(store.group_bits_eq(gr, &snap), "group {gr} drifted");
        }
    }
}
