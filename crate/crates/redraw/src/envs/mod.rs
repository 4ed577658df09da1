//! Toy control tasks. Each comes in a `Source` and a `Target` variant that
//! share dynamics except for one modification parameter (action reversal,
//! constant wind, constant external torque). Observations are flat f64
//! vectors, actions are continuous in [-1, 1] per dimension, and stepping is
//! deterministic; all randomness lives in `reset`.

mod expert;
mod pendulum;
mod pointmass;
mod spinner;

pub use pendulum::PendulumParams;
pub use pointmass::PointMassParams;
pub use spinner::SpinnerParams;

use crate::error::{Error, Result};
use crate::gradcore::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvId {
    Pendulum,
    PointMass,
    Spinner,
}

impl EnvId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvId::Pendulum),
            "pointmass" => Ok(EnvId::PointMass),
            "spinner" => Ok(EnvId::Spinner),
            other => Err(Error::Config(format!("unknown env id: {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvId::Pendulum => "pendulum",
            EnvId::PointMass => "pointmass",
            EnvId::Spinner => "spinner",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Source,
    Target,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Variant::Source),
            "target" => Ok(Variant::Target),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Source => "source",
            Variant::Target => "target",
        }
    }
}

#[derive(Clone, Debug)]
pub enum KindParams {
    Pendulum(PendulumParams),
    PointMass(PointMassParams),
    Spinner(SpinnerParams),
}

/// Full description of one environment instance. `step` is a pure function
/// of (spec, observation, action).
#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub id: EnvId,
    pub variant: Variant,
    pub horizon: usize,
    pub kind: KindParams,
}

/// Result of one transition. `cont` is false only on termination; episodes
/// are also cut at `horizon` by the rollout driver, which does not clear
/// `cont` (time limits are not environment terminations).
#[derive(Clone, Debug)]
pub struct StepOut {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cont: bool,
}

impl EnvSpec {
    pub fn new(id: EnvId, variant: Variant) -> Self {
        let kind = match id {
            EnvId::Pendulum => KindParams::Pendulum(PendulumParams::new(variant)),
            EnvId::PointMass => KindParams::PointMass(PointMassParams::new(variant)),
            EnvId::Spinner => KindParams::Spinner(SpinnerParams::new(variant)),
        };
        EnvSpec { id, variant, horizon: 200, kind }
    }

    pub fn obs_dim(&self) -> usize {
        match self.id {
            EnvId::Pendulum => 3,
            EnvId::PointMass => 6,
            EnvId::Spinner => 5,
        }
    }

    pub fn act_dim(&self) -> usize {
        match self.id {
            EnvId::PointMass => 2,
            _ => 1,
        }
    }

    /// Inclusive bounds on the per-step reward, used by sanity checks.
    pub fn reward_bounds(&self) -> (f64, f64) {
        match &self.kind {
            KindParams::Pendulum(p) => (-p.action_cost, 1.0),
            KindParams::PointMass(p) => (p.exit_penalty, 1.0),
            KindParams::Spinner(p) => (-p.dist_cost * std::f64::consts::PI, 1.0),
        }
    }

    pub fn reset(&self, rng: &mut RngStream) -> Vec<f64> {
        match &self.kind {
            KindParams::Pendulum(p) => pendulum::reset(p, rng),
            KindParams::PointMass(p) => pointmass::reset(p, rng),
            KindParams::Spinner(p) => spinner::reset(p, rng),
        }
    }

    pub fn step(&self, obs: &[f64], action: &[f64]) -> Result<StepOut> {
        if obs.len() != self.obs_dim() || action.len() != self.act_dim() {
            return Err(Error::Env(format!(
                "{}: expected obs {} / act {}, got {} / {}",
                self.id.name(),
                self.obs_dim(),
                self.act_dim(),
                obs.len(),
                action.len()
            )));
        }
        let out = match &self.kind {
            KindParams::Pendulum(p) => pendulum::step(p, obs, action),
            KindParams::PointMass(p) => pointmass::step(p, obs, action),
            KindParams::Spinner(p) => spinner::step(p, obs, action),
        };
        debug_assert!(out.obs.iter().all(|v| v.is_finite()));
        Ok(out)
    }

    /// Hand-written controller for this spec, adequate rather than optimal.
    pub fn scripted_expert(&self, obs: &[f64]) -> Vec<f64> {
        match &self.kind {
            KindParams::Pendulum(p) => expert::pendulum(p, obs),
            KindParams::PointMass(p) => expert::pointmass(p, obs),
            KindParams::Spinner(p) => expert::spinner(p, obs),
        }
    }
}

/// One complete episode. `obs` has one more entry than the others (the
/// terminal observation is kept).
#[derive(Clone, Debug, Default)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub continues: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs one episode under `policy`, cutting at the spec horizon.
pub fn rollout(
    spec: &EnvSpec,
    rng: &mut RngStream,
    mut policy: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<Episode> {
    let mut ep = Episode::default();
    let mut obs = spec.reset(rng);
    ep.obs.push(obs.clone());
    for _ in 0..spec.horizon {
        let action = policy(&obs);
        let out = spec.step(&obs, &action)?;
        ep.actions.push(action);
        ep.rewards.push(out.reward);
        ep.continues.push(out.cont);
        ep.obs.push(out.obs.clone());
        obs = out.obs;
        if !ep.continues[ep.continues.len() - 1] {
            break;
        }
    }
    Ok(ep)
}

pub(crate) fn wrap_to_pi(mut a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    a = (a + PI) % TAU;
    if a < 0.0 {
        a += TAU;
    }
    a - PI
}

pub(crate) fn clamp1(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}
