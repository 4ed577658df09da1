use super::{clamp1, wrap_to_pi, StepOut, Variant};
use crate::gradcore::RngStream;

/// Gravity-free rotor that must hold a goal angle. The target variant adds a
/// constant external torque. Angular velocity is clamped to +-max_speed.
#[derive(Clone, Debug)]
pub struct SpinnerParams {
    pub accel_gain: f64,
    pub damping: f64,
    pub dt: f64,
    pub goal_radius: f64,
    pub max_speed: f64,
    pub dist_cost: f64,
    pub external_torque: f64,
}

impl SpinnerParams {
    pub fn new(variant: Variant) -> Self {
        SpinnerParams {
            accel_gain: 4.0,
            damping: 0.1,
            dt: 0.05,
            goal_radius: 0.2,
            max_speed: 8.0,
            dist_cost: 0.05,
            external_torque: if variant == Variant::Target { 1.6 } else { 0.0 },
        }
    }
}

// obs = [cos th, sin th, thdot, cos th_goal, sin th_goal];
// the goal angle is fixed for the whole episode.
pub fn reset(_p: &SpinnerParams, rng: &mut RngStream) -> Vec<f64> {
    use std::f64::consts::PI;
    let th = rng.uniform_in(-PI, PI);
    let goal = rng.uniform_in(-PI, PI);
    vec![th.cos(), th.sin(), 0.0, goal.cos(), goal.sin()]
}

pub fn step(p: &SpinnerParams, obs: &[f64], action: &[f64]) -> StepOut {
    let th = obs[1].atan2(obs[0]);
    let thdot = obs[2];
    let a = clamp1(action[0]);

    let thacc = p.accel_gain * a - p.damping * thdot + p.external_torque;
    let thdot_next = (thdot + p.dt * thacc).clamp(-p.max_speed, p.max_speed);
    let th_next = th + p.dt * thdot_next;

    let dist = wrap_to_pi(th_next - obs[4].atan2(obs[3])).abs();
    let reward = if dist < p.goal_radius { 1.0 } else { -p.dist_cost * dist };
    StepOut {
        obs: vec![th_next.cos(), th_next.sin(), thdot_next, obs[3], obs[4]],
        reward,
        cont: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_and_target_agree_when_torque_is_zeroed() {
        let src = SpinnerParams::new(Variant::Source);
        let mut tgt = SpinnerParams::new(Variant::Target);
        tgt.external_torque = 0.0;
        let obs = [0.6f64.cos(), 0.6f64.sin(), 1.2, 0.0_f64.cos(), 0.0_f64.sin()];
        let a = [0.4];
        let s = step(&src, &obs, &a);
        let t = step(&tgt, &obs, &a);
        assert_eq!(s.obs, t.obs);
        assert_eq!(s.reward.to_bits(), t.reward.to_bits());
    }

    #[test]
    fn external_torque_accelerates_from_rest() {
        let p = SpinnerParams::new(Variant::Target);
        let obs = [1.0, 0.0, 0.0, -1.0, 0.0];
        let out = step(&p, &obs, &[0.0]);
        assert_eq!(out.obs[2], p.external_torque * p.dt);
    }

    #[test]
    fn goal_angle_is_carried_through_unchanged() {
        let p = SpinnerParams::new(Variant::Source);
        let goal = 1.234_f64;
        let obs = [0.5f64.cos(), 0.5f64.sin(), 0.7, goal.cos(), goal.sin()];
        let out = step(&p, &obs, &[0.3]);
        assert_eq!(out.obs[3], goal.cos());
        assert_eq!(out.obs[4], goal.sin());
    }
}
