use super::{clamp1, StepOut, Variant};
use crate::gradcore::RngStream;

/// 2-D point mass pushed toward a goal. Leaving the arena terminates with a
/// penalty. The target variant adds a constant wind acceleration. Velocity
/// components are clamped to +-max_speed.
#[derive(Clone, Debug)]
pub struct PointMassParams {
    pub accel_gain: f64,
    pub damping: f64,
    pub dt: f64,
    pub arena_half: f64,
    pub goal_radius: f64,
    pub max_speed: f64,
    pub dist_cost: f64,
    pub exit_penalty: f64,
    pub wind: [f64; 2],
}

impl PointMassParams {
    pub fn new(variant: Variant) -> Self {
        PointMassParams {
            accel_gain: 3.0,
            damping: 0.1,
            dt: 0.1,
            arena_half: 5.0,
            goal_radius: 0.5,
            max_speed: 10.0,
            dist_cost: 0.05,
            exit_penalty: -10.0,
            wind: if variant == Variant::Target { [1.5, 0.0] } else { [0.0, 0.0] },
        }
    }
}

// obs = [px, py, vx, vy, gx, gy]
pub fn reset(p: &PointMassParams, rng: &mut RngStream) -> Vec<f64> {
    let gx = rng.uniform_in(-p.arena_half, p.arena_half);
    let gy = rng.uniform_in(-p.arena_half, p.arena_half);
    vec![0.0, 0.0, 0.0, 0.0, gx, gy]
}

pub fn step(p: &PointMassParams, obs: &[f64], action: &[f64]) -> StepOut {
    let (px, py, vx, vy, gx, gy) = (obs[0], obs[1], obs[2], obs[3], obs[4], obs[5]);
    let ax = clamp1(action[0]);
    let ay = clamp1(action[1]);

    let accx = p.accel_gain * ax - p.damping * vx + p.wind[0];
    let accy = p.accel_gain * ay - p.damping * vy + p.wind[1];
    let vx_next = (vx + p.dt * accx).clamp(-p.max_speed, p.max_speed);
    let vy_next = (vy + p.dt * accy).clamp(-p.max_speed, p.max_speed);
    let px_next = px + p.dt * vx_next;
    let py_next = py + p.dt * vy_next;

    let obs_next = vec![px_next, py_next, vx_next, vy_next, gx, gy];
    if px_next.abs() > p.arena_half || py_next.abs() > p.arena_half {
        return StepOut { obs: obs_next, reward: p.exit_penalty, cont: false };
    }
    let dist = ((px_next - gx).powi(2) + (py_next - gy).powi(2)).sqrt();
    let reward = if dist < p.goal_radius { 1.0 } else { -p.dist_cost * dist };
    StepOut { obs: obs_next, reward, cont: true }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wind_alone_sets_velocity_to_w_dt_on_first_step() {
        // From rest with zero action there is nothing to damp, so one
        // velocity-first Euler step gives v = w * dt exactly.
        let p = PointMassParams::new(Variant::Target);
        let obs = [0.0, 0.0, 0.0, 0.0, 3.0, 3.0];
        let out = step(&p, &obs, &[0.0, 0.0]);
        assert_eq!(out.obs[2], p.wind[0] * p.dt);
        assert_eq!(out.obs[3], p.wind[1] * p.dt);
        assert_eq!(out.obs[0], p.wind[0] * p.dt * p.dt);
    }

    #[test]
    fn source_and_target_agree_when_wind_is_zeroed() {
        let src = PointMassParams::new(Variant::Source);
        let mut tgt = PointMassParams::new(Variant::Target);
        tgt.wind = [0.0, 0.0];
        let obs = [1.0, -2.0, 0.5, 0.3, 4.0, 4.0];
        let a = [0.7, -0.2];
        let s = step(&src, &obs, &a);
        let t = step(&tgt, &obs, &a);
        assert_eq!(s.obs, t.obs);
        assert_eq!(s.reward.to_bits(), t.reward.to_bits());
        assert_eq!(s.cont, t.cont);
    }

    #[test]
    fn leaving_the_arena_terminates_with_penalty() {
        let p = PointMassParams::new(Variant::Source);
        let obs = [4.99, 0.0, 9.0, 0.0, -4.0, 0.0];
        let out = step(&p, &obs, &[1.0, 0.0]);
        assert!(!out.cont);
        assert_eq!(out.reward, p.exit_penalty);
    }

    #[test]
    fn goal_reward_inside_radius() {
        let p = PointMassParams::new(Variant::Source);
        let obs = [2.0, 2.0, 0.0, 0.0, 2.0, 2.0];
        let out = step(&p, &obs, &[0.0, 0.0]);
        assert_eq!(out.reward, 1.0);
    }
}
