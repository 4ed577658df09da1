use super::{clamp1, wrap_to_pi, PendulumParams, PointMassParams, SpinnerParams};

/// Energy-shaping swing-up with a PD hold near the top. Both stages use
/// feedback linearization against the known plant, then compensate action
/// reversal by negating the output.
pub fn pendulum(p: &PendulumParams, obs: &[f64]) -> Vec<f64> {
    let th = obs[1].atan2(obs[0]);
    let thdot = obs[2];

    let a = if th.cos() > 0.9 && thdot.abs() < 3.0 {
        // Hold: desired thacc = -kp th - kd thdot, solved for the action.
        let desired = -16.0 * th - 5.0 * thdot;
        (desired - p.gravity * th.sin() + p.damping * thdot) / p.torque_gain
    } else {
        // Pump energy toward the upright level E* = gravity.
        let energy = 0.5 * thdot * thdot + p.gravity * th.cos();
        let gap = p.gravity - energy;
        let dir = if thdot.abs() < 1e-6 {
            // Resting: push away from straight down to start the swing.
            if th >= 0.0 { -1.0 } else { 1.0 }
        } else {
            thdot.signum()
        };
        3.0 * gap * dir
    };
    let a = clamp1(a);
    vec![if p.reverse_actions { -a } else { a }]
}

/// Velocity-targeting controller: aim for a speed that can still brake to a
/// stop inside the goal, then track it while cancelling damping and wind.
pub fn pointmass(p: &PointMassParams, obs: &[f64]) -> Vec<f64> {
    let (px, py, vx, vy, gx, gy) = (obs[0], obs[1], obs[2], obs[3], obs[4], obs[5]);
    let (dx, dy) = (gx - px, gy - py);
    let dist = (dx * dx + dy * dy).sqrt();

    let speed_cap = (2.0 * p.accel_gain * dist * 0.8).sqrt();
    let (mut vtx, mut vty) = if dist > 1e-9 {
        (dx / dist * speed_cap, dy / dist * speed_cap)
    } else {
        (0.0, 0.0)
    };
    // Never request a speed a wall would not leave room to brake from.
    let wall_cap = |pos: f64, vt: f64| -> f64 {
        let room = (p.arena_half - 0.35 - pos * vt.signum()).max(0.0);
        let cap = (2.0 * p.accel_gain * room * 0.5).sqrt();
        vt.clamp(-cap, cap)
    };
    vtx = wall_cap(px, vtx);
    vty = wall_cap(py, vty);
    let kv = 4.0;
    let ax = (kv * (vtx - vx) + p.damping * vx - p.wind[0]) / p.accel_gain;
    let ay = (kv * (vty - vy) + p.damping * vy - p.wind[1]) / p.accel_gain;
    vec![clamp1(ax), clamp1(ay)]
}

/// Same velocity-targeting idea on the angle error, cancelling damping and
/// the external torque.
pub fn spinner(p: &SpinnerParams, obs: &[f64]) -> Vec<f64> {
    let th = obs[1].atan2(obs[0]);
    let thdot = obs[2];
    let goal = obs[4].atan2(obs[3]);
    let err = wrap_to_pi(goal - th);

    // Brake budget assumes the worst case: decelerating against the
    // external torque leaves only accel_gain - |torque| of authority.
    let brake = (p.accel_gain - p.external_torque.abs()).max(0.5);
    let speed_cap = (2.0 * brake * err.abs() * 0.85).sqrt();
    let vt = err.signum() * speed_cap;
    let kv = 6.0;
    let a = (kv * (vt - thdot) + p.damping * thdot - p.external_torque) / p.accel_gain;
    vec![clamp1(a)]
}
