use redraw::envs::{rollout, EnvId, EnvSpec, Variant};
use redraw::gradcore::{RngStream, StreamId};

#[test]
#[ignore]
fn trace_checkpoint_policy() {
    use redraw::agent::ActMode;
    use redraw::harness::phases::load_policy;
    let path = std::env::var("TRACE_CK").unwrap();
    let lp = load_policy(std::path::Path::new(&path)).unwrap();
    let mut spec = EnvSpec::new(lp.cfg.env, Variant::Source);
    spec.horizon = 200;
    let mut reset_rng = RngStream::new(0, StreamId::Eval);
    let mut act_rng = RngStream::new(0, StreamId::Scratch);
    for ep_i in 0..3 {
        let ep = rollout(&spec, &mut reset_rng, |obs| {
            lp.exploit.act(&lp.model, &lp.store, obs, &mut act_rng, ActMode::Mode).unwrap()
        })
        .unwrap();
        println!("episode {ep_i}: return {:.1}", ep.ret());
        for t in (0..ep.len()).step_by(10) {
            let th = ep.obs[t][1].atan2(ep.obs[t][0]);
            println!(
                "  t={t:3} theta {th:6.2} thdot {:6.2} a {:5.2} r {:.3}",
                ep.obs[t][2], ep.actions[t][0], ep.rewards[t]
            );
        }
    }
}

fn stats(spec: &EnvSpec, seed: u64, n: usize) -> (f64, f64, f64) {
    let mut rng = RngStream::new(seed, StreamId::Eval);
    let mut rets = Vec::new();
    for _ in 0..n {
        let ep = rollout(spec, &mut rng, |obs| spec.scripted_expert(obs)).unwrap();
        rets.push(ep.ret());
    }
    let mean = rets.iter().sum::<f64>() / n as f64;
    let max = rets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rets.iter().cloned().fold(f64::INFINITY, f64::min);
    (mean, max, min)
}

#[test]
fn scan_pendulum_gain() {
    use redraw::envs::KindParams;
    for u in [3.0, 3.5, 4.0, 4.5] {
        for variant in [Variant::Source, Variant::Target] {
            let mut spec = EnvSpec::new(EnvId::Pendulum, variant);
            if let KindParams::Pendulum(p) = &mut spec.kind {
                p.torque_gain = u;
            }
            let (mean, max, min) = stats(&spec, 42, 100);
            println!(
                "pendulum u={u} {:6} mean {mean:8.2} max {max:8.2} min {min:8.2} ratio {:.3}",
                variant.name(),
                mean / max
            );
        }
    }
}

#[test]
fn tune_experts() {
    for id in [EnvId::Pendulum, EnvId::PointMass, EnvId::Spinner] {
        for variant in [Variant::Source, Variant::Target] {
            let spec = EnvSpec::new(id, variant);
            let (mean, max, min) = stats(&spec, 42, 100);
            println!(
                "{:9} {:6}  mean {:8.2}  max {:8.2}  min {:8.2}  ratio {:.3}",
                id.name(),
                variant.name(),
                mean,
                max,
                min,
                mean / max
            );
        }
    }
    // Source expert run raw in the target env (zero-shot failure proxy).
    for id in [EnvId::Pendulum, EnvId::PointMass, EnvId::Spinner] {
        let src = EnvSpec::new(id, Variant::Source);
        let tgt = EnvSpec::new(id, Variant::Target);
        let mut rng = RngStream::new(43, StreamId::Eval);
        let mut rets = Vec::new();
        for _ in 0..100 {
            let ep = rollout(&tgt, &mut rng, |obs| src.scripted_expert(obs)).unwrap();
            rets.push(ep.ret());
        }
        let mean = rets.iter().sum::<f64>() / rets.len() as f64;
        let (tmean, _, _) = stats(&tgt, 42, 100);
        println!(
            "{:9} src-expert-in-target mean {:8.2}  vs target-expert {:8.2}  frac {:.3}",
            id.name(),
            mean,
            tmean,
            mean / tmean
        );
    }
}

#[test]
fn random_policy_band() {
    for id in [EnvId::Pendulum, EnvId::PointMass, EnvId::Spinner] {
        let spec = EnvSpec::new(id, Variant::Source);
        let mut means = Vec::new();
        for seed in 0..5u64 {
            let mut rng = RngStream::new(seed, StreamId::Eval);
            let mut act_rng = RngStream::new(seed, StreamId::Scratch);
            let mut rets = Vec::new();
            for _ in 0..50 {
                let ep = rollout(&spec, &mut rng, |_| {
                    (0..spec.act_dim()).map(|_| act_rng.uniform_in(-1.0, 1.0)).collect()
                })
                .unwrap();
                rets.push(ep.ret());
            }
            means.push(rets.iter().sum::<f64>() / rets.len() as f64);
        }
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("{:9} random means per-seed range [{lo:8.2}, {hi:8.2}]", id.name());
    }
}

#[test]
fn scan_pendulum_damping() {
    use redraw::envs::KindParams;
    for (u, d, vmax) in [
        (6.0, 0.3, 6.0),
        (6.0, 0.5, 6.0),
        (6.0, 0.7, 6.0),
        (5.0, 0.5, 6.0),
        (6.0, 0.5, 5.0),
    ] {
        let mk = |variant| {
            let mut spec = EnvSpec::new(EnvId::Pendulum, variant);
            if let KindParams::Pendulum(p) = &mut spec.kind {
                p.torque_gain = u;
                p.damping = d;
                p.max_speed = vmax;
            }
            spec
        };
        let src = mk(Variant::Source);
        let tgt = mk(Variant::Target);
        let (emean, emax, emin) = stats(&src, 42, 100);

        let mut rng = RngStream::new(43, StreamId::Eval);
        let mut zs = Vec::new();
        for _ in 0..100 {
            let ep = rollout(&tgt, &mut rng, |obs| src.scripted_expert(obs)).unwrap();
            zs.push(ep.ret());
        }
        let zs_mean = zs.iter().sum::<f64>() / zs.len() as f64;

        let mut rr = RngStream::new(5, StreamId::Eval);
        let mut act_rng = RngStream::new(5, StreamId::Scratch);
        let mut rand_rets = Vec::new();
        for _ in 0..100 {
            let ep = rollout(&src, &mut rr, |_| vec![act_rng.uniform_in(-1.0, 1.0)]).unwrap();
            rand_rets.push(ep.ret());
        }
        let rmean = rand_rets.iter().sum::<f64>() / rand_rets.len() as f64;

        println!(
            "u={u} d={d} vmax={vmax}: expert mean {emean:7.2} ratio {:.3} min {emin:7.2} | zero-shot frac {:.3} | random {rmean:7.2} ({:.3} of expert)",
            emean / emax,
            zs_mean / emean,
            rmean / emean
        );
    }
}

#[test]
#[ignore]
fn trace_explorer_coverage() {
    use redraw::agent::ActMode;
    use redraw::explore::Explorer;
    use redraw::harness::phases::load_policy;
    let path = std::env::var("TRACE_CK").unwrap();
    let lp = load_policy(std::path::Path::new(&path)).unwrap();
    let spec = EnvSpec::new(lp.cfg.env, Variant::Source);
    let explorer = Explorer::new(
        lp.model.cfg.latent_dim(),
        spec.act_dim(),
        lp.cfg.explore_config(),
        lp.cfg.ac_config(),
    );
    let mut reset_rng = RngStream::new(11, StreamId::Eval);
    let mut act_rng = RngStream::new(11, StreamId::Scratch);
    for (name, use_explorer) in [("explorer", true), ("exploit", false)] {
        let mut slow_top = 0usize;
        let mut slow = 0usize;
        let mut total = 0usize;
        let mut bins = [0usize; 16];
        for _ in 0..8 {
            let ep = rollout(&spec, &mut reset_rng, |obs| {
                if use_explorer {
                    explorer.ac.act(&lp.model, &lp.store, obs, &mut act_rng, ActMode::Sample).unwrap()
                } else {
                    lp.exploit.act(&lp.model, &lp.store, obs, &mut act_rng, ActMode::Sample).unwrap()
                }
            })
            .unwrap();
            for o in &ep.obs {
                let th = o[1].atan2(o[0]);
                let b = (((th + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 16.0) as usize).min(15);
                bins[b] += 1;
                total += 1;
                if o[2].abs() < 2.0 {
                    slow += 1;
                    if th.abs() < 0.5 {
                        slow_top += 1;
                    }
                }
            }
        }
        let visited = bins.iter().filter(|&&c| c > 0).count();
        println!(
            "{name}: bins visited {visited}/16, slow states {slow}/{total}, slow-near-top {slow_top}"
        );
    }
}
