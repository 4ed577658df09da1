use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::array::Array;
use crate::gradcore::params::ParameterStore;

/// Adam with bias correction. One instance per loss head; moments are keyed
/// by parameter name so they can be checkpointed next to the parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Rejects the whole batch of gradients if any entry
    /// is non-finite, leaving parameters and moments untouched. Gradients for
    /// frozen groups are refused outright: their presence means the caller's
    /// graph wiring is wrong.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Array>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NanGradient { name: name.clone() });
            }
            let group = store.group_of(name)?;
            if store.is_frozen(group) {
                return Err(Error::Checkpoint(format!(
                    "gradient supplied for frozen parameter {name}"
                )));
            }
            if store.get(name)?.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: {:?} vs {:?}", store.get(name)?.shape(), g.shape()),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let theta = store.get_mut(name)?;
            let (md, vd, td) = (m.data_mut(), v.data_mut(), theta.data_mut());
            for i in 0..g.numel() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                td[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Serializes moments and the step counter as named arrays under
    /// `prefix`, for embedding in a checkpoint.
    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Array)> {
        let mut out = vec![(
            format!("{prefix}/step_count"),
            Array::scalar(self.step_count as f64),
        )];
        for (name, m) in &self.m {
            out.push((format!("{prefix}/m/{name}"), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("{prefix}/v/{name}"), v.clone()));
        }
        out
    }

    pub fn restore_entries(&mut self, prefix: &str, entries: &BTreeMap<String, Array>) {
        let mp = format!("{prefix}/m/");
        let vp = format!("{prefix}/v/");
        if let Some(sc) = entries.get(&format!("{prefix}/step_count")) {
            self.step_count = sc.item() as u64;
        }
        for (name, arr) in entries {
            if let Some(stripped) = name.strip_prefix(&mp) {
                self.m.insert(stripped.to_string(), arr.clone());
            } else if let Some(stripped) = name.strip_prefix(&vp) {
                self.v.insert(stripped.to_string(), arr.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With g = 1: m-hat = 1, v-hat = 1, so the step is lr / (1 + eps).
        let mut store = ParameterStore::new();
        store
            .insert("w", "test", Array::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::new(vec![1], vec![1.0]).unwrap());
        opt.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().item();
        assert!((w - (0.5 - 0.1)).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_aborts_without_side_effects() {
        let mut store = ParameterStore::new();
        store
            .insert("w", "test", Array::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        let before = store.get("w").unwrap().clone();
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::new(vec![1], vec![f64::NAN]).unwrap());
        assert!(opt.step(&mut store, &grads).is_err());
        assert!(store.get("w").unwrap().bits_eq(&before));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_group_gradient_is_refused() {
        let mut store = ParameterStore::new();
        store
            .insert("w", "frozen_grp", Array::new(vec![1], vec![0.5]).unwrap())
            .unwrap();
        store.set_frozen("frozen_grp", true);
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::new(vec![1], vec![1.0]).unwrap());
        assert!(opt.step(&mut store, &grads).is_err());
    }
}
