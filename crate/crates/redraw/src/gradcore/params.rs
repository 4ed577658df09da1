use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::gradcore::array::Array;
use crate::gradcore::graph::{Gradients, Graph, NodeId};

/// Named, grouped parameters. Group names ("encoder", "dynamics", "residual",
/// ...) are the unit of freezing: a frozen group binds into graphs without
/// gradient tracking, so updates cannot touch it even in principle.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
    frozen: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Array,
    pub group: String,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: &str, value: Array) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry { value, group: group.to_string() },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn group_of(&self, name: &str) -> Result<&str> {
        self.entries
            .get(name)
            .map(|e| e.group.as_str())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(group.to_string());
        } else {
            self.frozen.remove(group);
        }
    }

    pub fn freeze_all_except(&mut self, trainable: &[&str]) {
        let groups: BTreeSet<String> =
            self.entries.values().map(|e| e.group.clone()).collect();
        for g in groups {
            self.set_frozen(&g, !trainable.contains(&g.as_str()));
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    /// Deterministic name order (BTreeMap iteration).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn group_names(&self) -> BTreeSet<String> {
        self.entries.values().map(|e| e.group.clone()).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Snapshot of one group's raw values, keyed by name. Used by freeze
    /// audits that compare bit patterns before and after training.
    pub fn group_snapshot(&self, group: &str) -> BTreeMap<String, Array> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    pub fn group_bits_eq(&self, group: &str, snapshot: &BTreeMap<String, Array>) -> bool {
        let current = self.group_snapshot(group);
        current.len() == snapshot.len()
            && current
                .iter()
                .all(|(k, v)| snapshot.get(k).is_some_and(|s| s.bits_eq(v)))
    }
}

/// Binds store parameters into a graph as leaves, once each, remembering the
/// mapping so named gradients can be read back after the backward pass.
/// Frozen groups bind without gradient tracking.
pub struct Binder<'s> {
    store: &'s ParameterStore,
    bound: BTreeMap<String, NodeId>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self { store, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn node(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let group = self.store.group_of(name)?;
        let requires_grad = !self.store.is_frozen(group);
        let id = g.leaf(value, requires_grad)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients for every bound trainable parameter. Parameters that did not
    /// receive any contribution get explicit zeros, so optimizer bookkeeping
    /// sees the full set.
    pub fn named_grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Array> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if !g.needs_grad(id) {
                continue;
            }
            let grad = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array::zeros(g.value(id).shape().to_vec()));
            out.insert(name.clone(), grad);
        }
        out
    }

    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.bound.get(name).copied()
    }
}

/// Global L2 norm across all entries; scales everything down when the norm
/// exceeds `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
