//! Named parameter storage, trainability groups and the per-forward binding context.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{HiveError, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Projector,
    BridgeXattn,
    Llm,
    ClassifierHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::BridgeXattn,
        ParamGroup::Llm,
        ParamGroup::ClassifierHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projector => "projector",
            ParamGroup::BridgeXattn => "bridge_xattn",
            ParamGroup::Llm => "llm",
            ParamGroup::ClassifierHead => "classifier_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s)
    }

    /// Group implied by a parameter name's first path segment.
    pub fn of_name(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "encoder" => Some(ParamGroup::Encoder),
            "projector" => Some(ParamGroup::Projector),
            "xattn" => Some(ParamGroup::BridgeXattn),
            "llm" => Some(ParamGroup::Llm),
            "classifier" => Some(ParamGroup::ClassifierHead),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    trainable: BTreeSet<ParamGroup>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            trainable: ParamGroup::ALL.into_iter().collect(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) -> Result<()> {
        if ParamGroup::of_name(name).is_none() {
            return Err(HiveError::Lookup(format!("parameter {name} has no group prefix")));
        }
        self.precision.round_slice(t.data_mut());
        t.requires_grad = false;
        t.zero_grad();
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| HiveError::Lookup(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| HiveError::Lookup(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn group_of(&self, name: &str) -> ParamGroup {
        ParamGroup::of_name(name).expect("validated on insert")
    }

    pub fn set_trainable(&mut self, groups: &BTreeSet<ParamGroup>) {
        self.trainable = groups.clone();
    }

    pub fn trainable_groups(&self) -> &BTreeSet<ParamGroup> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(&self.group_of(name))
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.group_of(n) == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Snapshot of every parameter of `group`, for freeze checks.
    pub fn snapshot(&self, group: ParamGroup) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter(|(n, _)| self.group_of(n) == group)
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect()
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.params.retain(|n, _| ParamGroup::of_name(n) != Some(group));
    }
}

/// Deterministic parameter initializer.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub std: f64,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// One forward/backward's view of a [`ParamStore`]: parameters are bound to
/// tape leaves on first use and gradients are read back after backward.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    track_all: bool,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Ctx {
            tape: Tape::new(store.precision()),
            store,
            bound: BTreeMap::new(),
            track_all: false,
        }
    }

    /// Every parameter requires grad regardless of the store's trainable set.
    pub fn tracking_all(mut self) -> Self {
        self.track_all = true;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.tape = Tape::new(p);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = if self.track_all || self.store.is_trainable(name) {
            self.tape.leaf(&t.clone().with_grad())
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter; untouched ones are absent.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.tape.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_from_names() {
        assert_eq!(ParamGroup::of_name("encoder.blocks.0.fc1.w"), Some(ParamGroup::Encoder));
        assert_eq!(ParamGroup::of_name("xattn.1.gate"), Some(ParamGroup::BridgeXattn));
        assert_eq!(ParamGroup::of_name("bogus.w"), None);
        let mut s = ParamStore::new(Precision::High);
        assert!(s.insert("bogus.w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::new(Precision::High);
        s.insert("encoder.w", Tensor::filled(&[2], 1.0)).unwrap();
        s.insert("llm.w", Tensor::filled(&[2], 2.0)).unwrap();
        s.set_trainable(&[ParamGroup::Llm].into_iter().collect());
        let mut ctx = Ctx::new(&s);
        let e = ctx.param("encoder.w").unwrap();
        let l = ctx.param("llm.w").unwrap();
        assert!(!ctx.tape.requires_grad(e));
        assert!(ctx.tape.requires_grad(l));
        assert_eq!(ctx.param("llm.w").unwrap(), l);
    }
}
