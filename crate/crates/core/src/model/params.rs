//! Named parameter storage, initialisation and tape binding.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter groups, taken from the first dotted component of a name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Visual,
    Meta,
    Fusion,
    Head,
}

impl Group {
    pub fn of(name: &str) -> Result<Group> {
        match name.split('.').next() {
            Some("visual") => Ok(Group::Visual),
            Some("meta") => Ok(Group::Meta),
            Some("fusion") => Ok(Group::Fusion),
            Some("head") => Ok(Group::Head),
            _ => Err(Error::Contract(format!("parameter `{name}` has no known group"))),
        }
    }

    /// The visual encoder is the backbone; everything else trains at the head rate.
    pub fn is_backbone(self) -> bool {
        self == Group::Visual
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names and little-endian values of one group's parameters.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            if Group::of(name).ok() == Some(group) {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Draws initial values. Projections use Glorot-uniform bounds.
pub struct Init<'a> {
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| u.sample(self.rng))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| n.sample(self.rng))
    }

    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }

    /// `prefix.w: [fan_in, fan_out]`, `prefix.b: [fan_out]` (zeros).
    pub fn linear(&mut self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
        store.insert(format!("{prefix}.w"), self.glorot(fan_in, fan_out));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn layer_norm(&mut self, store: &mut ParamStore, prefix: &str, dim: usize) {
        store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
        store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }
}

/// Parameters recorded on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every parameter; those for which `trainable` is false become
    /// constants and never receive gradients.
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.param(t) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn all_trainable(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::new(tape, store, |_| true)
    }

    pub fn frozen(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::new(tape, store, |_| false)
    }

    /// Binds already-recorded variables, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients by name; parameters the loss never reached get zeros.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn groups_from_names() {
        assert_eq!(Group::of("visual.cls").unwrap(), Group::Visual);
        assert_eq!(Group::of("head.l1.w").unwrap(), Group::Head);
        assert!(Group::of("other.x").is_err());
    }

    #[test]
    fn glorot_respects_bound() {
        let mut rng = rng_for(0, &[]);
        let t = Init { rng: &mut rng }.glorot(10, 20);
        let b = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert_eq!(t.shape(), &[10, 20]);
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut s = ParamStore::new();
        s.insert("visual.a", Tensor::vector(vec![1.0, 2.0]));
        s.insert("head.b", Tensor::vector(vec![3.0]));
        let before = s.group_hash(Group::Visual);
        s.get_mut("head.b").unwrap().data_mut()[0] = 4.0;
        assert_eq!(before, s.group_hash(Group::Visual));
        s.get_mut("visual.a").unwrap().data_mut()[0] = 0.0;
        assert_ne!(before, s.group_hash(Group::Visual));
    }

    #[test]
    fn frozen_binding_yields_no_gradient() {
        let mut s = ParamStore::new();
        s.insert("visual.a", Tensor::vector(vec![1.0, 2.0]));
        s.insert("head.b", Tensor::vector(vec![3.0, 1.0]));
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &s, |n| !n.starts_with("visual"));
        let prod = tape.mul(bound.get("visual.a").unwrap(), bound.get("head.b").unwrap()).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let g = bound.gradients(&tape);
        assert_eq!(g["visual.a"], vec![0.0, 0.0]);
        assert_eq!(g["head.b"], vec![1.0, 2.0]);
    }
}
