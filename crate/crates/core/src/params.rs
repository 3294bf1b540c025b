//! Named parameter tensors tagged frozen or trainable.

use std::collections::BTreeMap;

use metaseg_autodiff::{Gradients, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub tag: Tag,
}

/// Gradient (or any per-tensor update) keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, tag: Tag) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Integrity(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { tensor, tag });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    /// Replaces a tensor's values, keeping its tag. Shapes must agree.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.tag == Tag::Trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.entries.values().filter(|p| p.tag == tag).count()
    }

    /// Number of scalar values carried by tensors with `tag`.
    pub fn numel(&self, tag: Tag) -> usize {
        self.entries
            .values()
            .filter(|p| p.tag == tag)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Adds every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.tensor, p.tag)?;
        }
        Ok(())
    }

    /// Splits into (frozen, trainable). Disjoint and exhaustive by construction.
    pub fn partition(&self) -> (ParamSet, ParamSet) {
        let mut frozen = ParamSet::new();
        let mut trainable = ParamSet::new();
        for (name, p) in &self.entries {
            let dst = match p.tag {
                Tag::Frozen => &mut frozen,
                Tag::Trainable => &mut trainable,
            };
            dst.entries.insert(name.clone(), p.clone());
        }
        (frozen, trainable)
    }

    /// `θ ← θ − lr·g` on trainable tensors. Gradients for frozen tensors are an error.
    pub fn sgd_step(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        self.apply(grads, |w, g| w - lr * g)
    }

    /// Elementwise update `w ← f(w, u)` of every trainable tensor named in `updates`.
    pub fn apply(&mut self, updates: &GradMap, f: impl Fn(f64, f64) -> f64) -> Result<()> {
        for (name, u) in updates {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Lookup(format!("update for unknown parameter `{name}`")))?;
            if p.tag == Tag::Frozen {
                return Err(Error::Integrity(format!("attempted update of frozen `{name}`")));
            }
            if p.tensor.shape() != u.shape() {
                return Err(Error::Integrity(format!(
                    "update for `{name}` has shape {:?}, parameter is {:?}",
                    u.shape(),
                    p.tensor.shape()
                )));
            }
            for (w, &g) in p.tensor.data_mut().iter_mut().zip(u.data()) {
                *w = f(*w, g);
            }
        }
        Ok(())
    }

    /// Digest over names, tags, shapes and value bytes of tensors passing `keep`.
    pub fn hash_where(&self, keep: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| keep(p)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update([p.tag as u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    pub fn frozen_hash(&self) -> String {
        self.hash_where(|p| p.tag == Tag::Frozen)
    }

    /// Places every tensor on `tape`: trainable ones as tracked leaves,
    /// frozen ones as constants. `tangent` attaches dual-number directions
    /// to trainable leaves.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, tangent: Option<&GradMap>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.entries {
            let var = match p.tag {
                Tag::Trainable => tape.leaf(p.tensor.lift(tangent.and_then(|t| t.get(name)))),
                Tag::Frozen => tape.constant(p.tensor.lift(None)),
            };
            vars.insert(name.clone(), (var, p.tag));
        }
        Bound { vars }
    }
}

/// Parameter handles on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, (Var, Tag)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every trainable parameter, mapped through `f`
    /// (`Tensor::to_f64` for values, `Tensor::tangents` for Hessian-vector products).
    pub fn collect<T: Real>(&self, grads: &Gradients<T>, f: impl Fn(&Tensor<T>) -> Tensor) -> GradMap {
        self.vars
            .iter()
            .filter(|(_, (_, tag))| *tag == Tag::Trainable)
            .map(|(name, (v, _))| (name.clone(), f(&grads.get(*v))))
            .collect()
    }
}

/// `a + k·b` over matching keys of two gradient maps.
pub fn axpy(a: &mut GradMap, k: f64, b: &GradMap) -> Result<()> {
    for (name, bt) in b {
        match a.get_mut(name) {
            Some(at) => {
                for (x, &y) in at.data_mut().iter_mut().zip(bt.data()) {
                    *x += k * y;
                }
            }
            None => {
                a.insert(name.clone(), bt.map(|y| k * y));
            }
        }
    }
    Ok(())
}

pub fn grad_norm(g: &GradMap) -> f64 {
    g.values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn ensure_finite(g: &GradMap, stage: &str) -> Result<()> {
    for (name, t) in g {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Tensor(metaseg_autodiff::Error::NonFinite {
                stage: format!("{stage}: gradient of `{name}`"),
            }));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::ones([2, 2]), Tag::Frozen).unwrap();
        p.insert("b", Tensor::zeros([3]), Tag::Trainable).unwrap();
        p
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let p = sample();
        let (f, t) = p.partition();
        assert_eq!(f.len() + t.len(), p.len());
        assert!(f.contains("a") && !f.contains("b"));
        assert!(t.contains("b") && !t.contains("a"));
    }

    #[test]
    fn frozen_updates_are_rejected() {
        let mut p = sample();
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::ones([2, 2]));
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::Integrity(_))));
        assert_eq!(p.tensor("a").unwrap(), &Tensor::ones([2, 2]));
    }

    #[test]
    fn hash_tracks_values_and_tags() {
        let p = sample();
        let mut q = p.clone();
        assert_eq!(p.hash(), q.hash());
        let mut g = GradMap::new();
        g.insert("b".into(), Tensor::ones([3]));
        q.sgd_step(&g, 1.0).unwrap();
        assert_ne!(p.hash(), q.hash());
        assert_eq!(p.frozen_hash(), q.frozen_hash());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = sample();
        assert!(p.insert("a", Tensor::ones([1]), Tag::Trainable).is_err());
    }

    #[test]
    fn bind_tracks_only_trainable() {
        let p = sample();
        let mut tape = Tape::<f64>::new();
        let b = p.bind(&mut tape, None);
        assert!(!tape.is_tracked(b.var("a").unwrap()));
        assert!(tape.is_tracked(b.var("b").unwrap()));
    }
}
