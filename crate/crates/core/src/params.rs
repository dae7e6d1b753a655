//! Named parameter tensors, freeze/train partitioning and the Adam optimizer.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};
use wildmatch::WildMatch;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a frozen entry, replacing any previous tensor of that name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.len()
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .keys()
            .filter(|k| !self.trainable.contains(*k))
            .map(String::as_str)
    }

    /// Total scalar count over trainable tensors.
    pub fn trainable_numel(&self) -> usize {
        self.trainable.iter().map(|n| self.entries[n].numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn train_all(&mut self) {
        self.trainable = self.entries.keys().cloned().collect();
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        if !self.contains(name) {
            return Err(Error::MissingParam(name.to_string()));
        }
        if on {
            self.trainable.insert(name.to_string());
        } else {
            self.trainable.remove(name);
        }
        Ok(())
    }

    /// Names matching any glob pattern; a pattern that matches nothing is an error.
    pub fn select(&self, patterns: &[&str]) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for p in patterns {
            let wm = WildMatch::new(p);
            let mut hit = false;
            for name in self.entries.keys() {
                if wm.matches(name) {
                    hit = true;
                    out.insert(name.clone());
                }
            }
            if !hit {
                return Err(Error::EmptyPartition(p.to_string()));
            }
        }
        Ok(out)
    }

    /// Copy with exactly the names matching `patterns` trainable.
    pub fn partition(&self, patterns: &[&str]) -> Result<ParameterSet> {
        let trainable = self.select(patterns)?;
        Ok(Self {
            entries: self.entries.clone(),
            trainable,
        })
    }

    /// Move all entries of `other` in; duplicate names are an error.
    pub fn merge(&mut self, other: ParameterSet) -> Result<()> {
        if let Some(dup) = other.entries.keys().find(|k| self.entries.contains_key(*k)) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {dup:?}")));
        }
        self.trainable.extend(other.trainable);
        self.entries.extend(other.entries);
        Ok(())
    }

    /// Entries whose name starts with `prefix`, trainability preserved.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        let entries: BTreeMap<_, _> = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let trainable = self
            .trainable
            .iter()
            .filter(|k| entries.contains_key(*k))
            .cloned()
            .collect();
        Self { entries, trainable }
    }

    pub fn hash_tensor(name: &str, t: &Tensor) -> String {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), Self::hash_tensor(k, v)))
            .collect()
    }

    pub fn frozen_hashes(&self) -> BTreeMap<String, String> {
        self.frozen_names()
            .map(|k| (k.to_string(), Self::hash_tensor(k, &self.entries[k])))
            .collect()
    }

    /// Error naming the first entry whose hash differs from `before`.
    pub fn verify_hashes(&self, before: &BTreeMap<String, String>) -> Result<()> {
        for (name, h) in before {
            let t = self.require(name)?;
            if &Self::hash_tensor(name, t) != h {
                return Err(Error::FrozenModified(name.clone()));
            }
        }
        Ok(())
    }

    pub(crate) fn init_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub(crate) fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update trainable entries of `params`. Gradients for frozen names are rejected.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in grads.keys() {
            if !params.is_trainable(name) {
                return Err(Error::FrozenModified(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("trainable names exist");
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                pd[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("unet.a.w", Tensor::full(&[2], 1.0));
        ps.insert("unet.b.w", Tensor::full(&[3], 2.0));
        ps.insert("lora.x.a", Tensor::full(&[2], 0.5));
        ps.insert("lora.x.b", Tensor::zeros(&[2]));
        ps
    }

    #[test]
    fn partition_selects_by_glob() {
        let ps = sample().partition(&["lora.*"]).unwrap();
        assert_eq!(ps.trainable_count(), 2);
        assert!(ps.is_trainable("lora.x.b"));
        assert!(!ps.is_trainable("unet.a.w"));
        assert!(matches!(sample().partition(&["control.*"]), Err(Error::EmptyPartition(_))));
    }

    #[test]
    fn adam_leaves_frozen_entries_untouched() {
        let mut ps = sample().partition(&["lora.*"]).unwrap();
        let before = ps.frozen_hashes();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..10 {
            let grads: BTreeMap<_, _> = ps
                .trainable_names()
                .map(|n| (n.to_string(), Tensor::full(&[2], 1.0)))
                .collect();
            opt.step(&mut ps, &grads).unwrap();
        }
        ps.verify_hashes(&before).unwrap();
        assert!(ps.get("lora.x.b").unwrap().data()[0] < -0.5);

        let bad: BTreeMap<_, _> = [("unet.a.w".to_string(), Tensor::full(&[2], 1.0))].into();
        assert!(opt.step(&mut ps, &bad).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = sample();
        ps.set_trainable("unet.a.w", true).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        let grads: BTreeMap<_, _> = [("unet.a.w".to_string(), Tensor::new(&[2], vec![3.0, -0.2]).unwrap())].into();
        opt.step(&mut ps, &grads).unwrap();
        let d = ps.get("unet.a.w").unwrap().data();
        assert!((d[0] - 0.99).abs() < 1e-8 && (d[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn hash_detects_single_bit_change() {
        let mut ps = sample();
        let h = ps.hashes();
        ps.get_mut("unet.b.w").unwrap().data_mut()[1] = f64::from_bits(2.0f64.to_bits() ^ 1);
        assert!(matches!(ps.verify_hashes(&h), Err(Error::FrozenModified(n)) if n == "unet.b.w"));
    }
}
