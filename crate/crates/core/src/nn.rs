//! Binding named parameters into a [`Graph`] plus small layer helpers.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::gradcheck::check_gradients;
use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;

/// A graph under construction with lazily bound parameters.
///
/// Entries are looked up across the attached sets in order. A tensor becomes a
/// differentiable leaf only if its set was attached with [`Scope::with`] and
/// the name is trainable there; everything else is a constant.
pub struct Scope<'a> {
    pub g: Graph,
    sources: Vec<(&'a ParameterSet, bool)>,
    bound: HashMap<String, (Var, bool)>,
}

impl Default for Scope<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Scope<'a> {
    pub fn new() -> Self {
        Self {
            g: Graph::new(),
            sources: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn with(mut self, ps: &'a ParameterSet) -> Self {
        self.sources.push((ps, true));
        self
    }

    pub fn with_frozen(mut self, ps: &'a ParameterSet) -> Self {
        self.sources.push((ps, false));
        self
    }

    pub fn has(&self, name: &str) -> bool {
        self.sources.iter().any(|(ps, _)| ps.contains(name))
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some((v, _)) = self.bound.get(name) {
            return Ok(*v);
        }
        let (ps, allow) = self
            .sources
            .iter()
            .find(|(ps, _)| ps.contains(name))
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let t = ps.get(name).unwrap().clone();
        let train = *allow && ps.is_trainable(name);
        let v = if train { self.g.param(t) } else { self.g.constant(t) };
        self.bound.insert(name.to_string(), (v, train));
        Ok(v)
    }

    /// Register an existing graph var under `name`.
    pub fn bind(&mut self, name: &str, v: Var) {
        let train = self.g.requires_grad(v);
        self.bound.insert(name.to_string(), (v, train));
    }

    pub fn opt(&mut self, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.p(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Gradients of every bound trainable parameter that `loss` reaches.
    pub fn grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Gradients = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter(|(_, (_, train))| *train)
            .filter_map(|(name, (v, _))| grads.take(*v).map(|g| (name.clone(), g)))
            .collect())
    }

    pub fn trainable_bound(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .bound
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(n, _)| n.clone())
            .collect();
        v.sort();
        v
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.opt(&format!("{name}.b"))?;
        self.g.conv3d(x, w, b, stride, pad)
    }

    pub fn group_norm(&mut self, name: &str, x: Var, groups: usize) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        self.g.group_norm(x, gamma, beta, groups, 1e-5)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.opt(&format!("{name}.b"))?;
        self.g.linear(x, w, b)
    }
}

/// Finite-difference check of `build` w.r.t. every trainable entry of `ps`.
/// Returns `(name, relative error)` pairs.
pub fn check_param_gradients<F>(
    ps: &ParameterSet,
    extra: &[&ParameterSet],
    eps: f64,
    max_entries: usize,
    build: F,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Scope) -> Result<Var>,
{
    let names: Vec<String> = ps.trainable_names().map(String::from).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    let results = check_gradients(&inputs, eps, max_entries, |g, vars| {
        let mut s = Scope::new().with_frozen(ps);
        for e in extra {
            s = s.with_frozen(e);
        }
        s.g = std::mem::take(g);
        for (n, v) in names.iter().zip(vars) {
            s.bind(n, *v);
        }
        let loss = build(&mut s);
        *g = std::mem::take(&mut s.g);
        loss
    })?;
    Ok(results.into_iter().map(|r| (names[r.input].clone(), r.rel_error)).collect())
}

/// Conv weight `[cout, cin, k, k, k]` with std `gain / sqrt(fan_in)` and zero bias.
pub fn init_conv<R: Rng + ?Sized>(ps: &mut ParameterSet, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut R) {
    let fan_in = (cin * k * k * k) as f64;
    ps.init_normal(&format!("{name}.w"), &[cout, cin, k, k, k], gain / fan_in.sqrt(), rng);
    ps.init_const(&format!("{name}.b"), &[cout], 0.0);
}

pub fn init_zero_conv(ps: &mut ParameterSet, name: &str, cin: usize, cout: usize) {
    ps.init_const(&format!("{name}.w"), &[cout, cin, 1, 1, 1], 0.0);
    ps.init_const(&format!("{name}.b"), &[cout], 0.0);
}

pub fn init_linear<R: Rng + ?Sized>(ps: &mut ParameterSet, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) {
    ps.init_normal(&format!("{name}.w"), &[cout, cin], 1.0 / (cin as f64).sqrt(), rng);
    if bias {
        ps.init_const(&format!("{name}.b"), &[cout], 0.0);
    }
}

pub fn init_group_norm(ps: &mut ParameterSet, name: &str, c: usize) {
    ps.init_const(&format!("{name}.gamma"), &[c], 1.0);
    ps.init_const(&format!("{name}.beta"), &[c], 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn only_trainable_entries_get_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut a = ParameterSet::new();
        init_linear(&mut a, "a", 3, 2, true, &mut rng);
        let a = a.partition(&["a.w"]).unwrap();
        let mut b = ParameterSet::new();
        init_linear(&mut b, "b", 2, 1, false, &mut rng);
        b.train_all();

        let mut s = Scope::new().with(&a).with_frozen(&b);
        let x = s.constant(Tensor::full(&[4, 3], 1.0));
        let h = s.linear("a", x).unwrap();
        let y = s.linear("b", h).unwrap();
        let loss = s.g.sum(y);
        let grads = s.grads(loss).unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["a.w"]);
        assert!(matches!(s.p("missing"), Err(Error::MissingParam(_))));
    }
}
