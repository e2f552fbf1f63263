//! Named parameter and buffer storage, and binding into a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{LayaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Trainable parameters plus non-trainable buffers (running stats),
/// both keyed by dotted names in a stable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    pub params: BTreeMap<String, Param<F>>,
    pub buffers: BTreeMap<String, Tensor<F>>,
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) {
        self.params.insert(name.into(), Param { value, decay });
    }

    pub fn trunc_normal<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], std: f64) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| truncated_normal(rng, std)).collect();
        self.insert(name, Tensor::from_f64(shape.to_vec(), &data).unwrap(), true);
    }

    pub fn uniform<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_f64(shape.to_vec(), &data).unwrap(), true);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()), false);
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape.to_vec()), false);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| LayaError::InvalidArgument(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| LayaError::InvalidArgument(format!("no parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<F>> {
        self.buffers
            .get(name)
            .ok_or_else(|| LayaError::InvalidArgument(format!("no buffer `{name}`")))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Every parameter and buffer under one flat namespace, buffers
    /// prefixed with `buffer:`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> =
            self.params.iter().map(|(k, p)| (k.clone(), &p.value)).collect();
        out.extend(self.buffers.iter().map(|(k, t)| (format!("buffer:{k}"), t)));
        out
    }

    /// Replaces values from a flat map produced by [`Self::named_tensors`];
    /// every existing entry must be present with a matching shape.
    pub fn load_named(&mut self, mut tensors: BTreeMap<String, Tensor<F>>) -> Result<()> {
        for (k, p) in self.params.iter_mut() {
            let t = tensors
                .remove(k)
                .ok_or_else(|| LayaError::Data(format!("checkpoint lacks parameter `{k}`")))?;
            if t.shape() != p.value.shape() {
                return Err(LayaError::Data(format!(
                    "parameter `{k}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        for (k, b) in self.buffers.iter_mut() {
            let key = format!("buffer:{k}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| LayaError::Data(format!("checkpoint lacks buffer `{k}`")))?;
            if t.shape() != b.shape() {
                return Err(LayaError::Data(format!("buffer `{k}` shape mismatch")));
            }
            *b = t;
        }
        if let Some(extra) = tensors.keys().find(|k| !k.starts_with("opt.")) {
            return Err(LayaError::Data(format!("checkpoint has unknown tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Parameters of a store placed into one graph as leaves.
pub struct Bound<'g, F: Real> {
    pub graph: &'g Graph<F>,
    vars: BTreeMap<String, Var>,
}

impl<'g, F: Real> Bound<'g, F> {
    /// `trainable = false` binds constants, skipping gradient bookkeeping.
    pub fn new(graph: &'g Graph<F>, store: &ParamStore<F>, trainable: bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(k, p)| {
                let v = if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { graph, vars }
    }

    /// Binds existing graph leaves, one per store parameter in name
    /// order.
    pub fn from_vars(graph: &'g Graph<F>, store: &ParamStore<F>, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.params.len() {
            return Err(LayaError::InvalidArgument(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.params.len()
            )));
        }
        Ok(Bound {
            graph,
            vars: store.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| LayaError::InvalidArgument(format!("no parameter `{name}` bound")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
