//! Named parameter storage and the Transformer building blocks shared by
//! the encoder and decoder.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::numcore::{uniform_init, Graph, NumError, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store, matching [`ParamStore::grads`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g` as a trainable leaf borrowing this store.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Per-parameter gradients accumulated in `g`; zeros where none flowed.
    pub fn grads(&self, g: &Graph<'_>, bound: &Bound) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| match g.grad(v) {
                Some(gr) => Tensor::new(t.shape().to_vec(), gr.to_vec()).expect("same shape"),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Handles for graph nodes standing in for the store's parameters, in
    /// store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(rng, &[d_in, d_out], d_in),
            ),
            bias: store.add(format!("{name}.bias"), uniform_init(rng, &[d_out], d_in)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Result<Var, NumError> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_bias(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Result<Var, NumError> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d, d),
            key: Linear::new(store, rng, &format!("{name}.key"), d, d),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        x: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumError> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, memory)?;
        let v = self.value.forward(g, p, memory)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, p, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d, hidden),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Result<Var, NumError> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.relu(h);
        self.outer.forward(g, p, h)
    }
}

/// `T×d` sinusoidal position table.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe.data_mut()[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe.data_mut()[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}
