//! Arena-backed reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a topological order: parents always precede children. `backward`
//! therefore walks the arena once from the loss node towards index zero.
//! Parameters are bound by reference, so building a graph over a large
//! model costs no copies.

use std::borrow::Cow;

use super::kernels::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc};
use super::{NumError, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    SelectSum {
        x: Var,
        idx: Vec<usize>,
    },
    /// Scalar produced outside the graph together with its gradient with
    /// respect to each parent.
    External {
        parents: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Computation graph whose leaves may borrow parameter storage for `'a`.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf borrowing the tensor's storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// Trainable leaf owning its storage.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("graph nodes hold valid shapes")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let (_, n) = rows_cols(sx);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_bias", sx, sb));
        }
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let shape = sx.to_vec();
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(shape, Cow::Owned(out), Op::AddBias(x, b), ng))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, Cow::Owned(out), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, Cow::Owned(out), Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, Cow::Owned(out), Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, Cow::Owned(out), Op::Exp(x), ng)
    }

    /// Log-softmax over the last axis, stabilised by subtracting the row max.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let (_, n) = rows_cols(self.shape(x));
        let xs = self.value(x);
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite("log_softmax"));
        }
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, Cow::Owned(out), Op::LogSoftmax(x), ng))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain·x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let sx = self.shape(x);
        let (m, d) = rows_cols(sx);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", sx, self.shape(p)));
            }
        }
        let (g, b, xs) = (self.value(gain), self.value(bias), self.value(x));
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for row in xs.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = sx.to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Tq×d`, `k` and `v` are `Tk×d`; each of the `heads` column blocks
    /// attends independently. `mask`, when given, is a row-major `Tq×Tk`
    /// table where `true` marks an allowed position. A query row with no
    /// allowed position is an error.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(shape_err("attention", sq, sk));
        }
        let (tq, d, tk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return Err(NumError::Contract(format!(
                "model width {d} not divisible into {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.len() != tq * tk {
                return Err(shape_err("attention mask", &[tq, tk], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let qi = &qs[i * d..(i + 1) * d][cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if mask.is_some_and(|m| !m[i * tk + j]) {
                        scores[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let s = scale * dot(qi, &ks[j * d..(j + 1) * d][cols.clone()]);
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    return Err(NumError::FullyMasked { row: i });
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut z = 0.0;
                for j in 0..tk {
                    let e = if scores[j] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (scores[j] - max).exp()
                    };
                    p[j] = e;
                    z += e;
                }
                let o = &mut out[i * d..(i + 1) * d][cols.clone()];
                for j in 0..tk {
                    p[j] /= z;
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &vs[j * d..(j + 1) * d][cols.clone()];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov += p[j] * vv;
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![tq, d],
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(shape_err("embedding", st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumError::Contract(format!(
                "embedding index {bad} out of range for {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(NumError::Contract("embedding of an empty id list".into()));
        }
        let tv = self.value(table);
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), ng)
    }

    /// Sum of the elements at the given flat indices.
    pub fn select_sum(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let xs = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs.len()) {
            return Err(NumError::Contract(format!(
                "select index {bad} out of range for {} elements",
                xs.len()
            )));
        }
        let s = idx.iter().map(|&i| xs[i]).sum();
        let ng = self.needs(x);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![s]),
            Op::SelectSum {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Registers a scalar computed outside the graph. `local[i]` holds the
    /// derivative of `value` with respect to every element of `parents[i]`.
    pub fn external(
        &mut self,
        value: f64,
        parents: Vec<Var>,
        local: Vec<Vec<f64>>,
    ) -> Result<Var, NumError> {
        if parents.len() != local.len() {
            return Err(NumError::Contract(
                "external: parent/gradient count mismatch".into(),
            ));
        }
        for (p, l) in parents.iter().zip(&local) {
            if self.value(*p).len() != l.len() {
                return Err(shape_err("external", self.shape(*p), &[l.len()]));
            }
        }
        let ng = parents.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![value]),
            Op::External { parents, local },
            ng,
        ))
    }

    /// Propagates d`loss`/d(node) to every node reachable from `loss`.
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(i, &g, &mut tmp);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot(nodes, tmp, *a) {
                    gemm_bt_acc(g, &nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, tmp, *b) {
                    gemm_at_acc(&nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                let n = nodes[b.0].value.len();
                if let Some(gx) = slot(nodes, tmp, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = slot(nodes, tmp, *b) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, tmp, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, tmp, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, tmp, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, tmp, *a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(nodes[b.0].value.iter()) {
                        *x += y * o;
                    }
                }
                if let Some(gb) = slot(nodes, tmp, *b) {
                    for ((x, y), o) in gb.iter_mut().zip(g).zip(nodes[a.0].value.iter()) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, tmp, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, tmp, *x) {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(node.value.iter()) {
                        if *y > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot(nodes, tmp, *x) {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(node.value.iter()) {
                        *a += b * y;
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (_, n) = rows_cols(&node.shape);
                if let Some(gx) = slot(nodes, tmp, *x) {
                    for ((gr, yr), xr) in
                        g.chunks(n).zip(node.value.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            xr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                if let Some(gx) = slot(nodes, tmp, *x) {
                    let mut gy = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gy[j] = gr[j] * gv[j];
                        }
                        let mean_gy = gy.iter().sum::<f64>() / d as f64;
                        let mean_gyh = dot(&gy, hr) / d as f64;
                        let xr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            xr[j] += is * (gy[j] - mean_gy - hr[j] * mean_gyh);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, tmp, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, tmp, *bias) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, tmp),
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                if let Some(gt) = slot(nodes, tmp, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, tmp, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SelectSum { x, idx } => {
                if let Some(gx) = slot(nodes, tmp, *x) {
                    for &j in idx {
                        gx[j] += g[0];
                    }
                }
            }
            Op::External { parents, local } => {
                for (p, l) in parents.iter().zip(local) {
                    if let Some(gp) = slot(nodes, tmp, *p) {
                        gp.iter_mut().zip(l).for_each(|(a, b)| *a += g[0] * b);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        tmp: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (tq, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
        let tk = nodes[k.0].shape[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let mut gq = vec![0.0; tq * d];
        let mut gk = vec![0.0; tk * d];
        let mut gv = vec![0.0; tk * d];
        let mut dp = vec![0.0; tk];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..tq {
                let go = &g[i * d + c0..i * d + c0 + dh];
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut inner = 0.0;
                for j in 0..tk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(go, &vs[j * d + c0..j * d + c0 + dh]);
                    inner += p[j] * dp[j];
                    let gvj = &mut gv[j * d + c0..j * d + c0 + dh];
                    gvj.iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                }
                for j in 0..tk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = scale * p[j] * (dp[j] - inner);
                    for c in 0..dh {
                        gq[i * d + c0 + c] += ds * ks[j * d + c0 + c];
                        gk[j * d + c0 + c] += ds * qs[i * d + c0 + c];
                    }
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if !nodes[var.0].needs_grad {
                continue;
            }
            let dst = tmp[var.0].get_or_insert_with(|| vec![0.0; grad.len()]);
            dst.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
        }
    }
}

fn slot<'t>(
    nodes: &[Node<'_>],
    tmp: &'t mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'t mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(tmp[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

/// Lower-triangular `n×n` mask: row `i` may attend to columns `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}
