//! Reverse-mode autodiff over a per-step operation tape.
//!
//! A [`Graph`] owns every intermediate tensor of one forward pass. Model
//! parameters are imported with [`Graph::param`], which snapshots the value
//! and remembers the binding; after [`Graph::backward`] the accumulated
//! gradients are written back to trainable parameters only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::param::ParamRegistry;
use crate::tensor::{mm, transpose, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Loss reduction over contributing rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    SoftmaxRows { x: usize },
    Embedding { table: usize, ids: Vec<u32> },
    SelectRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, from: usize, to: usize },
    ConcatCols { parts: Vec<usize> },
    Dropout { x: usize, mask: Vec<T> },
    Sum { x: usize },
    Mean { x: usize },
    CrossEntropy { logits: usize, probs: Vec<T>, targets: Vec<u32>, ignore: u32, count: usize, reduction: Reduction },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(usize, String)>,
    bound: HashMap<String, usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite tensor produced by graph op");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf that merely carries data (attention constants, frozen inputs).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Import a named parameter as a leaf, snapshotting its current value.
    /// Importing the same name twice returns the same node, which is what
    /// makes weight tying a single-parameter affair.
    pub fn param(&mut self, reg: &ParamRegistry<T>, name: &str) -> Result<Var> {
        if let Some(&idx) = self.bound.get(name) {
            return Ok(Var(idx));
        }
        let p = reg
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
        let var = self.push(p.value.clone(), Op::Leaf);
        self.bound.insert(name.to_string(), var.0);
        self.bindings.push((var.0, name.to_string()));
        Ok(var)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape { op: "add", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.shape().len() != 2 || tb.shape() != [tx.cols()] {
            return Err(Error::Shape { op: "add_bias", lhs: tx.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape { op: "mul", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { x: x.0, c })
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape { op: "matmul", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = mm(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the tied-projection and attention-score shape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::Shape { op: "matmul_nt", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let bt = transpose(tb.data(), n, k);
        let data = mm(ta.data(), &bt, m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatmulNT { a: a.0, b: b.0 }))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { x: x.0 })
    }

    /// Per-row layer normalization then affine: `gamma ∘ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tx.shape().len() != 2 {
            return Err(Error::Shape { op: "layer_norm", lhs: tx.shape().to_vec(), rhs: vec![] });
        }
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Shape { op: "layer_norm", lhs: tx.shape().to_vec(), rhs: tg.shape().to_vec() });
        }
        let n = tx.rows();
        let inv_d = T::ONE / T::from_f64(d as f64);
        let mut out = vec![T::ZERO; n * d];
        let mut xhat = vec![T::ZERO; n * d];
        let mut rstd = vec![T::ZERO; n];
        for i in 0..n {
            let row = tx.row(i);
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }))
    }

    /// Row-wise softmax (numerically stabilized).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(Error::Shape { op: "softmax_rows", lhs: tx.shape().to_vec(), rhs: vec![] });
        }
        let (n, d) = (tx.rows(), tx.cols());
        let mut out = vec![T::ZERO; n * d];
        for i in 0..n {
            let row = tx.row(i);
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[i * d + j] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for v in &mut out[i * d..(i + 1) * d] {
                *v = *v * inv;
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(t, Op::SoftmaxRows { x: x.0 }))
    }

    /// Gather rows of an embedding table by token id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if tt.shape().len() != 2 {
            return Err(Error::Shape { op: "embedding", lhs: tt.shape().to_vec(), rhs: vec![] });
        }
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::State(format!("token id {bad} out of range for vocab of {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tt.row(id as usize));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }))
    }

    /// Gather a subset of rows by index (MLM positions, CLS pooling).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(Error::Shape { op: "select_rows", lhs: tx.shape().to_vec(), rhs: vec![] });
        }
        let (n, d) = (tx.rows(), tx.cols());
        if idx.is_empty() {
            return Err(Error::State("select_rows: empty position list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::State(format!("row index {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(t, Op::SelectRows { x: x.0, idx: idx.to_vec() }))
    }

    /// Column range `from..to` of a matrix (per-head views).
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 || to > tx.cols() || from >= to {
            return Err(Error::Shape { op: "slice_cols", lhs: tx.shape().to_vec(), rhs: vec![from, to] });
        }
        let (n, d) = (tx.rows(), tx.cols());
        let w = to - from;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&tx.data()[i * d + from..i * d + to]);
        }
        let t = Tensor::new(vec![n, w], data)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, from, to }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::State("concat_cols: no parts".into()));
        }
        let n = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.shape().len() != 2 || tp.rows() != n {
                return Err(Error::Shape { op: "concat_cols", lhs: vec![n], rhs: tp.shape().to_vec() });
            }
            total += tp.cols();
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let t = Tensor::new(vec![n, total], data)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() }))
    }

    /// Inverted dropout with an externally supplied RNG stream. `rate` must
    /// be in `[0, 1)`; at 0 this is the identity (no node inserted).
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Var {
        if rate == 0.0 {
            return x;
        }
        assert!((0.0..1.0).contains(&rate), "dropout rate out of range");
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let tx = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep_scale })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x: x.0, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let mut s = T::ZERO;
        for &v in tx.data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let inv = T::ONE / T::from_f64(tx.numel() as f64);
        let mut s = T::ZERO;
        for &v in tx.data() {
            s += v;
        }
        self.push(Tensor::scalar(s * inv), Op::Mean { x: x.0 })
    }

    /// Softmax cross-entropy over rows of `logits[n×V]`, skipping positions
    /// whose target equals `ignore`. Mean divides by the number of
    /// contributing rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32, reduction: Reduction) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape().len() != 2 || tl.rows() != targets.len() {
            return Err(Error::Shape { op: "cross_entropy", lhs: tl.shape().to_vec(), rhs: vec![targets.len()] });
        }
        let (n, v) = (tl.rows(), tl.cols());
        for &t in targets {
            if t != ignore && t as usize >= v {
                return Err(Error::State(format!("target class {t} out of range for {v} classes")));
            }
        }
        let mut probs = vec![T::ZERO; n * v];
        let mut nll = T::ZERO;
        let mut count = 0usize;
        for i in 0..n {
            if targets[i] == ignore {
                continue;
            }
            count += 1;
            let row = tl.row(i);
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut sum = T::ZERO;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for p in &mut probs[i * v..(i + 1) * v] {
                *p = *p * inv;
            }
            let lse = mx + sum.ln();
            nll += lse - row[targets[i] as usize];
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = match reduction {
            Reduction::Mean => nll / T::from_f64(count as f64),
            Reduction::Sum => nll,
        };
        let t = Tensor::scalar(value);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits: logits.0, probs, targets: targets.to_vec(), ignore, count, reduction },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate gradients of everything reachable from a scalar root.
    /// Repeat calls re-derive node gradients from scratch; accumulation
    /// across steps happens at the parameter level.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::State(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::ONE]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("grad shape")))
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize, f: impl FnOnce(&mut [T])) {
            let slot = grads[idx].get_or_insert_with(|| vec![T::ZERO; len]);
            f(slot);
        }

        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    acc(grads, *p, g.len(), |s| {
                        for (sv, &gv) in s.iter_mut().zip(g) {
                            *sv += gv;
                        }
                    });
                }
            }
            Op::AddBias { x, bias } => {
                let d = self.nodes[*bias].value.numel();
                acc(grads, *x, g.len(), |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv += gv;
                    }
                });
                acc(grads, *bias, d, |s| {
                    for row in g.chunks(d) {
                        for (sv, &gv) in s.iter_mut().zip(row) {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(grads, *a, va.len(), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(grads, *b, vb.len(), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(grads, *x, g.len(), |s| {
                    for (sv, &gv) in s.iter_mut().zip(g) {
                        *sv += gv * *c;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let bt = transpose(tb.data(), k, n);
                let da = mm(g, &bt, m, n, k);
                acc(grads, *a, m * k, |s| {
                    for (sv, dv) in s.iter_mut().zip(da) {
                        *sv += dv;
                    }
                });
                let at = transpose(ta.data(), m, k);
                let db = mm(&at, g, k, m, n);
                acc(grads, *b, k * n, |s| {
                    for (sv, dv) in s.iter_mut().zip(db) {
                        *sv += dv;
                    }
                });
            }
            Op::MatmulNT { a, b } => {
                // c[m×n] = a[m×k] · b[n×k]ᵀ
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let da = mm(g, tb.data(), m, n, k);
                acc(grads, *a, m * k, |s| {
                    for (sv, dv) in s.iter_mut().zip(da) {
                        *sv += dv;
                    }
                });
                let gt = transpose(g, m, n);
                let db = mm(&gt, ta.data(), n, m, k);
                acc(grads, *b, n * k, |s| {
                    for (sv, dv) in s.iter_mut().zip(db) {
                        *sv += dv;
                    }
                });
            }
            Op::Gelu { x } => {
                let vx = self.nodes[*x].value.data();
                acc(grads, *x, vx.len(), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * gelu_bwd(vx[k]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[*gamma].value.numel();
                let n = rstd.len();
                let vgamma = self.nodes[*gamma].value.data();
                acc(grads, *gamma, d, |s| {
                    for i in 0..n {
                        for j in 0..d {
                            s[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(grads, *beta, d, |s| {
                    for i in 0..n {
                        for j in 0..d {
                            s[j] += g[i * d + j];
                        }
                    }
                });
                let inv_d = T::ONE / T::from_f64(d as f64);
                acc(grads, *x, n * d, |s| {
                    for i in 0..n {
                        let mut mean_dxhat = T::ZERO;
                        let mut mean_dxhat_xhat = T::ZERO;
                        for j in 0..d {
                            let dxh = g[i * d + j] * vgamma[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * d + j];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let dxh = g[i * d + j] * vgamma[j];
                            s[i * d + j] += rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let val = node.value.data();
                let (n, d) = (node.value.rows(), node.value.cols());
                acc(grads, *x, n * d, |s| {
                    for i in 0..n {
                        let mut dot = T::ZERO;
                        for j in 0..d {
                            dot += g[i * d + j] * val[i * d + j];
                        }
                        for j in 0..d {
                            s[i * d + j] += val[i * d + j] * (g[i * d + j] - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.cols();
                let len = self.nodes[*table].value.numel();
                acc(grads, *table, len, |s| {
                    for (pos, &id) in ids.iter().enumerate() {
                        let dst = &mut s[id as usize * d..(id as usize + 1) * d];
                        let src = &g[pos * d..(pos + 1) * d];
                        for (sv, &gv) in dst.iter_mut().zip(src) {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let d = self.nodes[*x].value.cols();
                let len = self.nodes[*x].value.numel();
                acc(grads, *x, len, |s| {
                    for (pos, &i) in idx.iter().enumerate() {
                        let dst = &mut s[i * d..(i + 1) * d];
                        let src = &g[pos * d..(pos + 1) * d];
                        for (sv, &gv) in dst.iter_mut().zip(src) {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::SliceCols { x, from, to } => {
                let d = self.nodes[*x].value.cols();
                let n = self.nodes[*x].value.rows();
                let w = to - from;
                acc(grads, *x, n * d, |s| {
                    for i in 0..n {
                        for j in 0..w {
                            s[i * d + from + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0usize;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    let len = self.nodes[p].value.numel();
                    acc(grads, p, len, |s| {
                        for i in 0..n {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, mask.len(), |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * mask[k];
                    }
                });
            }
            Op::Sum { x } => {
                let len = self.nodes[*x].value.numel();
                acc(grads, *x, len, |s| {
                    for sv in s.iter_mut() {
                        *sv += g[0];
                    }
                });
            }
            Op::Mean { x } => {
                let len = self.nodes[*x].value.numel();
                let inv = T::ONE / T::from_f64(len as f64);
                acc(grads, *x, len, |s| {
                    for sv in s.iter_mut() {
                        *sv += g[0] * inv;
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets, ignore, count, reduction } => {
                let v = self.nodes[*logits].value.cols();
                let w = match reduction {
                    Reduction::Mean => g[0] / T::from_f64(*count as f64),
                    Reduction::Sum => g[0],
                };
                let len = self.nodes[*logits].value.numel();
                acc(grads, *logits, len, |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            let indicator = if j == t as usize { T::ONE } else { T::ZERO };
                            s[i * v + j] += w * (probs[i * v + j] - indicator);
                        }
                    }
                });
            }
        }
    }

    /// Add this graph's parameter gradients into the registry, honoring the
    /// trainable flag. Call after `backward`.
    pub fn accumulate_param_grads(&self, reg: &mut ParamRegistry<T>) {
        for (node, name) in &self.bindings {
            if let Some(Some(g)) = self.grads.get(*node) {
                let p = reg.get_mut(name).expect("bound parameter exists");
                if p.trainable {
                    for (pv, &gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *pv += gv;
                    }
                }
            }
        }
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::ONE + three * k * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}
