//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its vector-Jacobian product. [`Tape::backward`] walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because inputs are always created before the nodes that consume them.
//!
//! Numerically sensitive forms:
//! - softmax: `y = exp(x - max x) / sum exp(x - max x)`
//! - log-softmax: `y = x - max x - ln(sum exp(x - max x))`
//! - softplus: `max(x, 0) + ln_1p(exp(-|x|))`
//! - sigmoid: `1 / (1 + exp(-x))` for `x >= 0`, `exp(x) / (1 + exp(x))` otherwise

use crate::error::{Error, Result};
use crate::tensor::{axis_split, matmul_into, transpose_raw, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var, cols: usize },
    ScaleRows { x: Var, s: Var, cols: usize },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, n: usize, inner: usize },
    Sum(Var),
    MeanAxis { x: Var, outer: usize, n: usize, inner: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    IndexSelect { x: Var, indices: Vec<usize>, outer: usize, n: usize, inner: usize },
    Reshape(Var),
    L2Normalize { x: Var, cols: usize, norms: Vec<f64> },
    Mask { x: Var, keep: Vec<bool> },
    RowNormalize { x: Var, cols: usize, sums: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of a computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `mark` (a previous [`Tape::len`]).
    /// Vars created after the mark must not be used again.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Registers a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_raw(t.with_requires_grad(false), Op::Leaf, rg)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("transpose")?;
        let data = transpose_raw(self.data(x), rows, cols);
        let t = Tensor::matrix(cols, rows, data)?;
        Ok(self.push(t, Op::Transpose { x, rows, cols }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Elementwise

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2("add_row")?;
        let r = self.value(row);
        let is_row = match r.shape() {
            [n] => *n == cols,
            [1, n] => *n == cols,
            _ => false,
        };
        if !is_row {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { x, row, cols }, &[x, row]))
    }

    /// Multiplies row `i` of an `m×n` matrix by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("scale_rows")?;
        if self.value(s).numel() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s);
        let data = self
            .data(x)
            .chunks(cols)
            .zip(sv)
            .flat_map(|(xs, &f)| xs.iter().map(move |a| a * f))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows { x, s, cols }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::numeric("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `max(x, floor)` elementwise; gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| if v > floor { v } else { floor })
    }

    // ---------------------------------------------------------------------
    // Reductions

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(op, shape, &[axis]));
        }
        Ok(axis_split(shape, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", x, axis)?;
        let src = self.data(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("log_softmax", x, axis)?;
        let src = self.data(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("log_softmax", "non-finite input"));
        }
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..n).map(|j| (src[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] = src[idx(j)] - max - lse;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax { x, outer, n, inner }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("mean_axis", x, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, outer, n, inner }, &[x]))
    }

    /// Maximum along `axis` (first index wins on ties); the axis is removed.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("max_axis", x, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MaxAxis { x, argmax }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Structural

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push((p, s[axis]));
        }
        let total: usize = lens.iter().map(|(_, l)| l).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &lens {
                let src = self.data(p);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: lens, outer, inner }, parts))
    }

    /// Gathers the given positions along `axis` (rows for axis 0 of a matrix).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("index_select", x, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("index_select", self.shape(x), &[bad]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                out.extend_from_slice(&src[(o * n + j) * inner..(o * n + j + 1) * inner]);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = indices.len();
        let t = Tensor::new(shape, out)?;
        let op = Op::IndexSelect {
            x,
            indices: indices.to_vec(),
            outer,
            n,
            inner,
        };
        Ok(self.push(t, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(cols.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::numeric("l2_normalize", "zero or non-finite row norm"));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::L2Normalize { x, cols, norms }, &[x]))
    }

    /// Keeps the `k` largest entries of each matrix row and zeroes the rest.
    /// Ties go to the lower column index. Gradient flows to kept entries only.
    pub fn top_k_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("top_k_rows")?;
        if k == 0 {
            return Err(Error::Contract("top_k_rows requires k >= 1".into()));
        }
        let src = self.data(x);
        let mut keep = vec![false; rows * cols];
        let mut order: Vec<usize> = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            order.clear();
            order.extend(0..cols);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &c in order.iter().take(k) {
                keep[r * cols + c] = true;
            }
        }
        let data = src
            .iter()
            .zip(&keep)
            .map(|(&v, &kp)| if kp { v } else { 0.0 })
            .collect();
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(t, Op::Mask { x, keep }, &[x]))
    }

    /// Applies a fixed 0/1 mask elementwise.
    pub fn mask(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("mask", self.shape(x), &[keep.len()]));
        }
        let data = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &kp)| if kp { v } else { 0.0 })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Mask { x, keep }, &[x]))
    }

    /// Divides each row of a non-negative matrix by its sum; all-zero rows
    /// stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("row_normalize")?;
        let src = self.data(x);
        if let Some(bad) = src.iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Contract(format!("row_normalize got negative entry {bad}")));
        }
        let mut sums = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in src.chunks(cols.max(1)) {
            let s: f64 = row.iter().sum();
            sums.push(s);
            if s > 0.0 {
                out.extend(row.iter().map(|v| v / s));
            } else {
                out.extend(std::iter::repeat_n(0.0, cols));
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::RowNormalize { x, cols, sums }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Accumulates d(root)/d(leaf) into every reachable leaf that requires
    /// gradients. Repeated calls add to the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Backward pass from arbitrary output gradients.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; top + 1];
        for (v, g) in seeds {
            if g.len() != self.value(*v).numel() {
                return Err(Error::shape("backward", self.shape(*v), &[g.len()]));
            }
            accumulate(&mut grads, &self.nodes, *v, g.clone());
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = nodes[i].value.data();
        let d = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, nodes, v, contrib);
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                if nodes[a.0].requires_grad {
                    let bt = transpose_raw(d(b), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    acc(a, ga);
                }
                if nodes[b.0].requires_grad {
                    let at = transpose_raw(d(a), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    acc(b, gb);
                }
            }
            &Op::Transpose { x, rows, cols } => acc(x, transpose_raw(g, cols, rows)),
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                acc(a, g.iter().zip(d(b)).map(|(g, y)| g * y).collect());
                acc(b, g.iter().zip(d(a)).map(|(g, x)| g * x).collect());
            }
            &Op::AddRow { x, row, cols } => {
                acc(x, g.to_vec());
                let mut gr = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                acc(row, gr);
            }
            &Op::ScaleRows { x, s, cols } => {
                let sv = d(s);
                let gx = g
                    .chunks(cols)
                    .zip(sv)
                    .flat_map(|(gs, &f)| gs.iter().map(move |v| v * f))
                    .collect();
                acc(x, gx);
                let gs = g
                    .chunks(cols)
                    .zip(d(x).chunks(cols))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                acc(s, gs);
            }
            &Op::Scale(x, c) => acc(x, g.iter().map(|v| v * c).collect()),
            &Op::AddScalar(x) => acc(x, g.to_vec()),
            &Op::Exp(x) => acc(x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            &Op::Log(x) => acc(x, g.iter().zip(d(x)).map(|(g, x)| g / x).collect()),
            &Op::Sigmoid(x) => acc(x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            &Op::Softplus(x) => acc(x, g.iter().zip(d(x)).map(|(g, &x)| g * sigmoid(x)).collect()),
            &Op::Relu(x) => acc(
                x,
                g.iter()
                    .zip(d(x))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            &Op::ClampMin(x, floor) => acc(
                x,
                g.iter()
                    .zip(d(x))
                    .map(|(&g, &x)| if x > floor { g } else { 0.0 })
                    .collect(),
            ),
            &Op::Softmax { x, outer, n, inner } => {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(x, gx);
            }
            &Op::LogSoftmax { x, outer, n, inner } => {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                acc(x, gx);
            }
            &Op::Sum(x) => acc(x, vec![g[0]; nodes[x.0].value.numel()]),
            &Op::MeanAxis { x, outer, n, inner } => {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                acc(x, gx);
            }
            Op::MaxAxis { x, argmax } => {
                let mut gx = vec![0.0; nodes[x.0].value.numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                acc(*x, gx);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    acc(p, gp);
                    offset += len;
                }
            }
            Op::IndexSelect {
                x,
                indices,
                outer,
                n,
                inner,
            } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = vec![0.0; outer * n * inner];
                let sel = indices.len();
                for o in 0..outer {
                    for (q, &j) in indices.iter().enumerate() {
                        let src = &g[(o * sel + q) * inner..(o * sel + q + 1) * inner];
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                }
                acc(*x, gx);
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            Op::L2Normalize { x, cols, norms } => {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), &norm) in g.chunks(*cols).zip(y.chunks(*cols)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / norm));
                }
                acc(*x, gx);
            }
            Op::Mask { x, keep } => acc(
                *x,
                g.iter()
                    .zip(keep)
                    .map(|(&g, &k)| if k { g } else { 0.0 })
                    .collect(),
            ),
            Op::RowNormalize { x, cols, sums } => {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), &s) in g.chunks(*cols).zip(y.chunks(*cols)).zip(sums) {
                    if s > 0.0 {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        gx.extend(gr.iter().map(|gv| (gv - dot) / s));
                    } else {
                        gx.extend(std::iter::repeat_n(0.0, *cols));
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match grads[v.0].as_mut() {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        None => grads[v.0] = Some(contrib),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
