use super::{Tensor, TensorError};

/// Operation tag recorded on every graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softmax,
    Sum,
    Mean,
    Trace,
    Transpose,
    Concat,
    Slice,
    Reshape,
    MatMul,
    PairwiseSqDist,
    BceWithLogits,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Trace(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reshape(Var),
    MatMul(Var, Var),
    PairwiseSqDist(Var),
    BceWithLogits { logits: Var, target: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Trace(_) => OpKind::Trace,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::MatMul(..) => OpKind::MatMul,
            Op::PairwiseSqDist(_) => OpKind::PairwiseSqDist,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }
}

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-threaded differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the node is not on a path to the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => Tensor { shape: self.shapes[var.0].clone(), data: g.clone() },
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn same_or_scalar(a: &Tensor, b: &Tensor) -> bool {
    a.shape == b.shape || a.len() == 1 || b.len() == 1
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.len() >= b.len() {
        a.shape.clone()
    } else {
        b.shape.clone()
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NumericOverflow { op: op.kind() });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Trace(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::PairwiseSqDist(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::Concat(parts) => parts.clone(),
        }
    }

    fn mismatch(&self, op: OpKind, vars: &[Var]) -> TensorError {
        TensorError::ShapeMismatch { op, shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect() }
    }

    /// Generic entry point; `apply(OpKind::Add, &[x, y])` is `add(x, y)`.
    /// Parameterised ops (scale, slice, reshape, loss) have dedicated methods.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let unary = |g: &Self| {
            if inputs.len() == 1 {
                Ok(inputs[0])
            } else {
                Err(g.mismatch(kind, inputs))
            }
        };
        let binary = |g: &Self| {
            if inputs.len() == 2 {
                Ok((inputs[0], inputs[1]))
            } else {
                Err(g.mismatch(kind, inputs))
            }
        };
        match kind {
            OpKind::Add => binary(self).and_then(|(a, b)| self.add(a, b)),
            OpKind::Sub => binary(self).and_then(|(a, b)| self.sub(a, b)),
            OpKind::Mul => binary(self).and_then(|(a, b)| self.mul(a, b)),
            OpKind::Div => binary(self).and_then(|(a, b)| self.div(a, b)),
            OpKind::MatMul => binary(self).and_then(|(a, b)| self.matmul(a, b)),
            OpKind::Exp => unary(self).and_then(|a| self.exp(a)),
            OpKind::Log => unary(self).and_then(|a| self.log(a)),
            OpKind::Tanh => unary(self).and_then(|a| self.tanh(a)),
            OpKind::Sigmoid => unary(self).and_then(|a| self.sigmoid(a)),
            OpKind::Softmax => unary(self).and_then(|a| self.softmax(a)),
            OpKind::Sum => unary(self).and_then(|a| self.sum(a)),
            OpKind::Mean => unary(self).and_then(|a| self.mean(a)),
            OpKind::Trace => unary(self).and_then(|a| self.trace(a)),
            OpKind::Transpose => unary(self).and_then(|a| self.transpose(a)),
            OpKind::PairwiseSqDist => unary(self).and_then(|a| self.pairwise_sq_dist(a)),
            OpKind::Concat => self.concat(inputs),
            OpKind::Leaf | OpKind::Scale | OpKind::Slice | OpKind::Reshape | OpKind::BceWithLogits => Err(
                TensorError::InvalidArgument(format!("{kind:?} needs parameters; use the dedicated method")),
            ),
        }
    }

    fn elementwise(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !same_or_scalar(ta, tb) {
            return Err(self.mismatch(kind, &[a, b]));
        }
        let shape = broadcast_shape(ta, tb);
        let n = ta.len().max(tb.len());
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        Ok(Tensor { shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.elementwise(OpKind::Add, a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.elementwise(OpKind::Sub, a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.elementwise(OpKind::Mul, a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.elementwise(OpKind::Div, a, b, |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * factor).collect() };
        self.push(Op::Scale(a, factor), v)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| f(x)).collect() };
        self.push(op, v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(a, Op::Sigmoid(a), stable_sigmoid)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let cols = *t.shape.last().unwrap();
        let mut data = t.data.clone();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let v = Tensor { shape: t.shape.clone(), data };
        self.push(Op::Softmax(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() != 2 || t.shape[0] != t.shape[1] {
            return Err(self.mismatch(OpKind::Trace, &[a]));
        }
        let n = t.shape[0];
        let s = (0..n).map(|i| t.data[i * n + i]).sum();
        self.push(Op::Trace(a), Tensor::scalar(s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() != 2 {
            return Err(self.mismatch(OpKind::Transpose, &[a]));
        }
        let v = transposed(t);
        self.push(Op::Transpose(a), v)
    }

    /// Concatenation along axis 0. Vectors join into a longer vector,
    /// matrices stack their rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch { op: OpKind::Concat, shapes: vec![] });
        }
        let first = self.shape(parts[0]).to_vec();
        let tail = &first[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != first.len() || &t.shape[1..] != tail {
                return Err(self.mismatch(OpKind::Concat, parts));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.clone();
        shape[0] = rows;
        self.push(Op::Concat(parts.to_vec()), Tensor { shape, data })
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if len == 0 || start + len > t.shape[0] {
            return Err(self.mismatch(OpKind::Slice, &[a]));
        }
        let stride: usize = t.shape[1..].iter().product();
        let data = t.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = t.shape.clone();
        shape[0] = len;
        self.push(Op::Slice { input: a, start }, Tensor { shape, data })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if shape.is_empty() || shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Reshape,
                shapes: vec![t.shape.clone(), shape.to_vec()],
            });
        }
        let v = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        self.push(Op::Reshape(a), v)
    }

    /// `(m×k)·(k×n)`. A vector right operand of length `k` is treated as `k×1`
    /// and the result is returned as a length-`m` vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.is_empty() || tb.shape.len() > 2 {
            return Err(self.mismatch(OpKind::MatMul, &[a, b]));
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], if tb.shape.len() == 2 { tb.shape[1] } else { 1 });
        if k != k2 {
            return Err(self.mismatch(OpKind::MatMul, &[a, b]));
        }
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let shape = if tb.shape.len() == 1 { vec![m] } else { vec![m, n] };
        self.push(Op::MatMul(a, b), Tensor { shape, data })
    }

    /// For `X` of shape `n×d` (or a length-`n` vector, read as `n×1`), the
    /// `n×n` matrix of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() > 2 {
            return Err(self.mismatch(OpKind::PairwiseSqDist, &[a]));
        }
        let n = t.shape[0];
        let d = t.cols();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let s: f64 = (0..d)
                    .map(|c| {
                        let diff = t.data[i * d + c] - t.data[j * d + c];
                        diff * diff
                    })
                    .sum();
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        self.push(Op::PairwiseSqDist(a), Tensor { shape: vec![n, n], data })
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a 0/1 target,
    /// evaluated in the log-sum-exp stable form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var, TensorError> {
        let t = &self.nodes[logits.0].value;
        if t.len() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::BceWithLogits,
                shapes: vec![t.shape.clone(), vec![target.len()]],
            });
        }
        let loss = t.data.iter().zip(target).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / t.len() as f64;
        self.push(Op::BceWithLogits { logits, target: target.to_vec() }, Tensor::scalar(loss))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect() })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate_broadcast(grads, *a, val(a).len(), g, |_, gi| gi);
                }
                if wants(b) {
                    accumulate_broadcast(grads, *b, val(b).len(), g, |_, gi| gi);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate_broadcast(grads, *a, val(a).len(), g, |_, gi| gi);
                }
                if wants(b) {
                    accumulate_broadcast(grads, *b, val(b).len(), g, |_, gi| -gi);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    accumulate_broadcast(grads, *a, ta.len(), g, |i, gi| gi * at(tb, i));
                }
                if wants(b) {
                    accumulate_broadcast(grads, *b, tb.len(), g, |i, gi| gi * at(ta, i));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    accumulate_broadcast(grads, *a, ta.len(), g, |i, gi| gi / at(tb, i));
                }
                if wants(b) {
                    accumulate_broadcast(grads, *b, tb.len(), g, |i, gi| {
                        let y = at(tb, i);
                        -gi * at(ta, i) / (y * y)
                    });
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|gi| gi * c)),
            Op::Exp(a) => accumulate(grads, *a, g.iter().zip(&out.data).map(|(gi, y)| gi * y)),
            Op::Log(a) => accumulate(grads, *a, g.iter().zip(&val(a).data).map(|(gi, x)| gi / x)),
            Op::Tanh(a) => accumulate(grads, *a, g.iter().zip(&out.data).map(|(gi, y)| gi * (1.0 - y * y))),
            Op::Sigmoid(a) => accumulate(grads, *a, g.iter().zip(&out.data).map(|(gi, y)| gi * y * (1.0 - y))),
            Op::Softmax(a) => {
                let cols = *out.shape.last().unwrap();
                let mut ga = vec![0.0; out.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.data.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, gi), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gi - dot);
                    }
                }
                accumulate(grads, *a, ga.into_iter());
            }
            Op::Sum(a) => {
                let n = val(a).len();
                accumulate(grads, *a, std::iter::repeat(g[0]).take(n));
            }
            Op::Mean(a) => {
                let n = val(a).len();
                accumulate(grads, *a, std::iter::repeat(g[0] / n as f64).take(n));
            }
            Op::Trace(a) => {
                let n = val(a).shape[0];
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = g[0];
                }
                accumulate(grads, *a, ga.into_iter());
            }
            Op::Transpose(a) => {
                let gt = transposed(&Tensor { shape: out.shape.clone(), data: g.to_vec() });
                accumulate(grads, *a, gt.data.into_iter());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        accumulate(grads, *p, g[offset..offset + n].iter().copied());
                    }
                    offset += n;
                }
            }
            Op::Slice { input, start, .. } => {
                let t = val(input);
                let stride: usize = t.shape[1..].iter().product();
                let mut ga = vec![0.0; t.len()];
                ga[start * stride..start * stride + g.len()].copy_from_slice(g);
                accumulate(grads, *input, ga.into_iter());
            }
            Op::Reshape(a) => accumulate(grads, *a, g.iter().copied()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.cols();
                if wants(a) {
                    // g (m×n) · Bᵀ (n×k)
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    accumulate(grads, *a, ga.into_iter());
                }
                if wants(b) {
                    // Aᵀ (k×m) · g (m×n)
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    accumulate(grads, *b, gb.into_iter());
                }
            }
            Op::PairwiseSqDist(a) => {
                let t = val(a);
                let n = t.shape[0];
                let d = t.cols();
                let mut ga = vec![0.0; t.len()];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        for c in 0..d {
                            ga[i * d + c] += w * (t.data[i * d + c] - t.data[j * d + c]);
                        }
                    }
                }
                accumulate(grads, *a, ga.into_iter());
            }
            Op::BceWithLogits { logits, target } => {
                let t = val(logits);
                let scale = g[0] / t.len() as f64;
                accumulate(
                    grads,
                    *logits,
                    t.data.iter().zip(target).map(|(&z, &y)| scale * (stable_sigmoid(z) - y)),
                );
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, values: impl Iterator<Item = f64>) {
    match &mut grads[var.0] {
        Some(buf) => {
            for (b, v) in buf.iter_mut().zip(values) {
                *b += v;
            }
        }
        slot @ None => *slot = Some(values.collect()),
    }
}

/// Accumulate an elementwise gradient into an operand that may have been
/// broadcast from a single element.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    var: Var,
    operand_len: usize,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if operand_len == 1 && g.len() > 1 {
        let s: f64 = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum();
        accumulate(grads, var, std::iter::once(s));
    } else {
        accumulate(grads, var, g.iter().enumerate().map(|(i, &gi)| f(i, gi)));
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data[i * c + j];
        }
    }
    Tensor { shape: vec![c, r], data }
}
