//! Dense `f64` tensors and a tape-style reverse-mode autodiff graph.
//!
//! Every backward rule is itself written in terms of graph operations, so
//! running [`Graph::backward`] with `create_graph = true` records the gradient
//! computation and the returned gradients can be differentiated again.
//!
//! Subgradient conventions: `relu'(0) = 0`, `abs'(0) = 0`, and the gradient of
//! `sqrt` (and therefore of the L2 norm) at zero is 0.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn sum_axis(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(&t.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let src = &t.data[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.remove(axis);
    Tensor { shape, data: out }
}

fn expand_axis(t: &Tensor, axis: usize, size: usize) -> Tensor {
    let mut shape = t.shape.clone();
    shape.insert(axis, size);
    let (outer, n, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &t.data[o * inner..(o + 1) * inner];
        for _ in 0..n {
            data.extend_from_slice(src);
        }
    }
    Tensor { shape, data }
}

fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(&t.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&t.data[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Tensor { shape, data }
}

fn pad_axis(t: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let (outer, len, inner) = split_axis(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = total;
    let mut data = vec![0.0; outer * total * inner];
    for o in 0..outer {
        data[(o * total + start) * inner..(o * total + start + len) * inner]
            .copy_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor { shape, data }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

fn transpose_values(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data,
    }
}

fn safe_recip(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        1.0 / v
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum { input: Var, axis: usize },
    Expand { input: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Pad { input: Var, axis: usize, start: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Transpose(a) => vec![*a],
            Op::Sum { input, .. }
            | Op::Expand { input, .. }
            | Op::Slice { input, .. }
            | Op::Pad { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum { .. } => "sum",
            Op::Expand { .. } => "expand",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Build one per forward pass and drop it after the step.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        let requires_grad =
            self.recording && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Elementwise `1/x`, defined as 0 at `x = 0`.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(safe_recip);
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let v = matmul_values(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Dimension("transpose needs a 2-D tensor".into()));
        }
        let v = transpose_values(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let v = sum_axis(self.value(a), axis);
        self.push(v, Op::Sum { input: a, axis })
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let n = self.shape(a)[axis] as f64;
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut v = a;
        while !self.shape(v).is_empty() {
            v = self.sum(v, 0)?;
        }
        Ok(v)
    }

    /// Inserts a new axis of length `size` at `axis`, repeating the values.
    pub fn expand(&mut self, a: Var, axis: usize, size: usize) -> Result<Var> {
        if axis > self.shape(a).len() || size == 0 {
            return Err(Error::Dimension(format!(
                "expand: invalid axis {axis} / size {size} for shape {:?}",
                self.shape(a)
            )));
        }
        let v = expand_axis(self.value(a), axis, size);
        self.push(v, Op::Expand { input: a, axis })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat: {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor { shape, data };
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        if len == 0 || start + len > self.shape(a)[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let v = slice_axis(self.value(a), axis, start, len);
        self.push(v, Op::Slice { input: a, axis, start })
    }

    /// Embeds `a` into zeros of length `total` along `axis`, starting at `start`.
    pub fn pad(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        if start + self.shape(a)[axis] > total {
            return Err(Error::Dimension("pad target too small".into()));
        }
        let v = pad_axis(self.value(a), axis, start, total);
        self.push(v, Op::Pad { input: a, axis, start })
    }

    /// Adds a length-`n` bias to every row of a `[rows × n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        let b = self.expand(bias, 0, rows)?;
        self.add(x, b)
    }

    /// Euclidean norm along `axis`; gradient `t/‖t‖`, zero where the norm is zero.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq, axis)?;
        self.sqrt(s)
    }

    /// Maximum along `axis` plus the winning index of each slice.
    ///
    /// Ties go to the lowest index. The winning index is held constant under
    /// differentiation, so gradient reaches only the winning element.
    pub fn max_with_argmax(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        check_axis(self.shape(a), axis)?;
        let t = self.value(a);
        let (outer, n, inner) = split_axis(&t.shape, axis);
        let mut idx = Vec::with_capacity(outer * inner);
        let mut mask = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..n {
                    if t.data[(o * n + k) * inner + i] > t.data[(o * n + best) * inner + i] {
                        best = k;
                    }
                }
                mask[(o * n + best) * inner + i] = 1.0;
                idx.push(best);
            }
        }
        let mask = Tensor {
            shape: t.shape.clone(),
            data: mask,
        };
        let m = self.constant(mask);
        let picked = self.mul(a, m)?;
        Ok((self.sum(picked, axis)?, idx))
    }

    /// Row-wise log-softmax of a `[batch × classes]` tensor, max-shifted.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension("log_softmax needs [batch × classes]".into()));
        }
        let t = self.value(logits);
        let mut shift = Vec::with_capacity(t.numel());
        for r in 0..shape[0] {
            let m = t.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift.extend(std::iter::repeat_n(m, shape[1]));
        }
        let shift = self.constant(Tensor { shape: shape.clone(), data: shift });
        let z = self.sub(logits, shift)?;
        let ez = self.exp(z)?;
        let s = self.sum(ez, 1)?;
        let lse = self.ln(s)?;
        let lse = self.expand(lse, 1, shape[1])?;
        self.sub(z, lse)
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        self.exp(ls)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross-entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let onehot = one_hot(labels, shape[1])?;
        let onehot = self.constant(onehot);
        let ls = self.log_softmax(logits)?;
        let picked = self.mul(ls, onehot)?;
        let per_row = self.sum(picked, 1)?;
        let m = self.mean(per_row, 0)?;
        self.neg(m)
    }

    /// Reverse-mode gradients of the scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph` set, the gradient computation is recorded and the
    /// returned vars are themselves differentiable. Tensors that `root` does not
    /// depend on get a zero gradient.
    pub fn backward(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let saved = self.recording;
        self.recording = create_graph;
        let result = self.backward_inner(root, wrt);
        self.recording = saved;
        result
    }

    fn backward_inner(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let n = root.0 + 1;
        // Nodes lying on a path from some wrt var.
        let mut relevant = vec![false; n];
        for w in wrt.iter().filter(|w| w.0 < n) {
            relevant[w.0] = true;
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|v| relevant[v.0]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::ones(self.shape(root));
        grads[root.0] = Some(self.constant(seed));

        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            let mut contribs: Vec<(Var, Var)> = Vec::new();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contribs.push((a, g));
                    contribs.push((b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((a, g));
                    if relevant[b.0] {
                        contribs.push((b, self.neg(g)?));
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a.0] {
                        contribs.push((a, self.mul(g, b)?));
                    }
                    if relevant[b.0] {
                        contribs.push((b, self.mul(g, a)?));
                    }
                }
                Op::Scale(a, c) => contribs.push((a, self.scale(g, c)?)),
                Op::Abs(a) => {
                    let sign = self.value(a).map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let sign = self.constant(sign);
                    contribs.push((a, self.mul(g, sign)?));
                }
                Op::Relu(a) => {
                    let step = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let step = self.constant(step);
                    contribs.push((a, self.mul(g, step)?));
                }
                Op::Exp(a) => contribs.push((a, self.mul(g, out)?)),
                Op::Log(a) => {
                    let r = self.recip(a)?;
                    contribs.push((a, self.mul(g, r)?));
                }
                Op::Recip(a) => {
                    let sq = self.mul(out, out)?;
                    let d = self.neg(sq)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::Sqrt(a) => {
                    let r = self.recip(out)?;
                    let d = self.scale(r, 0.5)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::MatMul(a, b) => {
                    if relevant[a.0] {
                        let bt = self.transpose(b)?;
                        contribs.push((a, self.matmul(g, bt)?));
                    }
                    if relevant[b.0] {
                        let at = self.transpose(a)?;
                        contribs.push((b, self.matmul(at, g)?));
                    }
                }
                Op::Transpose(a) => contribs.push((a, self.transpose(g)?)),
                Op::Sum { input, axis } => {
                    let size = self.shape(input)[axis];
                    contribs.push((input, self.expand(g, axis, size)?));
                }
                Op::Expand { input, axis } => contribs.push((input, self.sum(g, axis)?)),
                Op::Concat { inputs, axis } => {
                    let mut offset = 0;
                    for v in inputs {
                        let len = self.shape(v)[axis];
                        if relevant[v.0] {
                            contribs.push((v, self.slice(g, axis, offset, len)?));
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let total = self.shape(input)[axis];
                    contribs.push((input, self.pad(g, axis, start, total)?));
                }
                Op::Pad { input, axis, start } => {
                    let len = self.shape(input)[axis];
                    contribs.push((input, self.slice(g, axis, start, len)?));
                }
            }
            for (target, c) in contribs {
                if !relevant[target.0] {
                    continue;
                }
                grads[target.0] = Some(match grads[target.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }
}

/// `[n × classes]` one-hot matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Central-difference gradient of a scalar function, used as a test oracle.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}
