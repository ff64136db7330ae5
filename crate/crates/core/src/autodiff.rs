//! Tape-based reverse-mode differentiation over small dense `f64` tensors.
//!
//! Only the operations needed by the relationship head and its losses are
//! provided. Each operation records its inputs on the [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape once in reverse and
//! accumulates adjoints for every reachable node.
//!
//! ```
//! use hiersgg::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x).item(), 6.0);
//! ```

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction ({v})")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self -= step * grad`, elementwise.
    pub fn sgd_step(&mut self, grad: &Tensor, step: f64) {
        debug_assert_eq!(self.shape, grad.shape);
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= step * g;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pure numeric kernels shared by the tape and by value-only code paths.
pub mod kernels {
    /// `y_j = Σ_i x_i w_ij` for a row-major `d×m` matrix.
    pub fn linear(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
        let mut y = vec![0.0; m];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &w[i * m..(i + 1) * m];
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
        y
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// `ln σ(x)` without overflow.
    pub fn log_sigmoid(x: f64) -> f64 {
        x.min(0.0) - (-x.abs()).exp().ln_1p()
    }

    pub fn logsumexp(x: &[f64]) -> f64 {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }

    /// Max-subtracted softmax.
    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn log_softmax(x: &[f64]) -> Vec<f64> {
        let lse = logsumexp(x);
        x.iter().map(|v| v - lse).collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Index of the largest value; ties go to the lowest index.
    pub fn argmax(x: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in x.iter().enumerate() {
            if *v > x[best] {
                best = i;
            }
        }
        best
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var },
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Log(Var),
    Neg(Var),
    Scale { x: Var, c: Var },
    ScaleConst { x: Var, c: f64 },
    AddConst(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    Index { x: Var, i: usize },
    Gather { x: Var, idx: Vec<usize> },
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Normalize(Var),
    MeanPool { grid: Var, mask: Vec<bool>, count: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(test)]
    corrupt_sigmoid_adjoint: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` is disconnected from the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(&mut t.data);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of `v`.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(name, &data)?;
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn vector_input(&self, v: Var, name: &str) -> Result<&Tensor> {
        let t = self.value(v);
        if t.shape.len() != 1 {
            return Err(Error::shape(format!("{name} expects a vector, got {:?}", t.shape)));
        }
        Ok(t)
    }

    /// `y = xᵀ W` for `x: [d]`, `W: [d×m]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.vector_input(x, "linear")?;
        let wv = self.value(w);
        if wv.shape.len() != 2 || wv.shape[0] != xv.len() {
            return Err(Error::shape(format!(
                "linear: x {:?} vs W {:?}",
                xv.shape, wv.shape
            )));
        }
        let m = wv.shape[1];
        let y = kernels::linear(&xv.data, &wv.data, m);
        self.push("linear", vec![m], y, Op::Linear { x, w })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = t.data.iter().map(|v| kernels::sigmoid(*v)).collect();
        let shape = t.shape.clone();
        self.push("sigmoid", shape, y, Op::Sigmoid(x))
    }

    /// Elementwise `ln σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = t.data.iter().map(|v| kernels::log_sigmoid(*v)).collect();
        let shape = t.shape.clone();
        self.push("log_sigmoid", shape, y, Op::LogSigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.vector_input(x, "softmax")?;
        if t.is_empty() {
            return Err(Error::invalid("softmax of an empty vector"));
        }
        let y = kernels::softmax(&t.data);
        let shape = t.shape.clone();
        self.push("softmax", shape, y, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.vector_input(x, "log_softmax")?;
        if t.is_empty() {
            return Err(Error::invalid("log_softmax of an empty vector"));
        }
        let y = kernels::log_softmax(&t.data);
        let shape = t.shape.clone();
        self.push("log_softmax", shape, y, Op::LogSoftmax(x))
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.vector_input(x, "logsumexp")?;
        if t.is_empty() {
            return Err(Error::invalid("logsumexp of an empty vector"));
        }
        let y = kernels::logsumexp(&t.data);
        self.push("logsumexp", vec![], vec![y], Op::LogSumExp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data.iter().any(|v| *v <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let y = t.data.iter().map(|v| v.ln()).collect();
        let shape = t.shape.clone();
        self.push("log", shape, y, Op::Log(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = t.data.iter().map(|v| -v).collect();
        let shape = t.shape.clone();
        self.push("neg", shape, y, Op::Neg(x))
    }

    /// `c · x` where `c` is a scalar node.
    pub fn scale(&mut self, x: Var, c: Var) -> Result<Var> {
        let cv = self.value(c);
        if cv.len() != 1 {
            return Err(Error::shape(format!("scale factor must be scalar, got {:?}", cv.shape)));
        }
        let c0 = cv.data[0];
        let t = self.value(x);
        let y = t.data.iter().map(|v| v * c0).collect();
        let shape = t.shape.clone();
        self.push("scale", shape, y, Op::Scale { x, c })
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let y = t.data.iter().map(|v| v * c).collect();
        let shape = t.shape.clone();
        self.push("scale_const", shape, y, Op::ScaleConst { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let y = t.data.iter().map(|v| v + c).collect();
        let shape = t.shape.clone();
        self.push("add_const", shape, y, Op::AddConst(x))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push("add", shape, y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push("sub", shape, y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push("mul", shape, y, Op::Mul(a, b))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let y = kernels::dot(&self.value(a).data, &self.value(b).data);
        self.push("dot", vec![], vec![y], Op::Dot(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).data.iter().sum();
        self.push("sum", vec![], vec![y], Op::Sum(x))
    }

    /// Element `i` of a vector, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.vector_input(x, "index")?;
        let v = *t
            .data
            .get(i)
            .ok_or_else(|| Error::shape(format!("index {i} out of range for {:?}", t.shape)))?;
        self.push("index", vec![], vec![v], Op::Index { x, i })
    }

    /// Selects entries of a vector into a new vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.vector_input(x, "gather")?;
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            y.push(
                *t.data
                    .get(i)
                    .ok_or_else(|| Error::shape(format!("gather index {i} out of range")))?,
            );
        }
        self.push("gather", vec![idx.len()], y, Op::Gather { x, idx: idx.to_vec() })
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut y = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(Error::shape("stack expects scalars"));
            }
            y.push(t.data[0]);
        }
        self.push("stack", vec![xs.len()], y, Op::Stack(xs.to_vec()))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let mut y = Vec::new();
        for &x in xs {
            y.extend_from_slice(&self.vector_input(x, "concat")?.data);
        }
        let n = y.len();
        self.push("concat", vec![n], y, Op::Concat(xs.to_vec()))
    }

    /// `x / sqrt(Σ x² + 1e-12)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.vector_input(x, "normalize")?;
        let norm = (kernels::dot(&t.data, &t.data) + 1e-12).sqrt();
        let y = t.data.iter().map(|v| v / norm).collect();
        let shape = t.shape.clone();
        self.push("normalize", shape, y, Op::Normalize(x))
    }

    /// Per-channel mean over the cells selected by `mask`.
    ///
    /// `grid` has shape `[channels, s, t]` and `mask` has `s·t` entries.
    /// An empty mask yields zeros.
    pub fn mean_pool(&mut self, grid: Var, mask: &[bool]) -> Result<Var> {
        let g = self.value(grid);
        if g.shape.len() != 3 || g.shape[1] * g.shape[2] != mask.len() {
            return Err(Error::shape(format!(
                "mean_pool: grid {:?} vs mask of {}",
                g.shape,
                mask.len()
            )));
        }
        let channels = g.shape[0];
        let cells = mask.len();
        let count = mask.iter().filter(|m| **m).count();
        let mut y = vec![0.0; channels];
        if count > 0 {
            for (c, yc) in y.iter_mut().enumerate() {
                let row = &g.data[c * cells..(c + 1) * cells];
                let s: f64 = row.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
                *yc = s / count as f64;
            }
        }
        self.push(
            "mean_pool",
            vec![channels],
            y,
            Op::MeanPool {
                grid,
                mask: mask.to_vec(),
                count,
            },
        )
    }

    /// Propagates adjoints from the scalar `root` to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor {
            shape: self.value(root).shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value.data;
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w } => {
                    let xv = &self.value(*x).data;
                    let wv = self.value(*w);
                    let m = wv.shape[1];
                    accumulate(&mut grads[x.0], &[xv.len()], |gx| {
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            let row = &wv.data[i * m..(i + 1) * m];
                            *gxi += kernels::dot(row, &g.data);
                        }
                    });
                    accumulate(&mut grads[w.0], &wv.shape, |gw| {
                        for (i, xi) in xv.iter().enumerate() {
                            for (j, gj) in g.data.iter().enumerate() {
                                gw[i * m + j] += xi * gj;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    #[cfg(test)]
                    let fudge = if self.corrupt_sigmoid_adjoint { 2.0 } else { 1.0 };
                    #[cfg(not(test))]
                    let fudge = 1.0;
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for ((gxi, yi), gi) in gx.iter_mut().zip(y).zip(&g.data) {
                            *gxi += fudge * gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::LogSigmoid(x) => {
                    let xv = &self.value(*x).data;
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for ((gxi, xi), gi) in gx.iter_mut().zip(xv).zip(&g.data) {
                            *gxi += gi * (1.0 - kernels::sigmoid(*xi));
                        }
                    });
                }
                Op::Softmax(x) => {
                    let gy = kernels::dot(&g.data, y);
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for ((gxi, yi), gi) in gx.iter_mut().zip(y).zip(&g.data) {
                            *gxi += yi * (gi - gy);
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = g.data.iter().sum();
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for ((gxi, yi), gi) in gx.iter_mut().zip(y).zip(&g.data) {
                            *gxi += gi - yi.exp() * total;
                        }
                    });
                }
                Op::LogSumExp(x) => {
                    let p = kernels::softmax(&self.value(*x).data);
                    let g0 = g.data[0];
                    accumulate(&mut grads[x.0], &self.value(*x).shape, |gx| {
                        for (gxi, pi) in gx.iter_mut().zip(&p) {
                            *gxi += g0 * pi;
                        }
                    });
                }
                Op::Log(x) => {
                    let xv = &self.value(*x).data;
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for ((gxi, xi), gi) in gx.iter_mut().zip(xv).zip(&g.data) {
                            *gxi += gi / xi;
                        }
                    });
                }
                Op::Neg(x) => {
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for (gxi, gi) in gx.iter_mut().zip(&g.data) {
                            *gxi -= gi;
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let c0 = self.value(*c).data[0];
                    let xv = &self.value(*x).data;
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for (gxi, gi) in gx.iter_mut().zip(&g.data) {
                            *gxi += c0 * gi;
                        }
                    });
                    let gc = kernels::dot(xv, &g.data);
                    accumulate(&mut grads[c.0], &self.value(*c).shape, |s| s[0] += gc);
                }
                Op::ScaleConst { x, c } => {
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for (gxi, gi) in gx.iter_mut().zip(&g.data) {
                            *gxi += c * gi;
                        }
                    });
                }
                Op::AddConst(x) => {
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for (gxi, gi) in gx.iter_mut().zip(&g.data) {
                            *gxi += gi;
                        }
                    });
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    accumulate(&mut grads[a.0], &node.value.shape, |ga| {
                        for (gai, gi) in ga.iter_mut().zip(&g.data) {
                            *gai += gi;
                        }
                    });
                    accumulate(&mut grads[b.0], &node.value.shape, |gb| {
                        for (gbi, gi) in gb.iter_mut().zip(&g.data) {
                            *gbi += sign * gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    accumulate(&mut grads[a.0], &node.value.shape, |ga| {
                        for ((gai, bi), gi) in ga.iter_mut().zip(bv).zip(&g.data) {
                            *gai += gi * bi;
                        }
                    });
                    accumulate(&mut grads[b.0], &node.value.shape, |gb| {
                        for ((gbi, ai), gi) in gb.iter_mut().zip(av).zip(&g.data) {
                            *gbi += gi * ai;
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let g0 = g.data[0];
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    let shape = &self.value(*a).shape;
                    accumulate(&mut grads[a.0], shape, |ga| {
                        for (gai, bi) in ga.iter_mut().zip(bv) {
                            *gai += g0 * bi;
                        }
                    });
                    accumulate(&mut grads[b.0], shape, |gb| {
                        for (gbi, ai) in gb.iter_mut().zip(av) {
                            *gbi += g0 * ai;
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g.data[0];
                    accumulate(&mut grads[x.0], &self.value(*x).shape, |gx| {
                        for gxi in gx.iter_mut() {
                            *gxi += g0;
                        }
                    });
                }
                Op::Index { x, i } => {
                    let g0 = g.data[0];
                    accumulate(&mut grads[x.0], &self.value(*x).shape, |gx| gx[*i] += g0);
                }
                Op::Gather { x, idx } => {
                    accumulate(&mut grads[x.0], &self.value(*x).shape, |gx| {
                        for (k, &i) in idx.iter().enumerate() {
                            gx[i] += g.data[k];
                        }
                    });
                }
                Op::Stack(xs) => {
                    for (k, x) in xs.iter().enumerate() {
                        let gk = g.data[k];
                        accumulate(&mut grads[x.0], &self.value(*x).shape, |gx| gx[0] += gk);
                    }
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for x in xs {
                        let n = self.value(*x).len();
                        let part = &g.data[offset..offset + n];
                        accumulate(&mut grads[x.0], &self.value(*x).shape, |gx| {
                            for (gxi, gi) in gx.iter_mut().zip(part) {
                                *gxi += gi;
                            }
                        });
                        offset += n;
                    }
                }
                Op::Normalize(x) => {
                    let xv = &self.value(*x).data;
                    let norm = (kernels::dot(xv, xv) + 1e-12).sqrt();
                    let yg = kernels::dot(y, &g.data);
                    accumulate(&mut grads[x.0], &node.value.shape, |gx| {
                        for ((gxi, yi), gi) in gx.iter_mut().zip(y).zip(&g.data) {
                            *gxi += (gi - yi * yg) / norm;
                        }
                    });
                }
                Op::MeanPool { grid, mask, count } if *count > 0 => {
                    let shape = self.value(*grid).shape.clone();
                    let cells = mask.len();
                    let inv = 1.0 / *count as f64;
                    accumulate(&mut grads[grid.0], &shape, |gg| {
                        for (c, gc) in g.data.iter().enumerate() {
                            let row = &mut gg[c * cells..(c + 1) * cells];
                            for (cell, m) in row.iter_mut().zip(mask) {
                                if *m {
                                    *cell += gc * inv;
                                }
                            }
                        }
                    });
                }
                Op::MeanPool { .. } => {}
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all leaf entries of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    /// `(leaf index, element index)` where the max occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares [`Tape::backward`] against central finite differences.
///
/// `build` receives a fresh tape and the leaf handles (in the order of
/// `leaves`) and must return a scalar node. It is re-run twice per leaf entry.
pub fn grad_check<F>(leaves: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check needs eps > 0"));
    }
    grad_check_on(leaves, eps, &build, Tape::new)
}

fn grad_check_on<F>(
    leaves: &[Tensor],
    eps: f64,
    build: &F,
    fresh: impl Fn() -> Tape,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = fresh();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        let v = tape.item(root);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut tape = fresh();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        for e in 0..leaves[li].len() {
            let orig = leaves[li].data[e];
            work[li].data[e] = orig + eps;
            let plus = eval(&work)?;
            work[li].data[e] = orig - eps;
            let minus = eval(&work)?;
            work[li].data[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[e];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, e);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
