//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation order,
//! so the tape is already topologically sorted and `backward` is a single
//! reverse sweep. Parameter leaves remember their [`ParamId`]; gradients for
//! those leaves are added (never overwritten) into the owning [`ParamStore`].

use log::warn;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Some(Activation::Relu),
            "leaky_relu" | "leakyrelu" => Some(Activation::LeakyRelu),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Deliberate backward-pass corruption, used to prove the gradient checks bite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Negate the gradient flowing to the right operand of every matmul.
    MatMul,
    /// Negate the kernel gradient of every convolution.
    Conv2d,
    /// Negate the gradient through every elementwise activation.
    Activation,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Reshape(Var),
    Transpose(Var),
    Permute3(Var, [usize; 3]),
    Concat(Vec<Var>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    AddChannelBias(Var, Var),
    MaxPool2(Var, Vec<usize>),
    AdaptiveAvgPool(Var),
    SoftmaxRows(Var),
    SumRows(Var),
    SumAll(Var),
    Cosine(Var, Var),
    SoftmaxCe(Var, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<BackwardFault>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(v, id) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node { value, op, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x[n×b] + bias[b]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, b) = self.value(x).dims2()?;
        let bv = self.value(bias);
        if bv.len() != b {
            return dim_err(format!("bias of length {} for {} columns", bv.len(), b));
        }
        let mut out = self.value(x).clone();
        let bd = bv.data().to_vec();
        for r in 0..n {
            for (o, &bb) in out.data_mut()[r * b..(r + 1) * b].iter_mut().zip(&bd) {
                *o = *o + bb;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).map(|x| act.apply(x));
        self.push(out, Op::Act(a, act), act.name())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Result<Var> {
        let out = self.value(a).permute3(perm)?;
        self.push(out, Op::Permute3(a, perm), "permute3")
    }

    /// Flattens and concatenates into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of nothing");
        }
        let data: Vec<T> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if r >= rows {
            return dim_err(format!("row {r} of {rows}"));
        }
        let data = self.value(a).data()[r * cols..(r + 1) * cols].to_vec();
        self.push(Tensor::vector(data), Op::Row(a, r), "row")
    }

    /// Stacks equal-length nodes as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return dim_err("stack of nothing");
        }
        let cols = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(cols * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.len() != cols {
                return dim_err(format!("stack rows of length {} and {}", cols, v.len()));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows.len(), cols, data)?;
        self.push(out, Op::StackRows(rows.to_vec()), "stack_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if start >= end || end > cols {
            return dim_err(format!("column slice {start}..{end} of {cols}"));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let out = Tensor::matrix(rows, w, data)?;
        self.push(out, Op::SliceCols(a, start, end), "slice_cols")
    }

    /// Cross-correlation of a `C×H×W` image with `O×C×kh×kw` kernels.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_raw(self.value(x), self.value(k), stride, pad)?;
        self.push(out, Op::Conv2d { x, k, stride, pad }, "conv2d")
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(b).len() != c {
            return dim_err(format!(
                "channel bias of length {} for {c} channels",
                self.value(b).len()
            ));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v + bd[ch]);
        }
        self.push(out, Op::AddChannelBias(x, b), "add_channel_bias")
    }

    /// 2×2 max pooling with stride 2; partial windows at the edges are kept.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = (ch * h + y) * w + xx;
                            if best == usize::MAX || src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        self.push(out, Op::MaxPool2(x, arg), "max_pool2")
    }

    /// Average pooling onto a fixed `oh×ow` grid regardless of input size.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1) = pool_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bin(ox, w, ow);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + src[(ch * h + y) * w + xx];
                        }
                    }
                    out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        self.push(out, Op::AdaptiveAvgPool(x), "adaptive_avg_pool")
    }

    /// Softmax over the last axis of a matrix (or over a whole vector).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap_or(&0);
        if cols == 0 {
            return dim_err("softmax over an empty axis");
        }
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a), "softmax")
    }

    /// Sums each row of a matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let out: Vec<T> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().copied().sum()).collect();
        self.push(Tensor::vector(out), Op::SumRows(a), "sum_rows")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum_all")
    }

    /// Mean of several same-shape nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("mean of nothing");
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        if parts.len() == 1 {
            return Ok(acc);
        }
        self.scale(acc, T::one() / T::of(parts.len() as f64))
    }

    /// Cosine distance `-a·b / (|a||b|)`; zero-norm inputs give 0.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = cosine_distance_raw(self.value(a).data(), self.value(b).data())?;
        self.push(Tensor::scalar(d), Op::Cosine(a, b), "cosine")
    }

    /// `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits).data();
        if target >= v.len() {
            return dim_err(format!("target {target} for {} logits", v.len()));
        }
        let m = v.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + v.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        let loss = lse - v[target];
        self.push(Tensor::scalar(loss), Op::SoftmaxCe(logits, target), "cross_entropy")
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return dim_err(format!("backward needs a scalar, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        let flip = |f: BackwardFault, g: Tensor<T>| -> Tensor<T> {
            if self.fault == Some(f) {
                g.map(|v| -v)
            } else {
                g
            }
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = matmul(&g, &bv.transpose()?)?;
                    let gb = flip(BackwardFault::MatMul, matmul(&av.transpose()?, &g)?);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let (n, c) = g.dims2()?;
                    let mut gb = vec![T::zero(); c];
                    for r in 0..n {
                        for (o, &v) in gb.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *o = *o + v;
                        }
                    }
                    let gb = Tensor::new(self.shape(*b).to_vec(), gb)?;
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |u, v| u * v)?;
                    let gb = g.zip_map(self.value(*a), |u, v| u * v)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Act(a, act) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                        .collect();
                    let ga = Tensor::new(g.shape().to_vec(), data)?;
                    acc(&mut grads, *a, flip(BackwardFault::Activation, ga));
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.shape(*a))?;
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.transpose()?);
                }
                Op::Permute3(a, perm) => {
                    let mut inv = [0usize; 3];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(&mut grads, *a, g.permute3(inv)?);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = self.shape(p).to_vec();
                        let n: usize = shape.iter().product();
                        let gp = Tensor::new(shape, g.data()[off..off + n].to_vec())?;
                        off += n;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Row(a, r) => {
                    let (rows, cols) = self.value(*a).dims2()?;
                    let mut ga = Tensor::zeros(&[rows, cols]);
                    ga.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::StackRows(rows) => {
                    let cols = g.dims2()?.1;
                    for (i, &r) in rows.iter().enumerate() {
                        let gr = Tensor::new(self.shape(r).to_vec(), g.data()[i * cols..(i + 1) * cols].to_vec())?;
                        acc(&mut grads, r, gr);
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (rows, cols) = self.value(*a).dims2()?;
                    let w = end - start;
                    let mut ga = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        ga.data_mut()[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (gx, gk) = conv2d_backward(self.value(*x), self.value(*k), &g, *stride, *pad)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *k, flip(BackwardFault::Conv2d, gk));
                }
                Op::AddChannelBias(x, b) => {
                    let (c, h, w) = g.dims3()?;
                    let gb: Vec<T> = (0..c)
                        .map(|ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().copied().sum())
                        .collect();
                    acc(&mut grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                    acc(&mut grads, *x, g);
                }
                Op::MaxPool2(x, arg) => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (&idx, &gv) in arg.iter().zip(g.data()) {
                        gx.data_mut()[idx] = gx.data()[idx] + gv;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::AdaptiveAvgPool(x) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let (_, oh, ow) = g.dims3()?;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bin(ox, w, ow);
                                let share = g.get3(ch, oy, ox) / T::of(((y1 - y0) * (x1 - x0)) as f64);
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        let idx = (ch * h + y) * w + xx;
                                        gx.data_mut()[idx] = gx.data()[idx] + share;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap_or(&1);
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).dims2()?;
                    let mut ga = Vec::with_capacity(r * c);
                    for i in 0..r {
                        ga.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    acc(&mut grads, *a, Tensor::new(vec![r, c], ga)?);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    acc(&mut grads, *a, Tensor::filled(self.shape(*a), gv));
                }
                Op::Cosine(a, b) => {
                    let gv = g.data()[0];
                    let (ga, gb) = cosine_backward(self.value(*a).data(), self.value(*b).data(), gv);
                    acc(&mut grads, *a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                    acc(&mut grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
                Op::SoftmaxCe(z, target) => {
                    let gv = g.data()[0];
                    let mut p = self.value(*z).clone();
                    softmax_in_place(p.data_mut());
                    p.data_mut()[*target] = p.data()[*target] - T::one();
                    acc(&mut grads, *z, p.map(|v| v * gv));
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient of node {i}"),
                    });
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward sweep whose parameter gradients are added into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn pool_bin(i: usize, size: usize, bins: usize) -> (usize, usize) {
    let start = i * size / bins;
    let end = ((i + 1) * size).div_ceil(bins);
    (start, end.max(start + 1).min(size.max(1)))
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

pub(crate) fn cosine_distance_raw<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return dim_err(format!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        warn!("cosine distance with a zero-norm vector; using 0");
        return Ok(T::zero());
    }
    // rounding can push |cos| a hair past 1
    Ok((-dot / (na * nb)).max(-T::one()).min(T::one()))
}

fn cosine_backward<T: Scalar>(a: &[T], b: &[T], g: T) -> (Vec<T>, Vec<T>) {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na2: T = a.iter().map(|&x| x * x).sum();
    let nb2: T = b.iter().map(|&x| x * x).sum();
    if na2 == T::zero() || nb2 == T::zero() {
        return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let p = na * nb;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -g * (y / p - dot * x / (na2 * p)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -g * (x / p - dot * y / (nb2 * p)))
        .collect();
    (ga, gb)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return dim_err("stride must be positive");
    }
    if k > size + 2 * pad {
        return dim_err(format!("kernel {k} larger than padded input {}", size + 2 * pad));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Valid output index range `o` with `o*stride + koff - pad` inside `[0, size)`.
fn valid_range(out: usize, size: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if koff >= pad { 0 } else { (pad - koff).div_ceil(stride) };
    // o*stride + koff - pad <= size - 1
    let hi = if size + pad > koff {
        ((size + pad - koff - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_raw<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let [o, kc, kh, kw] = k.shape() else {
        return dim_err(format!("kernel must be rank 4, got {:?}", k.shape()));
    };
    let (o, kc, kh, kw) = (*o, *kc, *kh, *kw);
    if kc != c {
        return dim_err(format!("kernel expects {kc} channels, input has {c}"));
    }
    let oh = conv_out(h, kh, stride, pad)?;
    let ow = conv_out(w, kw, stride, pad)?;
    let mut out = vec![T::zero(); o * oh * ow];
    let (xd, kd) = (x.data(), k.data());
    for oc in 0..o {
        let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let xplane = &xd[ic * h * w..(ic + 1) * h * w];
            for ki in 0..kh {
                let (y0, y1) = valid_range(oh, h, ki, stride, pad);
                for kj in 0..kw {
                    let wv = kd[((oc * c + ic) * kh + ki) * kw + kj];
                    let (x0, x1) = valid_range(ow, w, kj, stride, pad);
                    for oy in y0..y1 {
                        let iy = oy * stride + ki - pad;
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy * w..(iy + 1) * w];
                        for ox in x0..x1 {
                            orow[ox] = orow[ox] + wv * xrow[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3()?;
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (_, oh, ow) = g.dims3()?;
    let mut gx = vec![T::zero(); c * h * w];
    let mut gk = vec![T::zero(); k.len()];
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    for oc in 0..o {
        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let xplane = &xd[ic * h * w..(ic + 1) * h * w];
            let gxplane = &mut gx[ic * h * w..(ic + 1) * h * w];
            for ki in 0..kh {
                let (y0, y1) = valid_range(oh, h, ki, stride, pad);
                for kj in 0..kw {
                    let kidx = ((oc * c + ic) * kh + ki) * kw + kj;
                    let wv = kd[kidx];
                    let (x0, x1) = valid_range(ow, w, kj, stride, pad);
                    let mut kacc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * stride + ki - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            let ix = iy * w + ox * stride + kj - pad;
                            kacc = kacc + grow[ox] * xplane[ix];
                            gxplane[ix] = gxplane[ix] + grow[ox] * wv;
                        }
                    }
                    gk[kidx] = gk[kidx] + kacc;
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, h, w], gx)?, Tensor::new(k.shape().to_vec(), gk)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for size in 1usize..7 {
            for k in 0usize..3 {
                for stride in 1usize..3 {
                    for pad in 0usize..2 {
                        let out = (size + 2 * pad).saturating_sub(k) / stride + 1;
                        let (lo, hi) = valid_range(out, size, k, stride, pad);
                        for o in 0..out {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < size;
                            assert_eq!(inside, o >= lo && o < hi, "size {size} k {k} s {stride} p {pad} o {o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_backward_sums_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let w = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let p = g.mul(y, w).unwrap();
        let l = g.sum_all(p).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert!(gx.sum().abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        assert_eq!(cosine_distance_raw(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn max_pool_keeps_partial_windows() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::new(vec![1, 1, 3], vec![1.0, 5.0, 2.0]).unwrap())
            .unwrap();
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 2.0]);
    }
}
