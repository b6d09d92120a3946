//! Reverse-mode automatic differentiation with double-backward support.
//!
//! A [`Graph`] is an append-only list of nodes; every node stores its value,
//! computed eagerly when the node is created. [`Graph::grad`] walks the graph
//! in reverse insertion order and *records* the vector-Jacobian products as
//! new nodes, so the gradients it returns can be differentiated again. This
//! is what lets an attack differentiate a gradient-matching loss with respect
//! to the dummy inputs that produced the gradients.
//!
//! Every VJP below is written in terms of graph operations whose own VJPs are
//! also graph operations (convolution, its input adjoint and its kernel
//! adjoint form a closed trio, pooling pairs with its adjoint, and so on), so
//! derivatives of any order are available.
//!
//! A graph is single-threaded; independent graphs may live on different
//! threads.

pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{numel, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Div(Var, Var),
    Scale(Var, f64),
    /// `scalar * tensor`, with the scalar a one-element node.
    MulScalar(Var, Var),
    Sqrt(Var),
    Exp(Var),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    /// One-element node repeated to the output shape.
    Broadcast(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[rows, cols] -> [cols]`
    SumRows(Var),
    /// `[cols] -> [rows, cols]`
    BroadcastRows(Var),
    /// `[rows, cols] -> [rows]`
    RowSum(Var),
    /// `[rows] -> [rows, cols]`
    BroadcastCols(Var),
    LogSoftmax(Var),
    Conv {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ConvInputGrad {
        grad: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ConvWeightGrad {
        input: Var,
        grad: Var,
        stride: usize,
        padding: usize,
    },
    /// `[C] -> [N, C, H, W]`
    ChannelBias(Var),
    /// `[N, C, H, W] -> [C]`
    ChannelSum(Var),
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    AvgPoolGrad {
        grad: Var,
        kernel: usize,
        stride: usize,
    },
    Diff {
        input: Var,
        axis: usize,
    },
    DiffAdjoint {
        grad: Var,
        axis: usize,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Pad {
        input: Var,
        start: usize,
    },
}

impl Op {
    fn inputs(&self, out: &mut Vec<Var>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalar(a, b)
            | Op::MatMul(a, b) => out.extend([*a, *b]),
            Op::Scale(a, _)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::RowSum(a)
            | Op::BroadcastCols(a)
            | Op::LogSoftmax(a)
            | Op::ChannelBias(a)
            | Op::ChannelSum(a) => out.push(*a),
            Op::Conv { input, kernel, .. } => out.extend([*input, *kernel]),
            Op::ConvInputGrad { grad, kernel, .. } => out.extend([*grad, *kernel]),
            Op::ConvWeightGrad { input, grad, .. } => out.extend([*input, *grad]),
            Op::AvgPool { input, .. } | Op::Diff { input, .. } => out.push(*input),
            Op::AvgPoolGrad { grad, .. } | Op::DiffAdjoint { grad, .. } => out.push(*grad),
            Op::Concat(parts) => out.extend_from_slice(parts),
            Op::Slice { input, .. } | Op::Pad { input, .. } => out.push(*input),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph. Discard it after one objective evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank(op: &'static str, t: &Tensor, r: usize) -> Result<()> {
    if t.shape().len() != r {
        return Err(Error::arg(
            op,
            alloc::format!("expected rank {r}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::NotInGraph(v.0))
    }

    /// Inserts a leaf. Leaves are both constants and differentiation targets;
    /// whether a leaf is differentiated depends only on what is passed to
    /// [`Graph::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        same_shape(name, ta, tb)?;
        let value = ta.zip_map(tb, f)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.check(a)?.map(|x| x * c);
        Ok(self.push(Op::Scale(a, c), value))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.check(s)?;
        if !ts.is_scalar() {
            return Err(Error::arg("mul_scalar", "scale factor must have one element"));
        }
        let c = ts.item();
        let value = self.check(x)?.map(|v| v * c);
        Ok(self.push(Op::MulScalar(x, s), value))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(libm::sqrt);
        Ok(self.push(Op::Sqrt(a), value))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(libm::exp);
        Ok(self.push(Op::Exp(a), value))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(libm::fabs);
        Ok(self.push(Op::Abs(a), value))
    }

    /// Elementwise `max(0, x)`. The derivative at 0 is taken to be 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(a), value))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let ts = self.check(s)?;
        if !ts.is_scalar() {
            return Err(Error::arg("broadcast", "source must have one element"));
        }
        let value = Tensor::full(shape, ts.item());
        Ok(self.push(Op::Broadcast(s), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(a)?.clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        rank("matmul", ta, 2)?;
        rank("matmul", tb, 2)?;
        if ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let value = kernels::matmul(ta, tb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        rank("transpose", ta, 2)?;
        let value = kernels::transpose(ta);
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        rank("sum_rows", ta, 2)?;
        let cols = ta.shape()[1];
        let mut out = vec![0.0; cols];
        for row in ta.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(Op::SumRows(a), Tensor::new(vec![cols], out)?))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ta = self.check(a)?;
        rank("broadcast_rows", ta, 1)?;
        let cols = ta.len();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(ta.data());
        }
        Ok(self.push(Op::BroadcastRows(a), Tensor::new(vec![rows, cols], out)?))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        rank("row_sum", ta, 2)?;
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let out = ta.data().chunks(cols).map(|r| r.iter().sum()).collect();
        Ok(self.push(Op::RowSum(a), Tensor::new(vec![rows], out)?))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ta = self.check(a)?;
        rank("broadcast_cols", ta, 1)?;
        let rows = ta.len();
        let out = ta
            .data()
            .iter()
            .flat_map(|&v| core::iter::repeat_n(v, cols))
            .collect();
        Ok(self.push(Op::BroadcastCols(a), Tensor::new(vec![rows, cols], out)?))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        rank("log_softmax", ta, 2)?;
        let value = kernels::log_softmax(ta);
        Ok(self.push(Op::LogSoftmax(a), value))
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel, zero padded.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (self.check(input)?, self.check(kernel)?);
        rank("conv2d", x, 4)?;
        rank("conv2d", k, 4)?;
        if x.shape()[1] != k.shape()[1] {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be at least 1"));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (kh, kw) = (k.shape()[2], k.shape()[3]);
        if kernels::window_out_len(h, kh, stride, padding).is_none()
            || kernels::window_out_len(w, kw, stride, padding).is_none()
        {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        let value = kernels::conv2d(x, k, stride, padding);
        Ok(self.push(
            Op::Conv {
                input,
                kernel,
                stride,
                padding,
            },
            value,
        ))
    }

    /// Adjoint of [`Graph::conv2d`] with respect to the input, for an input
    /// of spatial size `in_hw`.
    pub fn conv2d_input_grad(
        &mut self,
        grad: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        in_hw: (usize, usize),
    ) -> Result<Var> {
        let (g, k) = (self.check(grad)?, self.check(kernel)?);
        rank("conv2d_input_grad", g, 4)?;
        rank("conv2d_input_grad", k, 4)?;
        if g.shape()[1] != k.shape()[0] {
            return Err(Error::shape("conv2d_input_grad", g.shape(), k.shape()));
        }
        let value = kernels::conv2d_input_grad(g, k, stride, padding, in_hw);
        Ok(self.push(
            Op::ConvInputGrad {
                grad,
                kernel,
                stride,
                padding,
            },
            value,
        ))
    }

    /// Adjoint of [`Graph::conv2d`] with respect to a kernel of spatial size `k_hw`.
    pub fn conv2d_weight_grad(
        &mut self,
        input: Var,
        grad: Var,
        stride: usize,
        padding: usize,
        k_hw: (usize, usize),
    ) -> Result<Var> {
        let (x, g) = (self.check(input)?, self.check(grad)?);
        rank("conv2d_weight_grad", x, 4)?;
        rank("conv2d_weight_grad", g, 4)?;
        if x.shape()[0] != g.shape()[0] {
            return Err(Error::shape("conv2d_weight_grad", x.shape(), g.shape()));
        }
        let value = kernels::conv2d_weight_grad(x, g, stride, padding, k_hw);
        Ok(self.push(
            Op::ConvWeightGrad {
                input,
                grad,
                stride,
                padding,
            },
            value,
        ))
    }

    /// Per-channel bias `[C]` expanded to an NCHW shape.
    pub fn channel_bias(&mut self, bias: Var, shape: &[usize]) -> Result<Var> {
        let b = self.check(bias)?;
        if shape.len() != 4 || b.shape() != [shape[1]] {
            return Err(Error::shape("channel_bias", b.shape(), shape));
        }
        let plane = shape[2] * shape[3];
        let c = shape[1];
        let bd = b.data();
        let value = Tensor::from_fn(shape, |i| bd[(i / plane) % c]);
        Ok(self.push(Op::ChannelBias(bias), value))
    }

    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        rank("channel_sum", t, 4)?;
        let (c, plane) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
        let mut out = vec![0.0; c];
        for (i, chunk) in t.data().chunks(plane).enumerate() {
            out[i % c] += chunk.iter().sum::<f64>();
        }
        Ok(self.push(Op::ChannelSum(a), Tensor::new(vec![c], out)?))
    }

    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.check(input)?;
        rank("avgpool2d", x, 4)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::arg("avgpool2d", "kernel and stride must be at least 1"));
        }
        if kernel > x.shape()[2] || kernel > x.shape()[3] {
            return Err(Error::arg(
                "avgpool2d",
                alloc::format!("window {kernel} larger than input {:?}", x.shape()),
            ));
        }
        let value = kernels::avgpool2d(x, kernel, stride);
        Ok(self.push(
            Op::AvgPool {
                input,
                kernel,
                stride,
            },
            value,
        ))
    }

    pub fn avgpool2d_grad(
        &mut self,
        grad: Var,
        kernel: usize,
        stride: usize,
        in_hw: (usize, usize),
    ) -> Result<Var> {
        let g = self.check(grad)?;
        rank("avgpool2d_grad", g, 4)?;
        let value = kernels::avgpool2d_grad(g, kernel, stride, in_hw);
        Ok(self.push(
            Op::AvgPoolGrad {
                grad,
                kernel,
                stride,
            },
            value,
        ))
    }

    /// Forward difference along axis 2 or 3 of an NCHW tensor.
    pub fn diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.check(input)?;
        rank("diff", x, 4)?;
        if !(axis == 2 || axis == 3) || x.shape()[axis] < 2 {
            return Err(Error::arg("diff", "axis must be 2 or 3 with length >= 2"));
        }
        let value = kernels::diff(x, axis);
        Ok(self.push(Op::Diff { input, axis }, value))
    }

    pub fn diff_adjoint(&mut self, grad: Var, axis: usize) -> Result<Var> {
        let g = self.check(grad)?;
        rank("diff_adjoint", g, 4)?;
        let value = kernels::diff_adjoint(g, axis);
        Ok(self.push(Op::DiffAdjoint { grad, axis }, value))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut values = Vec::with_capacity(parts.len());
        for &p in parts {
            values.push(self.check(p)?.clone());
        }
        let value = Tensor::concat(&values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.check(input)?;
        if start + len > x.batch_len() {
            return Err(Error::arg("slice", "range exceeds leading axis"));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let value = x.select(&idx);
        Ok(self.push(Op::Slice { input, start }, value))
    }

    /// Zero-pads along the leading axis so that `input` occupies rows
    /// `start..` of a tensor with `total` rows.
    pub fn pad(&mut self, input: Var, start: usize, total: usize) -> Result<Var> {
        let x = self.check(input)?;
        if start + x.batch_len() > total {
            return Err(Error::arg("pad", "input does not fit"));
        }
        let per = x.len() / x.batch_len().max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = total;
        let mut data = vec![0.0; total * per];
        data[start * per..start * per + x.len()].copy_from_slice(x.data());
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Pad { input, start }, value))
    }

    // ----------------------------------------------------------------------
    // Composite operations.

    /// Affine map `input · weightᵀ + bias` for `input [B, in]`, `weight [out, in]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        rank("fully_connected", x, 2)?;
        rank("fully_connected", w, 2)?;
        if x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
            return Err(Error::shape("fully_connected", x.shape(), w.shape()));
        }
        let rows = x.shape()[0];
        let wt = self.transpose(weight)?;
        let y = self.matmul(input, wt)?;
        let bb = self.broadcast_rows(bias, rows)?;
        self.add(y, bb)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.check(logits)?;
        rank("softmax_cross_entropy", z, 2)?;
        let (rows, classes) = (z.shape()[0], z.shape()[1]);
        if labels.len() != rows {
            return Err(Error::arg(
                "softmax_cross_entropy",
                alloc::format!("{} labels for {} rows", labels.len(), rows),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut onehot = Tensor::zeros(&[rows, classes]);
        for (r, &l) in labels.iter().enumerate() {
            onehot.data_mut()[r * classes + l] = 1.0;
        }
        let onehot = self.leaf(onehot);
        let lsm = self.log_softmax(logits)?;
        let picked = self.mul(lsm, onehot)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / rows as f64)
    }

    /// Sum of elementwise products, as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Sums one-element nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::arg("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Cosine similarity of two tensor lists, each flattened into one vector.
    pub fn cosine_similarity_flat(&mut self, a: &[Var], b: &[Var]) -> Result<Var> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::arg("cosine_similarity_flat", "lists must be equally long and non-empty"));
        }
        let mut dots = Vec::with_capacity(a.len());
        let mut aa = Vec::with_capacity(a.len());
        let mut bb = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            same_shape("cosine_similarity_flat", self.check(x)?, self.check(y)?)?;
            dots.push(self.dot(x, y)?);
            aa.push(self.dot(x, x)?);
            bb.push(self.dot(y, y)?);
        }
        let dot = self.add_all(&dots)?;
        let na = self.add_all(&aa)?;
        let nb = self.add_all(&bb)?;
        if self.value(na).item() == 0.0 || self.value(nb).item() == 0.0 {
            return Err(Error::ZeroNorm("cosine_similarity_flat"));
        }
        let prod = self.mul(na, nb)?;
        let denom = self.sqrt(prod)?;
        self.div(dot, denom)
    }

    /// Anisotropic total variation: summed absolute differences between
    /// horizontal and vertical neighbours, over batch and channels.
    pub fn total_variation(&mut self, image: Var) -> Result<Var> {
        let shape = self.check(image)?.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::arg("total_variation", "expected an NCHW tensor"));
        }
        let mut terms = Vec::with_capacity(2);
        for axis in [3, 2] {
            if shape[axis] >= 2 {
                let d = self.diff(image, axis)?;
                let a = self.abs(d)?;
                terms.push(self.sum(a)?);
            }
        }
        if terms.is_empty() {
            return Ok(self.constant_scalar(0.0));
        }
        self.add_all(&terms)
    }

    // ----------------------------------------------------------------------
    // Differentiation.

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned variables are ordinary graph nodes, so a function of them
    /// can be differentiated again. A target that does not influence `output`
    /// gets an all-zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = self.check(output)?;
        if !out.is_scalar() {
            return Err(Error::arg(
                "grad",
                alloc::format!("output must be scalar, got shape {:?}", out.shape()),
            ));
        }
        for &w in wrt {
            self.check(w)?;
        }
        let end = output.0 + 1;
        let mut needs = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(end);
        // `upstream[n]`: some input of `n` depends on a target.
        let mut upstream = vec![false; end];
        let mut inputs = Vec::new();
        for n in start..end {
            self.nodes[n].op.inputs(&mut inputs);
            upstream[n] = inputs.iter().any(|v| needs[v.0]);
            needs[n] |= upstream[n];
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if needs[output.0] {
            adj[output.0] = Some(self.leaf(Tensor::scalar(1.0)));
        }
        for n in (start..end).rev() {
            let Some(g) = adj[n] else { continue };
            if !upstream[n] {
                continue;
            }
            for (input, contribution) in self.vjp(n, g, &needs)? {
                adj[input.0] = Some(match adj[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.value(w).shape());
                    Ok(self.leaf(zeros))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of node `n` with upstream gradient `g`,
    /// restricted to inputs flagged in `needs`.
    fn vjp(&mut self, n: usize, g: Var, needs: &[bool]) -> Result<Vec<(Var, Var)>> {
        let y = Var(n);
        let op = self.nodes[n].op.clone();
        let want = |v: Var| needs[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    out.push((a, self.div(g, b)?));
                }
                if want(b) {
                    let t = self.mul(g, y)?;
                    let t = self.div(t, b)?;
                    out.push((b, self.scale(t, -1.0)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::MulScalar(x, s) => {
                if want(x) {
                    out.push((x, self.mul_scalar(g, s)?));
                }
                if want(s) {
                    out.push((s, self.dot(g, x)?));
                }
            }
            Op::Sqrt(a) => {
                let two_y = self.scale(y, 2.0)?;
                out.push((a, self.div(g, two_y)?));
            }
            Op::Exp(a) => out.push((a, self.mul(g, y)?)),
            Op::Abs(a) => {
                let sign = self.value(a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let sign = self.leaf(sign);
                out.push((a, self.mul(g, sign)?));
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.broadcast(g, &shape)?));
            }
            Op::Broadcast(s) => out.push((s, self.sum(g)?)),
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::SumRows(a) => {
                let rows = self.value(a).shape()[0];
                out.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a) => out.push((a, self.sum_rows(g)?)),
            Op::RowSum(a) => {
                let cols = self.value(a).shape()[1];
                out.push((a, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(a) => out.push((a, self.row_sum(g)?)),
            Op::LogSoftmax(a) => {
                let cols = self.value(a).shape()[1];
                let softmax = self.exp(y)?;
                let rs = self.row_sum(g)?;
                let rs = self.broadcast_cols(rs, cols)?;
                let t = self.mul(softmax, rs)?;
                out.push((a, self.sub(g, t)?));
            }
            Op::Conv {
                input,
                kernel,
                stride,
                padding,
            } => {
                if want(input) {
                    let s = self.value(input).shape();
                    let hw = (s[2], s[3]);
                    out.push((input, self.conv2d_input_grad(g, kernel, stride, padding, hw)?));
                }
                if want(kernel) {
                    let s = self.value(kernel).shape();
                    let hw = (s[2], s[3]);
                    out.push((kernel, self.conv2d_weight_grad(input, g, stride, padding, hw)?));
                }
            }
            Op::ConvInputGrad {
                grad,
                kernel,
                stride,
                padding,
            } => {
                if want(grad) {
                    out.push((grad, self.conv2d(g, kernel, stride, padding)?));
                }
                if want(kernel) {
                    let s = self.value(kernel).shape();
                    let hw = (s[2], s[3]);
                    out.push((kernel, self.conv2d_weight_grad(g, grad, stride, padding, hw)?));
                }
            }
            Op::ConvWeightGrad {
                input,
                grad,
                stride,
                padding,
            } => {
                if want(input) {
                    let s = self.value(input).shape();
                    let hw = (s[2], s[3]);
                    out.push((input, self.conv2d_input_grad(grad, g, stride, padding, hw)?));
                }
                if want(grad) {
                    out.push((grad, self.conv2d(input, g, stride, padding)?));
                }
            }
            Op::ChannelBias(b) => out.push((b, self.channel_sum(g)?)),
            Op::ChannelSum(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.channel_bias(g, &shape)?));
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
            } => {
                let s = self.value(input).shape();
                let hw = (s[2], s[3]);
                out.push((input, self.avgpool2d_grad(g, kernel, stride, hw)?));
            }
            Op::AvgPoolGrad {
                grad,
                kernel,
                stride,
            } => out.push((grad, self.avgpool2d(g, kernel, stride)?)),
            Op::Diff { input, axis } => out.push((input, self.diff_adjoint(g, axis)?)),
            Op::DiffAdjoint { grad, axis } => out.push((grad, self.diff(g, axis)?)),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(p).batch_len();
                    if want(p) {
                        out.push((p, self.slice(g, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { input, start } => {
                let total = self.value(input).batch_len();
                out.push((input, self.pad(g, start, total)?));
            }
            Op::Pad { input, start } => {
                let len = self.value(input).batch_len();
                out.push((input, self.slice(g, start, len)?));
            }
        }
        debug_assert!(out
            .iter()
            .all(|(v, gv)| numel(self.value(*v).shape()) == self.value(*gv).len()));
        Ok(out)
    }
}
