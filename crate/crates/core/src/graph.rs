//! Tape-based reverse-mode differentiation over [`Tensor`] kernels.
//!
//! A [`Graph`] records every kernel application as a node. Leaves are either
//! constants or trainable inputs (`requires_grad`); [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every trainable leaf.
//! Parameter leaves borrow their tensors, so binding a large parameter set
//! does not copy it.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, NormCache};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowBias(Var, Var),
    MulSpatial(Var, Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatChannels(Vec<Var>),
    Conv1x1 { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var, stride: usize },
    DwConv3x3 { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    PixelShuffle(Var, usize),
    BilinearResize(Var),
    Maximum(Vec<Var>),
    SoftBoxGate { b: Var, alpha: f64 },
    BceLogitsMean { x: Var, target: Vec<f64> },
    Binarize,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::AddRowBias(..) => "add_row_bias",
            Op::MulSpatial(..) => "mul_spatial",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Conv1x1 { .. } => "conv_1x1",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::DwConv3x3 { .. } => "dwconv_3x3",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::BilinearResize(_) => "bilinear_resize",
            Op::Maximum(_) => "maximum",
            Op::SoftBoxGate { .. } => "soft_box_gate",
            Op::BceLogitsMean { .. } => "bce_logits_mean",
            Op::Binarize => "binarize",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every trainable leaf of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Non-trainable leaf borrowing an existing tensor.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf owning its tensor.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Trainable leaf borrowing an existing tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = kernels::transpose(self.value(x))?;
        Ok(self.push_op(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// `x·w + b` for `x: M×K`, `w: K×N`, `b: N`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    // -- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_kernel(name, ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            Tensor::from_kernel(name, ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            Tensor::from_kernel(name, tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::dim(
                name,
                format!("shapes {:?} and {:?} do not broadcast", ta.shape(), tb.shape()),
            ));
        };
        Ok(self.push_op(out, op, &[a, b]))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let t = kernels::map("scale", self.value(x), |v| v * k)?;
        Ok(self.push_op(t, Op::Scale(x, k), &[x]))
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Result<Var> {
        let t = kernels::map("add_const", self.value(x), |v| v + k)?;
        Ok(self.push_op(t, Op::AddConst(x), &[x]))
    }

    /// Adds `b` (length N) to every row of `x` (`…×N`).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.value(b).numel() != n {
            return Err(Error::dim("add_row_bias", format!("bias of {} values for rows of {n}", self.value(b).numel())));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let t = Tensor::from_kernel("add_row_bias", self.shape(x).to_vec(), data)?;
        Ok(self.push_op(t, Op::AddRowBias(x, b), &[x, b]))
    }

    /// Multiplies every channel of `x: C×H×W` by the map `g: H×W`.
    pub fn mul_spatial(&mut self, x: Var, g: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("mul_spatial")?;
        if self.shape(g) != [h, w] {
            return Err(Error::dim("mul_spatial", format!("gate {:?} for map {h}×{w}", self.shape(g))));
        }
        let gate = self.value(g).data();
        let mut data = self.value(x).data().to_vec();
        for plane in data.chunks_mut(h * w) {
            for (v, gv) in plane.iter_mut().zip(gate) {
                *v *= gv;
            }
        }
        let t = Tensor::from_kernel("mul_spatial", vec![c, h, w], data)?;
        Ok(self.push_op(t, Op::MulSpatial(x, g), &[x, g]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::from_kernel("sum", vec![1], vec![self.value(x).sum()])?;
        Ok(self.push_op(t, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::from_kernel("mean", vec![1], vec![v.sum() / v.numel() as f64])?;
        Ok(self.push_op(t, Op::Mean(x), &[x]))
    }

    /// Elementwise maximum over same-shaped inputs. Ties go to the earliest input.
    pub fn maximum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Validation("maximum of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        let mut data = self.value(first).data().to_vec();
        for &v in &xs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim("maximum", "inputs must share a shape"));
            }
            for (d, s) in data.iter_mut().zip(self.value(v).data()) {
                if *s > *d {
                    *d = *s;
                }
            }
        }
        let t = Tensor::from_kernel("maximum", shape, data)?;
        Ok(self.push_op(t, Op::Maximum(xs.to_vec()), xs))
    }

    // -- structural --------------------------------------------------------

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let data = (0..m).flat_map(|i| src[i * n + start..i * n + start + len].iter().copied()).collect();
        let t = Tensor::from_kernel("slice_cols", vec![m, len], data)?;
        Ok(self.push_op(t, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.value(xs[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (mi, ni) = self.value(v).dims2("concat_cols")?;
            if mi != m {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&v, &wi) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[i * wi..(i + 1) * wi]);
            }
        }
        let t = Tensor::from_kernel("concat_cols", vec![m, n], data)?;
        Ok(self.push_op(t, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// Concatenates `C_i×H×W` maps along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(xs[0]).dims3("concat_channels")?;
        let mut c = 0;
        let mut data = Vec::new();
        for &v in xs {
            let (ci, hi, wi) = self.value(v).dims3("concat_channels")?;
            if (hi, wi) != (h, w) {
                return Err(Error::dim("concat_channels", format!("{hi}×{wi} vs {h}×{w}")));
            }
            c += ci;
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::from_kernel("concat_channels", vec![c, h, w], data)?;
        Ok(self.push_op(t, Op::ConcatChannels(xs.to_vec()), xs))
    }

    // -- convolution and normalization --------------------------------------

    pub fn conv_1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let t = kernels::conv_1x1(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push_op(t, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let t = kernels::conv3x3(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push_op(t, Op::Conv3x3 { x, w, b, stride }, &[x, w, b]))
    }

    pub fn dwconv_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let t = kernels::dwconv_3x3(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push_op(t, Op::DwConv3x3 { x, w, b }, &[x, w, b]))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, cache) =
            kernels::group_norm_with_cache(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_op(t, Op::GroupNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, cache) = kernels::layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_op(t, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    // -- activations -------------------------------------------------------

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = kernels::gelu(self.value(x))?;
        Ok(self.push_op(t, Op::Gelu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = kernels::sigmoid(self.value(x))?;
        Ok(self.push_op(t, Op::Sigmoid(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = kernels::softmax(self.value(x))?;
        Ok(self.push_op(t, Op::Softmax(x), &[x]))
    }

    /// Hard threshold at zero. Not differentiable: backward through it fails.
    pub fn binarize(&mut self, x: Var) -> Result<Var> {
        let t = kernels::map("binarize", self.value(x), |v| if v > 0.0 { 1.0 } else { 0.0 })?;
        Ok(self.push_op(t, Op::Binarize, &[x]))
    }

    // -- resampling --------------------------------------------------------

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = kernels::pixel_shuffle(self.value(x), r)?;
        Ok(self.push_op(t, Op::PixelShuffle(x, r), &[x]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push_op(t, Op::BilinearResize(x), &[x]))
    }

    // -- domain kernels ----------------------------------------------------

    /// Product-of-sigmoids box field rasterized at pixel centers.
    /// `b` holds `(x1, y1, x2, y2)` in normalized coordinates.
    pub fn soft_box_gate(&mut self, b: Var, h: usize, w: usize, alpha: f64) -> Result<Var> {
        if self.value(b).numel() != 4 {
            return Err(Error::dim("soft_box_gate", "box must have four coordinates"));
        }
        let c = self.value(b).data();
        let data = gate_field(c[0], c[1], c[2], c[3], h, w, alpha).values;
        let t = Tensor::from_kernel("soft_box_gate", vec![h, w], data)?;
        Ok(self.push_op(t, Op::SoftBoxGate { b, alpha }, &[b]))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against a fixed target.
    pub fn bce_logits_mean(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.value(x).numel() != target.len() {
            return Err(Error::dim("bce_logits_mean", "target size differs from logits"));
        }
        let l = kernels::bce_with_logits_mean(self.value(x).data(), target);
        let t = Tensor::from_kernel("bce_logits_mean", vec![1], vec![l])?;
        Ok(self.push_op(t, Op::BceLogitsMean { x, target: target.to_vec() }, &[x]))
    }

    // -- reverse pass ------------------------------------------------------

    /// Reverse-mode gradients of the single-element tensor `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::from_kernel("backward", self.nodes[i].value.shape().to_vec(), d))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    /// Gradient for a broadcasting binary operand: summed when the operand is a single element.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if self.value(v).numel() == 1 && d.len() != 1 {
            self.acc(grads, v, vec![d.iter().sum()]);
        } else {
            self.acc(grads, v, d);
        }
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.value(v).data();
        // Broadcast-aware accessor: element i of operand v.
        let at = |v: Var, i: usize| {
            let d = self.value(v).data();
            if d.len() == 1 {
                d[0]
            } else {
                d[i]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.shape(*b)[1];
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g, m, k, n);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2("transpose")?;
                self.acc(grads, *x, kernels::transpose_raw(g, n, m));
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g.to_vec());
                self.acc_broadcast(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g.to_vec());
                self.acc_broadcast(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da = g.iter().enumerate().map(|(i, gv)| gv * at(*b, i)).collect();
                let db = g.iter().enumerate().map(|(i, gv)| gv * at(*a, i)).collect();
                self.acc_broadcast(grads, *a, da);
                self.acc_broadcast(grads, *b, db);
            }
            Op::Div(a, b) => {
                let da = g.iter().enumerate().map(|(i, gv)| gv / at(*b, i)).collect();
                let db = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        let bv = at(*b, i);
                        -gv * at(*a, i) / (bv * bv)
                    })
                    .collect();
                self.acc_broadcast(grads, *a, da);
                self.acc_broadcast(grads, *b, db);
            }
            Op::Scale(x, k) => self.acc(grads, *x, g.iter().map(|v| v * k).collect()),
            Op::AddConst(x) => self.acc(grads, *x, g.to_vec()),
            Op::AddRowBias(x, b) => {
                let n = self.value(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.acc(grads, *x, g.to_vec());
                self.acc(grads, *b, db);
            }
            Op::MulSpatial(x, gate) => {
                let gv = val(*gate);
                let plane = gv.len();
                let xv = val(*x);
                let mut dx = g.to_vec();
                let mut dg = vec![0.0; plane];
                for (c, chunk) in dx.chunks_mut(plane).enumerate() {
                    let xs = &xv[c * plane..(c + 1) * plane];
                    for p in 0..plane {
                        dg[p] += chunk[p] * xs[p];
                        chunk[p] *= gv[p];
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gate, dg);
            }
            Op::Sum(x) => self.acc(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Maximum(xs) => {
                let mut winners = vec![0usize; g.len()];
                let mut best = val(xs[0]).to_vec();
                for (k, &v) in xs.iter().enumerate().skip(1) {
                    for (i, &s) in val(v).iter().enumerate() {
                        if s > best[i] {
                            best[i] = s;
                            winners[i] = k;
                        }
                    }
                }
                for (k, &v) in xs.iter().enumerate() {
                    let d = g
                        .iter()
                        .zip(&winners)
                        .map(|(gv, &w)| if w == k { *gv } else { 0.0 })
                        .collect();
                    self.acc(grads, v, d);
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2("slice_cols")?;
                let len = g.len() / m;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let widths: Vec<usize> = xs.iter().map(|v| self.shape(*v)[1]).collect();
                let n: usize = widths.iter().sum();
                let m = g.len() / n;
                let mut offset = 0;
                for (&v, &wi) in xs.iter().zip(&widths) {
                    let d = (0..m)
                        .flat_map(|i| g[i * n + offset..i * n + offset + wi].iter().copied())
                        .collect();
                    self.acc(grads, v, d);
                    offset += wi;
                }
            }
            Op::ConcatChannels(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    self.acc(grads, v, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (c, h, wd) = self.value(*x).dims3("conv_1x1")?;
                let co = self.shape(*w)[0];
                let (dx, dw, db) = kernels::conv_1x1_backward(val(*x), val(*w), g, c, co, h * wd);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let (c, h, wd) = self.value(*x).dims3("conv3x3")?;
                let dims = ConvDims {
                    c_in: c,
                    c_out: self.shape(*w)[0],
                    h,
                    w: wd,
                    stride: *stride,
                };
                let need_dx = self.requires_grad(*x);
                let (dx, dw, db) = kernels::conv3x3_backward(val(*x), val(*w), g, &dims, need_dx);
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::DwConv3x3 { x, w, b } => {
                let (c, h, wd) = self.value(*x).dims3("dwconv_3x3")?;
                let (dx, dw, db) = kernels::dwconv_3x3_backward(val(*x), val(*w), g, c, h, wd);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::GroupNorm { x, gamma, beta, cache } => {
                let (c, h, wd) = self.value(*x).dims3("group_norm")?;
                let plane = h * wd;
                let groups = cache.rstd.len();
                let gam = val(*gamma);
                let mut dxhat = g.to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let range = ch * plane..(ch + 1) * plane;
                    dgamma[ch] = kernels::dot(&g[range.clone()], &cache.xhat[range.clone()]);
                    dbeta[ch] = g[range.clone()].iter().sum();
                    for v in &mut dxhat[range] {
                        *v *= gam[ch];
                    }
                }
                let dx = kernels::block_normalize_backward(&dxhat, cache, (c / groups) * plane);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let d = self.value(*gamma).numel();
                let gam = val(*gamma);
                let mut dxhat = g.to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (row, (grow, xrow)) in dxhat.chunks_mut(d).zip(g.chunks(d).zip(cache.xhat.chunks(d))) {
                    for j in 0..d {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                        row[j] *= gam[j];
                    }
                }
                let dx = kernels::block_normalize_backward(&dxhat, cache, d);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let d = g.iter().zip(val(*x)).map(|(gv, &xv)| gv * kernels::gelu_grad_scalar(xv)).collect();
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(node.value.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                self.acc(grads, *x, d);
            }
            Op::Softmax(x) => {
                let dlast = *node.value.shape().last().expect("rank >= 1");
                self.acc(grads, *x, kernels::softmax_backward(node.value.data(), g, dlast));
            }
            Op::PixelShuffle(x, r) => {
                let (c, oh, ow) = node.value.dims3("pixel_shuffle")?;
                let mut dx = vec![0.0; g.len()];
                kernels::shuffle_apply(c, *r, oh / r, ow / r, |src, dst| dx[src] = g[dst]);
                self.acc(grads, *x, dx);
            }
            Op::BilinearResize(x) => {
                let (c, h, wd) = self.value(*x).dims3("bilinear_resize")?;
                let (_, oh, ow) = node.value.dims3("bilinear_resize")?;
                self.acc(grads, *x, kernels::bilinear_resize_backward(g, c, h, wd, oh, ow));
            }
            Op::SoftBoxGate { b, alpha } => {
                let (h, w) = node.value.dims2("soft_box_gate")?;
                let c = val(*b);
                self.acc(grads, *b, gate_field_backward(c, h, w, *alpha, g).to_vec());
            }
            Op::BceLogitsMean { x, target } => {
                let n = target.len() as f64;
                let d = val(*x)
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| g[0] * (kernels::sigmoid_scalar(z) - t) / n)
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Binarize => return Err(Error::Unsupported { op: "binarize" }),
        }
        Ok(())
    }
}

/// Rasterized gate plus its separable factors.
pub(crate) struct GateRaster {
    pub values: Vec<f64>,
}

fn axis_factor(p: f64, lo: f64, hi: f64, alpha: f64) -> (f64, f64, f64) {
    let a = kernels::sigmoid_scalar(alpha * (p - lo));
    let b = kernels::sigmoid_scalar(alpha * (hi - p));
    (a * b, a, b)
}

fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

pub(crate) fn gate_field(x1: f64, y1: f64, x2: f64, y2: f64, h: usize, w: usize, alpha: f64) -> GateRaster {
    let fx: Vec<f64> = (0..w).map(|j| axis_factor(pixel_center(j, w), x1, x2, alpha).0).collect();
    let fy: Vec<f64> = (0..h).map(|i| axis_factor(pixel_center(i, h), y1, y2, alpha).0).collect();
    let mut values = Vec::with_capacity(h * w);
    for y in &fy {
        values.extend(fx.iter().map(|x| x * y));
    }
    GateRaster { values }
}

/// Gradient of `Σ g·M` with respect to `(x1, y1, x2, y2)`.
fn gate_field_backward(c: &[f64], h: usize, w: usize, alpha: f64, g: &[f64]) -> [f64; 4] {
    let (x1, y1, x2, y2) = (c[0], c[1], c[2], c[3]);
    let xs: Vec<(f64, f64, f64)> = (0..w).map(|j| axis_factor(pixel_center(j, w), x1, x2, alpha)).collect();
    let ys: Vec<(f64, f64, f64)> = (0..h).map(|i| axis_factor(pixel_center(i, h), y1, y2, alpha)).collect();
    let mut out = [0.0; 4];
    for (i, &(fy, ay, by)) in ys.iter().enumerate() {
        for (j, &(fx, ax, bx)) in xs.iter().enumerate() {
            let m = fx * fy;
            let gm = g[i * w + j] * m;
            // d/d lo of σ(α(p−lo)) = −α(1−σ); d/d hi of σ(α(hi−p)) = α(1−σ)
            out[0] -= gm * alpha * (1.0 - ax);
            out[2] += gm * alpha * (1.0 - bx);
            out[1] -= gm * alpha * (1.0 - ay);
            out[3] += gm * alpha * (1.0 - by);
        }
    }
    out
}
