//! Reverse-mode automatic differentiation with second-order support.
//!
//! A `Tape` records every operation as an append-only node list; inputs of a
//! node always precede it. `grad` walks the recorded subgraph in reverse and
//! builds each vector-Jacobian product *out of tape operations*, so the
//! returned gradients are ordinary tape values. With `create_graph` set they
//! stay differentiable, which is what the second-order meta update needs:
//! a backward pass over the tape is itself recorded on the tape.
//!
//! The primitive set is closed under differentiation: every op's adjoint is
//! expressible with ops from the same set (convolution's input/kernel
//! adjoints are primitives themselves; the pooling adjoints are an indexed
//! scatter/gather pair; softmax cross-entropy's adjoint composes softmax,
//! subtract and scale).

pub mod check;
pub mod kernels;

use crate::tensor::{LabelMap, Tensor, TensorError};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub enum AdError {
    /// Operand shapes do not conform for the named op.
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    LabelOutOfRange { op: &'static str, label: u8, num_classes: usize },
    NonScalarOutput { shape: Vec<usize> },
    /// A value from a different tape was passed in.
    TapeMismatch { op: &'static str },
    NonFinite { context: String },
    Tensor(TensorError),
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::Shape { op, lhs, rhs } => {
                write!(f, "{op}: operand shapes do not conform: {lhs:?} vs {rhs:?}")
            }
            AdError::LabelOutOfRange { op, label, num_classes } => {
                write!(f, "{op}: label {label} out of range for {num_classes} classes")
            }
            AdError::NonScalarOutput { shape } => {
                write!(f, "grad requires a scalar output, got shape {shape:?}")
            }
            AdError::TapeMismatch { op } => write!(f, "{op}: value belongs to a different tape"),
            AdError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            AdError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AdError {}

impl From<TensorError> for AdError {
    fn from(e: TensorError) -> Self {
        AdError::Tensor(e)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Recorded operation kinds. Saved metadata is whatever backward needs.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// 1.0 where input > 0 else 0.0; derivative defined as zero everywhere.
    GtZeroMask(NodeId),
    Sum(NodeId),
    BroadcastScalar(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    Conv2dGradInput { g: NodeId, k: NodeId, stride: usize, pad: usize },
    Conv2dGradKernel { x: NodeId, g: NodeId, stride: usize, pad: usize },
    BiasBroadcast(NodeId),
    SpatialSum(NodeId),
    MaxPool2 { x: NodeId, idx: Rc<Vec<u32>> },
    SelectScatter { src: NodeId, idx: Rc<Vec<u32>> },
    SelectGather { src: NodeId, idx: Rc<Vec<u32>> },
    Upsample2(NodeId),
    SumPool2(NodeId),
    Softmax(NodeId),
    ChanSum(NodeId),
    ChanBroadcast(NodeId),
    SoftmaxXent { logits: NodeId, labels: Rc<LabelMap> },
}

impl Op {
    /// Differentiable inputs (index sources with zero derivative excluded).
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Mul(a, b) | Matmul(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | Relu(a)
            | GtZeroMask(a)
            | Sum(a)
            | BroadcastScalar(a)
            | Transpose(a)
            | SpatialSum(a)
            | Upsample2(a)
            | SumPool2(a)
            | Softmax(a)
            | ChanSum(a)
            | ChanBroadcast(a) => [Some(a), None],
            Conv2d { x, k, .. } => [Some(x), Some(k)],
            Conv2dGradInput { g, k, .. } => [Some(g), Some(k)],
            Conv2dGradKernel { x, g, .. } => [Some(x), Some(g)],
            BiasBroadcast(b) => [Some(b), None],
            MaxPool2 { x, .. } => [Some(x), None],
            SelectScatter { src, .. } | SelectGather { src, .. } => [Some(src), None],
            SoftmaxXent { logits, .. } => [Some(logits), None],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Append-only record of operations; the unit of all differentiation.
/// Single-threaded by design: distinct tapes may live on distinct threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A value on a tape: a cheap (reference, index) handle.
#[derive(Clone, Copy)]
pub struct Val<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Val<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Val(#{}, shape {:?})", self.id.0, self.shape())
    }
}

impl<'t> Val<'t> {
    pub fn tensor(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn scalar(&self) -> Result<f64, AdError> {
        Ok(self.tensor().scalar_value()?)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (a parameter).
    pub fn param(&self, t: Tensor) -> Val<'_> {
        self.push(Op::Leaf, t, true)
    }

    /// A non-differentiable leaf (data, targets, frozen values).
    pub fn constant(&self, t: Tensor) -> Val<'_> {
        self.push(Op::Leaf, t, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Val<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { op, value: Rc::new(value), requires_grad });
        Val { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        self.nodes.borrow()[id.0].value.clone()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn check(&self, v: Val<'_>, op: &'static str) -> Result<(), AdError> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(AdError::TapeMismatch { op })
        }
    }

    fn val(&self, id: NodeId) -> Val<'_> {
        Val { tape: self, id }
    }

    // ----- elementwise ops -----

    /// Elementwise addition; one side may be a scalar.
    pub fn add<'t>(&'t self, a: Val<'t>, b: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (ta, tb) = (self.value(a.id), self.value(b.id));
        let req = self.requires(a.id) || self.requires(b.id);
        let data: Vec<f64>;
        let shape: Vec<usize>;
        if ta.shape() == tb.shape() {
            shape = ta.shape().to_vec();
            data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        } else if ta.is_scalar() {
            shape = tb.shape().to_vec();
            let s = ta.data()[0];
            data = tb.data().iter().map(|y| s + y).collect();
        } else if tb.is_scalar() {
            shape = ta.shape().to_vec();
            let s = tb.data()[0];
            data = ta.data().iter().map(|x| x + s).collect();
        } else {
            return Err(AdError::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(self.push(Op::Add(a.id, b.id), Tensor::from_raw(shape, data), req))
    }

    /// Elementwise product; one side may be a scalar.
    pub fn mul<'t>(&'t self, a: Val<'t>, b: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let (ta, tb) = (self.value(a.id), self.value(b.id));
        let req = self.requires(a.id) || self.requires(b.id);
        let data: Vec<f64>;
        let shape: Vec<usize>;
        if ta.shape() == tb.shape() {
            shape = ta.shape().to_vec();
            data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        } else if ta.is_scalar() {
            shape = tb.shape().to_vec();
            let s = ta.data()[0];
            data = tb.data().iter().map(|y| s * y).collect();
        } else if tb.is_scalar() {
            shape = ta.shape().to_vec();
            let s = tb.data()[0];
            data = ta.data().iter().map(|x| x * s).collect();
        } else {
            return Err(AdError::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(self.push(Op::Mul(a.id, b.id), Tensor::from_raw(shape, data), req))
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale<'t>(&'t self, a: Val<'t>, c: f64) -> Result<Val<'t>, AdError> {
        self.check(a, "scale")?;
        let ta = self.value(a.id);
        let data = ta.data().iter().map(|x| c * x).collect();
        let req = self.requires(a.id);
        Ok(self.push(Op::Scale(a.id, c), Tensor::from_raw(ta.shape().to_vec(), data), req))
    }

    /// a - b as a composition (add + scale).
    pub fn sub<'t>(&'t self, a: Val<'t>, b: Val<'t>) -> Result<Val<'t>, AdError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn relu<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "relu")?;
        let ta = self.value(a.id);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let req = self.requires(a.id);
        Ok(self.push(Op::Relu(a.id), Tensor::from_raw(ta.shape().to_vec(), data), req))
    }

    /// Indicator of positivity; constant w.r.t. differentiation.
    fn gt_zero_mask<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "gt_zero_mask")?;
        let ta = self.value(a.id);
        let data = ta.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        Ok(self.push(Op::GtZeroMask(a.id), Tensor::from_raw(ta.shape().to_vec(), data), false))
    }

    // ----- reductions and broadcasts -----

    /// Sum of all elements, as a scalar.
    pub fn sum<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "sum")?;
        let ta = self.value(a.id);
        let s = ta.data().iter().sum();
        let req = self.requires(a.id);
        Ok(self.push(Op::Sum(a.id), Tensor::from_raw(vec![1], vec![s]), req))
    }

    /// Mean of all elements, as a scalar (composition).
    pub fn mean<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        let n = self.value(a.id).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Fill a tensor of `shape` with a scalar value.
    pub fn broadcast_scalar<'t>(&'t self, s: Val<'t>, shape: Vec<usize>) -> Result<Val<'t>, AdError> {
        self.check(s, "broadcast_scalar")?;
        let ts = self.value(s.id);
        if !ts.is_scalar() {
            return Err(AdError::Shape {
                op: "broadcast_scalar",
                lhs: ts.shape().to_vec(),
                rhs: shape,
            });
        }
        let n: usize = shape.iter().product();
        let req = self.requires(s.id);
        let t = Tensor::from_raw(shape.clone(), vec![ts.data()[0]; n]);
        Ok(self.push(Op::BroadcastScalar(s.id), t, req))
    }

    // ----- linear algebra -----

    pub fn matmul<'t>(&'t self, a: Val<'t>, b: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (self.value(a.id), self.value(b.id));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, kd, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(ta.data(), tb.data(), (m, kd, n));
        let req = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::Matmul(a.id, b.id), Tensor::from_raw(vec![m, n], data), req))
    }

    pub fn transpose<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "transpose")?;
        let ta = self.value(a.id);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(AdError::Shape { op: "transpose", lhs: s.to_vec(), rhs: vec![] });
        }
        let data = kernels::transpose(ta.data(), (s[0], s[1]));
        let req = self.requires(a.id);
        Ok(self.push(Op::Transpose(a.id), Tensor::from_raw(vec![s[1], s[0]], data), req))
    }

    // ----- convolution family -----

    fn conv_shapes(
        op: &'static str,
        xs: &[usize],
        ks: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<((usize, usize, usize), (usize, usize, usize)), AdError> {
        let err = || AdError::Shape { op, lhs: xs.to_vec(), rhs: ks.to_vec() };
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || stride == 0 {
            return Err(err());
        }
        let (h, w) = (xs[1], xs[2]);
        let (kh, kw) = (ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(err());
        }
        Ok(((xs[0], h, w), (ks[0], kh, kw)))
    }

    /// 2-D convolution (cross-correlation): x [C_in,H,W], k [C_out,C_in,kH,kW].
    pub fn conv2d<'t>(
        &'t self,
        x: Val<'t>,
        k: Val<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Val<'t>, AdError> {
        self.check(x, "conv2d")?;
        self.check(k, "conv2d")?;
        let (tx, tk) = (self.value(x.id), self.value(k.id));
        let (xd, kd) = Self::conv_shapes("conv2d", tx.shape(), tk.shape(), stride, pad)?;
        let data = kernels::conv2d(tx.data(), tk.data(), xd, kd, stride, pad);
        let oh = kernels::conv_out_len(xd.1, kd.1, stride, pad);
        let ow = kernels::conv_out_len(xd.2, kd.2, stride, pad);
        let req = self.requires(x.id) || self.requires(k.id);
        Ok(self.push(
            Op::Conv2d { x: x.id, k: k.id, stride, pad },
            Tensor::from_raw(vec![kd.0, oh, ow], data),
            req,
        ))
    }

    /// Adjoint of conv2d w.r.t. input; a primitive so it is differentiable.
    fn conv2d_grad_input<'t>(
        &'t self,
        g: Val<'t>,
        k: Val<'t>,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
    ) -> Result<Val<'t>, AdError> {
        let (tg, tk) = (self.value(g.id), self.value(k.id));
        let ks = tk.shape();
        let xd = (ks[1], in_hw.0, in_hw.1);
        let kd = (ks[0], ks[2], ks[3]);
        let data = kernels::conv2d_grad_input(tg.data(), tk.data(), xd, kd, stride, pad);
        let req = self.requires(g.id) || self.requires(k.id);
        Ok(self.push(
            Op::Conv2dGradInput { g: g.id, k: k.id, stride, pad },
            Tensor::from_raw(vec![xd.0, xd.1, xd.2], data),
            req,
        ))
    }

    /// Adjoint of conv2d w.r.t. kernel; also a differentiable primitive.
    fn conv2d_grad_kernel<'t>(
        &'t self,
        x: Val<'t>,
        g: Val<'t>,
        stride: usize,
        pad: usize,
        k_hw: (usize, usize),
    ) -> Result<Val<'t>, AdError> {
        let (tx, tg) = (self.value(x.id), self.value(g.id));
        let xs = tx.shape();
        let gs = tg.shape();
        let xd = (xs[0], xs[1], xs[2]);
        let kd = (gs[0], k_hw.0, k_hw.1);
        let data = kernels::conv2d_grad_kernel(tx.data(), tg.data(), xd, kd, stride, pad);
        let req = self.requires(x.id) || self.requires(g.id);
        Ok(self.push(
            Op::Conv2dGradKernel { x: x.id, g: g.id, stride, pad },
            Tensor::from_raw(vec![kd.0, xd.0, kd.1, kd.2], data),
            req,
        ))
    }

    /// Broadcast a per-channel bias [C] over [C,H,W].
    pub fn bias_broadcast<'t>(&'t self, b: Val<'t>, hw: (usize, usize)) -> Result<Val<'t>, AdError> {
        self.check(b, "bias_broadcast")?;
        let tb = self.value(b.id);
        if tb.shape().len() != 1 {
            return Err(AdError::Shape {
                op: "bias_broadcast",
                lhs: tb.shape().to_vec(),
                rhs: vec![hw.0, hw.1],
            });
        }
        let c = tb.shape()[0];
        let mut data = vec![0.0; c * hw.0 * hw.1];
        for ch in 0..c {
            data[ch * hw.0 * hw.1..(ch + 1) * hw.0 * hw.1].fill(tb.data()[ch]);
        }
        let req = self.requires(b.id);
        Ok(self.push(
            Op::BiasBroadcast(b.id),
            Tensor::from_raw(vec![c, hw.0, hw.1], data),
            req,
        ))
    }

    /// Sum [C,H,W] over the spatial axes to [C]; adjoint of bias_broadcast.
    pub fn spatial_sum<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "spatial_sum")?;
        let ta = self.value(a.id);
        let s = ta.shape();
        if s.len() != 3 {
            return Err(AdError::Shape { op: "spatial_sum", lhs: s.to_vec(), rhs: vec![] });
        }
        let hw = s[1] * s[2];
        let data: Vec<f64> =
            (0..s[0]).map(|c| ta.data()[c * hw..(c + 1) * hw].iter().sum()).collect();
        let req = self.requires(a.id);
        Ok(self.push(Op::SpatialSum(a.id), Tensor::from_raw(vec![s[0]], data), req))
    }

    // ----- pooling and resampling -----

    fn expect_3d_even(&self, v: Val<'_>, op: &'static str) -> Result<(usize, usize, usize), AdError> {
        let t = self.value(v.id);
        let s = t.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(AdError::Shape { op, lhs: s.to_vec(), rhs: vec![] });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// 2x2 max pooling, stride 2; window argmax indices are saved for backward
    /// and treated as constants (the standard subgradient convention).
    pub fn max_pool2<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "max_pool2")?;
        let dims = self.expect_3d_even(a, "max_pool2")?;
        let ta = self.value(a.id);
        let (out, idx) = kernels::max_pool2(ta.data(), dims);
        let req = self.requires(a.id);
        Ok(self.push(
            Op::MaxPool2 { x: a.id, idx: Rc::new(idx) },
            Tensor::from_raw(vec![dims.0, dims.1 / 2, dims.2 / 2], out),
            req,
        ))
    }

    fn select_scatter<'t>(
        &'t self,
        src: Val<'t>,
        idx: Rc<Vec<u32>>,
        shape: Vec<usize>,
    ) -> Result<Val<'t>, AdError> {
        let ts = self.value(src.id);
        let out_len = shape.iter().product();
        let data = kernels::select_scatter(ts.data(), &idx, out_len);
        let req = self.requires(src.id);
        Ok(self.push(Op::SelectScatter { src: src.id, idx }, Tensor::from_raw(shape, data), req))
    }

    fn select_gather<'t>(
        &'t self,
        src: Val<'t>,
        idx: Rc<Vec<u32>>,
        shape: Vec<usize>,
    ) -> Result<Val<'t>, AdError> {
        let ts = self.value(src.id);
        let data = kernels::select_gather(ts.data(), &idx);
        let req = self.requires(src.id);
        Ok(self.push(Op::SelectGather { src: src.id, idx }, Tensor::from_raw(shape, data), req))
    }

    /// Nearest-neighbor 2x upsampling of [C,H,W].
    pub fn upsample2_nearest<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "upsample2_nearest")?;
        let ta = self.value(a.id);
        let s = ta.shape();
        if s.len() != 3 {
            return Err(AdError::Shape { op: "upsample2_nearest", lhs: s.to_vec(), rhs: vec![] });
        }
        let dims = (s[0], s[1], s[2]);
        let data = kernels::upsample2(ta.data(), dims);
        let req = self.requires(a.id);
        Ok(self.push(
            Op::Upsample2(a.id),
            Tensor::from_raw(vec![dims.0, dims.1 * 2, dims.2 * 2], data),
            req,
        ))
    }

    /// 2x2 block sums, stride 2; adjoint of upsample2_nearest.
    pub fn sum_pool2<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "sum_pool2")?;
        let dims = self.expect_3d_even(a, "sum_pool2")?;
        let ta = self.value(a.id);
        let data = kernels::sum_pool2(ta.data(), dims);
        let req = self.requires(a.id);
        Ok(self.push(
            Op::SumPool2(a.id),
            Tensor::from_raw(vec![dims.0, dims.1 / 2, dims.2 / 2], data),
            req,
        ))
    }

    // ----- classification -----

    /// Channelwise softmax over the class axis of [K,H,W].
    pub fn softmax<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "softmax")?;
        let ta = self.value(a.id);
        let s = ta.shape();
        if s.len() != 3 {
            return Err(AdError::Shape { op: "softmax", lhs: s.to_vec(), rhs: vec![] });
        }
        let data = kernels::softmax(ta.data(), (s[0], s[1], s[2]));
        let req = self.requires(a.id);
        Ok(self.push(Op::Softmax(a.id), Tensor::from_raw(s.to_vec(), data), req))
    }

    /// Sum over the class axis: [K,H,W] -> [1,H,W].
    pub fn chan_sum<'t>(&'t self, a: Val<'t>) -> Result<Val<'t>, AdError> {
        self.check(a, "chan_sum")?;
        let ta = self.value(a.id);
        let s = ta.shape();
        if s.len() != 3 {
            return Err(AdError::Shape { op: "chan_sum", lhs: s.to_vec(), rhs: vec![] });
        }
        let hw = s[1] * s[2];
        let mut data = vec![0.0; hw];
        for c in 0..s[0] {
            for p in 0..hw {
                data[p] += ta.data()[c * hw + p];
            }
        }
        let req = self.requires(a.id);
        Ok(self.push(Op::ChanSum(a.id), Tensor::from_raw(vec![1, s[1], s[2]], data), req))
    }

    /// Repeat [1,H,W] across K channels; adjoint of chan_sum.
    pub fn chan_broadcast<'t>(&'t self, a: Val<'t>, k: usize) -> Result<Val<'t>, AdError> {
        self.check(a, "chan_broadcast")?;
        let ta = self.value(a.id);
        let s = ta.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(AdError::Shape { op: "chan_broadcast", lhs: s.to_vec(), rhs: vec![k] });
        }
        let hw = s[1] * s[2];
        let mut data = Vec::with_capacity(k * hw);
        for _ in 0..k {
            data.extend_from_slice(ta.data());
        }
        let req = self.requires(a.id);
        Ok(self.push(Op::ChanBroadcast(a.id), Tensor::from_raw(vec![k, s[1], s[2]], data), req))
    }

    /// Fused mean cross-entropy of logits [K,H,W] against labels [H,W],
    /// computed with the log-sum-exp trick.
    pub fn softmax_cross_entropy<'t>(
        &'t self,
        logits: Val<'t>,
        labels: &Rc<LabelMap>,
    ) -> Result<Val<'t>, AdError> {
        self.check(logits, "softmax_cross_entropy")?;
        let tl = self.value(logits.id);
        let s = tl.shape();
        if s.len() != 3 || s[1] != labels.height() || s[2] != labels.width() {
            return Err(AdError::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.height(), labels.width()],
            });
        }
        let k = s[0];
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= k) {
            return Err(AdError::LabelOutOfRange {
                op: "softmax_cross_entropy",
                label: bad,
                num_classes: k,
            });
        }
        let loss = kernels::softmax_xent(tl.data(), labels.data(), (k, s[1], s[2]));
        let req = self.requires(logits.id);
        Ok(self.push(
            Op::SoftmaxXent { logits: logits.id, labels: labels.clone() },
            Tensor::from_raw(vec![1], vec![loss]),
            req,
        ))
    }

    // ----- differentiation -----

    /// Reverse-mode gradient of a scalar `output` w.r.t. each value in `wrt`.
    ///
    /// The backward pass is built from tape ops. With `create_graph` the
    /// results remain differentiable; without it they are marked constant,
    /// so later differentiation treats them as frozen (this is exactly the
    /// first-order approximation when they feed an inner update).
    pub fn grad<'t>(
        &'t self,
        output: Val<'t>,
        wrt: &[Val<'t>],
        create_graph: bool,
    ) -> Result<Vec<Val<'t>>, AdError> {
        self.check(output, "grad")?;
        for w in wrt {
            self.check(*w, "grad")?;
        }
        let out_t = self.value(output.id);
        if !out_t.is_scalar() {
            return Err(AdError::NonScalarOutput { shape: out_t.shape().to_vec() });
        }

        // Nodes that both require grad and lie on a path to the output.
        let n = output.id.0 + 1;
        let mut active = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            if nodes[output.id.0].requires_grad {
                active[output.id.0] = true;
            }
            for i in (0..n).rev() {
                if !active[i] {
                    continue;
                }
                for inp in nodes[i].op.inputs().into_iter().flatten() {
                    if nodes[inp.0].requires_grad {
                        active[inp.0] = true;
                    }
                }
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if active[output.id.0] {
            adj[output.id.0] = Some(self.constant(Tensor::from_raw(vec![1], vec![1.0])).id);
        }
        for i in (0..n).rev() {
            if !active[i] || adj[i].is_none() {
                continue;
            }
            let g = self.val(adj[i].unwrap());
            let op = self.nodes.borrow()[i].op.clone();
            for (target, contrib) in self.vjp(&op, NodeId(i), g, &active)? {
                let slot = &mut adj[target.0];
                *slot = Some(match slot.take() {
                    None => contrib.id,
                    Some(prev) => self.add(self.val(prev), contrib)?.id,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let id = match adj.get(w.id.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value(w.id).shape().to_vec();
                    self.constant(Tensor::zeros(shape)).id
                }
            };
            if !create_graph {
                self.nodes.borrow_mut()[id.0].requires_grad = false;
            }
            out.push(self.val(id));
        }
        Ok(out)
    }

    /// Per-op vector-Jacobian products, built out of tape ops so they stay
    /// differentiable. Contributions are only produced for active inputs.
    fn vjp<'t>(
        &'t self,
        op: &Op,
        node: NodeId,
        g: Val<'t>,
        active: &[bool],
    ) -> Result<Vec<(NodeId, Val<'t>)>, AdError> {
        let on = |id: NodeId| active.get(id.0).copied().unwrap_or(false);
        let mut out: Vec<(NodeId, Val<'t>)> = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::GtZeroMask(_) => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).numel(), self.value(*b).numel());
                let so = self.value(node).numel();
                if on(*a) {
                    let c = if sa == 1 && so != 1 { self.sum(g)? } else { g };
                    out.push((*a, c));
                }
                if on(*b) {
                    let c = if sb == 1 && so != 1 { self.sum(g)? } else { g };
                    out.push((*b, c));
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.value(*a).numel(), self.value(*b).numel());
                let so = self.value(node).numel();
                if on(*a) {
                    let gb = self.mul(g, self.val(*b))?;
                    let c = if sa == 1 && so != 1 { self.sum(gb)? } else { gb };
                    out.push((*a, c));
                }
                if on(*b) {
                    let ga = self.mul(g, self.val(*a))?;
                    let c = if sb == 1 && so != 1 { self.sum(ga)? } else { ga };
                    out.push((*b, c));
                }
            }
            Op::Scale(a, c) => {
                if on(*a) {
                    out.push((*a, self.scale(g, *c)?));
                }
            }
            Op::Relu(a) => {
                if on(*a) {
                    let mask = self.gt_zero_mask(self.val(*a))?;
                    out.push((*a, self.mul(g, mask)?));
                }
            }
            Op::Sum(a) => {
                if on(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    out.push((*a, self.broadcast_scalar(g, shape)?));
                }
            }
            Op::BroadcastScalar(a) => {
                if on(*a) {
                    out.push((*a, self.sum(g)?));
                }
            }
            Op::Matmul(a, b) => {
                if on(*a) {
                    let bt = self.transpose(self.val(*b))?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if on(*b) {
                    let at = self.transpose(self.val(*a))?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if on(*a) {
                    out.push((*a, self.transpose(g)?));
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let xs = self.value(*x).shape().to_vec();
                if on(*x) {
                    let c = self.conv2d_grad_input(g, self.val(*k), *stride, *pad, (xs[1], xs[2]))?;
                    out.push((*x, c));
                }
                if on(*k) {
                    let ks = self.value(*k).shape().to_vec();
                    let c = self.conv2d_grad_kernel(self.val(*x), g, *stride, *pad, (ks[2], ks[3]))?;
                    out.push((*k, c));
                }
            }
            Op::Conv2dGradInput { g: g0, k, stride, pad, .. } => {
                // Value is x-shaped; upstream u is x-shaped. Bilinear in (g0, k).
                if on(*g0) {
                    out.push((*g0, self.conv2d(g, self.val(*k), *stride, *pad)?));
                }
                if on(*k) {
                    let ks = self.value(*k).shape().to_vec();
                    let c = self.conv2d_grad_kernel(g, self.val(*g0), *stride, *pad, (ks[2], ks[3]))?;
                    out.push((*k, c));
                }
            }
            Op::Conv2dGradKernel { x, g: g0, stride, pad, .. } => {
                // Value is kernel-shaped; upstream u is kernel-shaped.
                if on(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let c = self.conv2d_grad_input(self.val(*g0), g, *stride, *pad, (xs[1], xs[2]))?;
                    out.push((*x, c));
                }
                if on(*g0) {
                    out.push((*g0, self.conv2d(self.val(*x), g, *stride, *pad)?));
                }
            }
            Op::BiasBroadcast(b) => {
                if on(*b) {
                    out.push((*b, self.spatial_sum(g)?));
                }
            }
            Op::SpatialSum(a) => {
                if on(*a) {
                    let s = self.value(*a).shape().to_vec();
                    out.push((*a, self.bias_broadcast(g, (s[1], s[2]))?));
                }
            }
            Op::MaxPool2 { x, idx } => {
                if on(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    out.push((*x, self.select_scatter(g, idx.clone(), shape)?));
                }
            }
            Op::SelectScatter { src, idx, .. } => {
                if on(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    out.push((*src, self.select_gather(g, idx.clone(), shape)?));
                }
            }
            Op::SelectGather { src, idx, .. } => {
                if on(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    out.push((*src, self.select_scatter(g, idx.clone(), shape)?));
                }
            }
            Op::Upsample2(a) => {
                if on(*a) {
                    out.push((*a, self.sum_pool2(g)?));
                }
            }
            Op::SumPool2(a) => {
                if on(*a) {
                    out.push((*a, self.upsample2_nearest(g)?));
                }
            }
            Op::Softmax(a) => {
                if on(*a) {
                    // vjp = p * (g - broadcast(sum_k(g * p)))
                    let p = self.val(node);
                    let gp = self.mul(g, p)?;
                    let s = self.chan_sum(gp)?;
                    let k = self.value(node).shape()[0];
                    let sb = self.chan_broadcast(s, k)?;
                    let centered = self.sub(g, sb)?;
                    out.push((*a, self.mul(p, centered)?));
                }
            }
            Op::ChanSum(a) => {
                if on(*a) {
                    let k = self.value(*a).shape()[0];
                    out.push((*a, self.chan_broadcast(g, k)?));
                }
            }
            Op::ChanBroadcast(a) => {
                if on(*a) {
                    out.push((*a, self.chan_sum(g)?));
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                if on(*logits) {
                    // vjp = g * (softmax(logits) - onehot(labels)) / n_pixels
                    let ls = self.value(*logits).shape().to_vec();
                    let (k, h, w) = (ls[0], ls[1], ls[2]);
                    let p = self.softmax(self.val(*logits))?;
                    let mut oh = vec![0.0; k * h * w];
                    for (pix, &l) in labels.data().iter().enumerate() {
                        oh[l as usize * h * w + pix] = 1.0;
                    }
                    let ohv = self.constant(Tensor::from_raw(vec![k, h, w], oh));
                    let d = self.sub(p, ohv)?;
                    let dn = self.scale(d, 1.0 / (h * w) as f64)?;
                    out.push((*logits, self.mul(g, dn)?));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn relu_example() {
        let tape = Tape::new();
        let x = tape.constant(t1(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(y.tensor().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn xent_zero_logits_is_ln4() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![4, 2, 2]));
        let labels = Rc::new(LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((loss.scalar().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conv2d_ones_example() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.tensor().data(), &[9.0]);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 1, 2]));
        let labels = Rc::new(LabelMap::new(1, 2, vec![0, 2]).unwrap());
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &labels),
            Err(AdError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 3]));
        match tape.add(a, b) {
            Err(AdError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!((lhs, rhs), (vec![2, 3], vec![3, 3]));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn grad_of_x_times_x_is_2x() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[x], false).unwrap();
        assert_eq!(g[0].scalar().unwrap(), 6.0);
    }

    #[test]
    fn product_rule_example() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0).unwrap());
        let y = tape.param(Tensor::scalar(3.0).unwrap());
        let xy = tape.mul(x, y).unwrap();
        let g = tape.grad(xy, &[x, y], false).unwrap();
        assert_eq!(g[0].scalar().unwrap(), 3.0);
        assert_eq!(g[1].scalar().unwrap(), 2.0);
    }

    #[test]
    fn second_order_of_cube_is_6x() {
        // f(x) = x^3, f''(2) = 12.
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0).unwrap());
        let x2 = tape.mul(x, x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let g1 = tape.grad(x3, &[x], true).unwrap();
        let g2 = tape.grad(g1[0], &[x], false).unwrap();
        assert!((g2[0].scalar().unwrap() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn third_order_also_works() {
        // f(x) = x^4 at x=1.5: f'''(x) = 24x = 36.
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5).unwrap());
        let x2 = tape.mul(x, x).unwrap();
        let x4 = tape.mul(x2, x2).unwrap();
        let g1 = tape.grad(x4, &[x], true).unwrap();
        let g2 = tape.grad(g1[0], &[x], true).unwrap();
        let g3 = tape.grad(g2[0], &[x], false).unwrap();
        assert!((g3[0].scalar().unwrap() - 36.0).abs() < 1e-9);
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0).unwrap());
        let z = tape.param(t1(&[1.0, 1.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[z], false).unwrap();
        assert_eq!(g[0].tensor().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(t1(&[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.grad(y, &[x], false), Err(AdError::NonScalarOutput { .. })));
    }

    #[test]
    fn cross_tape_use_is_an_error() {
        let t1_ = Tape::new();
        let t2_ = Tape::new();
        let a = t1_.constant(Tensor::scalar(1.0).unwrap());
        let b = t2_.constant(Tensor::scalar(1.0).unwrap());
        assert!(matches!(t1_.add(a, b), Err(AdError::TapeMismatch { .. })));
    }

    #[test]
    fn linearity_of_grad() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g) on a shared graph.
        let tape = Tape::new();
        let x = tape.param(t1(&[0.3, -0.7, 1.2, 2.5]));
        let f = tape.sum(tape.mul(x, x).unwrap()).unwrap();
        let rx = tape.relu(x).unwrap();
        let g = tape.sum(rx).unwrap();
        let (a, b) = (2.5, -1.25);
        let af = tape.scale(f, a).unwrap();
        let bg = tape.scale(g, b).unwrap();
        let h = tape.add(af, bg).unwrap();
        let gh = tape.grad(h, &[x], false).unwrap();
        let gf = tape.grad(f, &[x], false).unwrap();
        let gg = tape.grad(g, &[x], false).unwrap();
        for i in 0..4 {
            let lhs = gh[0].tensor().data()[i];
            let rhs = a * gf[0].tensor().data()[i] + b * gg[0].tensor().data()[i];
            assert!((lhs - rhs).abs() < 1e-10, "coord {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn tape_is_deterministic() {
        let build = || {
            let tape = Tape::new();
            let x = tape.param(t1(&[0.5, -0.5, 2.0]));
            let y = tape.relu(x).unwrap();
            let s = tape.sum(tape.mul(y, y).unwrap()).unwrap();
            let g = tape.grad(s, &[x], false).unwrap();
            (tape.len(), g[0].tensor().data().to_vec())
        };
        let (n1, g1) = build();
        let (n2, g2) = build();
        assert_eq!(n1, n2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let tape = Tape::new();
        let s = tape.param(Tensor::scalar(2.0).unwrap());
        let v = tape.param(t1(&[1.0, 2.0, 3.0]));
        let sv = tape.mul(s, v).unwrap();
        assert_eq!(sv.tensor().data(), &[2.0, 4.0, 6.0]);
        let total = tape.sum(tape.add(sv, s).unwrap()).unwrap();
        assert_eq!(total.scalar().unwrap(), 18.0);
        let g = tape.grad(total, &[s, v], false).unwrap();
        // d/ds (s*(1+2+3) + 3s) = 9; d/dv_i = s = 2.
        assert_eq!(g[0].scalar().unwrap(), 9.0);
        assert_eq!(g[1].tensor().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_without_create_graph_is_frozen() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[x], false).unwrap();
        assert!(!g[0].requires_grad());
        let g2 = tape.grad(y, &[x], true).unwrap();
        assert!(g2[0].requires_grad());
    }
}
