//! The recording tape and its operation set.

use super::{DiffTensor, TensorError};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { lhs: usize, rhs: usize },
    AddChannelBias { lhs: usize, bias: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    Matmul { lhs: usize, rhs: usize },
    Conv2d { input: usize, weight: usize, stride: usize, padding: usize },
    Relu { input: usize },
    Reshape { input: usize },
    Mean { input: usize },
    Sum { input: usize },
    SumAxis { input: usize, axis: usize },
    MaxOverAxis { input: usize, axis: usize, argmax: Vec<usize> },
    Log { input: usize },
    Exp { input: usize },
    Sqrt { input: usize },
    LogSoftmax { input: usize, axis: usize },
    GatherClassChannel { input: usize, labels: Vec<u32> },
    UpsampleNearest { input: usize, factor: usize },
    RowL2Normalize { input: usize, eps: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations. Forward values are stored per node;
/// [`Tape::backward`] replays adjoints in reverse order exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn dim_product(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split a shape at `axis` into (outer, len, inner) strides for lane walks.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn ensure_live(&self) -> Result<(), TensorError> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { shape, data, requires_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf; its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, tensor: &DiffTensor) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        Ok(self.push(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad(), Op::Leaf))
    }

    /// Register raw values as a constant (no gradient flows into it).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let t = DiffTensor::new(shape, data)?;
        self.leaf(&t)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<ValueId, TensorError> {
        self.constant(vec![1], vec![value])
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: ValueId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Detached copy of a recorded value.
    pub fn to_tensor(&self, id: ValueId) -> DiffTensor {
        DiffTensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("recorded node is always consistent")
    }

    /// Gradient of the last `backward` root with respect to this value, if
    /// one was computed.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise and broadcast ops ------------------------------------

    /// Elementwise addition. As the one broadcast form, a rank-1 `rhs` whose
    /// length equals the channel dimension of a rank-4 `lhs` is added per
    /// channel (bias addition).
    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        if ls == rs {
            let data: Vec<f64> = self
                .value(lhs)
                .iter()
                .zip(self.value(rhs))
                .map(|(a, b)| a + b)
                .collect();
            let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
            return Ok(self.push(ls, data, rg, Op::Add { lhs: lhs.0, rhs: rhs.0 }));
        }
        if ls.len() == 4 && rs.len() == 1 && rs[0] == ls[1] {
            let (channels, plane) = (ls[1], ls[2] * ls[3]);
            let mut data = self.value(lhs).to_vec();
            let bias = self.value(rhs);
            for chunk in data.chunks_mut(channels * plane) {
                for (c, b) in bias.iter().enumerate().take(channels) {
                    for v in &mut chunk[c * plane..(c + 1) * plane] {
                        *v += b;
                    }
                }
            }
            let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
            return Ok(self.push(ls, data, rg, Op::AddChannelBias { lhs: lhs.0, bias: rhs.0 }));
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            detail: format!("incompatible shapes {ls:?} and {rs:?}"),
        })
    }

    pub fn sub(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        self.check_same_shape("sub", lhs, rhs)?;
        let data: Vec<f64> = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(a, b)| a - b)
            .collect();
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(self.shape(lhs).to_vec(), data, rg, Op::Sub { lhs: lhs.0, rhs: rhs.0 }))
    }

    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        self.check_same_shape("mul", lhs, rhs)?;
        let data: Vec<f64> = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(a, b)| a * b)
            .collect();
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(self.shape(lhs).to_vec(), data, rg, Op::Mul { lhs: lhs.0, rhs: rhs.0 }))
    }

    /// Multiply every element by a compile-time-known constant.
    pub fn scale(&mut self, input: ValueId, factor: f64) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let data: Vec<f64> = self.value(input).iter().map(|v| v * factor).collect();
        let rg = self.requires_grad(input);
        Ok(self.push(self.shape(input).to_vec(), data, rg, Op::Scale { input: input.0, factor }))
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        // f64::max would swallow NaN; non-finite inputs must propagate.
        let data: Vec<f64> =
            self.value(input).iter().map(|v| if v.is_nan() { *v } else { v.max(0.0) }).collect();
        let rg = self.requires_grad(input);
        Ok(self.push(self.shape(input).to_vec(), data, rg, Op::Relu { input: input.0 }))
    }

    pub fn log(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let data: Vec<f64> = self.value(input).iter().map(|v| v.ln()).collect();
        let rg = self.requires_grad(input);
        Ok(self.push(self.shape(input).to_vec(), data, rg, Op::Log { input: input.0 }))
    }

    pub fn exp(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let data: Vec<f64> = self.value(input).iter().map(|v| v.exp()).collect();
        let rg = self.requires_grad(input);
        Ok(self.push(self.shape(input).to_vec(), data, rg, Op::Exp { input: input.0 }))
    }

    pub fn sqrt(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let data: Vec<f64> = self.value(input).iter().map(|v| v.sqrt()).collect();
        let rg = self.requires_grad(input);
        Ok(self.push(self.shape(input).to_vec(), data, rg, Op::Sqrt { input: input.0 }))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        if dim_product(&shape) != self.numel(input) || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape(input)),
            });
        }
        let data = self.value(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape, data, rg, Op::Reshape { input: input.0 }))
    }

    /// Nearest-neighbor upsampling of a `[B, C, H, W]` tensor by an integer
    /// factor on both spatial axes.
    pub fn upsample_nearest(&mut self, input: ValueId, factor: usize) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        if factor == 0 {
            return Err(TensorError::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_nearest",
                detail: format!("expected [B, C, H, W], got {s:?}"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(input);
        let mut data = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for y in 0..oh {
                let sy = y / factor;
                for xq in 0..ow {
                    dst[y * ow + xq] = src[sy * w + xq / factor];
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![b, c, oh, ow], data, rg, Op::UpsampleNearest { input: input.0, factor }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn mean(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let n = self.numel(input) as f64;
        let total: f64 = self.value(input).iter().sum();
        let rg = self.requires_grad(input);
        Ok(self.push(vec![1], vec![total / n], rg, Op::Mean { input: input.0 }))
    }

    pub fn sum(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let total: f64 = self.value(input).iter().sum();
        let rg = self.requires_grad(input);
        Ok(self.push(vec![1], vec![total], rg, Op::Sum { input: input.0 }))
    }

    fn check_axis(&self, op: &'static str, input: ValueId, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(input).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let _ = op;
        Ok(())
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = shape.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, input: ValueId, axis: usize) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        self.check_axis("sum_axis", input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.value(input);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let out_base = o * inner;
                for i in 0..inner {
                    data[out_base + i] += x[base + i];
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Self::reduced_shape(&shape, axis), data, rg, Op::SumAxis { input: input.0, axis }))
    }

    /// Maximum along one axis; ties resolve to the lowest index, and the
    /// gradient is routed only to that element.
    pub fn max_over_axis(&mut self, input: ValueId, axis: usize) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        self.check_axis("max_over_axis", input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.value(input);
        let mut data = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[(o * len) * inner + i];
                let mut best_a = 0;
                for a in 1..len {
                    let v = x[(o * len + a) * inner + i];
                    if v > best {
                        best = v;
                        best_a = a;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = best_a;
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Self::reduced_shape(&shape, axis),
            data,
            rg,
            Op::MaxOverAxis { input: input.0, axis, argmax },
        ))
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("incompatible shapes {ls:?} and {rs:?}"),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut data = vec![0.0; m * n];
        gemm_accumulate(&mut data, self.value(lhs), self.value(rhs), m, k, n);
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { lhs: lhs.0, rhs: rhs.0 }))
    }

    /// 2-D convolution of `[B, Ci, H, W]` with a square kernel
    /// `[Co, Ci, k, k]`, integer stride and zero padding.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
            });
        }
        if ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be square, got {}x{}", ws[2], ws[3]),
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let geom = ConvGeometry::new(&xs, &ws, stride, padding)?;
        let x = self.value(input);
        let w = self.value(weight);
        let mut data = vec![0.0; geom.batch * geom.out_channels * geom.out_h * geom.out_w];
        let mut patches = vec![0.0; geom.patch_rows() * geom.out_plane()];
        for b in 0..geom.batch {
            geom.im2col(&x[b * geom.in_sample()..], &mut patches);
            let out = &mut data[b * geom.out_sample()..(b + 1) * geom.out_sample()];
            gemm_accumulate(out, w, &patches, geom.out_channels, geom.patch_rows(), geom.out_plane());
        }
        let rg = self.requires_grad(input) || self.requires_grad(weight);
        Ok(self.push(
            vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w],
            data,
            rg,
            Op::Conv2d { input: input.0, weight: weight.0, stride, padding },
        ))
    }

    // ---- classification ops ------------------------------------------------

    /// Numerically stable `log(softmax(x))` along `axis`, computed with
    /// max-subtraction.
    pub fn log_softmax(&mut self, input: ValueId, axis: usize) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        self.check_axis("log_softmax", input, axis)?;
        let shape = self.shape(input).to_vec();
        if shape[axis] < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax",
                detail: format!("axis {axis} must hold at least 2 classes, shape is {shape:?}"),
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.value(input);
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(x[at(a)]);
                }
                let mut total = 0.0;
                for a in 0..len {
                    total += (x[at(a)] - max).exp();
                }
                let log_total = total.ln();
                for a in 0..len {
                    data[at(a)] = x[at(a)] - max - log_total;
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(shape, data, rg, Op::LogSoftmax { input: input.0, axis }))
    }

    /// Select, per pixel, the class channel named by `labels`:
    /// `[B, C, H, W]` gathered with `[B, H, W]` labels gives `[B, H, W]`.
    pub fn gather_class_channel(
        &mut self,
        input: ValueId,
        labels: &[u32],
    ) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_class_channel",
                detail: format!("expected [B, C, H, W], got {s:?}"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if labels.len() != b * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "gather_class_channel",
                detail: format!("expected {} labels for shape {s:?}, got {}", b * h * w, labels.len()),
            });
        }
        let x = self.value(input);
        let mut data = vec![0.0; b * h * w];
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let label = labels[(bi * h + hi) * w + wi];
                    if label as usize >= c {
                        return Err(TensorError::LabelOutOfRange {
                            b: bi,
                            h: hi,
                            w: wi,
                            label,
                            classes: c,
                        });
                    }
                    data[(bi * h + hi) * w + wi] = x[((bi * c + label as usize) * h + hi) * w + wi];
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            vec![b, h, w],
            data,
            rg,
            Op::GatherClassChannel { input: input.0, labels: labels.to_vec() },
        ))
    }

    /// L2-normalize each row of a `[rows, n]` tensor:
    /// `y_r = x_r / sqrt(|x_r|^2 + eps)`.
    pub fn row_l2_normalize(&mut self, input: ValueId, eps: f64) -> Result<ValueId, TensorError> {
        self.ensure_live()?;
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_l2_normalize",
                detail: format!("expected [rows, n], got {s:?}"),
            });
        }
        let (rows, n) = (s[0], s[1]);
        let x = self.value(input);
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for (dst, v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *dst = v / norm;
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(s, data, rg, Op::RowL2Normalize { input: input.0, eps }))
    }

    fn check_same_shape(&self, op: &'static str, lhs: ValueId, rhs: ValueId) -> Result<(), TensorError> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("shapes {:?} and {:?} differ", self.shape(lhs), self.shape(rhs)),
            });
        }
        Ok(())
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `root`. Consumes the tape: recording or a second backward both
    /// fail afterwards.
    pub fn backward(&mut self, root: ValueId) -> Result<(), TensorError> {
        self.ensure_live()?;
        if self.numel(root) != 1 {
            return Err(TensorError::NotScalar { numel: self.numel(root) });
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else { continue };
            self.propagate(idx, &grad);
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn accumulate(&mut self, idx: usize, apply: impl FnOnce(&mut [f64])) {
        let n = self.nodes[idx].data.len();
        let buf = self.grads[idx].get_or_insert_with(|| vec![0.0; n]);
        apply(buf);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Inputs always precede `idx`, so grads[j] for j < idx are safe to touch.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add { lhs, rhs } => {
                if self.wants(lhs) {
                    self.accumulate(lhs, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += gv;
                        }
                    });
                }
                if self.wants(rhs) {
                    self.accumulate(rhs, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += gv;
                        }
                    });
                }
            }
            &Op::AddChannelBias { lhs, bias } => {
                if self.wants(lhs) {
                    self.accumulate(lhs, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += gv;
                        }
                    });
                }
                if self.wants(bias) {
                    let shape = self.nodes[idx].shape.clone();
                    let (channels, plane) = (shape[1], shape[2] * shape[3]);
                    self.accumulate(bias, |buf| {
                        for chunk in g.chunks(channels * plane) {
                            for (c, b) in buf.iter_mut().enumerate().take(channels) {
                                for gv in &chunk[c * plane..(c + 1) * plane] {
                                    *b += gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Sub { lhs, rhs } => {
                if self.wants(lhs) {
                    self.accumulate(lhs, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += gv;
                        }
                    });
                }
                if self.wants(rhs) {
                    self.accumulate(rhs, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b -= gv;
                        }
                    });
                }
            }
            &Op::Mul { lhs, rhs } => {
                if self.wants(lhs) {
                    let other = self.nodes[rhs].data.clone();
                    self.accumulate(lhs, |buf| {
                        for ((b, gv), ov) in buf.iter_mut().zip(g).zip(&other) {
                            *b += gv * ov;
                        }
                    });
                }
                if self.wants(rhs) {
                    let other = self.nodes[lhs].data.clone();
                    self.accumulate(rhs, |buf| {
                        for ((b, gv), ov) in buf.iter_mut().zip(g).zip(&other) {
                            *b += gv * ov;
                        }
                    });
                }
            }
            &Op::Scale { input, factor } => {
                if self.wants(input) {
                    self.accumulate(input, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += gv * factor;
                        }
                    });
                }
            }
            &Op::Matmul { lhs, rhs } => {
                let (m, k) = (self.nodes[lhs].shape[0], self.nodes[lhs].shape[1]);
                let n = self.nodes[rhs].shape[1];
                if self.wants(lhs) {
                    let b = self.nodes[rhs].data.clone();
                    self.accumulate(lhs, |buf| {
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * b[kk * n + j];
                                }
                                buf[i * k + kk] += acc;
                            }
                        }
                    });
                }
                if self.wants(rhs) {
                    let a = self.nodes[lhs].data.clone();
                    self.accumulate(rhs, |buf| {
                        for kk in 0..k {
                            for i in 0..m {
                                let av = a[i * k + kk];
                                for j in 0..n {
                                    buf[kk * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            &Op::Conv2d { input, weight, stride, padding } => {
                self.conv2d_backward(input, weight, stride, padding, g);
            }
            &Op::Relu { input } => {
                if self.wants(input) {
                    let x = self.nodes[input].data.clone();
                    self.accumulate(input, |buf| {
                        for ((b, gv), xv) in buf.iter_mut().zip(g).zip(&x) {
                            if *xv > 0.0 {
                                *b += gv;
                            }
                        }
                    });
                }
            }
            &Op::Reshape { input } => {
                if self.wants(input) {
                    self.accumulate(input, |buf| {
                        for (b, gv) in buf.iter_mut().zip(g) {
                            *b += gv;
                        }
                    });
                }
            }
            &Op::Mean { input } => {
                if self.wants(input) {
                    let n = self.nodes[input].data.len() as f64;
                    let gv = g[0] / n;
                    self.accumulate(input, |buf| {
                        for b in buf.iter_mut() {
                            *b += gv;
                        }
                    });
                }
            }
            &Op::Sum { input } => {
                if self.wants(input) {
                    let gv = g[0];
                    self.accumulate(input, |buf| {
                        for b in buf.iter_mut() {
                            *b += gv;
                        }
                    });
                }
            }
            &Op::SumAxis { input, axis } => {
                if self.wants(input) {
                    let shape = self.nodes[input].shape.clone();
                    let (outer, len, inner) = lanes(&shape, axis);
                    self.accumulate(input, |buf| {
                        for o in 0..outer {
                            for a in 0..len {
                                let base = (o * len + a) * inner;
                                for i in 0..inner {
                                    buf[base + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::MaxOverAxis { input, axis, argmax } => {
                let (input, axis) = (*input, *axis);
                if self.wants(input) {
                    let argmax = argmax.clone();
                    let shape = self.nodes[input].shape.clone();
                    let (outer, len, inner) = lanes(&shape, axis);
                    self.accumulate(input, |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let a = argmax[o * inner + i];
                                buf[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    });
                }
            }
            &Op::Log { input } => {
                if self.wants(input) {
                    let x = self.nodes[input].data.clone();
                    self.accumulate(input, |buf| {
                        for ((b, gv), xv) in buf.iter_mut().zip(g).zip(&x) {
                            *b += gv / xv;
                        }
                    });
                }
            }
            &Op::Exp { input } => {
                if self.wants(input) {
                    let y = self.nodes[idx].data.clone();
                    self.accumulate(input, |buf| {
                        for ((b, gv), yv) in buf.iter_mut().zip(g).zip(&y) {
                            *b += gv * yv;
                        }
                    });
                }
            }
            &Op::Sqrt { input } => {
                if self.wants(input) {
                    let y = self.nodes[idx].data.clone();
                    self.accumulate(input, |buf| {
                        for ((b, gv), yv) in buf.iter_mut().zip(g).zip(&y) {
                            *b += gv * 0.5 / yv;
                        }
                    });
                }
            }
            &Op::LogSoftmax { input, axis } => {
                if self.wants(input) {
                    let y = self.nodes[idx].data.clone();
                    let shape = self.nodes[idx].shape.clone();
                    let (outer, len, inner) = lanes(&shape, axis);
                    self.accumulate(input, |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |a: usize| (o * len + a) * inner + i;
                                let mut g_total = 0.0;
                                for a in 0..len {
                                    g_total += g[at(a)];
                                }
                                for a in 0..len {
                                    buf[at(a)] += g[at(a)] - y[at(a)].exp() * g_total;
                                }
                            }
                        }
                    });
                }
            }
            Op::GatherClassChannel { input, labels } => {
                let input = *input;
                if self.wants(input) {
                    let labels = labels.clone();
                    let shape = self.nodes[input].shape.clone();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    self.accumulate(input, |buf| {
                        for bi in 0..b {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let flat = (bi * h + hi) * w + wi;
                                    let label = labels[flat] as usize;
                                    buf[((bi * c + label) * h + hi) * w + wi] += g[flat];
                                }
                            }
                        }
                    });
                }
            }
            &Op::UpsampleNearest { input, factor } => {
                if self.wants(input) {
                    let shape = self.nodes[input].shape.clone();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    self.accumulate(input, |buf| {
                        for bc in 0..b * c {
                            let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                            let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
                            for y in 0..oh {
                                let sy = y / factor;
                                for xq in 0..ow {
                                    dst[sy * w + xq / factor] += src[y * ow + xq];
                                }
                            }
                        }
                    });
                }
            }
            &Op::RowL2Normalize { input, eps } => {
                if self.wants(input) {
                    let x = self.nodes[input].data.clone();
                    let shape = self.nodes[input].shape.clone();
                    let (rows, n) = (shape[0], shape[1]);
                    self.accumulate(input, |buf| {
                        for r in 0..rows {
                            let row = &x[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let sq: f64 = row.iter().map(|v| v * v).sum();
                            let norm = (sq + eps).sqrt();
                            let dot: f64 = gr.iter().zip(row).map(|(gv, xv)| gv * xv).sum();
                            let cube = norm * norm * norm;
                            for ((b, gv), xv) in buf[r * n..(r + 1) * n].iter_mut().zip(gr).zip(row) {
                                *b += gv / norm - xv * dot / cube;
                            }
                        }
                    });
                }
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        input: usize,
        weight: usize,
        stride: usize,
        padding: usize,
        g: &[f64],
    ) {
        let geom = ConvGeometry::new(&self.nodes[input].shape, &self.nodes[weight].shape, stride, padding)
            .expect("geometry validated at forward");
        let want_input = self.wants(input);
        let want_weight = self.wants(weight);
        if !want_input && !want_weight {
            return;
        }
        let x = self.nodes[input].data.clone();
        let w = self.nodes[weight].data.clone();
        let rows = geom.patch_rows();
        let plane = geom.out_plane();
        let mut patches = vec![0.0; rows * plane];
        let mut patches_t = vec![0.0; rows * plane];
        let mut d_weight = vec![0.0; w.len()];
        let mut d_input = vec![0.0; x.len()];
        let mut d_patches = vec![0.0; rows * plane];
        for b in 0..geom.batch {
            let gb = &g[b * geom.out_sample()..(b + 1) * geom.out_sample()];
            if want_weight {
                geom.im2col(&x[b * geom.in_sample()..], &mut patches);
                // dW += g_b @ patches^T, via an explicit transpose so the
                // inner gemm loop stays contiguous.
                for ck in 0..rows {
                    for j in 0..plane {
                        patches_t[j * rows + ck] = patches[ck * plane + j];
                    }
                }
                gemm_accumulate(&mut d_weight, gb, &patches_t, geom.out_channels, plane, rows);
            }
            if want_input {
                d_patches.iter_mut().for_each(|v| *v = 0.0);
                for ck in 0..rows {
                    let drow = &mut d_patches[ck * plane..(ck + 1) * plane];
                    for co in 0..geom.out_channels {
                        let wv = w[co * rows + ck];
                        let grow = &gb[co * plane..(co + 1) * plane];
                        for j in 0..plane {
                            drow[j] += wv * grow[j];
                        }
                    }
                }
                geom.col2im_add(&d_patches, &mut d_input[b * geom.in_sample()..(b + 1) * geom.in_sample()]);
            }
        }
        if want_weight {
            self.accumulate(weight, |buf| {
                for (b, dv) in buf.iter_mut().zip(&d_weight) {
                    *b += dv;
                }
            });
        }
        if want_input {
            self.accumulate(input, |buf| {
                for (b, dv) in buf.iter_mut().zip(&d_input) {
                    *b += dv;
                }
            });
        }
    }
}

/// Dense accumulate `out += a @ b` for row-major `a: [m, k]`, `b: [k, n]`.
/// Per output element the k-terms accumulate in ascending order.
fn gemm_accumulate(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, padding: usize) -> Result<Self, TensorError> {
        let (h, w, k) = (xs[2], xs[3], ws[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {k} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        Ok(Self {
            batch: xs[0],
            in_channels: xs[1],
            in_h: h,
            in_w: w,
            out_channels: ws[0],
            kernel: k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// Expand one sample into a `[Ci*k*k, out_h*out_w]` patch matrix with
    /// zeros where the window overlaps the padding.
    fn im2col(&self, x: &[f64], patches: &mut [f64]) {
        let plane = self.out_plane();
        for ci in 0..self.in_channels {
            let chan = &x[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for kh in 0..self.kernel {
                for kw in 0..self.kernel {
                    let row = ((ci * self.kernel) + kh) * self.kernel + kw;
                    let dst = &mut patches[row * plane..(row + 1) * plane];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                        let dst_row = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.in_h as isize {
                            dst_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &chan[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        for (ow, dv) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.padding as isize;
                            *dv = if iw < 0 || iw >= self.in_w as isize { 0.0 } else { src_row[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto one input sample.
    fn col2im_add(&self, d_patches: &[f64], d_x: &mut [f64]) {
        let plane = self.out_plane();
        for ci in 0..self.in_channels {
            let chan = &mut d_x[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for kh in 0..self.kernel {
                for kw in 0..self.kernel {
                    let row = ((ci * self.kernel) + kh) * self.kernel + kw;
                    let src = &d_patches[row * plane..(row + 1) * plane];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + kw) as isize - self.padding as isize;
                            if iw < 0 || iw >= self.in_w as isize {
                                continue;
                            }
                            chan[ih as usize * self.in_w + iw as usize] += src[oh * self.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> ValueId {
        let t = DiffTensor::with_grad(shape.to_vec(), data.to_vec()).unwrap();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3, 4], vec![3.0; 24]).unwrap();
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m), &[3.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = tape.constant(vec![1, 1, 3, 3], data.clone()).unwrap();
        let w = tape.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.log_softmax(x, 0).unwrap();
        let expected = 0.5f64.ln();
        for v in tape.value(y) {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = tape.log_softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|e| e.is_finite()));
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mean_square() {
        // L = mean(x^2) for x = [1, 2] has gradient 2x/2 = x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { numel: 2 }));
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed));
        assert!(matches!(tape.sum(x).unwrap_err(), TensorError::TapeConsumed));
    }

    #[test]
    fn add_shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        let b = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "unhelpful message: {msg}");
    }

    #[test]
    fn non_finite_values_propagate() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![f64::NAN, 1.0]).unwrap();
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert!(tape.value(s)[0].is_nan());
    }

    #[test]
    fn gather_reports_bad_label_position() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2, 1, 2], vec![0.0; 4]).unwrap();
        let err = tape.gather_class_channel(x, &[0, 7]).unwrap_err();
        match err {
            TensorError::LabelOutOfRange { b, h, w, label, classes } => {
                assert_eq!((b, h, w, label, classes), (0, 0, 1, 7, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn max_over_axis_ties_take_first() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[2.0, 2.0, 1.0]);
        let m = tape.max_over_axis(x, 0).unwrap();
        assert_eq!(tape.value(m), &[2.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_then_downsample_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.shape(up), &[1, 1, 4, 4]);
        let s = tape.sum(up).unwrap();
        assert_eq!(tape.value(s), &[40.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || -> Vec<u64> {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[1, 2, 4, 4], &(0..32).map(|v| (v as f64).sin()).collect::<Vec<_>>());
            let w = leaf(&mut tape, &[3, 2, 3, 3], &(0..54).map(|v| (v as f64 * 0.3).cos()).collect::<Vec<_>>());
            let y = tape.conv2d(x, w, 1, 1).unwrap();
            let r = tape.relu(y).unwrap();
            let ls = tape.log_softmax(r, 1).unwrap();
            let loss = tape.mean(ls).unwrap();
            tape.backward(loss).unwrap();
            let mut bits: Vec<u64> = tape.value(ls).iter().map(|v| v.to_bits()).collect();
            bits.extend(tape.grad(w).unwrap().iter().map(|v| v.to_bits()));
            bits
        };
        assert_eq!(run(), run());
    }
}
