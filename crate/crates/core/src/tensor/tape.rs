//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! consumers); `backward` walks the tape in reverse, accumulating
//! gradients for every tracked node reachable from the loss. Leaves
//! created with [`Tape::variable`] keep their gradients after the pass;
//! gradients of interior nodes are dropped as soon as they have been
//! consumed.

use super::kernels::{self, ConvDims};
use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Probabilities fed to `bce_loss` are clamped into
/// [BCE_EPS, 1 − BCE_EPS] before the logarithm.
const BCE_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Clamp01 { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Affine { x: TensorId, mul: f32 },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Linear { x: TensorId, w: TensorId, b: TensorId, batch: usize, d_in: usize, d_out: usize },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, dims: ConvDims },
    ConvT2d { x: TensorId, w: TensorId, b: TensorId, dims: ConvDims },
    MaxPool { x: TensorId, argmax: Vec<u32> },
    ConcatChannels { a: TensorId, b: TensorId, a_len_per_image: usize, b_len_per_image: usize },
    Passthrough { x: TensorId },
    Mean { x: TensorId },
    L1 { a: TensorId, b: TensorId },
    L2 { a: TensorId, b: TensorId },
    Bce { p: TensorId, target: f32 },
    SoftmaxCe { logits: TensorId, probs: Vec<f32>, labels: Vec<u32>, classes: usize },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f32>,
    tracked: bool,
    op: Op,
}

/// Records a forward computation and replays it backward for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an untracked leaf: gradients never flow into it.
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.push_unchecked(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    /// Registers a tracked leaf whose gradient survives `backward`.
    pub fn variable(&mut self, t: &Tensor) -> TensorId {
        self.push_unchecked(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].values
    }

    /// The single value of a scalar node.
    pub fn value_scalar(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Copies a node out into an owned [`Tensor`].
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(&self.nodes[id.0].shape, self.nodes[id.0].values.clone())
            .expect("tape nodes always hold finite, shape-consistent values")
    }

    /// Gradient of a node after `backward`; present only for tracked
    /// leaves (interior gradients are dropped once consumed).
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push_unchecked(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f32>,
        tracked: bool,
        op: Op,
    ) -> TensorId {
        self.nodes.push(Node { shape, values, tracked, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        values: Vec<f32>,
        tracked: bool,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(shape, values, tracked, op))
    }

    fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    fn same_shape(
        &self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let tracked = self.tracked(x);
        self.push("relu", self.shape(x).to_vec(), values, tracked, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self
            .value(x)
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v as f64).exp())) as f32)
            .collect();
        let tracked = self.tracked(x);
        self.push("sigmoid", self.shape(x).to_vec(), values, tracked, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self.value(x).iter().map(|&v| v.tanh()).collect();
        let tracked = self.tracked(x);
        self.push("tanh", self.shape(x).to_vec(), values, tracked, Op::Tanh { x })
    }

    /// Clamps into [0,1]. Gradient passes where the input already lay
    /// inside the interval (boundaries included) and is zero outside.
    pub fn clamp01(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let values = self.value(x).iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let tracked = self.tracked(x);
        self.push("clamp01", self.shape(x).to_vec(), values, tracked, Op::Clamp01 { x })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("add", self.shape(a).to_vec(), values, tracked, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("sub", self.shape(a).to_vec(), values, tracked, Op::Sub { a, b })
    }

    /// Elementwise `x * mul + add`; covers both scaling and shifting.
    pub fn affine(&mut self, x: TensorId, mul: f32, add: f32) -> Result<TensorId, TensorError> {
        let values = self.value(x).iter().map(|&v| v * mul + add).collect();
        let tracked = self.tracked(x);
        self.push("affine", self.shape(x).to_vec(), values, tracked, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: TensorId, mul: f32) -> Result<TensorId, TensorError> {
        self.affine(x, mul, 0.0)
    }

    pub fn shift(&mut self, x: TensorId, add: f32) -> Result<TensorId, TensorError> {
        self.affine(x, 1.0, add)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernels::matmul_nn(self.value(a), self.value(b), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("matmul", vec![m, n], values, tracked, Op::Matmul { a, b, m, k, n })
    }

    /// Fully connected layer: `x @ w + b` with x: [batch, d_in],
    /// w: [d_in, d_out], b: [d_out] broadcast over rows.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            });
        }
        let (batch, d_in, d_out) = (sx[0], sx[1], sw[1]);
        let mut values = kernels::matmul_nn(self.value(x), self.value(w), batch, d_in, d_out);
        let bias = self.value(b);
        for row in values.chunks_mut(d_out) {
            for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(
            "linear",
            vec![batch, d_out],
            values,
            tracked,
            Op::Linear { x, w, b, batch, d_in, d_out },
        )
    }

    // ---- convolution family ----

    /// 2-D convolution: x [n,ci,h,w], w [co,ci,kh,kw], b [co].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = sx.len() != 4
            || sw.len() != 4
            || sb.len() != 1
            || sx[1] != sw[1]
            || sw[0] != sb[0];
        let dims = if bad {
            None
        } else {
            ConvDims::conv(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad)
        };
        let Some(dims) = dims else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, b {:?}, stride {}, pad {}", sx, sw, sb, stride, pad),
            });
        };
        let values = kernels::conv2d_fwd(self.value(x), self.value(w), self.value(b), &dims);
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let shape = vec![dims.batch, dims.c_out, dims.h_out, dims.w_out];
        self.push("conv2d", shape, values, tracked, Op::Conv2d { x, w, b, dims })
    }

    /// Transposed 2-D convolution: x [n,ci,h,w], w [ci,co,kh,kw], b [co].
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = sx.len() != 4
            || sw.len() != 4
            || sb.len() != 1
            || sx[1] != sw[0]
            || sw[1] != sb[0];
        let dims = if bad {
            None
        } else {
            ConvDims::conv_transpose(sx[0], sx[1], sx[2], sx[3], sw[1], sw[2], sw[3], stride, pad)
        };
        let Some(dims) = dims else {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("x {:?}, w {:?}, b {:?}, stride {}, pad {}", sx, sw, sb, stride, pad),
            });
        };
        let values = kernels::convt2d_fwd(self.value(x), self.value(w), self.value(b), &dims);
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let shape = vec![dims.batch, dims.c_out, dims.h_out, dims.w_out];
        self.push("conv_transpose2d", shape, values, tracked, Op::ConvT2d { x, w, b, dims })
    }

    /// Max pooling with a square window and stride equal to the window.
    pub fn maxpool2d(&mut self, x: TensorId, k: usize) -> Result<TensorId, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 4 || k == 0 || sx[2] < k || sx[3] < k {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("x {:?}, window {}", sx, k),
            });
        }
        let (batch, channels, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (values, argmax, ho, wo) = kernels::maxpool2d_fwd(self.value(x), batch, channels, h, w, k);
        let tracked = self.tracked(x);
        self.push(
            "maxpool2d",
            vec![batch, channels, ho, wo],
            values,
            tracked,
            Op::MaxPool { x, argmax },
        )
    }

    /// Concatenates two image batches along the channel dimension.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let (batch, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let a_len = ca * h * w;
        let b_len = cb * h * w;
        let mut values = Vec::with_capacity(batch * (a_len + b_len));
        let (va, vb) = (self.value(a), self.value(b));
        for n in 0..batch {
            values.extend_from_slice(&va[n * a_len..(n + 1) * a_len]);
            values.extend_from_slice(&vb[n * b_len..(n + 1) * b_len]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            "concat_channels",
            vec![batch, ca + cb, h, w],
            values,
            tracked,
            Op::ConcatChannels { a, b, a_len_per_image: a_len, b_len_per_image: b_len },
        )
    }

    /// Collapses all trailing dimensions into one: [n, ...] -> [n, rest].
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                detail: format!("{:?}", sx),
            });
        }
        let batch = sx[0];
        let rest: usize = sx[1..].iter().product();
        let values = self.value(x).to_vec();
        let tracked = self.tracked(x);
        self.push("flatten", vec![batch, rest], values, tracked, Op::Passthrough { x })
    }

    /// Reinterprets a node under a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let values = self.value(x).to_vec();
        let tracked = self.tracked(x);
        self.push("reshape", shape.to_vec(), values, tracked, Op::Passthrough { x })
    }

    // ---- reductions and losses (all produce scalars except mean over axis-free input) ----

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let v = self.value(x);
        let sum: f64 = v.iter().map(|&a| a as f64).sum();
        let mean = (sum / v.len() as f64) as f32;
        let tracked = self.tracked(x);
        self.push("mean", vec![1], vec![mean], tracked, Op::Mean { x })
    }

    /// Sum of absolute differences: Σ|a − b|, as a scalar node.
    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("l1_loss", a, b)?;
        let sum: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("l1_loss", vec![1], vec![sum as f32], tracked, Op::L1 { a, b })
    }

    /// Sum of squared differences: Σ(a − b)², as a scalar node.
    pub fn l2_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("l2_loss", a, b)?;
        let sum: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("l2_loss", vec![1], vec![sum as f32], tracked, Op::L2 { a, b })
    }

    /// Binary cross-entropy of probabilities against a constant target,
    /// averaged over all elements.
    pub fn bce_loss(&mut self, p: TensorId, target: f32) -> Result<TensorId, TensorError> {
        let v = self.value(p);
        let t = target as f64;
        let mut acc = 0.0f64;
        for &pv in v {
            let pc = (pv as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let mean = (acc / v.len() as f64) as f32;
        let tracked = self.tracked(p);
        self.push("bce_loss", vec![1], vec![mean], tracked, Op::Bce { p, target })
    }

    /// Softmax cross-entropy of logits [batch, classes] against integer
    /// labels, averaged over the batch.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[u32],
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?}, {} labels", s, labels.len()),
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, classes),
            });
        }
        let v = self.value(logits);
        let mut probs = vec![0.0f32; batch * classes];
        let mut acc = 0.0f64;
        for (i, row) in v.chunks(classes).enumerate() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            for &lv in row {
                denom += (lv as f64 - max).exp();
            }
            let lse = max + denom.ln();
            acc += lse - row[labels[i] as usize] as f64;
            for (j, &lv) in row.iter().enumerate() {
                probs[i * classes + j] = ((lv as f64 - max).exp() / denom) as f32;
            }
        }
        let mean = (acc / batch as f64) as f32;
        let tracked = self.tracked(logits);
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![mean],
            tracked,
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec(), classes },
        )
    }

    // ---- backward ----

    /// Populates gradients for every tracked node reachable from `loss`,
    /// which must be a scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.values.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                self.grads[i] = None;
                continue;
            }
            if self.grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep the gradient for the caller
            }
            let gy = self.grads[i].take().expect("checked above");
            // Take the op out so the arms below can mutate gradient
            // storage without aliasing the node; restored afterwards.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &gy);
            self.nodes[i].op = op;
        }

        for g in self.grads.iter().flatten() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f32]) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, &c) in g.iter_mut().zip(contribution.iter()) {
                    *gv += c;
                }
            }
            None => self.grads[id.0] = Some(contribution.to_vec()),
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op, gy: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let x = *x;
                let gx: Vec<f32> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(gy.iter())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let gx: Vec<f32> = self.nodes[i]
                    .values
                    .iter()
                    .zip(gy.iter())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Tanh { x } => {
                let x = *x;
                let gx: Vec<f32> = self.nodes[i]
                    .values
                    .iter()
                    .zip(gy.iter())
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Clamp01 { x } => {
                let x = *x;
                let gx: Vec<f32> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(gy.iter())
                    .map(|(&v, &g)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, gy);
                self.accumulate(b, gy);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, gy);
                let neg: Vec<f32> = gy.iter().map(|&g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Affine { x, mul } => {
                let (x, mul) = (*x, *mul);
                let gx: Vec<f32> = gy.iter().map(|&g| g * mul).collect();
                self.accumulate(x, &gx);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a.0].tracked {
                    let ga = kernels::matmul_nt(gy, &self.nodes[b.0].values, m, n, k);
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].tracked {
                    let gb = kernels::matmul_tn(&self.nodes[a.0].values, gy, k, m, n);
                    self.accumulate(b, &gb);
                }
            }
            Op::Linear { x, w, b, batch, d_in, d_out } => {
                let (x, w, b) = (*x, *w, *b);
                let (batch, d_in, d_out) = (*batch, *d_in, *d_out);
                if self.nodes[x.0].tracked {
                    let gx = kernels::matmul_nt(gy, &self.nodes[w.0].values, batch, d_out, d_in);
                    self.accumulate(x, &gx);
                }
                if self.nodes[w.0].tracked {
                    let gw = kernels::matmul_tn(&self.nodes[x.0].values, gy, d_in, batch, d_out);
                    self.accumulate(w, &gw);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![0.0f32; d_out];
                    for (j, gbj) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for row in 0..batch {
                            acc += gy[row * d_out + j] as f64;
                        }
                        *gbj = acc as f32;
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (x, w, b, dims) = (*x, *w, *b, *dims);
                if self.nodes[x.0].tracked {
                    let gx = kernels::conv2d_bwd_x(gy, &self.nodes[w.0].values, &dims);
                    self.accumulate(x, &gx);
                }
                if self.nodes[w.0].tracked {
                    let gw = kernels::conv2d_bwd_w(&self.nodes[x.0].values, gy, &dims);
                    self.accumulate(w, &gw);
                }
                if self.nodes[b.0].tracked {
                    let gb = kernels::conv_bwd_b(gy, dims.batch, dims.c_out, dims.h_out * dims.w_out);
                    self.accumulate(b, &gb);
                }
            }
            Op::ConvT2d { x, w, b, dims } => {
                let (x, w, b, dims) = (*x, *w, *b, *dims);
                if self.nodes[x.0].tracked {
                    let gx = kernels::convt2d_bwd_x(gy, &self.nodes[w.0].values, &dims);
                    self.accumulate(x, &gx);
                }
                if self.nodes[w.0].tracked {
                    let gw = kernels::convt2d_bwd_w(&self.nodes[x.0].values, gy, &dims);
                    self.accumulate(w, &gw);
                }
                if self.nodes[b.0].tracked {
                    let gb = kernels::conv_bwd_b(gy, dims.batch, dims.c_out, dims.h_out * dims.w_out);
                    self.accumulate(b, &gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let x_len = self.nodes[x.0].values.len();
                let gx = kernels::maxpool2d_bwd(gy, argmax, x_len);
                self.accumulate(x, &gx);
            }
            Op::ConcatChannels { a, b, a_len_per_image, b_len_per_image } => {
                let (a, b) = (*a, *b);
                let (al, bl) = (*a_len_per_image, *b_len_per_image);
                let batch = self.nodes[i].shape[0];
                let mut ga = vec![0.0f32; batch * al];
                let mut gb = vec![0.0f32; batch * bl];
                for n in 0..batch {
                    let src = &gy[n * (al + bl)..(n + 1) * (al + bl)];
                    ga[n * al..(n + 1) * al].copy_from_slice(&src[..al]);
                    gb[n * bl..(n + 1) * bl].copy_from_slice(&src[al..]);
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Passthrough { x } => {
                let x = *x;
                self.accumulate(x, gy);
            }
            Op::Mean { x } => {
                let x = *x;
                let count = self.nodes[x.0].values.len();
                let g = gy[0] / count as f32;
                let gx = vec![g; count];
                self.accumulate(x, &gx);
            }
            Op::L1 { a, b } => {
                let (a, b) = (*a, *b);
                let g = gy[0];
                let signs: Vec<f32> = self.nodes[a.0]
                    .values
                    .iter()
                    .zip(self.nodes[b.0].values.iter())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > 0.0 {
                            g
                        } else if d < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(a, &signs);
                let neg: Vec<f32> = signs.iter().map(|&s| -s).collect();
                self.accumulate(b, &neg);
            }
            Op::L2 { a, b } => {
                let (a, b) = (*a, *b);
                let g = gy[0];
                let ga: Vec<f32> = self.nodes[a.0]
                    .values
                    .iter()
                    .zip(self.nodes[b.0].values.iter())
                    .map(|(&x, &y)| 2.0 * (x - y) * g)
                    .collect();
                self.accumulate(a, &ga);
                let gb: Vec<f32> = ga.iter().map(|&v| -v).collect();
                self.accumulate(b, &gb);
            }
            Op::Bce { p, target } => {
                let (p, t) = (*p, *target as f64);
                let g = gy[0] as f64;
                let n = self.nodes[p.0].values.len() as f64;
                let gp: Vec<f32> = self.nodes[p.0]
                    .values
                    .iter()
                    .map(|&pv| {
                        let pvf = pv as f64;
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pvf) {
                            // clamped region: constant loss, zero slope
                            0.0
                        } else {
                            ((g / n) * ((pvf - t) / (pvf * (1.0 - pvf)))) as f32
                        }
                    })
                    .collect();
                self.accumulate(p, &gp);
            }
            Op::SoftmaxCe { logits, probs, labels, classes } => {
                let logits = *logits;
                let classes = *classes;
                let batch = labels.len();
                let g = gy[0] / batch as f32;
                let mut gl = vec![0.0f32; batch * classes];
                for (idx, (row, &label)) in probs.chunks(classes).zip(labels.iter()).enumerate() {
                    for (j, &pj) in row.iter().enumerate() {
                        let onehot = if j == label as usize { 1.0 } else { 0.0 };
                        gl[idx * classes + j] = g * (pj - onehot);
                    }
                }
                self.accumulate(logits, &gl);
            }
        }
    }
}
