//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a per-step arena of eagerly evaluated nodes. Recording an
//! operation computes its value immediately and remembers the parents;
//! [`Graph::backward`] walks the arena in reverse creation order (which is
//! a topological order by construction) and accumulates adjoints by
//! summation, so a tensor feeding several consumers gets the sum of their
//! contributions.
//!
//! Long-lived parameters stay outside the graph in a [`ParamSet`]; each
//! training step registers them as leaves, runs forward/backward, harvests
//! the leaf gradients back into the set, and lets [`AdamState`] update it.

mod conv;
mod optim;
mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{freeze, AdamState, Param, ParamSet};

use thiserror::Error;

use crate::shadow::{self, BatchDims, ShadowLayerConfig};

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims must be even for 2x2 pooling, got {0}x{1}")]
    OddSpatialDims(usize, usize),
    #[error("backward needs a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error(transparent)]
    Shadow(#[from] shadow::ShadowError),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Dense row-major value tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.is_empty() {
            return Err(AdError::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    ScaleShift { x: NodeId, span: f64 },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Upsample2(NodeId),
    ConcatChannels(NodeId, NodeId),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    GlobalAvgPool(NodeId),
    Bce { pred: NodeId, label: NodeId },
    Mse { a: NodeId, b: NodeId },
    Shadow { img: NodeId, t: NodeId, cfg: ShadowLayerConfig },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            values: self.nodes[id.0].values.clone(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a differentiation
    /// target; gradients are accumulated for interior nodes regardless.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> NodeId {
        self.push(tensor.shape, tensor.values, requires_grad, Op::Leaf)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AdError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, false, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, false, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), values, false, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].values.iter().sum::<f64>();
        self.push(vec![1], vec![total], false, Op::Sum(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        self.push(self.nodes[a.0].shape.clone(), values, false, Op::Relu(a))
    }

    /// Logistic sigmoid. Outputs are nudged into the largest representable
    /// open interval (0, 1) so downstream log-losses stay in domain even
    /// for saturating activations.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP))
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, false, Op::Sigmoid(a))
    }

    /// Affine map `lo + (hi - lo) * x`, sending (0, 1) onto (lo, hi).
    pub fn scale_shift(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let span = hi - lo;
        let values = self.nodes[x.0].values.iter().map(|&v| lo + span * v).collect();
        self.push(self.nodes[x.0].shape.clone(), values, false, Op::ScaleShift { x, span })
    }

    /// 2D cross-correlation with bias: `x [N,Cin,H,W]`, `w [Cout,Cin,k,k]`
    /// (odd k), `b [Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = conv::ConvGeom::resolve(
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            &self.nodes[b.0].shape,
            stride,
            pad,
        )?;
        let values = conv::forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &self.nodes[b.0].values,
            &geom,
        );
        Ok(self.push(
            geom.out_shape(),
            values,
            false,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// 2x2 max pooling with stride 2; requires even spatial dims. Ties go
    /// to the first element in row-major window order.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 4 {
            return Err(AdError::ShapeMismatch(format!("max_pool2 wants NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AdError::OddSpatialDims(h, w));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; values.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = base + (oy * 2 + dy) * w + ox * 2 + dx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    values[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx;
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], values, false, Op::MaxPool2 { x: a, argmax }))
    }

    /// Nearest-neighbor 2x upsampling: each value becomes a 2x2 block.
    pub fn nearest_upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 4 {
            return Err(AdError::ShapeMismatch(format!("upsample wants NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * 2, w * 2);
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..h {
                for x in 0..w {
                    let v = src[base + y * w + x];
                    let o = obase + (y * 2) * ow + x * 2;
                    values[o] = v;
                    values[o + 1] = v;
                    values[o + ow] = v;
                    values[o + ow + 1] = v;
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], values, false, Op::Upsample2(a)))
    }

    /// Concatenate along the channel axis: `[N,C1,H,W] ++ [N,C2,H,W]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(AdError::ShapeMismatch(format!(
                "concat_channels: {sa:?} vs {sb:?}"
            )));
        }
        let (n, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut values = vec![0.0; n * (c1 + c2) * plane];
        for i in 0..n {
            let dst = i * (c1 + c2) * plane;
            values[dst..dst + c1 * plane]
                .copy_from_slice(&self.nodes[a.0].values[i * c1 * plane..(i + 1) * c1 * plane]);
            values[dst + c1 * plane..dst + (c1 + c2) * plane]
                .copy_from_slice(&self.nodes[b.0].values[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        Ok(self.push(vec![n, c1 + c2, h, w], values, false, Op::ConcatChannels(a, b)))
    }

    /// Fully connected layer: `x [N,D] * w [D,M] + b [M]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            &self.nodes[b.0].shape,
        );
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(AdError::ShapeMismatch(format!(
                "dense: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (n, d, m) = (sx[0], sx[1], sw[1]);
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = self.nodes[b.0].values[j];
                for k in 0..d {
                    acc += self.nodes[x.0].values[i * d + k] * self.nodes[w.0].values[k * m + j];
                }
                values[i * m + j] = acc;
            }
        }
        Ok(self.push(vec![n, m], values, false, Op::Dense { x, w, b }))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 4 {
            return Err(AdError::ShapeMismatch(format!("global_avg_pool wants NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let mut values = vec![0.0; n * c];
        for nc in 0..n * c {
            values[nc] = self.nodes[a.0].values[nc * plane..(nc + 1) * plane]
                .iter()
                .sum::<f64>()
                * inv;
        }
        Ok(self.push(vec![n, c], values, false, Op::GlobalAvgPool(a)))
    }

    /// Binary cross-entropy, mean over the batch. Predictions must lie
    /// strictly inside (0, 1); labels must be exactly 0 or 1.
    pub fn bce_loss(&mut self, pred: NodeId, label: NodeId) -> Result<NodeId> {
        self.same_shape(pred, label, "bce_loss")?;
        let p = &self.nodes[pred.0].values;
        let y = &self.nodes[label.0].values;
        if let Some(&bad) = p.iter().find(|&&v| v <= 0.0 || v >= 1.0) {
            return Err(AdError::DomainError(format!(
                "bce prediction {bad} outside the open interval (0, 1)"
            )));
        }
        if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(AdError::DomainError(format!("bce label {bad} is not binary")));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .iter()
            .zip(y)
            .map(|(&pv, &yv)| -(yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln()))
            .sum();
        Ok(self.push(vec![1], vec![total / n], false, Op::Bce { pred, label }))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse_loss")?;
        let n = self.nodes[a.0].values.len() as f64;
        let total: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![1], vec![total / n], false, Op::Mse { a, b }))
    }

    /// The shadow removal layer as a graph operation:
    /// `img [N,3,H,W]`, `t [N,1,H,W]`.
    pub fn shadow_removal(
        &mut self,
        img: NodeId,
        t: NodeId,
        cfg: ShadowLayerConfig,
    ) -> Result<NodeId> {
        let (si, st) = (&self.nodes[img.0].shape, &self.nodes[t.0].shape);
        if si.len() != 4 || si[1] != 3 {
            return Err(AdError::ShapeMismatch(format!("shadow image wants [N,3,H,W], got {si:?}")));
        }
        if st.len() != 4 || st[1] != 1 || st[0] != si[0] || st[2] != si[2] || st[3] != si[3] {
            return Err(AdError::ShapeMismatch(format!(
                "shadow transmission wants [N,1,H,W] matching image, got {st:?}"
            )));
        }
        let dims = BatchDims {
            n: si[0],
            height: si[2],
            width: si[3],
        };
        let values = shadow::shadow_forward(
            &self.nodes[img.0].values,
            &self.nodes[t.0].values,
            dims,
            &cfg,
        )?;
        Ok(self.push(si.clone(), values, false, Op::Shadow { img, t, cfg }))
    }

    /// Reverse pass from a scalar loss. Populates `grad` for every node
    /// created before the loss, accumulating over all paths.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(AdError::NonScalarLoss(self.nodes[loss.0].values.len()));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for (dst, s) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *dst += s;
                    }
                    for (dst, s) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                        *dst += s;
                    }
                    self.nodes[i].grad = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let bv = std::mem::take(&mut self.nodes[b.0].values);
                    for ((dst, s), v) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&bv) {
                        *dst += s * v;
                    }
                    self.nodes[b.0].values = bv;
                    let av = std::mem::take(&mut self.nodes[a.0].values);
                    for ((dst, s), v) in self.nodes[b.0].grad.iter_mut().zip(&g).zip(&av) {
                        *dst += s * v;
                    }
                    self.nodes[a.0].values = av;
                    self.nodes[i].grad = g;
                }
                Op::Scale(a, c) => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for (dst, s) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *dst += s * c;
                    }
                    self.nodes[i].grad = g;
                }
                Op::Sum(a) => {
                    let g = self.nodes[i].grad[0];
                    for dst in self.nodes[a.0].grad.iter_mut() {
                        *dst += g;
                    }
                }
                Op::Relu(a) => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let av = std::mem::take(&mut self.nodes[a.0].values);
                    for ((dst, s), v) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&av) {
                        if *v > 0.0 {
                            *dst += s;
                        }
                    }
                    self.nodes[a.0].values = av;
                    self.nodes[i].grad = g;
                }
                Op::Sigmoid(a) => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let yv = std::mem::take(&mut self.nodes[i].values);
                    for ((dst, s), y) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&yv) {
                        *dst += s * y * (1.0 - y);
                    }
                    self.nodes[i].values = yv;
                    self.nodes[i].grad = g;
                }
                Op::ScaleShift { x, span } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for (dst, s) in self.nodes[x.0].grad.iter_mut().zip(&g) {
                        *dst += s * span;
                    }
                    self.nodes[i].grad = g;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let geom = conv::ConvGeom::resolve(
                        &self.nodes[x.0].shape,
                        &self.nodes[w.0].shape,
                        &self.nodes[b.0].shape,
                        stride,
                        pad,
                    )
                    .expect("geometry validated at forward");
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let xv = std::mem::take(&mut self.nodes[x.0].values);
                    let wv = std::mem::take(&mut self.nodes[w.0].values);
                    let (dx, dw, db) = conv::backward(&xv, &wv, &g, &geom);
                    self.nodes[x.0].values = xv;
                    self.nodes[w.0].values = wv;
                    for (dst, s) in self.nodes[x.0].grad.iter_mut().zip(&dx) {
                        *dst += s;
                    }
                    for (dst, s) in self.nodes[w.0].grad.iter_mut().zip(&dw) {
                        *dst += s;
                    }
                    for (dst, s) in self.nodes[b.0].grad.iter_mut().zip(&db) {
                        *dst += s;
                    }
                    self.nodes[i].grad = g;
                }
                Op::MaxPool2 { x, ref argmax } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        self.nodes[x.0].grad[src_idx] += g[o];
                    }
                    self.nodes[i].grad = g;
                }
                Op::Upsample2(a) => {
                    let s = self.nodes[a.0].shape.clone();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let ow = w * 2;
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for nc in 0..n * c {
                        let base = nc * h * w;
                        let obase = nc * h * w * 4;
                        for y in 0..h {
                            for x in 0..w {
                                let o = obase + (y * 2) * ow + x * 2;
                                self.nodes[a.0].grad[base + y * w + x] +=
                                    g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
                            }
                        }
                    }
                    self.nodes[i].grad = g;
                }
                Op::ConcatChannels(a, b) => {
                    let (c1, c2) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                    let (n, h, w) = (
                        self.nodes[a.0].shape[0],
                        self.nodes[a.0].shape[2],
                        self.nodes[a.0].shape[3],
                    );
                    let plane = h * w;
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for img in 0..n {
                        let src = img * (c1 + c2) * plane;
                        for (dst, s) in self.nodes[a.0].grad
                            [img * c1 * plane..(img + 1) * c1 * plane]
                            .iter_mut()
                            .zip(&g[src..src + c1 * plane])
                        {
                            *dst += s;
                        }
                        for (dst, s) in self.nodes[b.0].grad
                            [img * c2 * plane..(img + 1) * c2 * plane]
                            .iter_mut()
                            .zip(&g[src + c1 * plane..src + (c1 + c2) * plane])
                        {
                            *dst += s;
                        }
                    }
                    self.nodes[i].grad = g;
                }
                Op::Dense { x, w, b } => {
                    let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let m = self.nodes[w.0].shape[1];
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let xv = std::mem::take(&mut self.nodes[x.0].values);
                    let wv = std::mem::take(&mut self.nodes[w.0].values);
                    for i_n in 0..n {
                        for j in 0..m {
                            let go = g[i_n * m + j];
                            self.nodes[b.0].grad[j] += go;
                            for k in 0..d {
                                self.nodes[w.0].grad[k * m + j] += go * xv[i_n * d + k];
                                self.nodes[x.0].grad[i_n * d + k] += go * wv[k * m + j];
                            }
                        }
                    }
                    self.nodes[x.0].values = xv;
                    self.nodes[w.0].values = wv;
                    self.nodes[i].grad = g;
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.nodes[a.0].shape.clone();
                    let plane = s[2] * s[3];
                    let inv = 1.0 / plane as f64;
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    for nc in 0..s[0] * s[1] {
                        let gv = g[nc] * inv;
                        for dst in
                            self.nodes[a.0].grad[nc * plane..(nc + 1) * plane].iter_mut()
                        {
                            *dst += gv;
                        }
                    }
                    self.nodes[i].grad = g;
                }
                Op::Bce { pred, label } => {
                    let g = self.nodes[i].grad[0];
                    let n = self.nodes[pred.0].values.len() as f64;
                    let pv = std::mem::take(&mut self.nodes[pred.0].values);
                    let yv = std::mem::take(&mut self.nodes[label.0].values);
                    for ((dst, &p), &y) in
                        self.nodes[pred.0].grad.iter_mut().zip(&pv).zip(&yv)
                    {
                        *dst += g * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
                    }
                    self.nodes[pred.0].values = pv;
                    self.nodes[label.0].values = yv;
                }
                Op::Mse { a, b } => {
                    let g = self.nodes[i].grad[0];
                    let n = self.nodes[a.0].values.len() as f64;
                    let av = std::mem::take(&mut self.nodes[a.0].values);
                    let bv = std::mem::take(&mut self.nodes[b.0].values);
                    for ((dst, &x), &y) in self.nodes[a.0].grad.iter_mut().zip(&av).zip(&bv) {
                        *dst += g * 2.0 * (x - y) / n;
                    }
                    for ((dst, &x), &y) in self.nodes[b.0].grad.iter_mut().zip(&av).zip(&bv) {
                        *dst -= g * 2.0 * (x - y) / n;
                    }
                    self.nodes[a.0].values = av;
                    self.nodes[b.0].values = bv;
                }
                Op::Shadow { img, t, cfg } => {
                    let si = self.nodes[img.0].shape.clone();
                    let dims = BatchDims {
                        n: si[0],
                        height: si[2],
                        width: si[3],
                    };
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let iv = std::mem::take(&mut self.nodes[img.0].values);
                    let tv = std::mem::take(&mut self.nodes[t.0].values);
                    let (di, dt) = shadow::shadow_backward(&iv, &tv, dims, &cfg, &g)
                        .expect("shapes validated at forward");
                    self.nodes[img.0].values = iv;
                    self.nodes[t.0].values = tv;
                    for (dst, s) in self.nodes[img.0].grad.iter_mut().zip(&di) {
                        *dst += s;
                    }
                    for (dst, s) in self.nodes[t.0].grad.iter_mut().zip(&dt) {
                        *dst += s;
                    }
                    self.nodes[i].grad = g;
                }
            }
        }
        Ok(())
    }

    /// Whether a node was registered as a differentiation target.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}
