use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::{Tensor, TensorError};

/// Clamp applied to probabilities before taking logarithms inside the KL term.
pub const KL_EPSILON: f64 = 1e-12;

/// Row-sum tolerance accepted for probability inputs of [`Graph::kl_divergence`].
const PROB_SUM_TOL: f64 = 1e-6;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Conv2d,
    Relu,
    MaxPool2d,
    Reshape,
    Softmax,
    CrossEntropy,
    KlDivergence,
    Add,
    Scale,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geo: ConvGeometry,
        filters: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    KlDivergence(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(..) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDivergence(..) => OpKind::KlDivergence,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::KlDivergence(a, b) | Op::Add(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::MaxPool2d { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of recorded operations.
///
/// Node inputs always precede the node itself, so reverse recording order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
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

    /// Number of recorded nodes of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (or of an intermediate after the most
    /// recent backward sweep).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Registers a leaf that takes part in differentiation iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Leaf, t.requires_grad())
    }

    /// Registers a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape, t.data);
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape, t.data);
        self.push(value, Op::Leaf, false)
    }

    /// Copies a node's value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        debug_assert!(op.inputs().iter().all(|i| i.0 < id));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a `[F]` bias to every row of a `[B, F]` input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let f = sb[0];
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(f) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, b), rg))
    }

    /// Zero-padded cross-correlation of `x[B,C,H,W]` with `w[F,C,kh,kw]` plus bias `b[F]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != [sw[0]] {
            return Err(TensorError::Dimension {
                op: "conv2d bias",
                lhs: sw,
                rhs: sb,
            });
        }
        let geo = conv_geometry(&sx, &sw, stride, pad)?;
        let (batch, filters) = (sx[0], sw[0]);
        let (pl, ol) = (geo.patch_len(), geo.out_len());
        let img_len = geo.channels * geo.height * geo.width;

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut cols = vec![0.0; batch * pl * ol];
        let mut out = vec![0.0; batch * filters * ol];
        for n in 0..batch {
            let col = &mut cols[n * pl * ol..(n + 1) * pl * ol];
            im2col(&xd[n * img_len..(n + 1) * img_len], &geo, col);
            let dst = &mut out[n * filters * ol..(n + 1) * filters * ol];
            for (f, row) in dst.chunks_mut(ol).enumerate() {
                row.fill(bd[f]);
            }
            gemm_nn(filters, pl, ol, wd, col, dst);
        }
        let shape = vec![batch, filters, geo.out_h, geo.out_w];
        let rg = self.any_grad(&[x, w, b]);
        let op = Op::Conv2d {
            x,
            w,
            b,
            geo,
            filters,
            cols,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = src.data().iter().map(|v| v.max(0.0)).collect();
        let shape = src.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), rg)
    }

    /// Window max over `x[B,C,H,W]`; the backward pass routes to the first
    /// maximal element of each window.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Dimension {
                op: "maxpool2d",
                lhs: s,
                rhs: vec![k, k],
            });
        }
        let (oh, ow) = pool_output(s[2], s[3], k, stride)?;
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let op = Op::MaxPool2d { x, argmax };
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).shape();
        let batch = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, vec![batch, rest])
    }

    /// Row-wise softmax of `q[B,M]`, shifted by the row max.
    pub fn softmax(&mut self, q: Var) -> Result<Var, TensorError> {
        let t = self.value(q);
        if t.shape().len() != 2 || t.shape()[1] == 0 {
            return Err(TensorError::Dimension {
                op: "softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !t.is_finite() {
            return Err(TensorError::Numeric {
                op: "softmax",
                reason: "non-finite logits".into(),
            });
        }
        let out = softmax_rows(t.data(), t.shape()[1]);
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[q]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(q), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() || s[1] == 0 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(TensorError::Label {
                index,
                label,
                classes,
            });
        }
        if !t.is_finite() {
            return Err(TensorError::Numeric {
                op: "cross_entropy",
                reason: "non-finite logits".into(),
            });
        }
        let mut total = 0.0;
        for (row, &label) in t.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let probs = softmax_rows(t.data(), classes);
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / batch as f64), op, rg))
    }

    /// Batch mean of `Σ_i p_i (ln p_i − ln q_i)`, with both logarithm arguments
    /// clamped to [`KL_EPSILON`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var, TensorError> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() || tp.shape().len() != 2 {
            return Err(TensorError::Dimension {
                op: "kl_divergence",
                lhs: tp.shape().to_vec(),
                rhs: tq.shape().to_vec(),
            });
        }
        let (batch, classes) = (tp.shape()[0], tp.shape()[1]);
        for (name, t) in [("p", tp), ("q", tq)] {
            check_distribution(name, t.data(), classes)?;
        }
        let mut total = 0.0;
        for (pr, qr) in tp.data().chunks(classes).zip(tq.data().chunks(classes)) {
            let mut row = 0.0;
            for (&pi, &qi) in pr.iter().zip(qr) {
                if pi > 0.0 {
                    row += pi * (pi.max(KL_EPSILON).ln() - qi.max(KL_EPSILON).ln());
                }
            }
            total += row;
        }
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::KlDivergence(p, q),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Dimension {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let deltas = self.input_grads(i, &upstream);
            self.nodes[i].grad = Some(upstream);
            for (v, d) in deltas {
                self.accumulate(v, &d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (acc, d) in g.iter_mut().zip(delta) {
                    *acc += d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each differentiable input.
    fn input_grads(&self, i: usize, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, up, tb.data(), &mut da);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, ta.data(), up, &mut db);
                    out.push((*b, db));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    out.push((*x, up.to_vec()));
                }
                if self.wants(*b) {
                    let f = self.value(*b).len();
                    let mut db = vec![0.0; f];
                    for row in up.chunks(f) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geo,
                filters,
                cols,
            } => {
                let (pl, ol) = (geo.patch_len(), geo.out_len());
                let batch = self.value(*x).shape()[0];
                let img_len = geo.channels * geo.height * geo.width;
                let wd = self.value(*w).data();
                let mut dx = self.wants(*x).then(|| vec![0.0; batch * img_len]);
                let mut dw = self.wants(*w).then(|| vec![0.0; filters * pl]);
                let mut db = self.wants(*b).then(|| vec![0.0; *filters]);
                let mut dcols = vec![0.0; pl * ol];
                for n in 0..batch {
                    let g = &up[n * filters * ol..(n + 1) * filters * ol];
                    if let Some(dw) = dw.as_mut() {
                        gemm_nt(*filters, ol, pl, g, &cols[n * pl * ol..(n + 1) * pl * ol], dw);
                    }
                    if let Some(db) = db.as_mut() {
                        for (f, row) in g.chunks(ol).enumerate() {
                            db[f] += row.iter().sum::<f64>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.fill(0.0);
                        gemm_tn(pl, *filters, ol, wd, g, &mut dcols);
                        col2im(&dcols, geo, &mut dx[n * img_len..(n + 1) * img_len]);
                    }
                }
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                out.extend(db.map(|d| (*b, d)));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = xd
                    .iter()
                    .zip(up)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&idx, g) in argmax.iter().zip(up) {
                    d[idx] += g;
                }
                out.push((*x, d));
            }
            Op::Reshape(x) => out.push((*x, up.to_vec())),
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(up.chunks(cols)).zip(d.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((di, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *di = yi * (gi - dot);
                    }
                }
                out.push((*x, d));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = up[0] / batch as f64;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((*logits, d));
            }
            Op::KlDivergence(p, q) => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let batch = tp.shape()[0] as f64;
                let scale = up[0] / batch;
                if self.wants(*p) {
                    let d = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pi, &qi)| {
                            let lq = qi.max(KL_EPSILON).ln();
                            if pi > KL_EPSILON {
                                scale * (pi.ln() + 1.0 - lq)
                            } else {
                                scale * (KL_EPSILON.ln() - lq)
                            }
                        })
                        .collect();
                    out.push((*p, d));
                }
                if self.wants(*q) {
                    let d = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pi, &qi)| {
                            if qi > KL_EPSILON {
                                -scale * pi / qi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.push((*q, d));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, up.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, up.to_vec()));
                }
            }
            Op::Scale(x, factor) => out.push((*x, up.iter().map(|g| g * factor).collect())),
            Op::Sum(x) => out.push((*x, vec![up[0]; self.value(*x).len()])),
        }
        out
    }
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

fn check_distribution(name: &str, data: &[f64], classes: usize) -> Result<(), TensorError> {
    for (r, row) in data.chunks(classes).enumerate() {
        if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(TensorError::Numeric {
                op: "kl_divergence",
                reason: format!("{name} row {r} has invalid probability {v}"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(TensorError::Numeric {
                op: "kl_divergence",
                reason: format!("{name} row {r} sums to {s}"),
            });
        }
    }
    Ok(())
}

pub(crate) fn conv_geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry, TensorError> {
    let (c, h, wd) = (x[1], x[2], x[3]);
    let (kh, kw) = (w[2], w[3]);
    let config = |reason: String| TensorError::Config { op: "conv2d", reason };
    if stride == 0 {
        return Err(config("stride must be positive".into()));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad || kh == 0 || kw == 0 {
        return Err(config(format!(
            "kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pad}"
        )));
    }
    let (span_h, span_w) = (h + 2 * pad - kh, wd + 2 * pad - kw);
    if span_h % stride != 0 || span_w % stride != 0 {
        return Err(config(format!(
            "output size ({h}+2*{pad}-{kh})/{stride}+1 is not integral"
        )));
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        pad,
        out_h: span_h / stride + 1,
        out_w: span_w / stride + 1,
    })
}

pub(crate) fn pool_output(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<(usize, usize), TensorError> {
    let config = |reason: String| TensorError::Config {
        op: "maxpool2d",
        reason,
    };
    if k == 0 || stride == 0 {
        return Err(config("window and stride must be positive".into()));
    }
    if k > h || k > w {
        return Err(config(format!("window {k} larger than input {h}x{w}")));
    }
    if !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
        return Err(config(format!(
            "input {h}x{w} does not tile with window {k} and stride {stride}"
        )));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn conv_sum_of_ones_and_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let w = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);

        let data: Vec<f64> = (0..18).map(|v| v as f64 - 4.5).collect();
        let x = g.constant(t(&[1, 2, 3, 3], &data));
        let w = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(
            g.conv2d(x, w, b, 2, 0),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, -2.0, -0.5]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn maxpool_max_and_tie_routing() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let x = g.param(t(&[1, 1, 4, 4], &[7.0; 16]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0; 4]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        let mut want = [0.0; 16];
        for i in [0, 2, 8, 10] {
            want[i] = 1.0;
        }
        assert_eq!(grad, &want[..]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(matches!(
            g.maxpool2d(x, 3, 1),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax(q).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let q = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = g.softmax(q).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300);

        let q = g.constant(t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax(q).unwrap();
        for (got, want) in g.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_logits() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_parts(vec![1, 2], vec![f64::INFINITY, 0.0]));
        assert!(matches!(g.softmax(q), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = g.cross_entropy(q, &[0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let q = g.constant(t(&[1, 2], &[30.0, -30.0]));
        let l = g.cross_entropy(q, &[0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-20);
    }

    #[test]
    fn cross_entropy_label_error_names_sample() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(vec![3, 2]));
        assert_eq!(
            g.cross_entropy(q, &[0, 1, 2]).unwrap_err(),
            TensorError::Label {
                index: 2,
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[0.5, 0.5]));
        let q = g.constant(t(&[1, 2], &[0.25, 0.75]));
        let kl = g.kl_divergence(p, q).unwrap();
        // direct summation: 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((g.value(kl).data()[0] - want).abs() < 1e-15);
        assert!((want - 0.14384).abs() < 1e-5);

        let same = g.kl_divergence(p, p).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
    }

    #[test]
    fn kl_rejects_negative_and_unnormalised() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_parts(vec![1, 2], vec![1.1, -0.1]));
        let q = g.constant(t(&[1, 2], &[0.5, 0.5]));
        assert!(matches!(
            g.kl_divergence(p, q),
            Err(TensorError::Numeric { .. })
        ));
        let p = g.constant(t(&[1, 2], &[0.5, 0.6]));
        assert!(matches!(
            g.kl_divergence(p, q),
            Err(TensorError::Numeric { .. })
        ));
    }

    #[test]
    fn backward_sum_and_zero_scale() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        let z = g.scale(s, 0.0);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[0.3, -0.2]));
        let d = g.detach(x);
        let s = g.sum(d);
        let total = g.add(s, s).unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(x).is_none());
    }
}
