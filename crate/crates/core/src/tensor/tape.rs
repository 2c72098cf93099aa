use super::{ensure_finite, gemm, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalization.
    pub var: Vec<f64>,
    /// Number of reduced elements per channel.
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, the estimate folded into running statistics.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.count as f64;
        let corr = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * corr).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, bt: bool },
    Reshape(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    SpatialScale { x: Var, mask: Vec<f64> },
    GlobalAvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    SceneCoherence(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::SpatialScale { .. } => "spatial_scale",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::MaxPool { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::SceneCoherence(..) => "scene_coherence",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of primitive operations for one forward pass.
///
/// Nodes are stored in creation order, so every node's inputs precede it and a
/// single reverse sweep in [`Tape::backward`] visits each node once. After the
/// sweep only leaf gradients are retained.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Splits a channels-last tensor into (rows, channels).
fn channels_last(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / c.max(1);
    (rows, c)
}

/// Interprets `[B,H,W,C]` (or unbatched `[H,W,C]`) as a batch of feature maps.
fn nhwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        [h, w, c] => Ok((1, h, w, c)),
        _ => Err(Error::shape(
            op,
            format!("expected [B,H,W,C] or [H,W,C], got {shape:?}"),
        )),
    }
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

    /// Records an input value. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) output with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op.name(), value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Adds a per-channel bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = channels_last(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match trailing axis of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    /// `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m,k] × [n,k]ᵀ`, the dense-layer product with weights stored output-major.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("operands must be rank 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if bt { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if kb != k {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}{}", if bt { "ᵀ" } else { "" })));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), bt, 0.0, &mut out);
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, bt }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (rows, ca) = channels_last(&sa);
        let (_, cb) = channels_last(&sb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(shape, data)?, Op::Concat(a, b), &[a, b])
    }

    /// Zero-padded 2-D cross-correlation without bias.
    ///
    /// `x` is `[B,H,W,Cin]`, `w` is `[KH,KW,Cin,Cout]`; output is
    /// `[B,Ho,Wo,Cout]` with `Ho = (H + 2·pad − KH)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, h, wd, cin) = nhwc("conv2d", self.shape(x))?;
        let unbatched = self.shape(x).len() == 3;
        let [kh, kw, wcin, cout] = <[usize; 4]>::try_from(self.shape(w))
            .map_err(|_| Error::shape("conv2d", format!("kernel must be [KH,KW,Cin,Cout], got {:?}", self.shape(w))))?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Geometry(format!(
                "{kh}×{kw} kernel does not fit {h}×{wd} input with pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { batch, h, w: wd, cin, kh, kw, cout, stride, pad, ho, wo };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; geom.rows() * cout];
        gemm(geom.rows(), geom.patch(), cout, &cols, false, self.value(w).data(), false, 0.0, &mut out);
        let shape = if unbatched { vec![ho, wo, cout] } else { vec![batch, ho, wo, cout] };
        self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// Multiplies every channel at spatial position `(h,w)` by `mask[h,w]`.
    pub fn spatial_scale(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let (_, h, w, c) = nhwc("spatial_scale", self.shape(x))?;
        if mask.shape() != [h, w] {
            return Err(Error::shape(
                "spatial_scale",
                format!("mask {:?} does not match spatial extent {h}×{w}", mask.shape()),
            ));
        }
        let m = mask.data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= m[(i / c) % (h * w)];
        }
        self.push(out, Op::SpatialScale { x, mask: m }, &[x])
    }

    /// Channelwise mean over the spatial grid: `[B,H,W,C] → [B,C]`, `[H,W,C] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = nhwc("global_avg_pool", self.shape(x))?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial grid"));
        }
        let xv = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for p in 0..hw {
                let row = &xv[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= hw as f64;
            }
        }
        let shape = if self.shape(x).len() == 3 { vec![c] } else { vec![b, c] };
        self.push(Tensor::new(shape, out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// Unpadded max pooling with a square window.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, h, w, c) = nhwc("max_pool2d", self.shape(x))?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::Geometry(format!(
                "pool window {kernel} stride {stride} does not fit {h}×{w}"
            )));
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for oh in 0..ho {
                for ow in 0..wo {
                    let o = ((bi * ho + oh) * wo + ow) * c;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let src = ((bi * h + oh * stride + i) * w + ow * stride + j) * c;
                            for ch in 0..c {
                                if xv[src + ch] > out[o + ch] {
                                    out[o + ch] = xv[src + ch];
                                    argmax[o + ch] = src + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if self.shape(x).len() == 3 { vec![ho, wo, c] } else { vec![b, ho, wo, c] };
        self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, &[x])
    }

    /// Training-mode batch normalization over every axis but the trailing one.
    ///
    /// The leading axis is the batch and must hold at least two samples.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[0] < 2 {
            return Err(Error::Invalid(format!(
                "training-mode batch norm needs a batch of at least 2, got shape {shape:?}"
            )));
        }
        let (rows, c) = channels_last(&shape);
        self.check_affine("batch_norm", c, gamma, beta)?;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let (out, xhat) = out?;
        let stats = BatchStats { mean, var, count: rows };
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch: true }, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c) = channels_last(self.shape(x));
        self.check_affine("batch_norm", c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats length != {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, mean, &inv_std)?;
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch: false }, &[x, gamma, beta])
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!("gamma {:?} / beta {:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Result<(Tensor, Vec<f64>)> {
        let c = mean.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        Ok((Tensor::new(xv.shape().to_vec(), out)?, xhat))
    }

    /// Mean softmax cross-entropy of `[B,C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, c] = <[usize; 2]>::try_from(shape.as_slice())
            .map_err(|_| Error::shape("softmax_cross_entropy", format!("logits must be [B,C], got {shape:?}")))?;
        if targets.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for batch of {b}", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("target {t} out of range for {c} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &t) in lv.chunks(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let out = Tensor::scalar(loss / b as f64);
        self.push(out, Op::SoftmaxCe { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Mean elementwise binary cross-entropy of logits against targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let lv = self.value(logits).data();
        let n = lv.len().max(1) as f64;
        let loss: f64 = lv
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(loss / n);
        self.push(out, Op::BceLogits { logits, targets: targets.data().to_vec() }, &[logits])
    }

    /// Scene coherence penalty over a `[B,N,M,C]` (or `[N,M,C]`) score grid.
    ///
    /// Per sample: squared differences between vertically and horizontally
    /// adjacent cells, summed, divided by the number of adjacent pairs
    /// `(N−1)M + N(M−1)`, and averaged over classes. The result is averaged
    /// over the batch.
    pub fn scene_coherence(&mut self, grid: Var) -> Result<Var> {
        let (b, n, m, c) = nhwc("scene_coherence", self.shape(grid))?;
        let pairs = (n - 1) * m + n * (m - 1);
        if pairs == 0 {
            return Err(Error::Geometry(format!(
                "scene coherence needs at least two grid cells, got {n}×{m}"
            )));
        }
        let g = self.value(grid).data();
        let idx = |bi: usize, i: usize, j: usize| ((bi * n + i) * m + j) * c;
        let mut total = 0.0;
        for bi in 0..b {
            for i in 0..n {
                for j in 0..m {
                    let here = idx(bi, i, j);
                    if i + 1 < n {
                        let below = idx(bi, i + 1, j);
                        total += (0..c).map(|k| (g[below + k] - g[here + k]).powi(2)).sum::<f64>();
                    }
                    if j + 1 < m {
                        let right = idx(bi, i, j + 1);
                        total += (0..c).map(|k| (g[right + k] - g[here + k]).powi(2)).sum::<f64>();
                    }
                }
            }
        }
        let out = Tensor::scalar(total / (b * c * pairs) as f64);
        self.push(out, Op::SceneCoherence(grid), &[grid])
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Afterwards [`grad`](Self::grad) returns `∂output/∂leaf` for every leaf
    /// recorded with `requires_grad`; intermediate gradients are dropped.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(Error::NonScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = &grads[i] {
                    ensure_finite("backward(leaf)", g)?;
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ensure_finite(node.op.name(), &g)?;
            self.backprop_node(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], len(*b), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    accumulate(&mut grads[a.0], av.len(), |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * bv[k];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], bv.len(), |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * av[k];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if needs(*b) {
                    let c = len(*b);
                    accumulate(&mut grads[b.0], c, |d| {
                        for row in g.chunks(c) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::MatMul { a, b, bt } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    accumulate(&mut grads[a.0], m * k, |d| gemm(m, n, k, g, false, bv, !bt, 1.0, d));
                }
                if needs(*b) {
                    if *bt {
                        // dB = Gᵀ · A, shape [n,k]
                        accumulate(&mut grads[b.0], n * k, |d| gemm(n, m, k, g, true, av, false, 1.0, d));
                    } else {
                        // dB = Aᵀ · G, shape [k,n]
                        accumulate(&mut grads[b.0], k * n, |d| gemm(k, m, n, av, true, g, false, 1.0, d));
                    }
                }
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                accumulate(&mut grads[x.0], len(*x), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(&mut grads[x.0], xv.len(), |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = len(*x).max(1) as f64;
                accumulate(&mut grads[x.0], len(*x), |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Concat(a, b) => {
                let (_, ca) = channels_last(self.shape(*a));
                let (_, cb) = channels_last(self.shape(*b));
                if needs(*a) {
                    accumulate(&mut grads[a.0], len(*a), |d| {
                        for (dr, gr) in d.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                            dr.iter_mut().zip(&gr[..ca]).for_each(|(d, g)| *d += g);
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], len(*b), |d| {
                        for (dr, gr) in d.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                            dr.iter_mut().zip(&gr[ca..]).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (p, k, co) = (geom.rows(), geom.patch(), geom.cout);
                if needs(*w) {
                    accumulate(&mut grads[w.0], k * co, |d| gemm(k, p, co, cols, true, g, false, 1.0, d));
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; p * k];
                    gemm(p, co, k, g, false, self.value(*w).data(), true, 0.0, &mut dcols);
                    accumulate(&mut grads[x.0], len(*x), |d| col2im(&dcols, geom, d));
                }
            }
            Op::SpatialScale { x, mask } => {
                let c = *node.value.shape().last().unwrap();
                let hw = mask.len();
                accumulate(&mut grads[x.0], len(*x), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * mask[(k / c) % hw];
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (b, h, w, c) = nhwc("global_avg_pool", self.shape(*x)).expect("checked in forward");
                let hw = h * w;
                accumulate(&mut grads[x.0], len(*x), |d| {
                    for bi in 0..b {
                        let gr = &g[bi * c..(bi + 1) * c];
                        for p in 0..hw {
                            let dr = &mut d[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                            dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g / hw as f64);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                accumulate(&mut grads[x.0], len(*x), |d| {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gr[ch];
                        sum_gx[ch] += gr[ch] * hr[ch];
                    }
                }
                if needs(*gamma) {
                    accumulate(&mut grads[gamma.0], c, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s));
                }
                if needs(*beta) {
                    accumulate(&mut grads[beta.0], c, |d| d.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s));
                }
                if needs(*x) {
                    let n = rows as f64;
                    accumulate(&mut grads[x.0], len(*x), |d| {
                        for ((dr, gr), hr) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let scale = gv[ch] * inv_std[ch];
                                dr[ch] += if *batch {
                                    scale * (gr[ch] - sum_g[ch] / n - hr[ch] * sum_gx[ch] / n)
                                } else {
                                    scale * gr[ch]
                                };
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let b = targets.len();
                let c = probs.len() / b;
                accumulate(&mut grads[logits.0], probs.len(), |d| {
                    for (bi, &t) in targets.iter().enumerate() {
                        for k in 0..c {
                            let y = if k == t { 1.0 } else { 0.0 };
                            d[bi * c + k] += g[0] * (probs[bi * c + k] - y) / b as f64;
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let n = lv.len().max(1) as f64;
                accumulate(&mut grads[logits.0], lv.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[0] * (sigmoid(lv[k]) - targets[k]) / n;
                    }
                });
            }
            Op::SceneCoherence(grid) => {
                let (b, n, m, c) = nhwc("scene_coherence", self.shape(*grid)).expect("checked in forward");
                let pairs = (n - 1) * m + n * (m - 1);
                let scale = 2.0 * g[0] / (b * c * pairs) as f64;
                let gv = self.value(*grid).data();
                let idx = |bi: usize, i: usize, j: usize| ((bi * n + i) * m + j) * c;
                accumulate(&mut grads[grid.0], gv.len(), |d| {
                    for bi in 0..b {
                        for i in 0..n {
                            for j in 0..m {
                                let here = idx(bi, i, j);
                                let mut pair = |other: usize| {
                                    for k in 0..c {
                                        let diff = gv[other + k] - gv[here + k];
                                        d[other + k] += scale * diff;
                                        d[here + k] -= scale * diff;
                                    }
                                };
                                if i + 1 < n {
                                    pair(idx(bi, i + 1, j));
                                }
                                if j + 1 < m {
                                    pair(idx(bi, i, j + 1));
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.patch();
    let mut cols = vec![0.0; g.rows() * k];
    for bi in 0..g.batch {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let row = ((bi * g.ho + oh) * g.wo + ow) * k;
                for i in 0..g.kh {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let src = ((bi * g.h + ih as usize) * g.w + iw as usize) * g.cin;
                        let dst = row + (i * g.kw + j) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let k = g.patch();
    for bi in 0..g.batch {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let row = ((bi * g.ho + oh) * g.wo + ow) * k;
                for i in 0..g.kh {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let dst = ((bi * g.h + ih as usize) * g.w + iw as usize) * g.cin;
                        let src = row + (i * g.kw + j) * g.cin;
                        for ch in 0..g.cin {
                            dx[dst + ch] += dcols[src + ch];
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

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn elementwise_multiply() {
        let mut t = Tape::new();
        let a = t.constant(v(&[1., 2., 3.]));
        let b = t.constant(v(&[4., 5., 6.]));
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4., 10., 18.]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(3));
        let x = t.constant(Tensor::new([3, 1], vec![0.3, -1.2, 7.0]).unwrap());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.3, -1.2, 7.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(v(&[1., 2., 3.]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut t = Tape::new();
        let x = Var(0);
        assert!(matches!(t.backward(x), Err(Error::EmptyTape)));
        let x = t.param(v(&[1., 2.]));
        assert!(matches!(t.backward(x), Err(Error::NonScalar(s)) if s == vec![2]));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(v(&[1., 2.]));
        let b = t.constant(v(&[1., 2., 3.]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = t.constant(Tensor::zeros([2, 3]));
        let n = t.constant(Tensor::zeros([2, 3]));
        assert!(t.matmul(m, n).unwrap_err().to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(v(&[f64::MAX, 1.0]));
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite(op)) if op == "scale"));
    }

    #[test]
    fn intermediates_drop_gradients() {
        let mut t = Tape::new();
        let x = t.param(v(&[1., 2.]));
        let y = t.scale(x, 3.0).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3., 3.]);
        assert!(t.grad(y).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x + x·x) = 1 + 2x
        let mut t = Tape::new();
        let x = t.param(v(&[0.5, -1.0]));
        let sq = t.mul(x, x).unwrap();
        let y = t.add(x, sq).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn batch_norm_rejects_single_sample() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 4]));
        let g = t.constant(Tensor::ones([4]));
        let b = t.constant(Tensor::zeros([4]));
        assert!(t.batch_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn scene_coherence_needs_adjacency() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 1, 3]));
        assert!(matches!(t.scene_coherence(x), Err(Error::Geometry(_))));
    }
}
