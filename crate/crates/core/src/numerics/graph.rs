//! Tape-based reverse-mode differentiation over the small op set the encoder
//! and its losses need.
//!
//! Nodes are appended in evaluation order, so every input id is smaller than
//! the id of the node consuming it and the tape is acyclic by construction.

use super::kernels::{self, gemm};
use super::tensor::{numel, Precision, Tensor};
use super::{NumericsError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values and the gradient of the output and
/// returns one gradient per input; entries for inputs that do not need a
/// gradient may be `None`.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

/// Batch normalization statistics source.
#[derive(Debug, Clone)]
pub enum BnStats<'a> {
    /// Normalize with the batch's own per-channel statistics.
    Batch,
    /// Normalize with fixed per-channel mean / standard deviation, treated as
    /// constants under differentiation.
    Fixed { mean: &'a [f64], std: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics computed by a batch-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64> },
    Relu { x: Var },
    AvgPool { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, std: Vec<f64>, batch: bool },
    SoftmaxCe { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum { x: Var },
    SumSquares { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves.
    grad: Option<Vec<f64>>,
}

pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self { precision, nodes: Vec::new() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        self.precision.round_slice(value.data_mut());
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts a leaf; it is differentiated when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        let rg = tensor.requires_grad;
        let v = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())?;
        self.push("leaf", v, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.push("constant", tensor, Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.push("param", tensor, Op::Leaf, true)
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![n, m], out)?, Op::MatMul { a, b }, rg)
    }

    /// Adds a length-`m` bias to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || numel(&sb) != sx[1] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", sx, sb)));
        }
        let m = sx[1];
        let b = self.value(bias).data().to_vec();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v + b[i % m]).collect();
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Tensor::new(sx, out)?, Op::AddBias { x, bias }, rg)
    }

    /// 3x3 convolution, stride 1, padding 1. `x: n x ci x h x w`,
    /// `w: co x ci x 3 x 3`, `b: co`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 || numel(&sb) != sw[0] {
            return Err(shape_err("conv2d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        let hw = h * wd;
        let cols = kernels::im2col3x3(self.value(x).data(), n, ci, h, wd);
        let mut mat = vec![0.0; co * n * hw];
        gemm(co, ci * 9, n * hw, self.value(w).data(), false, &cols, false, &mut mat, false);
        let bias = self.value(b).data();
        for c in 0..co {
            let bc = bias[c];
            mat[c * n * hw..(c + 1) * n * hw].iter_mut().for_each(|v| *v += bc);
        }
        let out = kernels::channel_major_to_nchw(&mat, n, co, hw);
        let rg = self.rg(&[x, w, b]);
        let cols = if rg { cols } else { Vec::new() };
        self.push("conv2d", Tensor::new(vec![n, co, h, wd], out)?, Op::Conv2d { x, w, b, cols }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("relu", Tensor::new(shape, out)?, Op::Relu { x }, rg)
    }

    /// 2x2 average pooling over the last two dims of an NCHW tensor.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(shape_err("avgpool2x2", format!("{:?}", s)));
        }
        let out = kernels::avgpool2x2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(&[x]);
        self.push("avgpool2x2", Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?, Op::AvgPool { x }, rg)
    }

    /// Reshapes to `n x rest`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(shape_err("flatten", "scalar input".into()));
        }
        let rest = numel(&s[1..]);
        self.reshape(x, vec![s[0], rest])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, factor }, rg)
    }

    /// Per-channel normalization of an NCHW (or `n x c`) tensor followed by
    /// the affine map `gamma * xhat + beta`.
    ///
    /// Returns the batch moments when `stats` is [`BnStats::Batch`].
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 && s.len() != 2 {
            return Err(shape_err("batchnorm", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let hw = if s.len() == 4 { s[2] * s[3] } else { 1 };
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(shape_err("batchnorm", format!("affine params for {} channels", c)));
        }
        let xd = self.value(x).data();
        let (mean, std, moments, batch) = match stats {
            BnStats::Batch => {
                if n < 2 {
                    return Err(NumericsError::Precondition("batch statistics need a batch of at least 2".into()));
                }
                let cnt = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = acc / cnt;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / cnt;
                }
                let std: Vec<f64> = var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
                (mean.clone(), std, Some(BatchMoments { mean, var }), true)
            }
            BnStats::Fixed { mean, std } => {
                if mean.len() != c || std.len() != c {
                    return Err(shape_err("batchnorm", format!("fixed stats for {} channels", c)));
                }
                if std.iter().any(|s| !(*s > 0.0)) {
                    return Err(NumericsError::Precondition("fixed standard deviation must be positive".into()));
                }
                (mean.to_vec(), std.to_vec(), None, false)
            }
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (m, sd, gg, bb) = (mean[ch], std[ch], g[ch], be[ch]);
                for i in base..base + hw {
                    let xh = (xd[i] - m) / sd;
                    xhat[i] = xh;
                    out[i] = gg * xh + bb;
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let xhat = if rg { xhat } else { Vec::new() };
        let var = self.push(
            "batchnorm",
            Tensor::new(s, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, std, batch },
            rg,
        )?;
        Ok((var, moments))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[1] < 2 {
            return Err(shape_err("softmax_cross_entropy", format!("{:?} with {} labels", s, labels.len())));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NumericsError::LabelOutOfRange { label: bad, classes: c });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = loss / n.max(1) as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec() },
            rg,
        )
    }

    /// Row-wise L2 normalization; rows with zero norm map to zero rows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("l2_normalize_rows", format!("{:?}", s)));
        }
        let (n, f) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * f];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * f..(i + 1) * f];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = nr;
            if nr > ZERO_ROW_NORM {
                for j in 0..f {
                    out[i * f + j] = row[j] / nr;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("l2_normalize_rows", Tensor::new(s, out)?, Op::L2Normalize { x, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(v), Op::Sum { x }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let v: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push("sum_squares", Tensor::scalar(v), Op::SumSquares { x }, rg)
    }

    /// Records an externally computed op together with its backward rule.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let name = op.name();
        let rg = self.rg(inputs);
        self.push(name, output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar { shape: lv.shape().to_vec() });
        }
        if !lv.item().is_finite() {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contributions = self.local_backward(id, &dy);
            for (input, g) in contributions {
                debug_assert!(input.0 < id, "tape order violated");
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[input.0] = Some(g),
                }
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(dy),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, id: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, dy, false, self.value(*b).data(), true, &mut da, false);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, self.value(*a).data(), true, dy, false, &mut db, false);
                    out.push((*b, db));
                }
            }
            Op::AddBias { x, bias } => {
                let m = self.shape(*x)[1];
                if self.needs(*x) {
                    out.push((*x, dy.to_vec()));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; m];
                    for (i, g) in dy.iter().enumerate() {
                        db[i % m] += g;
                    }
                    out.push((*bias, db));
                }
            }
            Op::Conv2d { x, w, b, cols } => {
                let sx = self.shape(*x);
                let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = self.shape(*w)[0];
                let hw = h * wd;
                let dmat = kernels::nchw_to_channel_major(dy, n, co, hw);
                if self.needs(*w) {
                    let mut dw = vec![0.0; co * ci * 9];
                    gemm(co, n * hw, ci * 9, &dmat, false, cols, true, &mut dw, false);
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let db: Vec<f64> = (0..co).map(|c| dmat[c * n * hw..(c + 1) * n * hw].iter().sum()).collect();
                    out.push((*b, db));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; ci * 9 * n * hw];
                    gemm(ci * 9, co, n * hw, self.value(*w).data(), true, &dmat, false, &mut dcols, false);
                    out.push((*x, kernels::col2im3x3(&dcols, n, ci, h, wd)));
                }
            }
            Op::Relu { x } => {
                // subgradient at 0 is 0
                let xd = self.value(*x).data();
                out.push((*x, dy.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::AvgPool { x } => {
                let s = self.shape(*x);
                out.push((*x, kernels::avgpool2x2_backward(dy, s[0] * s[1], s[2], s[3])));
            }
            Op::Reshape { x } => out.push((*x, dy.to_vec())),
            Op::Add { a, b } => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Scale { x, factor } => out.push((*x, dy.iter().map(|g| g * factor).collect())),
            Op::BatchNorm { x, gamma, beta, xhat, std, batch } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let hw = if s.len() == 4 { s[2] * s[3] } else { 1 };
                let g = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dg[ch] += dy[i] * xhat[i];
                                db[ch] += dy[i];
                            }
                        }
                    }
                    if self.needs(*gamma) {
                        out.push((*gamma, dg));
                    }
                    if self.needs(*beta) {
                        out.push((*beta, db));
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    if *batch {
                        let cnt = (n * hw) as f64;
                        for ch in 0..c {
                            let mut mg = 0.0;
                            let mut mgx = 0.0;
                            for b in 0..n {
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    mg += dy[i] * g[ch];
                                    mgx += dy[i] * g[ch] * xhat[i];
                                }
                            }
                            mg /= cnt;
                            mgx /= cnt;
                            for b in 0..n {
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    dx[i] = (dy[i] * g[ch] - mg - xhat[i] * mgx) / std[ch];
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let k = g[ch] / std[ch];
                                for i in base..base + hw {
                                    dx[i] = dy[i] * k;
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let c = self.shape(*logits)[1];
                let n = labels.len();
                let k = dy[0] / n.max(1) as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= k);
                out.push((*logits, d));
            }
            Op::L2Normalize { x, norms } => {
                let s = self.shape(*x);
                let f = s[1];
                let y = node.value.data();
                let mut dx = vec![0.0; dy.len()];
                for (i, &nr) in norms.iter().enumerate() {
                    if nr <= ZERO_ROW_NORM {
                        continue;
                    }
                    let yr = &y[i * f..(i + 1) * f];
                    let gr = &dy[i * f..(i + 1) * f];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..f {
                        dx[i * f + j] = (gr[j] - yr[j] * dot) / nr;
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum { x } => out.push((*x, vec![dy[0]; self.value(*x).len()])),
            Op::SumSquares { x } => {
                out.push((*x, self.value(*x).data().iter().map(|v| 2.0 * v * dy[0]).collect()));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let gs = op.backward(&vals, dy, &needs);
                for ((v, g), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(g), true) = (g, need) {
                        debug_assert_eq!(g.len(), self.value(*v).len());
                        out.push((*v, g));
                    }
                }
            }
        }
        out
    }
}

/// Rows with L2 norm at or below this are treated as degenerate zero rows.
pub const ZERO_ROW_NORM: f64 = 1e-12;
