//! The global model: a conv encoder with switchable normalization sources, a
//! linear classifier head and a two-layer projector.

mod snapshot;

pub use snapshot::{ModelSnapshot, ParamKind};

use crate::numerics::{BatchMoments, BnStats, Graph, Tensor, Var, BN_EPS};
use crate::{Error, Result};

/// Height, width and channel count of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Number of conv -> norm -> relu -> pool blocks.
    pub depth: usize,
    /// Channels per block.
    pub width: usize,
    pub image: ImageShape,
    pub classes: usize,
}

impl EncoderConfig {
    pub fn new(image: ImageShape, classes: usize) -> Self {
        Self { depth: 3, width: 32, image, classes }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.depth;
        if self.depth == 0 || self.width == 0 || self.image.channels == 0 {
            return Err(Error::Config("encoder depth, width and channels must be positive".into()));
        }
        if self.image.height % div != 0 || self.image.width % div != 0 || self.image.height == 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by 2^{}",
                self.image.height, self.image.width, self.depth
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Flattened feature length of the last block.
    pub fn feature_dim(&self) -> usize {
        let div = 1usize << self.depth;
        self.width * (self.image.height / div) * (self.image.width / div)
    }
}

/// Per-channel mean and standard deviation of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// `sqrt(var + eps)`, always positive.
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_moments(m: &BatchMoments) -> Self {
        Self { mean: m.mean.clone(), std: m.var.iter().map(|v| (v + BN_EPS).sqrt()).collect() }
    }
}

/// One [`ChannelStats`] per normalization layer of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layers: Vec<ChannelStats>,
}

impl LayerStats {
    pub fn is_complete_for(&self, cfg: &EncoderConfig) -> bool {
        self.layers.len() == cfg.depth
            && self.layers.iter().all(|l| l.mean.len() == cfg.width && l.std.len() == cfg.width)
            && self.layers.iter().all(|l| l.std.iter().all(|s| *s > 0.0))
    }
}

/// Source of normalization statistics for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// The batch's own statistics.
    StandardBatch,
    /// The batch's own statistics, returned to the caller.
    RecordStats,
    /// Fixed externally recorded statistics; no gradient flows into them.
    ApplyStats(&'a LayerStats),
    /// Exponentially averaged statistics held by the snapshot.
    RunningStats,
}

/// Graph handles for every parameter of a snapshot.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, kind: ParamKind, depth: usize) -> Var {
        self.vars[kind.index(depth)]
    }
}

/// Output of a graph-level encoder pass.
pub struct Encoded {
    pub features: Var,
    /// Present when batch statistics were computed.
    pub stats: Option<LayerStats>,
    pub moments: Vec<BatchMoments>,
}

/// Rows processed per graph during inference.
const INFER_CHUNK: usize = 128;

impl ModelSnapshot {
    /// Inserts all parameters into `g`; they are differentiated when
    /// `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self
            .params()
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, x: Var, mode: NormMode<'_>) -> Result<Encoded> {
        let cfg = &self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != cfg.image.channels || s[2] != cfg.image.height || s[3] != cfg.image.width {
            return Err(Error::Numerics(crate::numerics::NumericsError::Shape {
                op: "encode",
                detail: format!("input {:?} for image {:?}", s, cfg.image),
            }));
        }
        if let NormMode::ApplyStats(st) = mode {
            if !st.is_complete_for(cfg) {
                return Err(Error::Protocol("incomplete layer statistics for encoder".into()));
            }
        }
        let running: Vec<ChannelStats> = match mode {
            NormMode::RunningStats => self.running_stats().layers,
            _ => Vec::new(),
        };
        let mut h = x;
        let mut layers = Vec::new();
        let mut moments = Vec::new();
        for l in 0..cfg.depth {
            let conv = g.conv2d(h, b.get(ParamKind::ConvWeight(l), cfg.depth), b.get(ParamKind::ConvBias(l), cfg.depth))?;
            let gamma = b.get(ParamKind::BnGamma(l), cfg.depth);
            let beta = b.get(ParamKind::BnBeta(l), cfg.depth);
            let stats = match mode {
                NormMode::StandardBatch | NormMode::RecordStats => BnStats::Batch,
                NormMode::ApplyStats(st) => BnStats::Fixed { mean: &st.layers[l].mean, std: &st.layers[l].std },
                NormMode::RunningStats => BnStats::Fixed { mean: &running[l].mean, std: &running[l].std },
            };
            let (normed, m) = g.batchnorm(conv, gamma, beta, stats)?;
            if let Some(m) = m {
                layers.push(ChannelStats::from_moments(&m));
                moments.push(m);
            }
            let act = g.relu(normed)?;
            h = g.avgpool2x2(act)?;
        }
        let features = g.flatten(h)?;
        let stats = if layers.is_empty() { None } else { Some(LayerStats { layers }) };
        Ok(Encoded { features, stats, moments })
    }

    pub fn logits_graph(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let d = self.config.depth;
        let z = g.matmul(features, b.get(ParamKind::HeadWeight, d))?;
        Ok(g.add_bias(z, b.get(ParamKind::HeadBias, d))?)
    }

    /// Projector followed by row L2 normalization; zero rows stay zero.
    pub fn project_graph(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let d = self.config.depth;
        let h = g.matmul(features, b.get(ParamKind::ProjW1, d))?;
        let h = g.add_bias(h, b.get(ParamKind::ProjB1, d))?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b.get(ParamKind::ProjW2, d))?;
        let h = g.add_bias(h, b.get(ParamKind::ProjB2, d))?;
        Ok(g.l2_normalize_rows(h)?)
    }

    /// Encoder features of `x` (`n x ch x h x w`) with the given statistics.
    pub fn encode(&self, x: &Tensor, mode: NormMode<'_>) -> Result<(Tensor, Option<LayerStats>)> {
        let mut g = Graph::new(self.precision);
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let e = self.encode_graph(&mut g, &b, xv, mode)?;
        Ok((g.value(e.features).clone(), e.stats))
    }

    /// Raw logits under running statistics, computed in chunks.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let per = x.len() / n.max(1);
        let c = self.config.classes;
        let mut out = Vec::with_capacity(n * c);
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new(self.precision);
            let b = self.bind(&mut g, false)?;
            let xv = g.constant(chunk)?;
            let e = self.encode_graph(&mut g, &b, xv, NormMode::RunningStats)?;
            let l = self.logits_graph(&mut g, &b, e.features)?;
            out.extend_from_slice(g.value(l).data());
            start = end;
        }
        Ok(Tensor::new(vec![n, c], out)?)
    }

    /// Softmax rows of [`ModelSnapshot::classify`].
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.classify(x)?;
        Ok(softmax_rows(&logits))
    }

    /// Projected, L2-normalized rows plus a flag per row marking degenerate
    /// zero outputs.
    pub fn project(&self, features: &Tensor) -> Result<(Tensor, Vec<bool>)> {
        let mut g = Graph::new(self.precision);
        let b = self.bind(&mut g, false)?;
        let f = g.constant(features.clone())?;
        let z = self.project_graph(&mut g, &b, f)?;
        let out = g.value(z).clone();
        let flags = (0..out.shape()[0]).map(|i| out.row(i).iter().all(|v| *v == 0.0)).collect();
        Ok((out, flags))
    }

    /// Top-1 accuracy under running statistics.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.classify(x)?;
        let c = self.config.classes;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(&logits.data()[i * c..(i + 1) * c]) == y)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        out.extend(crate::numerics::kernels::softmax_row(row));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
