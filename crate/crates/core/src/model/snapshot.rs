use rand::Rng as _;

use super::{ChannelStats, EncoderConfig, ImageShape, LayerStats};
use crate::numerics::{codec, BatchMoments, Precision, Tensor, BN_EPS};
use crate::rng::Rng;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FVMS";
const VERSION: u16 = 1;

/// Position of a parameter in the flat parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight(usize),
    ConvBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    HeadWeight,
    HeadBias,
    ProjW1,
    ProjB1,
    ProjW2,
    ProjB2,
}

impl ParamKind {
    pub fn index(self, depth: usize) -> usize {
        match self {
            ParamKind::ConvWeight(l) => 4 * l,
            ParamKind::ConvBias(l) => 4 * l + 1,
            ParamKind::BnGamma(l) => 4 * l + 2,
            ParamKind::BnBeta(l) => 4 * l + 3,
            ParamKind::HeadWeight => 4 * depth,
            ParamKind::HeadBias => 4 * depth + 1,
            ParamKind::ProjW1 => 4 * depth + 2,
            ParamKind::ProjB1 => 4 * depth + 3,
            ParamKind::ProjW2 => 4 * depth + 4,
            ParamKind::ProjB2 => 4 * depth + 5,
        }
    }

    fn all(depth: usize) -> Vec<ParamKind> {
        let mut v = Vec::new();
        for l in 0..depth {
            v.extend([ParamKind::ConvWeight(l), ParamKind::ConvBias(l), ParamKind::BnGamma(l), ParamKind::BnBeta(l)]);
        }
        v.extend([
            ParamKind::HeadWeight,
            ParamKind::HeadBias,
            ParamKind::ProjW1,
            ParamKind::ProjB1,
            ParamKind::ProjW2,
            ParamKind::ProjB2,
        ]);
        v
    }

    pub fn name(self) -> String {
        match self {
            ParamKind::ConvWeight(l) => format!("block{l}.conv.weight"),
            ParamKind::ConvBias(l) => format!("block{l}.conv.bias"),
            ParamKind::BnGamma(l) => format!("block{l}.norm.gamma"),
            ParamKind::BnBeta(l) => format!("block{l}.norm.beta"),
            ParamKind::HeadWeight => "head.weight".into(),
            ParamKind::HeadBias => "head.bias".into(),
            ParamKind::ProjW1 => "projector.fc1.weight".into(),
            ParamKind::ProjB1 => "projector.fc1.bias".into(),
            ParamKind::ProjW2 => "projector.fc2.weight".into(),
            ParamKind::ProjB2 => "projector.fc2.bias".into(),
        }
    }

    fn shape(self, cfg: &EncoderConfig) -> Vec<usize> {
        let f = cfg.feature_dim();
        match self {
            ParamKind::ConvWeight(l) => {
                let ci = if l == 0 { cfg.image.channels } else { cfg.width };
                vec![cfg.width, ci, 3, 3]
            }
            ParamKind::ConvBias(_) | ParamKind::BnGamma(_) | ParamKind::BnBeta(_) => vec![cfg.width],
            ParamKind::HeadWeight => vec![f, cfg.classes],
            ParamKind::HeadBias => vec![cfg.classes],
            ParamKind::ProjW1 | ParamKind::ProjW2 => vec![f, f],
            ParamKind::ProjB1 | ParamKind::ProjB2 => vec![f],
        }
    }

    fn fan_in(self, cfg: &EncoderConfig) -> usize {
        match self {
            ParamKind::ConvWeight(l) | ParamKind::ConvBias(l) | ParamKind::BnGamma(l) | ParamKind::BnBeta(l) => {
                9 * if l == 0 { cfg.image.channels } else { cfg.width }
            }
            _ => cfg.feature_dim(),
        }
    }
}

/// Exponentially averaged normalization moments of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Versioned global model parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: EncoderConfig,
    pub round: u32,
    pub precision: Precision,
    params: Vec<Tensor>,
    running: Vec<RunningMoments>,
}

impl ModelSnapshot {
    /// Fresh model: uniform `+-1/sqrt(fan_in)` weights and biases, unit
    /// norm scale, zero norm shift, running moments `(0, 1)`.
    pub fn init(config: EncoderConfig, precision: Precision, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = ParamKind::all(config.depth)
            .into_iter()
            .map(|k| {
                let shape = k.shape(&config);
                let t = match k {
                    ParamKind::BnGamma(_) => Tensor::full(&shape, 1.0),
                    ParamKind::BnBeta(_) => Tensor::zeros(&shape),
                    _ => {
                        let bound = 1.0 / (k.fan_in(&config) as f64).sqrt();
                        Tensor::from_fn(&shape, |_| precision.round(rng.random_range(-bound..bound)))
                    }
                };
                t.with_grad()
            })
            .collect();
        let running = (0..config.depth)
            .map(|_| RunningMoments { mean: vec![0.0; config.width], var: vec![1.0; config.width] })
            .collect();
        Ok(Self { config, round: 0, precision, params, running })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, kind: ParamKind) -> &Tensor {
        &self.params[kind.index(self.config.depth)]
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> &mut Tensor {
        let i = kind.index(self.config.depth);
        &mut self.params[i]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn running(&self) -> &[RunningMoments] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningMoments] {
        &mut self.running
    }

    /// Running moments expressed as mean / std statistics.
    pub fn running_stats(&self) -> LayerStats {
        LayerStats {
            layers: self
                .running
                .iter()
                .map(|r| ChannelStats {
                    mean: r.mean.clone(),
                    std: r.var.iter().map(|v| (v.max(0.0) + BN_EPS).sqrt()).collect(),
                })
                .collect(),
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, moments: &[BatchMoments], momentum: f64) {
        assert_eq!(moments.len(), self.running.len());
        let p = self.precision;
        for (r, m) in self.running.iter_mut().zip(moments) {
            for (a, b) in r.mean.iter_mut().zip(&m.mean) {
                *a = p.round(momentum * *a + (1.0 - momentum) * b);
            }
            for (a, b) in r.var.iter_mut().zip(&m.var) {
                *a = p.round(momentum * *a + (1.0 - momentum) * b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = ParamKind::all(self.config.depth)
            .into_iter()
            .zip(&self.params)
            .map(|(k, t)| (k.name(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape")))
            .collect();
        for (l, r) in self.running.iter().enumerate() {
            v.push((format!("block{l}.norm.running_mean"), Tensor::new(vec![r.mean.len()], r.mean.clone()).unwrap()));
            v.push((format!("block{l}.norm.running_var"), Tensor::new(vec![r.var.len()], r.var.clone()).unwrap()));
        }
        v
    }

    /// Serializes as: magic `FVMS`, version `u16`, round `u32`, config
    /// (depth, width, height, image width, channels, classes as `u16`), entry
    /// count `u32`, the manifest (name length `u16`, name bytes, rank `u8`,
    /// dims `u32`, data offset `u64` per entry), then the concatenated tensor
    /// records in the parameter wire format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        let c = &self.config;
        for v in [c.depth, c.width, c.image.height, c.image.width, c.image.channels, c.classes] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += codec::tensor_wire_len(t.shape()) as u64;
        }
        for (_, t) in &entries {
            codec::write_tensor(&mut out, t);
        }
        out
    }

    pub fn wire_len(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn from_bytes(buf: &[u8], precision: Precision) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("model snapshot: {m}"));
        if buf.len() < 22 || &buf[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u16_at = |p: usize| -> Result<u16> {
            buf.get(p..p + 2).map(|b| u16::from_le_bytes([b[0], b[1]])).ok_or_else(|| bad("truncated"))
        };
        let u32_at = |p: usize| -> Result<u32> {
            buf.get(p..p + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| bad("truncated"))
        };
        if u16_at(4)? != VERSION {
            return Err(bad("unsupported version"));
        }
        let round = u32_at(6)?;
        let f: Vec<usize> = (0..6).map(|i| u16_at(10 + 2 * i).map(|v| v as usize)).collect::<Result<_>>()?;
        let config = EncoderConfig {
            depth: f[0],
            width: f[1],
            image: ImageShape { height: f[2], width: f[3], channels: f[4] },
            classes: f[5],
        };
        config.validate().map_err(|e| bad(&e.to_string()))?;
        let count = u32_at(22)? as usize;
        let mut pos = 26;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = u16_at(pos)? as usize;
            pos += 2;
            let name = buf.get(pos..pos + nl).ok_or_else(|| bad("truncated"))?;
            names.push(String::from_utf8_lossy(name).into_owned());
            pos += nl;
            let rank = *buf.get(pos).ok_or_else(|| bad("truncated"))? as usize;
            pos += 1 + 4 * rank + 8;
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(codec::read_tensor(buf, &mut pos).map_err(|e| bad(&e.to_string()))?);
        }
        let kinds = ParamKind::all(config.depth);
        if count != kinds.len() + 2 * config.depth {
            return Err(bad("unexpected entry count"));
        }
        let mut params = Vec::with_capacity(kinds.len());
        for (i, k) in kinds.iter().enumerate() {
            if names[i] != k.name() || tensors[i].shape() != k.shape(&config).as_slice() {
                return Err(bad(&format!("entry {} does not match {}", names[i], k.name())));
            }
            let mut t = tensors[i].clone();
            precision.round_slice(t.data_mut());
            params.push(t.with_grad());
        }
        let mut running = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let m = &tensors[kinds.len() + 2 * l];
            let v = &tensors[kinds.len() + 2 * l + 1];
            if m.len() != config.width || v.len() != config.width {
                return Err(bad("running statistics shape"));
            }
            running.push(RunningMoments { mean: m.data().to_vec(), var: v.data().to_vec() });
        }
        Ok(Self { config, round, precision, params, running })
    }

    /// Parameter-wise weighted average of snapshots with identical configs.
    pub fn weighted_average(models: &[&ModelSnapshot], weights: &[f64]) -> Result<ModelSnapshot> {
        if models.is_empty() || models.len() != weights.len() {
            return Err(Error::Protocol("weighted_average needs one weight per model".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Protocol("weights must sum to a positive value".into()));
        }
        let mut out = models[0].clone();
        out.zero_grads();
        let p = out.precision;
        for (pi, t) in out.params.iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                let s: f64 = models.iter().zip(weights).map(|(m, w)| w * m.params[pi].data()[j]).sum();
                *v = p.round(s / total);
            }
        }
        for (li, r) in out.running.iter_mut().enumerate() {
            for j in 0..r.mean.len() {
                r.mean[j] = p.round(models.iter().zip(weights).map(|(m, w)| w * m.running[li].mean[j]).sum::<f64>() / total);
                r.var[j] = p.round(models.iter().zip(weights).map(|(m, w)| w * m.running[li].var[j]).sum::<f64>() / total);
            }
        }
        Ok(out)
    }
}
