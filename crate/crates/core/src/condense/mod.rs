//! Client-side knowledge condensation: class-wise feature matching of a small
//! synthetic set against importance-sampled real batches.

mod knowledge;
mod mmd;

pub use knowledge::{knowledge_counts, KnowledgeDataset, ARCHIVE_HEADER};
pub use mmd::{median_pairwise_distance, mmd_kernel, mmd_linear, mmd_linear_value, mmd_value, KernelSpec};

use crate::cli_io::Dataset;
use crate::model::{ModelSnapshot, NormMode};
use crate::numerics::{Graph, OptimizerState, Tensor, Var};
use crate::rng::Rng;
use crate::select::ClassSampler;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CondenseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Real items drawn per class and step, capped at the class size.
    pub batch_size: usize,
    pub kernel: KernelSpec,
    /// Replace the gaussian bandwidth each round by the median pairwise
    /// distance of the first real batches.
    pub median_bandwidth: bool,
    pub constraints: bool,
    /// Cap on the per-pixel RMS of each class's gradient before the step.
    pub grad_clip: Option<f64>,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            momentum: 0.5,
            batch_size: 32,
            kernel: KernelSpec::Gaussian { bandwidth: 1.0 },
            median_bandwidth: true,
            constraints: true,
            grad_clip: None,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("condense.epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("condense.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("condense.momentum must lie in [0, 1)".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("condense.grad_clip must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("condense.batch_size must be >= 1".into()));
        }
        self.kernel.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct CondenseOutcome {
    pub knowledge: KnowledgeDataset,
    /// Summed class loss before each optimizer step.
    pub losses: Vec<f64>,
    pub kernel: KernelSpec,
}

/// Initial knowledge for a client holding `class_counts`.
pub fn init_knowledge(data: &Dataset, percent: f64, round: u32, rng: &mut Rng) -> KnowledgeDataset {
    let counts = knowledge_counts(&data.class_counts(), percent);
    KnowledgeDataset::from_noise(data.image, &counts, round, rng)
}

fn loss_term(g: &mut Graph, real: Var, syn: Var, kernel: KernelSpec) -> Result<Var> {
    Ok(match kernel {
        KernelSpec::Linear => mmd_linear(g, real, syn)?,
        k => mmd_kernel(g, real, syn, k)?,
    })
}

/// One class's real features and (when constraints apply) the statistics to
/// pin the synthetic pass to.
struct RealSide {
    feats: Tensor,
    stats: Option<crate::model::LayerStats>,
}

fn encode_real(snapshot: &ModelSnapshot, x: &Tensor, constraints: bool) -> Result<RealSide> {
    if x.shape()[0] < 2 {
        let (feats, _) = snapshot.encode(x, NormMode::RunningStats)?;
        return Ok(RealSide { feats, stats: constraints.then(|| snapshot.running_stats()) });
    }
    let mode = if constraints { NormMode::RecordStats } else { NormMode::StandardBatch };
    let (feats, stats) = snapshot.encode(x, mode)?;
    Ok(RealSide { feats, stats })
}

/// Optimizes `init` against `data` for `cfg.epochs` steps of the summed
/// class-wise loss. The snapshot and data are read-only.
pub fn condense_round(
    data: &Dataset,
    snapshot: &ModelSnapshot,
    sampler: &dyn ClassSampler,
    cfg: &CondenseConfig,
    init: KnowledgeDataset,
    rng: &mut Rng,
) -> Result<CondenseOutcome> {
    cfg.validate()?;
    if init.classes() != data.classes || init.image != data.image {
        return Err(Error::Protocol("knowledge does not match the local dataset".into()));
    }
    let class_counts = data.class_counts();
    let mut knowledge = init;
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum);
    let mut kernel = cfg.kernel;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let active: Vec<usize> =
        (0..data.classes).filter(|&c| class_counts[c] > 0 && knowledge.class(c).shape()[0] > 0).collect();

    for epoch in 0..cfg.epochs {
        let reals = active
            .iter()
            .map(|&c| {
                let idx = sampler.sample(c, cfg.batch_size.min(class_counts[c]), rng);
                encode_real(snapshot, &data.gather(&idx), cfg.constraints)
            })
            .collect::<Result<Vec<_>>>()?;
        if epoch == 0 && cfg.median_bandwidth {
            if let KernelSpec::Gaussian { bandwidth } = cfg.kernel {
                let mut d = Vec::new();
                for r in &reals {
                    d.extend(median_pairwise_distance(&r.feats));
                }
                let m = crate::select::median(&d);
                kernel = KernelSpec::Gaussian { bandwidth: if m > 1e-8 { m } else { bandwidth } };
            }
        }

        let mut g = Graph::new(snapshot.precision);
        let bound = snapshot.bind(&mut g, false)?;
        let mut leaves = Vec::with_capacity(active.len());
        let mut total: Option<Var> = None;
        for (&c, real) in active.iter().zip(&reals) {
            let mut s = knowledge.class(c).clone();
            s.requires_grad = true;
            let sv = g.leaf(&s)?;
            leaves.push(sv);
            let mode = match (&real.stats, cfg.constraints) {
                (Some(st), true) => NormMode::ApplyStats(st),
                _ if s.shape()[0] >= 2 => NormMode::StandardBatch,
                _ => NormMode::RunningStats,
            };
            let enc = snapshot.encode_graph(&mut g, &bound, sv, mode)?;
            let rv = g.constant(real.feats.clone())?;
            let term = loss_term(&mut g, rv, enc.features, kernel)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let Some(total) = total else {
            losses.push(0.0);
            continue;
        };
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(crate::numerics::NumericsError::NonFinite { op: "condense loss" }.into());
        }
        losses.push(loss);
        g.backward(total)?;
        for (&c, &sv) in active.iter().zip(&leaves) {
            let mut grad = g.grad(sv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; knowledge.class(c).len()]);
            if let Some(cap) = cfg.grad_clip {
                let rms = (grad.iter().map(|v| v * v).sum::<f64>() / grad.len().max(1) as f64).sqrt();
                if rms > cap {
                    grad.iter_mut().for_each(|v| *v *= cap / rms);
                }
            }
            let slice = &mut knowledge.slices_mut()[c];
            slice.requires_grad = true;
            slice.grad = Some(grad);
        }
        let slices = knowledge.slices_mut();
        let mut params: Vec<&mut Tensor> =
            slices.iter_mut().enumerate().filter(|(c, _)| active.contains(c)).map(|(_, t)| t).collect();
        opt.step(&mut params);
        for t in params {
            t.requires_grad = false;
            t.grad = None;
            snapshot.precision.round_slice(t.data_mut());
            if !t.is_finite() {
                return Err(crate::numerics::NumericsError::NonFinite { op: "condense step" }.into());
            }
        }
    }
    Ok(CondenseOutcome { knowledge, losses, kernel })
}
