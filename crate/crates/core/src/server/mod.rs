//! Server-side global model update over the accumulated knowledge archive:
//! cross-entropy plus a prototype contrastive term against hard negatives.

use rand::seq::SliceRandom;

use crate::condense::KnowledgeDataset;
use crate::model::{Bound, ModelSnapshot, NormMode};
use crate::numerics::kernels::log_sum_exp;
use crate::numerics::{BatchMoments, CustomOp, Graph, NumericsError, OptimizerState, Tensor, Var};
use crate::proto::{FeaturePrototypeSet, HardNegativeSet};
use crate::rng::Rng;
use crate::{Error, Result};

/// Momentum of the running normalization statistics.
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub contrastive_weight: f64,
    /// Keep the positive pair in the denominator of the contrastive term.
    pub include_positive: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.01, momentum: 0.9, batch_size: 32, tau: 0.5, contrastive_weight: 1.0, include_positive: true }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("server.tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("server.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("server.momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("server.batch_size must be >= 1".into()));
        }
        if !(self.contrastive_weight >= 0.0) {
            return Err(Error::Config("server.contrastive_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Prototype rows and the hard-negative lists the contrastive term reads.
#[derive(Debug, Clone)]
pub struct ContrastTargets {
    /// `classes x f`; rows of absent classes are zero.
    pub protos: Tensor,
    pub present: Vec<bool>,
    pub hn: Vec<Vec<usize>>,
}

impl ContrastTargets {
    /// L2-normalized feature prototypes paired with the hard-negative lists.
    pub fn new(fp: &FeaturePrototypeSet, hn: &HardNegativeSet, dim: usize) -> Self {
        let classes = fp.protos.len();
        let mut data = vec![0.0; classes * dim];
        let mut present = vec![false; classes];
        for c in 0..classes {
            if let Some(p) = fp.get(c) {
                let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > crate::numerics::ZERO_ROW_NORM {
                    data[c * dim..(c + 1) * dim].iter_mut().zip(p).for_each(|(d, v)| *d = v / n);
                    present[c] = true;
                }
            }
        }
        let hn = (0..classes).map(|c| hn.get(c).map(|l| l.to_vec()).unwrap_or_default()).collect();
        Self { protos: Tensor::new(vec![classes, dim], data).expect("prototype shape"), present, hn }
    }
}

struct Contrastive {
    labels: Vec<usize>,
    present: Vec<bool>,
    hn: Vec<Vec<usize>>,
    tau: f64,
    include_positive: bool,
}

impl Contrastive {
    /// Positive and negative class ids for row `i`, or `None` when the row is
    /// skipped.
    fn terms(&self, z: &[f64], i: usize) -> Option<(usize, Vec<usize>)> {
        let c = *self.labels.get(i)?;
        if !self.present.get(c).copied().unwrap_or(false) || z.iter().all(|v| *v == 0.0) {
            return None;
        }
        let negs: Vec<usize> = self.hn[c].iter().copied().filter(|&j| self.present[j] && j != c).collect();
        (!negs.is_empty()).then_some((c, negs))
    }

    fn sims(&self, z: &[f64], protos: &Tensor, ids: &[usize]) -> Vec<f64> {
        ids.iter().map(|&j| z.iter().zip(protos.row(j)).map(|(a, b)| a * b).sum::<f64>() / self.tau).collect()
    }

    /// Denominator class ids for a row.
    fn denom(&self, c: usize, negs: &[usize]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(negs.len() + 1);
        if self.include_positive {
            ids.push(c);
        }
        ids.extend_from_slice(negs);
        ids
    }

    fn value(&self, z: &Tensor, protos: &Tensor) -> (f64, usize) {
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..z.shape()[0] {
            let zi = z.row(i);
            let Some((c, negs)) = self.terms(zi, i) else { continue };
            let pos = self.sims(zi, protos, &[c])[0];
            let den = self.sims(zi, protos, &self.denom(c, &negs));
            total += log_sum_exp(&den) - pos;
            n += 1;
        }
        (if n > 0 { total / n as f64 } else { 0.0 }, n)
    }
}

impl CustomOp for Contrastive {
    fn name(&self) -> &'static str {
        "relational_contrastive"
    }

    fn backward(&self, inputs: &[&Tensor], out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (z, protos) = (inputs[0], inputs[1]);
        let f = z.shape()[1];
        let (_, n) = self.value(z, protos);
        let mut dz = vec![0.0; z.len()];
        if n > 0 {
            let scale = out_grad[0] / n as f64 / self.tau;
            for i in 0..z.shape()[0] {
                let zi = z.row(i);
                let Some((c, negs)) = self.terms(zi, i) else { continue };
                let ids = self.denom(c, &negs);
                let s = self.sims(zi, protos, &ids);
                let lse = log_sum_exp(&s);
                let row = &mut dz[i * f..(i + 1) * f];
                for (k, &j) in ids.iter().enumerate() {
                    let w = (s[k] - lse).exp();
                    row.iter_mut().zip(protos.row(j)).for_each(|(d, p)| *d += scale * w * p);
                }
                row.iter_mut().zip(protos.row(c)).for_each(|(d, p)| *d -= scale * p);
            }
        }
        // prototypes are targets only
        vec![needs[0].then_some(dz), needs[1].then(|| vec![0.0; protos.len()])]
    }
}

/// Mean over eligible rows of `-log(e^{s_pos} / sum_denominator e^{s})` with
/// `s_j = z_i . f_j / tau`. Rows whose class has no prototype, whose hard
/// negatives all lack prototypes, or that are exactly zero are skipped.
pub fn relational_contrastive_loss(
    g: &mut Graph,
    z: Var,
    protos: Var,
    labels: &[usize],
    targets: &ContrastTargets,
    tau: f64,
    include_positive: bool,
) -> std::result::Result<Var, NumericsError> {
    if !(tau > 0.0) {
        return Err(NumericsError::Precondition("temperature must be positive".into()));
    }
    let (zs, ps) = (g.shape(z).to_vec(), g.shape(protos).to_vec());
    if zs.len() != 2 || ps.len() != 2 || zs[1] != ps[1] || zs[0] != labels.len() {
        return Err(NumericsError::Shape { op: "relational_contrastive", detail: format!("{zs:?} vs {ps:?}") });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= ps[0]) {
        return Err(NumericsError::LabelOutOfRange { label: l, classes: ps[0] });
    }
    let op = Contrastive {
        labels: labels.to_vec(),
        present: targets.present.clone(),
        hn: targets.hn.clone(),
        tau,
        include_positive,
    };
    let (v, _) = op.value(g.value(z), g.value(protos));
    g.custom(Box::new(op), &[z, protos], Tensor::scalar(v))
}

/// Nodes of one update step.
pub struct UpdateLoss {
    pub total: Var,
    pub ce: Var,
    pub rc: Option<Var>,
    pub moments: Vec<BatchMoments>,
}

/// Cross-entropy on `x` plus the weighted contrastive term when targets are
/// given. Batches of one row use the running statistics.
pub fn update_loss(
    g: &mut Graph,
    snapshot: &ModelSnapshot,
    bound: &Bound,
    x: Var,
    labels: &[usize],
    targets: Option<&ContrastTargets>,
    cfg: &ServerConfig,
) -> Result<UpdateLoss> {
    let mode = if g.shape(x)[0] >= 2 { NormMode::StandardBatch } else { NormMode::RunningStats };
    let enc = snapshot.encode_graph(g, bound, x, mode)?;
    let logits = snapshot.logits_graph(g, bound, enc.features)?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let (total, rc) = match targets {
        Some(t) if cfg.contrastive_weight > 0.0 => {
            let z = snapshot.project_graph(g, bound, enc.features)?;
            let p = g.constant(t.protos.clone())?;
            let rc = relational_contrastive_loss(g, z, p, labels, t, cfg.tau, cfg.include_positive)?;
            let w = g.scale(rc, cfg.contrastive_weight)?;
            (g.add(ce, w)?, Some(rc))
        }
        _ => (ce, None),
    };
    Ok(UpdateLoss { total, ce, rc, moments: enc.moments })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub ce: f64,
    pub rc: f64,
    pub total: f64,
}

pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("epoch,l_ce,l_rc,l_update\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.ce, r.rc, r.total));
    }
    s
}

/// Shuffled mini-batches; a trailing batch of one row joins its predecessor.
fn batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Trains a copy of `snapshot` on the archive for `cfg.epochs` epochs and
/// tags it with `round`.
pub fn update_global(
    snapshot: &ModelSnapshot,
    archive: &KnowledgeDataset,
    targets: Option<&ContrastTargets>,
    cfg: &ServerConfig,
    round: u32,
    rng: &mut Rng,
) -> Result<(ModelSnapshot, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if archive.is_empty() {
        return Err(Error::Protocol("server update needs a nonempty archive".into()));
    }
    let (x_all, labels_all) = archive.flatten();
    let per = archive.image.pixels();
    let mut model = snapshot.clone();
    model.round = round;
    model.zero_grads();
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut ce_sum, mut rc_sum, mut tot_sum, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for batch in batches(labels_all.len(), cfg.batch_size, rng) {
            let mut data = Vec::with_capacity(batch.len() * per);
            for &i in &batch {
                data.extend_from_slice(&x_all.data()[i * per..(i + 1) * per]);
            }
            let mut shape = x_all.shape().to_vec();
            shape[0] = batch.len();
            let labels: Vec<usize> = batch.iter().map(|&i| labels_all[i]).collect();

            let mut g = Graph::new(model.precision);
            let bound = model.bind(&mut g, true)?;
            let x = g.constant(Tensor::new(shape, data)?)?;
            let loss = update_loss(&mut g, &model, &bound, x, &labels, targets, cfg)?;
            g.backward(loss.total)?;
            let w = batch.len() as f64;
            ce_sum += w * g.value(loss.ce).item();
            rc_sum += w * loss.rc.map_or(0.0, |v| g.value(v).item());
            tot_sum += w * g.value(loss.total).item();
            weight += w;
            for (p, v) in model.params_mut().iter_mut().zip(&bound.vars) {
                p.requires_grad = true;
                p.grad = Some(g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]));
            }
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
            opt.step(&mut params);
            let prec = model.precision;
            for p in model.params_mut() {
                prec.round_slice(p.data_mut());
                if !p.is_finite() {
                    return Err(NumericsError::NonFinite { op: "server step" }.into());
                }
            }
            if !loss.moments.is_empty() {
                model.update_running(&loss.moments, RUNNING_MOMENTUM);
            }
        }
        log.push(TrainLogRow { epoch, ce: ce_sum / weight, rc: rc_sum / weight, total: tot_sum / weight });
    }
    model.zero_grads();
    Ok((model, log))
}
