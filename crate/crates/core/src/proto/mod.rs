//! Logit prototypes, their count-weighted aggregation, hard-negative class
//! sets and feature prototypes over the knowledge archive.
//!
//! Logit prototype upload layout (little-endian): round `u32`, client `u16`,
//! class count `u16`, entry count `u16`, then per entry class `u16`, sample
//! count `u32` and the prototype as `f32` values.

use crate::cli_io::Dataset;
use crate::condense::KnowledgeDataset;
use crate::model::{ModelSnapshot, NormMode};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogitPrototypeSet {
    pub round: u32,
    pub client: u16,
    /// Mean raw logits per class; `None` when the class has no samples.
    pub protos: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

pub const GLOBAL_CLIENT: u16 = u16::MAX;

impl LogitPrototypeSet {
    pub fn classes(&self) -> usize {
        self.protos.len()
    }

    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.protos[c].as_deref()
    }

    pub fn wire_len(&self) -> usize {
        let c = self.classes();
        10 + self.protos.iter().flatten().count() * (6 + 4 * c)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&(self.classes() as u16).to_le_bytes());
        out.extend_from_slice(&(self.protos.iter().flatten().count() as u16).to_le_bytes());
        for (c, p) in self.protos.iter().enumerate() {
            let Some(p) = p else { continue };
            out.extend_from_slice(&(c as u16).to_le_bytes());
            out.extend_from_slice(&(self.counts[c] as u32).to_le_bytes());
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Protocol(format!("logit prototypes: {m}"));
        if buf.len() < 10 {
            return Err(bad("truncated header"));
        }
        let u16_at = |p: usize| u16::from_le_bytes([buf[p], buf[p + 1]]);
        let u32_at = |p: usize| u32::from_le_bytes(buf[p..p + 4].try_into().unwrap());
        let (round, client, classes, entries) = (u32_at(0), u16_at(4), u16_at(6) as usize, u16_at(8) as usize);
        if buf.len() != 10 + entries * (6 + 4 * classes) {
            return Err(bad("length does not match header"));
        }
        let mut protos = vec![None; classes];
        let mut counts = vec![0; classes];
        let mut pos = 10;
        for _ in 0..entries {
            let c = u16_at(pos) as usize;
            if c >= classes || protos[c].is_some() {
                return Err(bad("invalid class entry"));
            }
            counts[c] = u32_at(pos + 2) as usize;
            pos += 6;
            protos[c] = Some(
                buf[pos..pos + 4 * classes]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
            );
            pos += 4 * classes;
        }
        Ok(Self { round, client, protos, counts })
    }
}

/// Per-class means of `rows` grouped by `labels`.
fn class_means(rows: &Tensor, labels: &[usize], classes: usize) -> (Vec<Option<Vec<f64>>>, Vec<usize>) {
    let f = rows.shape()[1];
    let mut sums = vec![vec![0.0; f]; classes];
    let mut counts = vec![0; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        sums[y].iter_mut().zip(rows.row(i)).for_each(|(s, v)| *s += v);
    }
    let protos = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    (protos, counts)
}

/// Mean raw logits of each class present in `data` under `snapshot`.
pub fn client_logit_prototypes(snapshot: &ModelSnapshot, data: &Dataset, client: u16, round: u32) -> Result<LogitPrototypeSet> {
    let logits = snapshot.classify(&data.to_tensor())?;
    let (protos, counts) = class_means(&logits, &data.labels(), data.classes);
    Ok(LogitPrototypeSet { round, client, protos, counts })
}

/// `p_c = sum_k n_ck p_ck / sum_k n_ck` over the clients holding class `c`.
pub fn aggregate_prototypes(sets: &[LogitPrototypeSet]) -> Result<LogitPrototypeSet> {
    let first = sets.first().ok_or_else(|| Error::Protocol("no prototype sets to aggregate".into()))?;
    let classes = first.classes();
    if sets.iter().any(|s| s.classes() != classes) {
        return Err(Error::Protocol("prototype sets disagree on class count".into()));
    }
    let mut protos = vec![None; classes];
    let mut counts = vec![0; classes];
    for c in 0..classes {
        let total: usize = sets.iter().filter(|s| s.protos[c].is_some()).map(|s| s.counts[c]).sum();
        if total == 0 {
            continue;
        }
        let mut acc = vec![0.0; classes];
        for s in sets {
            if let Some(p) = &s.protos[c] {
                let w = s.counts[c] as f64;
                acc.iter_mut().zip(p).for_each(|(a, v)| *a += w * v);
            }
        }
        acc.iter_mut().for_each(|a| *a /= total as f64);
        protos[c] = Some(acc);
        counts[c] = total;
    }
    Ok(LogitPrototypeSet { round: first.round, client: GLOBAL_CLIENT, protos, counts })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegativeSet {
    /// Classes ordered by descending prototype entry; `None` for classes
    /// without an aggregated prototype.
    pub lists: Vec<Option<Vec<usize>>>,
}

impl HardNegativeSet {
    pub fn get(&self, c: usize) -> Option<&[usize]> {
        self.lists.get(c).and_then(|l| l.as_deref())
    }
}

/// Default number of hard negatives for `classes` classes.
pub fn default_k(classes: usize) -> usize {
    5.min(classes.saturating_sub(1)).max(1)
}

/// The `k` largest entries of each aggregated prototype, excluding the class
/// itself and classes without a prototype; ties go to the lower index.
pub fn hard_negatives(global: &LogitPrototypeSet, k: usize) -> Result<HardNegativeSet> {
    if k == 0 {
        return Err(Error::Config("hard negative count must be >= 1".into()));
    }
    let lists = (0..global.classes())
        .map(|c| {
            let p = global.protos[c].as_ref()?;
            let mut cand: Vec<usize> =
                (0..global.classes()).filter(|&j| j != c && global.protos[j].is_some()).collect();
            cand.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            cand.truncate(k);
            Some(cand)
        })
        .collect();
    Ok(HardNegativeSet { lists })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePrototypeSet {
    /// Mean encoder feature per class; `None` for classes absent from the
    /// archive.
    pub protos: Vec<Option<Vec<f64>>>,
    /// Round tag of the newest archived knowledge used.
    pub through_round: Option<u32>,
}

impl FeaturePrototypeSet {
    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.protos.get(c).and_then(|p| p.as_deref())
    }
}

/// Rows per encoder pass.
const CHUNK: usize = 128;

/// Mean running-statistics feature of every archived class.
pub fn feature_prototypes(snapshot: &ModelSnapshot, archive: &KnowledgeDataset) -> Result<FeaturePrototypeSet> {
    if archive.is_empty() {
        return Err(Error::Protocol("feature prototypes need a nonempty archive".into()));
    }
    let f = snapshot.config.feature_dim();
    let mut protos = vec![None; archive.classes()];
    for (c, slice) in archive.slices().iter().enumerate() {
        let m = slice.shape()[0];
        if m == 0 {
            continue;
        }
        let per = slice.len() / m;
        let mut acc = vec![0.0; f];
        let mut start = 0;
        while start < m {
            let end = (start + CHUNK).min(m);
            let mut shape = slice.shape().to_vec();
            shape[0] = end - start;
            let x = Tensor::new(shape, slice.data()[start * per..end * per].to_vec())?;
            let (feats, _) = snapshot.encode(&x, NormMode::RunningStats)?;
            for row in feats.data().chunks(f) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            start = end;
        }
        protos[c] = Some(acc.into_iter().map(|v| v / m as f64).collect());
    }
    Ok(FeaturePrototypeSet { protos, through_round: Some(archive.round) })
}
