//! Condensed knowledge sets and the `FVKA` archive file.
//!
//! Layout (little-endian): magic `FVKA`, version `u16`, round `u32`, item
//! count `u32`, height `u16`, width `u16`, channels `u8`, class count `u16`,
//! then per item the label `u16` followed by its pixels as `f32`, row-major
//! `H x W x Ch`.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::model::ImageShape;
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FVKA";
const VERSION: u16 = 1;
pub const ARCHIVE_HEADER: usize = 4 + 2 + 4 + 4 + 2 + 2 + 1 + 2;

/// Synthetic images grouped by class; slice `c` is `m_c x ch x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeDataset {
    pub image: ImageShape,
    pub round: u32,
    slices: Vec<Tensor>,
}

/// Total `ceil(p% * n)` split across classes in proportion to `class_counts`
/// by largest remainder, with at least one item per present class.
pub fn knowledge_counts(class_counts: &[usize], percent: f64) -> Vec<usize> {
    let n: usize = class_counts.iter().sum();
    let present = class_counts.iter().filter(|&&c| c > 0).count();
    if n == 0 {
        return vec![0; class_counts.len()];
    }
    let total = ((percent / 100.0 * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let total = total.max(present);
    let quotas: Vec<f64> = class_counts.iter().map(|&c| total as f64 * c as f64 / n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..class_counts.len()).filter(|&c| class_counts[c] > 0).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle().take(left) {
        out[c] += 1;
    }
    // lift empty present classes by taking from the largest slices
    for c in 0..out.len() {
        if class_counts[c] > 0 && out[c] == 0 {
            let donor = (0..out.len()).max_by(|&a, &b| out[a].cmp(&out[b]).then(b.cmp(&a))).unwrap();
            if out[donor] > 1 {
                out[donor] -= 1;
            }
            out[c] = 1;
        }
    }
    out
}

impl KnowledgeDataset {
    pub fn empty(image: ImageShape, classes: usize, round: u32) -> Self {
        let slices = (0..classes).map(|_| Self::slice_from(image, 0, Vec::new())).collect();
        Self { image, round, slices }
    }

    fn slice_from(image: ImageShape, m: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![m, image.channels, image.height, image.width], data).expect("slice shape")
    }

    /// Every pixel standard normal, `counts[c]` items for class `c`.
    pub fn from_noise(image: ImageShape, counts: &[usize], round: u32, rng: &mut Rng) -> Self {
        let per = image.pixels();
        let slices = counts
            .iter()
            .map(|&m| {
                let data: Vec<f64> = (0..m * per).map(|_| StandardNormal.sample(rng)).collect();
                Self::slice_from(image, m, data)
            })
            .collect();
        Self { image, round, slices }
    }

    /// Builds from per-class `m_c x ch x h x w` tensors.
    pub fn from_slices(image: ImageShape, round: u32, slices: Vec<Tensor>) -> Result<Self> {
        for (c, s) in slices.iter().enumerate() {
            let sh = s.shape();
            if sh.len() != 4 || sh[1..] != [image.channels, image.height, image.width] {
                return Err(Error::Data(format!("knowledge slice {c} has shape {sh:?}")));
            }
        }
        Ok(Self { image, round, slices })
    }

    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn classes(&self) -> usize {
        self.slices.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.slices.iter().map(|s| s.shape()[0]).collect()
    }

    pub fn len(&self) -> usize {
        self.counts().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, c: usize) -> &Tensor {
        &self.slices[c]
    }

    pub fn slices(&self) -> &[Tensor] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [Tensor] {
        &mut self.slices
    }

    /// `(label, pixels in ch x h x w order)` for every item, class by class.
    pub fn items(&self) -> impl Iterator<Item = (usize, &[f64])> {
        let per = self.image.pixels();
        self.slices.iter().enumerate().flat_map(move |(c, s)| s.data().chunks(per).map(move |p| (c, p)))
    }

    /// Appends the items of `other` (same image shape and class count).
    pub fn extend(&mut self, other: &KnowledgeDataset) -> Result<()> {
        if other.image != self.image || other.classes() != self.classes() {
            return Err(Error::Protocol("knowledge shape mismatch".into()));
        }
        for (mine, theirs) in self.slices.iter_mut().zip(&other.slices) {
            if theirs.shape()[0] == 0 {
                continue;
            }
            let mut data = mine.data().to_vec();
            data.extend_from_slice(theirs.data());
            *mine = Self::slice_from(self.image, mine.shape()[0] + theirs.shape()[0], data);
        }
        Ok(())
    }

    /// All items as one `n x ch x h x w` tensor plus labels.
    pub fn flatten(&self) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(self.len() * self.image.pixels());
        let mut labels = Vec::with_capacity(self.len());
        for (c, p) in self.items() {
            data.extend_from_slice(p);
            labels.push(c);
        }
        let t = Self::slice_from(self.image, labels.len(), data);
        (t, labels)
    }

    pub fn archive_len(&self) -> usize {
        ARCHIVE_HEADER + self.len() * (2 + 4 * self.image.pixels())
    }

    pub fn to_archive_bytes(&self) -> Vec<u8> {
        let ImageShape { height: h, width: w, channels: ch } = self.image;
        let mut out = Vec::with_capacity(self.archive_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(h as u16).to_le_bytes());
        out.extend_from_slice(&(w as u16).to_le_bytes());
        out.push(ch as u8);
        out.extend_from_slice(&(self.classes() as u16).to_le_bytes());
        for (c, p) in self.items() {
            out.extend_from_slice(&(c as u16).to_le_bytes());
            for y in 0..h {
                for x in 0..w {
                    for k in 0..ch {
                        out.extend_from_slice(&(p[(k * h + y) * w + x] as f32).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Items must be grouped by nondecreasing label.
    pub fn from_archive_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::Data("knowledge archive: bad magic".into()));
        }
        if buf.len() < ARCHIVE_HEADER {
            return Err(Error::Data("knowledge archive: truncated header".into()));
        }
        let u16_at = |p: usize| u16::from_le_bytes([buf[p], buf[p + 1]]);
        let u32_at = |p: usize| u32::from_le_bytes(buf[p..p + 4].try_into().unwrap());
        if u16_at(4) != VERSION {
            return Err(Error::Data(format!("knowledge archive: unsupported version {}", u16_at(4))));
        }
        let round = u32_at(6);
        let count = u32_at(10) as usize;
        let image = ImageShape { height: u16_at(14) as usize, width: u16_at(16) as usize, channels: buf[18] as usize };
        let classes = u16_at(19) as usize;
        let per = image.pixels();
        if buf.len() != ARCHIVE_HEADER + count * (2 + 4 * per) {
            return Err(Error::Data("knowledge archive: length does not match header".into()));
        }
        let ImageShape { height: h, width: w, channels: ch } = image;
        let mut data: Vec<Vec<f64>> = vec![Vec::new(); classes];
        let mut pos = ARCHIVE_HEADER;
        let mut last = 0;
        for _ in 0..count {
            let label = u16_at(pos) as usize;
            pos += 2;
            if label >= classes {
                return Err(Error::Data(format!("knowledge archive: label {label} out of range")));
            }
            if label < last {
                return Err(Error::Data("knowledge archive: items not grouped by class".into()));
            }
            last = label;
            let hwc: Vec<f64> = buf[pos..pos + 4 * per]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            pos += 4 * per;
            let dst = &mut data[label];
            for k in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        dst.push(hwc[(y * w + x) * ch + k]);
                    }
                }
            }
        }
        let slices = data.into_iter().map(|d| Self::slice_from(image, d.len() / per.max(1), d)).collect();
        Ok(Self { image, round, slices })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_archive_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive_bytes(&std::fs::read(path)?)
    }
}
