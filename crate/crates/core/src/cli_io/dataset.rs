//! In-memory labelled image sets and the `FVDS` file format.
//!
//! Layout (little-endian): magic `FVDS`, version `u16`, item count `u32`,
//! height `u16`, width `u16`, channels `u8`, class count `u16`, then the
//! `u16` label array, then the `u8` pixel array (row-major `H x W x Ch` per
//! item).

use std::path::Path;

use crate::model::ImageShape;
use crate::numerics::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FVDS";
const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 2 + 2 + 1 + 2;

/// Labelled images with 8-bit pixels stored row-major `H x W x Ch`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub image: ImageShape,
    pub classes: usize,
    labels: Vec<u16>,
    pixels: Vec<u8>,
}

/// Maps an 8-bit pixel to `[-1, 1]`.
#[inline]
pub fn decode_pixel(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

impl Dataset {
    pub fn new(image: ImageShape, classes: usize, labels: Vec<u16>, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * image.pixels() {
            return Err(Error::Data(format!(
                "pixel array has {} bytes, expected {}",
                pixels.len(),
                labels.len() * image.pixels()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { image, classes, labels, pixels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut v = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            v[l as usize].push(i);
        }
        v
    }

    /// Items `idx` as an `n x ch x h x w` tensor of decoded pixels.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let ImageShape { height: h, width: w, channels: ch } = self.image;
        let per = self.image.pixels();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let src = &self.pixels[i * per..(i + 1) * per];
            for c in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        out.push(decode_pixel(src[(y * w + x) * ch + c]));
                    }
                }
            }
        }
        Tensor::new(vec![idx.len(), ch, h, w], out).expect("consistent shape")
    }

    pub fn to_tensor(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let per = self.image.pixels();
        let mut pixels = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        Dataset { image: self.image, classes: self.classes, labels: idx.iter().map(|&i| self.labels[i]).collect(), pixels }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 2 * self.len() + self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.image.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.image.width as u16).to_le_bytes());
        out.push(self.image.channels as u8);
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::Data("dataset file: bad magic".into()));
        }
        if buf.len() < HEADER {
            return Err(Error::Data("dataset file: truncated header".into()));
        }
        let u16_at = |p: usize| u16::from_le_bytes([buf[p], buf[p + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Data(format!("dataset file: unsupported version {version}")));
        }
        let count = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let image = ImageShape { height: u16_at(10) as usize, width: u16_at(12) as usize, channels: buf[14] as usize };
        let classes = u16_at(15) as usize;
        let need = HEADER + 2 * count + count * image.pixels();
        if buf.len() != need {
            return Err(Error::Data(format!("dataset file: expected {need} bytes, found {}", buf.len())));
        }
        let labels: Vec<u16> = (0..count).map(|i| u16_at(HEADER + 2 * i)).collect();
        let pixels = buf[HEADER + 2 * count..].to_vec();
        Dataset::new(image, classes, labels, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
