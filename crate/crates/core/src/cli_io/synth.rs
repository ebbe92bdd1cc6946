//! Desk-scale synthetic image classification data.
//!
//! Each class owns a smoothed random template. Samples are the template under
//! a random sub-pixel shift and contrast change, plus pixel noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Dataset;
use crate::model::ImageShape;
use crate::rng::{stream, Rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Pixel noise standard deviation in decoded `[-1, 1]` units.
    pub noise: f64,
    /// Maximum shift in pixels; also scales the contrast change (10% per
    /// pixel). Zero disables both.
    pub jitter: f64,
    /// Template standard deviation before clamping to `[-1, 1]`.
    pub contrast: f64,
    /// Minimum RMS distance between any two templates.
    pub min_distance: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 150,
            test_per_class: 100,
            side: 16,
            channels: 1,
            noise: 0.15,
            jitter: 2.0,
            contrast: 0.12,
            min_distance: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn image(&self) -> ImageShape {
        ImageShape { height: self.side, width: self.side, channels: self.channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::Config("data.classes must be in [2, 65535]".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class counts must be >= 1".into()));
        }
        if self.side == 0 || self.channels == 0 || self.channels > 255 {
            return Err(Error::Config("data.side and data.channels must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.jitter >= 0.0) || !(self.min_distance >= 0.0) || !(self.contrast > 0.0) {
            return Err(Error::Config("data.noise, data.jitter and data.min_distance must be >= 0, data.contrast > 0".into()));
        }
        Ok(())
    }
}

const TEMPLATE_TRIES: usize = 100;

/// 3x3 box blur with clamped borders, per channel, on `H x W x Ch` data.
fn blur(v: &[f64], img: ImageShape) -> Vec<f64> {
    let ImageShape { height: h, width: w, channels: ch } = img;
    let mut out = vec![0.0; v.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut s = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += v[(yy * w + xx) * ch + c];
                    }
                }
                out[(y * w + x) * ch + c] = s / 9.0;
            }
        }
    }
    out
}

fn template(img: ImageShape, contrast: f64, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..img.pixels()).map(|_| StandardNormal.sample(rng)).collect();
    for _ in 0..2 {
        v = blur(&v, img);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter().map(|x| (contrast * (x - mean) / sd).clamp(-1.0, 1.0)).collect()
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Class templates with pairwise RMS distance at least `spec.min_distance`.
pub fn templates(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    let img = spec.image();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut rng = stream(spec.seed, Stream::Data, 0, c as u64);
        let mut accepted = None;
        for _ in 0..TEMPLATE_TRIES {
            let t = template(img, spec.contrast, &mut rng);
            if out.iter().all(|o| rms(o, &t) >= spec.min_distance) {
                accepted = Some(t);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            Error::Data(format!("no template for class {c} clears distance {} after {TEMPLATE_TRIES} draws", spec.min_distance))
        })?);
    }
    Ok(out)
}

/// Bilinear sample of `t` at `(y, x)` with clamped borders.
fn sample_at(t: &[f64], img: ImageShape, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, ch) = (img.height as f64, img.width as f64, img.channels);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| t[(yy * img.width + xx) * ch + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn encode_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn draw(spec: &SyntheticSpec, tpl: &[f64], rng: &mut Rng, out: &mut Vec<u8>) {
    let img = spec.image();
    let j = spec.jitter;
    let (dy, dx, gain) = if j > 0.0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j), 1.0 + rng.random_range(-0.1 * j..=0.1 * j))
    } else {
        (0.0, 0.0, 1.0)
    };
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("valid sigma"));
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let mut v = gain * sample_at(tpl, img, y as f64 + dy, x as f64 + dx, c);
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                out.push(encode_pixel(v));
            }
        }
    }
}

fn split(spec: &SyntheticSpec, tpls: &[Vec<f64>], per_class: usize, tag: u64) -> Result<Dataset> {
    let mut rngs: Vec<Rng> = (0..spec.classes).map(|c| stream(spec.seed, Stream::Data, tag, c as u64)).collect();
    let mut labels = Vec::with_capacity(per_class * spec.classes);
    let mut pixels = Vec::with_capacity(per_class * spec.classes * spec.image().pixels());
    for _ in 0..per_class {
        for c in 0..spec.classes {
            labels.push(c as u16);
            draw(spec, &tpls[c], &mut rngs[c], &mut pixels);
        }
    }
    Dataset::new(spec.image(), spec.classes, labels, pixels)
}

/// `(train, test)` drawn from the same class generators.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let tpls = templates(spec)?;
    Ok((split(spec, &tpls, spec.train_per_class, 1)?, split(spec, &tpls, spec.test_per_class, 2)?))
}
