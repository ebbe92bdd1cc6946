//! Upload formats and the byte ledger.
//!
//! Knowledge upload `FVKW` (little-endian): magic, version `u16`, round `u32`,
//! client `u16`, item count `u32`, height `u16`, width `u16`, channels `u8`,
//! class count `u16`, quantization minimum and maximum as `f32`, then per item
//! the label `u16` and `H x W x Ch` pixels as `u8`. Pixels map back as
//! `min + q / 255 * (max - min)`.

use crate::condense::KnowledgeDataset;
use crate::model::ImageShape;
use crate::numerics::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FVKW";
const VERSION: u16 = 1;
pub const KNOWLEDGE_HEADER: usize = 4 + 2 + 4 + 2 + 4 + 2 + 2 + 1 + 2 + 8;

/// Exact upload size of `items` knowledge images.
pub fn knowledge_wire_len(items: usize, image: ImageShape) -> usize {
    KNOWLEDGE_HEADER + items * (2 + image.pixels())
}

/// Serialized knowledge upload size for a client holding `local_items` at
/// `percent`% retention, without building any data.
pub fn comm_calc(local_items: usize, percent: f64, image: ImageShape) -> usize {
    let items = ((percent / 100.0 * local_items as f64) - 1e-9).ceil().max(0.0) as usize;
    knowledge_wire_len(items, image)
}

pub fn knowledge_to_wire(k: &KnowledgeDataset, client: u16) -> Vec<u8> {
    let ImageShape { height: h, width: w, channels: ch } = k.image;
    let (lo, hi) = k
        .slices()
        .iter()
        .flat_map(|s| s.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo as f32, hi as f32) } else { (0.0, 0.0) };
    let span = (hi - lo) as f64;
    let mut out = Vec::with_capacity(knowledge_wire_len(k.len(), k.image));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&k.round.to_le_bytes());
    out.extend_from_slice(&client.to_le_bytes());
    out.extend_from_slice(&(k.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(ch as u8);
    out.extend_from_slice(&(k.classes() as u16).to_le_bytes());
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    for (c, p) in k.items() {
        out.extend_from_slice(&(c as u16).to_le_bytes());
        for y in 0..h {
            for x in 0..w {
                for z in 0..ch {
                    let v = p[(z * h + y) * w + x];
                    let q = if span > 0.0 { ((v - lo as f64) / span * 255.0).round().clamp(0.0, 255.0) } else { 0.0 };
                    out.push(q as u8);
                }
            }
        }
    }
    out
}

/// Decodes an upload into `(client, knowledge)` with de-quantized pixels.
pub fn knowledge_from_wire(buf: &[u8]) -> Result<(u16, KnowledgeDataset)> {
    let bad = |m: &str| Error::Protocol(format!("knowledge upload: {m}"));
    if buf.len() < KNOWLEDGE_HEADER || &buf[..4] != MAGIC {
        return Err(bad("bad header"));
    }
    let u16_at = |p: usize| u16::from_le_bytes([buf[p], buf[p + 1]]);
    let u32_at = |p: usize| u32::from_le_bytes(buf[p..p + 4].try_into().unwrap());
    let f32_at = |p: usize| f32::from_le_bytes(buf[p..p + 4].try_into().unwrap()) as f64;
    if u16_at(4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let round = u32_at(6);
    let client = u16_at(10);
    let count = u32_at(12) as usize;
    let image = ImageShape { height: u16_at(16) as usize, width: u16_at(18) as usize, channels: buf[20] as usize };
    let classes = u16_at(21) as usize;
    let (lo, hi) = (f32_at(23), f32_at(27));
    if buf.len() != knowledge_wire_len(count, image) {
        return Err(bad("length does not match header"));
    }
    let ImageShape { height: h, width: w, channels: ch } = image;
    let per = image.pixels();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); classes];
    let mut pos = KNOWLEDGE_HEADER;
    for _ in 0..count {
        let c = u16_at(pos) as usize;
        pos += 2;
        if c >= classes {
            return Err(bad("label out of range"));
        }
        let px = &buf[pos..pos + per];
        pos += per;
        for z in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    data[c].push(lo + px[(y * w + x) * ch + z] as f64 / 255.0 * (hi - lo));
                }
            }
        }
    }
    let slices = data
        .into_iter()
        .map(|d| Tensor::new(vec![d.len() / per.max(1), ch, h, w], d))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((client, KnowledgeDataset::from_slices(image, round, slices)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Knowledge,
    LogitPrototypes,
    Model,
}

/// One serialized message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundMessage {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub kind: PayloadKind,
    pub bytes: usize,
}

/// Every message of a run, in send order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub messages: Vec<RoundMessage>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, client: usize, direction: Direction, kind: PayloadKind, bytes: usize) {
        self.messages.push(RoundMessage { round, client, direction, kind, bytes });
    }

    pub fn round_total(&self, round: usize, direction: Direction) -> usize {
        self.messages.iter().filter(|m| m.round == round && m.direction == direction).map(|m| m.bytes).sum()
    }

    pub fn cumulative(&self, through_round: usize, direction: Direction) -> usize {
        self.messages.iter().filter(|m| m.round <= through_round && m.direction == direction).map(|m| m.bytes).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,client,direction,payload,bytes\n");
        for m in &self.messages {
            let d = match m.direction {
                Direction::Upload => "upload",
                Direction::Download => "download",
            };
            let k = match m.kind {
                PayloadKind::Knowledge => "knowledge",
                PayloadKind::LogitPrototypes => "logit_prototypes",
                PayloadKind::Model => "model",
            };
            s.push_str(&format!("{},{},{},{},{}\n", m.round, m.client, d, k, m.bytes));
        }
        s
    }
}
