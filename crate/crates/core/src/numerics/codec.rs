//! Little-endian parameter wire format: rank `u8`, dims `u32` each, then the
//! values as 32-bit floats.

use super::tensor::{numel, Tensor};
use super::{NumericsError, Result};

pub fn tensor_wire_len(shape: &[usize]) -> usize {
    1 + 4 * shape.len() + 4 * numel(shape)
}

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Reads one tensor starting at `*pos`, advancing it.
pub fn read_tensor(buf: &[u8], pos: &mut usize) -> Result<Tensor> {
    let truncated = || NumericsError::Decode("truncated tensor".into());
    let rank = *buf.get(*pos).ok_or_else(truncated)? as usize;
    *pos += 1;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = buf.get(*pos..*pos + 4).ok_or_else(truncated)?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        *pos += 4;
    }
    let n = numel(&shape);
    let bytes = buf.get(*pos..*pos + 4 * n).ok_or_else(truncated)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    *pos += 4 * n;
    Tensor::new(shape, data)
}
