//! Binary tensor files: `CDGT`, version 0x01, dtype 0x01 (f32), rank byte,
//! `rank` little-endian u32 extents, then little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const TENSOR_MAGIC: &[u8; 4] = b"CDGT";
const VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0x01;

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_F32, rank]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Parses a tensor; `origin` only labels error messages.
pub fn read_tensor_from<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    let bad = |msg: &str| Error::format(origin, msg);
    if bytes.len() < 7 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing CDGT magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype {:#04x}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
        shape.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    if bytes.len() - pos != 4 * n {
        return Err(bad(&format!("expected {} data bytes for shape {shape:?}, found {}", 4 * n, bytes.len() - pos)));
    }
    let data = bytes[pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_tensor_to(&mut buf, t).map_err(|e| Error::io(path, e))?;
    atomic_write(path, &buf)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut f, path)
}
