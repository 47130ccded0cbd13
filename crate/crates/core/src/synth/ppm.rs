//! Binary PPM (P6, 8-bit) export for inspecting images.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    ensure!(image.rank() == 3 && image.shape()[2] == 3, "PPM export needs an [H, W, 3] image, got {:?}", image.shape());
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    crate::io::atomic_write(path, &encode_ppm(image)?)
}

/// Reads a P6 file written by [`write_ppm`] back into `[0, 1]` floats.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).filter(|b| b.len() == w * h * 3).ok_or_else(|| bad("pixel data has the wrong length"))?;
    Tensor::new(vec![h, w, 3], body.iter().map(|&b| b as f32 / 255.0).collect())
}
