//! Random resized crops with explicit parameters so one crop can be shared
//! by every image of a bag.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

const ATTEMPTS: usize = 10;

/// A sub-rectangle in pixel units of the source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Area fraction that was drawn (before rounding to whole pixels).
    pub scale: f64,
    /// Whether all attempts failed and the centre crop was used.
    pub fallback: bool,
}

impl CropParams {
    pub fn full(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, height, width, scale: 1.0, fallback: false }
    }
}

/// Draws crop parameters for an `height x width` image.
///
/// The area fraction is uniform over `scale`; the aspect ratio is
/// log-uniform over the sub-range of `ratio` for which a crop of that area
/// fits inside the image.
pub fn sample_crop(height: usize, width: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut (impl Rng + ?Sized)) -> Result<CropParams> {
    ensure!(height > 0 && width > 0, "cannot crop an empty image");
    ensure!(0.0 < scale.0 && scale.0 <= scale.1 && scale.1 <= 1.0, "invalid crop scale range [{}, {}]", scale.0, scale.1);
    ensure!(0.0 < ratio.0 && ratio.0 <= ratio.1, "invalid aspect range ({}, {})", ratio.0, ratio.1);
    let (h, w) = (height as f64, width as f64);
    let area = h * w;
    for _ in 0..ATTEMPTS {
        let s = if scale.0 < scale.1 { rng.gen_range(scale.0..=scale.1) } else { scale.0 };
        let target = s * area;
        // width/height = a, so crop width = sqrt(target a) <= w and crop height = sqrt(target / a) <= h.
        let lo = ratio.0.max(target / (h * h));
        let hi = ratio.1.min(w * w / target);
        if lo > hi {
            continue;
        }
        let a = if lo < hi { (rng.gen_range(lo.ln()..=hi.ln())).exp() } else { lo };
        let cw = ((target * a).sqrt().round() as usize).clamp(1, width);
        let ch = ((target / a).sqrt().round() as usize).clamp(1, height);
        let top = rng.gen_range(0..=height - ch);
        let left = rng.gen_range(0..=width - cw);
        return Ok(CropParams { top, left, height: ch, width: cw, scale: s, fallback: false });
    }
    // Centre crop at the closest admissible aspect ratio.
    let in_ratio = w / h;
    let (ch, cw) = if in_ratio < ratio.0 {
        (((w / ratio.0).round() as usize).clamp(1, height), width)
    } else if in_ratio > ratio.1 {
        (height, ((h * ratio.1).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    Ok(CropParams { top: (height - ch) / 2, left: (width - cw) / 2, height: ch, width: cw, scale: (ch * cw) as f64 / area, fallback: true })
}

/// Crops `image` (`[H, W, C]`) and resizes the crop back to `H x W` bilinearly.
pub fn apply_crop(image: &Tensor<f32>, crop: &CropParams) -> Result<Tensor<f32>> {
    ensure!(image.rank() == 3, "expected an [H, W, C] image, got {:?}", image.shape());
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    ensure!(
        crop.height >= 1 && crop.width >= 1 && crop.top + crop.height <= h && crop.left + crop.width <= w,
        "crop {crop:?} exceeds a {h}x{w} image"
    );
    if crop.top == 0 && crop.left == 0 && crop.height == h && crop.width == w {
        return Ok(image.clone());
    }
    let src = image.data();
    let sy = crop.height as f64 / h as f64;
    let sx = crop.width as f64 / w as f64;
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop.height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(crop.height - 1);
        let fy = (y - y0 as f64) as f32;
        for j in 0..w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop.width - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(crop.width - 1);
            let fx = (x - x0 as f64) as f32;
            let at = |yy: usize, xx: usize, ch: usize| src[((crop.top + yy) * w + crop.left + xx) * c + ch];
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Samples a crop and applies it; returns the parameters for reuse on other images.
pub fn random_resized_crop(
    image: &Tensor<f32>,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut (impl Rng + ?Sized),
) -> Result<(Tensor<f32>, CropParams)> {
    ensure!(image.rank() == 3, "expected an [H, W, C] image, got {:?}", image.shape());
    let crop = sample_crop(image.shape()[0], image.shape()[1], scale, ratio, rng)?;
    Ok((apply_crop(image, &crop)?, crop))
}
