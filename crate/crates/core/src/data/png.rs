use image::{ExtendedColorType, ImageEncoder};
use metaseg_autodiff::Tensor;

use super::mask::Mask;
use crate::error::{Error, Result};

fn encode(bytes: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(bytes, w as u32, h as u32, color)?;
    Ok(out)
}

fn gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale PNG of a slice with values in `[0,1]`.
pub fn slice_png(slice: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = slice.dims2("slice_png")?;
    let bytes: Vec<u8> = slice.data().iter().map(|&v| gray8(v)).collect();
    encode(&bytes, w, h, ExtendedColorType::L8)
}

/// RGBA PNG of the mask: `color` with `alpha` on foreground, transparent elsewhere.
pub fn mask_overlay_png(mask: &Mask, color: [u8; 3], alpha: u8) -> Result<Vec<u8>> {
    let (h, w) = mask.shape();
    let mut bytes = Vec::with_capacity(4 * h * w);
    for &m in mask.data() {
        if m == 1 {
            bytes.extend_from_slice(&[color[0], color[1], color[2], alpha]);
        } else {
            bytes.extend_from_slice(&[0, 0, 0, 0]);
        }
    }
    encode(&bytes, w, h, ExtendedColorType::Rgba8)
}

/// Slice with the mask blended in, as an opaque RGBA PNG.
pub fn composite_png(slice: &Tensor, mask: &Mask, color: [u8; 3], alpha: u8) -> Result<Vec<u8>> {
    let (h, w) = slice.dims2("composite_png")?;
    if mask.shape() != (h, w) {
        return Err(Error::Tensor(metaseg_autodiff::Error::Dimension {
            op: "composite_png",
            lhs: vec![h, w],
            rhs: vec![mask.shape().0, mask.shape().1],
        }));
    }
    let a = alpha as f64 / 255.0;
    let mut bytes = Vec::with_capacity(4 * h * w);
    for (&v, &m) in slice.data().iter().zip(mask.data()) {
        let g = gray8(v) as f64;
        for c in color {
            let out = if m == 1 { g * (1.0 - a) + c as f64 * a } else { g };
            bytes.push(out.round() as u8);
        }
        bytes.push(255);
    }
    encode(&bytes, w, h, ExtendedColorType::Rgba8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_png_decodes_to_same_pixels() {
        let t = Tensor::from_fn([3, 5], |k| k as f64 / 14.0);
        let png = slice_png(&t).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (5, 3));
        for (k, p) in img.pixels().enumerate() {
            assert_eq!(p.0[0], gray8(k as f64 / 14.0));
        }
    }

    #[test]
    fn overlay_alpha_follows_mask() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let png = mask_overlay_png(&m, [255, 0, 0], 128).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgba8();
        let alphas: Vec<u8> = img.pixels().map(|p| p.0[3]).collect();
        assert_eq!(alphas, vec![128, 0, 0, 128]);
    }
}
