//! Binary portable pixmap (P6) and graymap (P5) writers.

use std::path::Path;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 bytes for a `[3, H, W]` image with values in `[0, 1]`; values outside
/// are clamped.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3("encode_ppm")?;
    if c != 3 {
        return Err(contract("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

/// P5 bytes for a `[H, W]` map with values in `[0, 1]`; values outside are
/// clamped.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2("encode_pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Min-max scales `values` to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max(values: &Tensor) -> Tensor {
    let d = values.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// P5 bytes for `h·w` values min-max scaled to 0–255.
pub fn encode_heatmap(values: &Tensor, h: usize, w: usize) -> Result<Vec<u8>> {
    if values.numel() != h * w {
        return Err(contract("encode_heatmap", format!("{} values for a {h}×{w} map", values.numel())));
    }
    encode_pgm(&min_max(values).reshape(&[h, w])?)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

/// Writes a binary mask as a P5 file with foreground 255.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(mask)?)?)
}

pub fn write_heatmap(path: &Path, values: &Tensor, h: usize, w: usize) -> Result<()> {
    Ok(std::fs::write(path, encode_heatmap(values, h, w)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout_is_interleaved() {
        let img = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 0.5, 0.0, 0.0, 2.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 128, 0, 0, 0, 255]);
    }

    #[test]
    fn mask_is_zero_or_full() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(&encode_pgm(&m).unwrap()[11..], &[0, 255, 255, 0]);
    }

    #[test]
    fn heatmap_spans_full_range() {
        let v = Tensor::new(vec![4], vec![-2.0, 0.0, 2.0, 1.0]).unwrap();
        let bytes = encode_heatmap(&v, 2, 2).unwrap();
        assert_eq!(&bytes[11..], &[0, 128, 255, 191]);
        let flat = encode_heatmap(&Tensor::full(&[4], 3.0), 2, 2).unwrap();
        assert_eq!(&flat[11..], &[0, 0, 0, 0]);
        assert!(encode_heatmap(&v, 3, 2).is_err());
    }
}
