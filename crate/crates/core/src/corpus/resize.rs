//! Bilinear resizing with half-pixel centers.

use crate::error::{Error, Result};

/// Bilinear resample of an interleaved `channels`-deep image to a
/// `target`×`target` square. Sample positions use half-pixel centers
/// (`src = (dst + 0.5)·scale − 0.5`), clamped at the borders. Arithmetic is
/// f64; equal sizes return the input bit-exactly.
pub fn resize_bilinear(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    channels: usize,
    target: usize,
) -> Result<Vec<f32>> {
    resize_bilinear_rect(src, src_w, src_h, channels, target, target)
}

/// Rectangular-target variant of [`resize_bilinear`].
pub fn resize_bilinear_rect(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    channels: usize,
    target_w: usize,
    target_h: usize,
) -> Result<Vec<f32>> {
    if src_w < 2 || src_h < 2 {
        return Err(Error::Geometry(format!(
            "resize source must be at least 2x2, got {src_w}x{src_h}"
        )));
    }
    if target_w < 2 || target_h < 2 {
        return Err(Error::Geometry(format!(
            "resize target must be at least 2x2, got {target_w}x{target_h}"
        )));
    }
    if src.len() != src_w * src_h * channels {
        return Err(Error::Geometry(format!(
            "source buffer holds {} values, {src_w}x{src_h}x{channels} needs {}",
            src.len(),
            src_w * src_h * channels
        )));
    }
    if src_w == target_w && src_h == target_h {
        return Ok(src.to_vec());
    }
    let scale_x = src_w as f64 / target_w as f64;
    let scale_y = src_h as f64 / target_h as f64;
    let mut out = vec![0.0f32; target_w * target_h * channels];
    for dy in 0..target_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for dx in 0..target_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            for c in 0..channels {
                let p = |x: usize, y: usize| src[(y * src_w + x) * channels + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out[(dy * target_w + dx) * channels + c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Ok(out)
}

/// `resize_bilinear` over packed RGB8, rounding back to bytes.
pub fn resize_rgb8(src: &[u8], src_w: usize, src_h: usize, target: usize) -> Result<Vec<u8>> {
    let f: Vec<f32> = src.iter().map(|&b| b as f32).collect();
    let out = resize_bilinear(&f, src_w, src_h, 3, target)?;
    Ok(out
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect())
}
