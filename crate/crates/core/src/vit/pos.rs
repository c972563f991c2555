//! Fixed 2-D sin-cos positional embeddings. Never trained; two models built
//! for the same geometry share the table bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Builds the `num_patches × dim` positional table for a `grid_h × grid_w`
/// patch grid (row-major). The first half of each row encodes the y position,
/// the second half the x position, each as `dim/4` sin values followed by
/// `dim/4` cos values with frequencies `1/10000^(i/(dim/4))`.
pub fn sincos_pos_embed(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::InvalidParameter(format!(
            "positional embedding dim must be a positive multiple of 4, got {dim}"
        )));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::InvalidParameter(
            "positional grid must be non-empty".into(),
        ));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for &(pos, _) in &[(gy as f64, 'y'), (gx as f64, 'x')] {
                for &w in &omega {
                    data.push((pos * w).sin() as f32);
                }
                for &w in &omega {
                    data.push((pos * w).cos() as f32);
                }
            }
        }
    }
    Tensor::new(data, vec![grid_h * grid_w, dim])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_zeros_and_ones() {
        let t = sincos_pos_embed(4, 4, 16).unwrap();
        let row = &t.data()[..16];
        // Layout: sin_y, cos_y, sin_x, cos_x in dim/4 groups.
        for (i, &v) in row.iter().enumerate() {
            let group = i / 4;
            if group % 2 == 0 {
                assert_eq!(v, 0.0, "sin component {i}");
            } else {
                assert_eq!(v, 1.0, "cos component {i}");
            }
        }
    }

    #[test]
    fn rows_distinct_for_all_positions_8x8() {
        let t = sincos_pos_embed(8, 8, 32).unwrap();
        let n = 64;
        let d = 32;
        let mut min_dist = f64::INFINITY;
        for a in 0..n {
            for b in (a + 1)..n {
                let mut dist = 0.0f64;
                for j in 0..d {
                    let diff = t.data()[a * d + j] as f64 - t.data()[b * d + j] as f64;
                    dist += diff * diff;
                }
                min_dist = min_dist.min(dist);
            }
        }
        assert!(min_dist > 0.0, "two positions share a row");
    }

    #[test]
    fn matches_direct_f64_formula() {
        let t = sincos_pos_embed(3, 5, 8).unwrap();
        let quarter = 2;
        for gy in 0..3 {
            for gx in 0..5 {
                let row = &t.data()[(gy * 5 + gx) * 8..(gy * 5 + gx + 1) * 8];
                for i in 0..quarter {
                    let w = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let expect = [
                        (gy as f64 * w).sin(),
                        (gy as f64 * w).cos(),
                        (gx as f64 * w).sin(),
                        (gx as f64 * w).cos(),
                    ];
                    let got = [
                        row[i] as f64,
                        row[quarter + i] as f64,
                        row[2 * quarter + i] as f64,
                        row[3 * quarter + i] as f64,
                    ];
                    for (g, e) in got.iter().zip(&expect) {
                        assert!((g - e).abs() < 1e-6, "({gy},{gx}) component {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn determinism_across_instantiations() {
        let a = sincos_pos_embed(7, 7, 64).unwrap();
        let b = sincos_pos_embed(7, 7, 64).unwrap();
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn rejects_bad_dim() {
        assert!(sincos_pos_embed(2, 2, 0).is_err());
        assert!(sincos_pos_embed(2, 2, 6).is_err());
        assert!(sincos_pos_embed(2, 2, 18).is_err());
    }
}
