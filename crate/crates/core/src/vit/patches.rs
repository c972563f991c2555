//! Patch extraction and reassembly. `unpatchify(patchify(x))` is bit-exact
//! because both directions are pure copies.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A square image split into non-overlapping square patches, row-major, each
/// flattened channel-last (pixel by pixel, channels innermost).
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits an `H×W×C` tensor (H == W, divisible by `patch_size`) into patches.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => {
            return Err(Error::Geometry(format!(
                "patchify expects an H×W×C image, got shape {s:?}"
            )))
        }
    };
    if h != w {
        return Err(Error::Geometry(format!(
            "patchify expects a square image, got {h}×{w}"
        )));
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::Geometry(format!(
            "image side {h} not divisible by patch size {patch_size}"
        )));
    }
    let grid = h / patch_size;
    let patch_dim = patch_size * patch_size * c;
    let src = image.data();
    let mut data = Vec::with_capacity(grid * grid * patch_dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let y = gy * patch_size + py;
                    let x = gx * patch_size + px;
                    let base = (y * w + x) * c;
                    data.extend_from_slice(&src[base..base + c]);
                }
            }
        }
    }
    Ok(PatchGrid {
        grid_h: grid,
        grid_w: grid,
        patch_size,
        channels: c,
        patches: Tensor::new(data, vec![grid * grid, patch_dim])?,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> Result<Tensor> {
    let p = grid.patch_size;
    let c = grid.channels;
    let expected = vec![grid.num_patches(), grid.patch_dim()];
    if grid.patches.shape() != expected.as_slice() {
        return Err(Error::Geometry(format!(
            "patch tensor shape {:?} inconsistent with grid ({expected:?})",
            grid.patches.shape()
        )));
    }
    let h = grid.grid_h * p;
    let w = grid.grid_w * p;
    let src = grid.patches.data();
    let mut data = vec![0.0f32; h * w * c];
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let patch = &src[(gy * grid.grid_w + gx) * grid.patch_dim()..];
            for py in 0..p {
                for px in 0..p {
                    let y = gy * p + py;
                    let x = gx * p + px;
                    let dst = (y * w + x) * c;
                    let s = (py * p + px) * c;
                    data[dst..dst + c].copy_from_slice(&patch[s..s + c]);
                }
            }
        }
    }
    Tensor::new(data, vec![h, w, c])
}
