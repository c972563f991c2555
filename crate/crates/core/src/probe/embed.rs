//! Frozen-encoder embedding of labeled regions: non-overlapping tiling plus
//! mean aggregation over every tile's patch tokens.

use std::path::Path;

use crate::corpus::{load_rgb_tensor, resize_bilinear_rect, CorpusManifest};
use crate::error::{Error, Result};
use crate::probe::labels::LabelMapping;
use crate::probe::store::EmbeddingRecord;
use crate::tensor::Tensor;
use crate::util::indexed_map;
use crate::vit::{patchify, MaeModel, MaskPlan};

/// Tile start offsets covering `extent` with `tile`-sized windows: regular
/// stride `tile`, with the final window anchored to the far border.
pub fn tile_offsets(extent: usize, tile: usize) -> Vec<usize> {
    debug_assert!(extent >= tile && tile > 0);
    let n = extent.div_ceil(tile);
    (0..n)
        .map(|i| if i + 1 == n { extent - tile } else { i * tile })
        .collect()
}

/// Upscaling policy for undersized regions: images whose smaller side is
/// below `input` are scaled up (aspect preserved) so the smaller side equals
/// `input`. Larger images pass through untouched.
fn effective_dims(h: usize, w: usize, input: usize) -> (usize, usize) {
    let min_side = h.min(w);
    if min_side >= input {
        return (h, w);
    }
    let scale = input as f64 / min_side as f64;
    let nh = ((h as f64 * scale).round() as usize).max(input);
    let nw = ((w as f64 * scale).round() as usize).max(input);
    (nh, nw)
}

/// Encodes a region image (`[h, w, channels]`, values in `[0, 1]`) with the
/// frozen encoder and returns the mean over all patch tokens of all tiles.
/// The CLS token, when present, is excluded from the mean.
pub fn embed_region(model: &MaeModel, image: &Tensor) -> Result<Vec<f32>> {
    let cfg = model.config();
    let s = cfg.input_size;
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::ShapeMismatch {
            op: "embed_region",
            left: shape.to_vec(),
            right: vec![0, 0, cfg.channels],
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let (eh, ew) = effective_dims(h, w, s);
    if eh < 2 * cfg.patch_size || ew < 2 * cfg.patch_size {
        return Err(Error::Geometry(format!(
            "region of {h}x{w} is degenerate: {eh}x{ew} after resizing is under \
             two patches ({}) per side",
            2 * cfg.patch_size
        )));
    }
    let data: std::borrow::Cow<[f32]> = if (eh, ew) == (h, w) {
        std::borrow::Cow::Borrowed(image.data())
    } else {
        std::borrow::Cow::Owned(resize_bilinear_rect(
            image.data(),
            w,
            h,
            cfg.channels,
            ew,
            eh,
        )?)
    };

    let c = cfg.channels;
    let plan = MaskPlan::full_visibility(cfg.num_patches());
    let first_token = usize::from(cfg.use_cls_token);
    let dim = cfg.encoder_dim;
    let mut acc = vec![0.0f64; dim];
    let mut tokens = 0usize;
    let mut tile = vec![0.0f32; s * s * c];
    for &oy in &tile_offsets(eh, s) {
        for &ox in &tile_offsets(ew, s) {
            for row in 0..s {
                let src = ((oy + row) * ew + ox) * c;
                tile[row * s * c..(row + 1) * s * c].copy_from_slice(&data[src..src + s * c]);
            }
            let grid = patchify(&Tensor::new(tile.clone(), vec![s, s, c])?, cfg.patch_size)?;
            let latents = model.encode_visible(&grid, &plan)?;
            let rows = latents.shape()[0];
            let values = latents.data();
            for r in first_token..rows {
                for (a, v) in acc.iter_mut().zip(&values[r * dim..(r + 1) * dim]) {
                    *a += *v as f64;
                }
            }
            tokens += rows - first_token;
        }
    }
    Ok(acc.iter().map(|a| (a / tokens as f64) as f32).collect())
}

/// Embeds every manifest row (in manifest order, parallel across regions).
/// Labels are resolved to ids through `mapping`; a label absent from the
/// mapping is an error, unlabeled rows stay unlabeled.
pub fn embed_corpus(
    model: &MaeModel,
    manifest: &CorpusManifest,
    mapping: &LabelMapping,
    threads: usize,
) -> Result<Vec<EmbeddingRecord>> {
    mapping.validate()?;
    indexed_map(manifest.rows.len(), threads, |i| {
        let row = &manifest.rows[i];
        let label = match &row.label {
            None => None,
            Some(name) => Some(mapping.class_id(name).ok_or_else(|| {
                Error::Probe(format!(
                    "row '{}' has label '{name}' which is not in the class list",
                    row.id
                ))
            })?),
        };
        let image = load_rgb_tensor(&manifest.image_path(row))?;
        Ok(EmbeddingRecord {
            id: row.id.clone(),
            vector: embed_region(model, &image)?,
            label,
            split: row.split,
        })
    })
}

/// Convenience wrapper: embeds a single image file.
pub fn embed_image_file(model: &MaeModel, path: &Path) -> Result<Vec<f32>> {
    embed_region(model, &load_rgb_tensor(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ManifestRow, Split};
    use crate::vit::ViTConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> MaeModel {
        MaeModel::new(ViTConfig::tiny(), seed).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(data, vec![h, w, 3]).unwrap()
    }

    #[test]
    fn offsets_cover_extent_with_far_anchor() {
        assert_eq!(tile_offsets(32, 32), vec![0]);
        assert_eq!(tile_offsets(64, 32), vec![0, 32]);
        assert_eq!(tile_offsets(100, 32), vec![0, 32, 64, 68]);
        assert_eq!(tile_offsets(33, 32), vec![0, 1]);
    }

    #[test]
    fn single_tile_matches_direct_token_mean() {
        let model = tiny_model(1);
        let cfg = model.config();
        let image = random_image(2, cfg.input_size, cfg.input_size);
        let vec = embed_region(&model, &image).unwrap();
        assert_eq!(vec.len(), cfg.encoder_dim);

        let grid = patchify(&image, cfg.patch_size).unwrap();
        let plan = MaskPlan::full_visibility(cfg.num_patches());
        let latents = model.encode_visible(&grid, &plan).unwrap();
        let dim = cfg.encoder_dim;
        let first = usize::from(cfg.use_cls_token);
        let rows = latents.shape()[0];
        for e in 0..dim {
            let mut acc = 0.0f64;
            for r in first..rows {
                acc += latents.data()[r * dim + e] as f64;
            }
            let expect = (acc / (rows - first) as f64) as f32;
            assert_eq!(vec[e].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn identical_pixels_give_identical_vectors() {
        let model = tiny_model(3);
        let image = random_image(4, 48, 80);
        let a = embed_region(&model, &image).unwrap();
        let b = embed_region(&model, &image.clone()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn duplicated_tile_matches_single_tile_embedding() {
        let model = tiny_model(5);
        let s = model.config().input_size;
        let tile = random_image(6, s, s);
        // Two-tile image [A | A].
        let mut wide = vec![0.0f32; s * (2 * s) * 3];
        for row in 0..s {
            let src = &tile.data()[row * s * 3..(row + 1) * s * 3];
            wide[row * 2 * s * 3..row * 2 * s * 3 + s * 3].copy_from_slice(src);
            wide[row * 2 * s * 3 + s * 3..(row + 1) * 2 * s * 3].copy_from_slice(src);
        }
        let wide = Tensor::new(wide, vec![s, 2 * s, 3]).unwrap();
        let single = embed_region(&model, &tile).unwrap();
        let double = embed_region(&model, &wide).unwrap();
        for (a, b) in single.iter().zip(&double) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn tile_permutation_changes_nothing_within_tolerance() {
        let model = tiny_model(7);
        let s = model.config().input_size;
        let a = random_image(8, s, s);
        let b = random_image(9, s, s);
        let paste = |left: &Tensor, right: &Tensor| {
            let mut wide = vec![0.0f32; s * (2 * s) * 3];
            for row in 0..s {
                wide[row * 2 * s * 3..row * 2 * s * 3 + s * 3]
                    .copy_from_slice(&left.data()[row * s * 3..(row + 1) * s * 3]);
                wide[row * 2 * s * 3 + s * 3..(row + 1) * 2 * s * 3]
                    .copy_from_slice(&right.data()[row * s * 3..(row + 1) * s * 3]);
            }
            Tensor::new(wide, vec![s, 2 * s, 3]).unwrap()
        };
        let ab = embed_region(&model, &paste(&a, &b)).unwrap();
        let ba = embed_region(&model, &paste(&b, &a)).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn undersized_regions_are_resized_up() {
        let model = tiny_model(10);
        let s = model.config().input_size;
        let small = random_image(11, s / 2, s / 2);
        let vec = embed_region(&model, &small).unwrap();
        assert_eq!(vec.len(), model.config().encoder_dim);
        assert!(vec.iter().all(|v| v.is_finite()));
        // Aspect is preserved for non-square inputs.
        assert_eq!(effective_dims(16, 24, 32), (32, 48));
        assert_eq!(effective_dims(100, 16, 32), (200, 32));
        assert_eq!(effective_dims(33, 100, 32), (33, 100));
    }

    #[test]
    fn degenerate_regions_rejected() {
        let model = tiny_model(12);
        // A 1-pixel-tall sliver cannot be resized at all.
        let sliver = random_image(13, 1, 100);
        assert!(matches!(
            embed_region(&model, &sliver),
            Err(Error::Geometry(_))
        ));
        // Wrong channel count is a shape error.
        let gray = Tensor::new(vec![0.5; 32 * 32], vec![32, 32, 1]).unwrap();
        assert!(embed_region(&model, &gray).is_err());
    }

    #[test]
    fn corpus_embedding_is_order_invariant_and_thread_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("images");
        std::fs::create_dir_all(&img_dir).unwrap();
        let model = tiny_model(14);
        let s = model.config().input_size;
        let mut rows = Vec::new();
        for i in 0..6 {
            let image = random_image(20 + i as u64, s, s);
            crate::corpus::save_rgb_tensor(&image, &img_dir.join(format!("r{i}.png"))).unwrap();
            rows.push(ManifestRow {
                id: format!("r{i}"),
                path: format!("images/r{i}.png"),
                slide: "s".into(),
                x: 0,
                y: 0,
                side: s,
                cv: 0.5,
                label: Some(if i % 2 == 0 { "even" } else { "odd" }.to_string()),
                split: Some(Split::Train),
            });
        }
        let manifest = CorpusManifest::new(rows.clone(), dir.path().to_path_buf()).unwrap();
        let mapping = LabelMapping::new(vec!["even".into(), "odd".into()]).unwrap();

        let one = embed_corpus(&model, &manifest, &mapping, 1).unwrap();
        let four = embed_corpus(&model, &manifest, &mapping, 4).unwrap();
        assert_eq!(one.len(), manifest.rows.len());
        for (a, b) in one.iter().zip(&four) {
            assert_eq!(a, b);
        }
        assert_eq!(one[0].label, Some(0));
        assert_eq!(one[1].label, Some(1));

        // Reversed manifest order: same vector per id.
        let mut rev = rows.clone();
        rev.reverse();
        let manifest_rev = CorpusManifest::new(rev, dir.path().to_path_buf()).unwrap();
        let rev_out = embed_corpus(&model, &manifest_rev, &mapping, 2).unwrap();
        for rec in &one {
            let other = rev_out.iter().find(|r| r.id == rec.id).unwrap();
            assert_eq!(rec.vector, other.vector);
        }
    }

    #[test]
    fn unknown_label_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("images");
        std::fs::create_dir_all(&img_dir).unwrap();
        let model = tiny_model(15);
        let s = model.config().input_size;
        let image = random_image(16, s, s);
        crate::corpus::save_rgb_tensor(&image, &img_dir.join("a.png")).unwrap();
        let rows = vec![ManifestRow {
            id: "a".into(),
            path: "images/a.png".into(),
            slide: "s".into(),
            x: 0,
            y: 0,
            side: s,
            cv: 0.5,
            label: Some("mystery".into()),
            split: None,
        }];
        let manifest = CorpusManifest::new(rows, dir.path().to_path_buf()).unwrap();
        let mapping = LabelMapping::new(vec!["known".into()]).unwrap();
        assert!(embed_corpus(&model, &manifest, &mapping, 1).is_err());
    }
}
