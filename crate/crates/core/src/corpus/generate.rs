//! Corpus generation: sample candidate crops, filter by dispersion, resize,
//! and write region images plus the manifest.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::corpus::manifest::{CorpusManifest, ManifestRow};
use crate::corpus::quality::quality_check;
use crate::corpus::resize::resize_rgb8;
use crate::corpus::sampling::{sample_crop, CropSpec, SizeDistribution};
use crate::corpus::slide::SlideImage;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, stream_seed};
use crate::util::indexed_map;

/// Knobs for [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct GenerateConfig {
    /// Number of accepted regions to produce.
    pub count: usize,
    /// Acceptance threshold on the coefficient of variation.
    pub threshold: f64,
    /// Output image side length (crops are resized to this).
    pub input_size: usize,
    pub seed: u64,
    pub threads: usize,
}

/// Outcome statistics alongside the manifest.
#[derive(Debug, Clone, Copy)]
pub struct GenerateStats {
    /// Candidates drawn.
    pub examined: usize,
    /// Candidates that passed the filter (may exceed `kept`).
    pub accepted: usize,
    /// Regions actually written.
    pub kept: usize,
}

impl GenerateStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.examined == 0 {
            0.0
        } else {
            self.accepted as f64 / self.examined as f64
        }
    }
}

/// Draws candidate crops until `count` pass the quality filter (or a budget
/// of `100·count` candidates is exhausted), then writes each accepted crop —
/// resized to `input_size` — as `images/r{rank:06}.png` under `out_dir`,
/// plus `manifest.csv`.
///
/// Candidate `i` draws from the RNG stream `(seed, i)`: first a slide index,
/// then the crop. Accepted regions are the first `count` acceptances in
/// candidate-index order, which makes the output byte-identical at any
/// thread count.
pub fn generate_corpus(
    slides: &[SlideImage],
    dist: &SizeDistribution,
    gen: &GenerateConfig,
    out_dir: &Path,
) -> Result<(CorpusManifest, GenerateStats)> {
    if gen.count == 0 {
        return Err(Error::InvalidParameter("generate count must be at least 1".into()));
    }
    if slides.is_empty() {
        return Err(Error::InvalidParameter("no slides provided".into()));
    }
    if gen.input_size < 2 {
        return Err(Error::InvalidParameter(format!(
            "input_size must be at least 2, got {}",
            gen.input_size
        )));
    }
    dist.validate()?;
    let budget = gen.count.saturating_mul(100);
    let chunk_size = (gen.count * 2).clamp(64, 4096);

    let evaluate = |i: usize| -> Result<Option<CropSpec>> {
        let candidate_seed = stream_seed(gen.seed, i as u64);
        let mut rng = stream_rng(gen.seed, i as u64);
        let slide = &slides[rng.gen_range(0..slides.len())];
        let mut crop = sample_crop(slide, dist, &mut rng)?;
        crop.seed = candidate_seed;
        let pixels = slide.crop_rgb(crop.x, crop.y, crop.side)?;
        let (accept, cv) = quality_check(&pixels, gen.threshold);
        crop.cv = Some(cv);
        Ok(accept.then_some(crop))
    };

    let mut accepted: Vec<CropSpec> = Vec::with_capacity(gen.count);
    let mut examined = 0usize;
    let mut accepted_total = 0usize;
    while examined < budget && accepted.len() < gen.count {
        let n = chunk_size.min(budget - examined);
        let base = examined;
        let results = indexed_map(n, gen.threads, |j| evaluate(base + j))?;
        for crop in results.into_iter().flatten() {
            accepted_total += 1;
            if accepted.len() < gen.count {
                accepted.push(crop);
            }
        }
        examined += n;
    }
    if accepted.len() < gen.count {
        return Err(Error::Corpus(format!(
            "rejection budget exhausted: {} of {} regions accepted after {} candidates \
             (acceptance rate {:.4})",
            accepted.len(),
            gen.count,
            examined,
            accepted_total as f64 / examined as f64
        )));
    }

    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let by_id: HashMap<&str, &SlideImage> = slides.iter().map(|s| (s.id(), s)).collect();
    let rows = indexed_map(accepted.len(), gen.threads, |rank| {
        let crop = &accepted[rank];
        let slide = by_id[crop.slide.as_str()];
        let pixels = slide.crop_rgb(crop.x, crop.y, crop.side)?;
        let resized = resize_rgb8(&pixels, crop.side, crop.side, gen.input_size)?;
        let id = format!("r{rank:06}");
        let rel_path = format!("images/{id}.png");
        let abs_path = out_dir.join(&rel_path);
        let img = image::RgbImage::from_raw(gen.input_size as u32, gen.input_size as u32, resized)
            .expect("resize output length is exact");
        img.save(&abs_path).map_err(|e| Error::image(&abs_path, e))?;
        Ok(ManifestRow {
            id,
            path: rel_path,
            slide: crop.slide.clone(),
            x: crop.x,
            y: crop.y,
            side: crop.side,
            cv: crop.cv.expect("accepted crops carry cv"),
            label: None,
            split: None,
        })
    })?;

    let manifest = CorpusManifest::new(rows, out_dir.to_path_buf())?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    let stats = GenerateStats {
        examined,
        accepted: accepted_total,
        kept: manifest.rows.len(),
    };
    Ok((manifest, stats))
}
