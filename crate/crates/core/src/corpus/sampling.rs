//! Crop-size statistics and random crop placement.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::slide::SlideImage;
use crate::error::{Error, Result};

/// Normal model of crop side lengths, with hard pixel clamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeDistribution {
    /// Mean side length in pixels.
    pub mu: f64,
    /// Standard deviation in pixels.
    pub sigma: f64,
    pub clamp_min: usize,
    pub clamp_max: usize,
}

impl Default for SizeDistribution {
    fn default() -> Self {
        SizeDistribution {
            mu: 256.0,
            sigma: 64.0,
            clamp_min: 64,
            clamp_max: 512,
        }
    }
}

impl SizeDistribution {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "size distribution needs finite mu and sigma >= 0, got mu={} sigma={}",
                self.mu, self.sigma
            )));
        }
        if self.clamp_min < 2 || self.clamp_min > self.clamp_max {
            return Err(Error::InvalidParameter(format!(
                "invalid clamps [{}, {}]",
                self.clamp_min, self.clamp_max
            )));
        }
        if self.mu < self.clamp_min as f64 || self.mu > self.clamp_max as f64 {
            return Err(Error::InvalidParameter(format!(
                "mu {} outside clamps [{}, {}]",
                self.mu, self.clamp_min, self.clamp_max
            )));
        }
        Ok(())
    }

    /// One raw draw from N(mu, sigma), before any clamping.
    pub fn sample_raw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.sigma == 0.0 {
            return self.mu;
        }
        Normal::new(self.mu, self.sigma)
            .expect("validated parameters")
            .sample(rng)
    }

    /// Integer side draw: up to 8 redraws while the rounded value falls
    /// outside the clamps, then a hard clamp.
    pub fn sample_side(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut side = self.sample_raw(rng).round();
        for _ in 0..8 {
            if side >= self.clamp_min as f64 && side <= self.clamp_max as f64 {
                break;
            }
            side = self.sample_raw(rng).round();
        }
        (side.max(self.clamp_min as f64).min(self.clamp_max as f64)) as usize
    }
}

/// One placed square crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSpec {
    /// Source slide id.
    pub slide: String,
    /// Top-left corner.
    pub x: usize,
    pub y: usize,
    pub side: usize,
    /// RNG stream seed that produced this candidate (0 when sampled from a
    /// caller-provided generator).
    pub seed: u64,
    /// Coefficient of variation, filled in by the quality filter.
    pub cv: Option<f64>,
}

/// Fits a `SizeDistribution` to observed ROI side lengths: mu/sigma are the
/// sample mean and (n−1) standard deviation, clamps are `[max(min_side, p1),
/// p99]` with linearly interpolated percentiles.
pub fn fit_size_distribution(roi_sides: &[f64], min_side: usize) -> Result<SizeDistribution> {
    if roi_sides.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 ROI sizes to fit a distribution, got {}",
            roi_sides.len()
        )));
    }
    if roi_sides.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::InvalidParameter(
            "ROI sizes must be positive and finite".into(),
        ));
    }
    let n = roi_sides.len() as f64;
    let mu = roi_sides.iter().sum::<f64>() / n;
    let var = roi_sides.iter().map(|&s| (s - mu) * (s - mu)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt();
    let mut sorted = roi_sides.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let clamp_min = (percentile(&sorted, 0.01).round() as usize).max(min_side);
    let clamp_max = percentile(&sorted, 0.99).round() as usize;
    let dist = SizeDistribution {
        mu,
        sigma,
        clamp_min,
        clamp_max,
    };
    dist.validate()?;
    Ok(dist)
}

/// Linearly interpolated percentile of pre-sorted data, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws one crop: side from the (clamped) size distribution, then a uniform
/// position over all in-bounds placements. The draw order is side, x, y.
pub fn sample_crop(
    slide: &SlideImage,
    dist: &SizeDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<CropSpec> {
    dist.validate()?;
    let min_dim = slide.width().min(slide.height());
    if min_dim < dist.clamp_min {
        return Err(Error::Geometry(format!(
            "slide '{}' is {}x{}, smaller than the minimum crop side {}",
            slide.id(),
            slide.width(),
            slide.height(),
            dist.clamp_min
        )));
    }
    // A drawn side larger than the slide is capped so a placement exists.
    let side = dist.sample_side(rng).min(min_dim);
    let x = rng.gen_range(0..=slide.width() - side);
    let y = rng.gen_range(0..=slide.height() - side);
    Ok(CropSpec {
        slide: slide.id().to_string(),
        x,
        y,
        side,
        seed: 0,
        cv: None,
    })
}
