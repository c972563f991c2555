//! Random patch masking. Plans are uniform without-replacement samples,
//! fully determined by their seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A masking decision for one image. Both index lists are sorted and together
/// partition `0..num_patches`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Inference plan: every patch visible, nothing masked.
    pub fn full_visibility(num_patches: usize) -> MaskPlan {
        MaskPlan {
            visible_idx: (0..num_patches).collect(),
            masked_idx: Vec::new(),
            seed: 0,
        }
    }
}

/// Number of masked patches: `round(mask_ratio · num_patches)`, rounding
/// half away from zero.
pub fn masked_count(num_patches: usize, mask_ratio: f32) -> usize {
    (mask_ratio as f64 * num_patches as f64).round() as usize
}

/// Samples a mask plan for `num_patches` patches. The masked set is a uniform
/// without-replacement sample of size `masked_count`; the same seed always
/// yields the same plan.
pub fn random_mask(num_patches: usize, mask_ratio: f32, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "mask_ratio must lie in (0, 1), got {mask_ratio}"
        )));
    }
    let m = masked_count(num_patches, mask_ratio);
    if m == 0 || m >= num_patches {
        return Err(Error::InvalidParameter(format!(
            "mask_ratio {mask_ratio} over {num_patches} patches leaves no masked or no visible patch"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher–Yates: after m swaps the prefix is a uniform
    // without-replacement sample.
    let mut indices: Vec<usize> = (0..num_patches).collect();
    for i in 0..m {
        let j = rng.gen_range(i..num_patches);
        indices.swap(i, j);
    }
    let mut masked_idx: Vec<usize> = indices[..m].to_vec();
    let mut visible_idx: Vec<usize> = indices[m..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan {
        visible_idx,
        masked_idx,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_paper_ratio() {
        let plan = random_mask(16, 0.75, 7).unwrap();
        assert_eq!(plan.masked_idx.len(), 12);
        assert_eq!(plan.visible_idx.len(), 4);
    }

    #[test]
    fn partition_property() {
        for seed in 0..50 {
            let plan = random_mask(49, 0.75, seed).unwrap();
            let mut all: Vec<usize> = plan
                .visible_idx
                .iter()
                .chain(&plan.masked_idx)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..49).collect::<Vec<_>>());
            assert!(plan.visible_idx.windows(2).all(|w| w[0] < w[1]));
            assert!(plan.masked_idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = random_mask(196, 0.75, 99).unwrap();
        let b = random_mask(196, 0.75, 99).unwrap();
        assert_eq!(a, b);
        let c = random_mask(196, 0.75, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boundary_all_but_one_masked_is_valid() {
        // ratio 0.95 of 16 patches rounds to 15 masked, 1 visible.
        let plan = random_mask(16, 0.95, 3).unwrap();
        assert_eq!(plan.masked_idx.len(), 15);
        assert_eq!(plan.visible_idx.len(), 1);
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!(random_mask(16, 0.0, 0).is_err());
        assert!(random_mask(16, 1.0, 0).is_err());
        assert!(random_mask(16, -0.5, 0).is_err());
        // Rounds to zero masked.
        assert!(random_mask(16, 0.01, 0).is_err());
        // Rounds to everything masked.
        assert!(random_mask(16, 0.99, 0).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(masked_count(2, 0.75), 2usize.min(2));
        assert_eq!(masked_count(6, 0.75), 5); // 4.5 rounds away from zero
        assert_eq!(masked_count(4, 0.625), 3); // 2.5 rounds away from zero
    }

    #[test]
    fn marginal_frequencies_are_uniform() {
        // 20k draws on 16 patches: each index should be masked ~75% of the
        // time (the acceptance suite runs the full 1e5-draw version).
        let n = 16;
        let draws = 20_000;
        let mut counts = vec![0u32; n];
        for seed in 0..draws {
            let plan = random_mask(n, 0.75, seed).unwrap();
            for &i in &plan.masked_idx {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / draws as f64;
            assert!((f - 0.75).abs() < 0.02, "index {i}: frequency {f}");
        }
    }
}
