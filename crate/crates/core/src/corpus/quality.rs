//! Dispersion-based crop filter: coefficient of variation of luminance.

/// Rec.601 luma weights on 8-bit RGB, in f64.
pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Coefficient of variation (population std / mean) of pixel luminance, and
/// whether the crop passes `cv > threshold`.
///
/// All-black input (zero mean) is degenerate: reported as `(false, +inf)`.
/// `rgb` must be nonempty packed RGB8.
pub fn quality_check(rgb: &[u8], threshold: f64) -> (bool, f64) {
    assert!(
        !rgb.is_empty() && rgb.len() % 3 == 0,
        "quality_check needs a nonempty packed RGB buffer"
    );
    let n = (rgb.len() / 3) as f64;
    let mut sum = 0.0f64;
    for px in rgb.chunks_exact(3) {
        sum += luminance(px[0], px[1], px[2]);
    }
    let mean = sum / n;
    if mean == 0.0 {
        return (false, f64::INFINITY);
    }
    let mut sq = 0.0f64;
    for px in rgb.chunks_exact(3) {
        let d = luminance(px[0], px[1], px[2]) - mean;
        sq += d * d;
    }
    let cv = (sq / n).sqrt() / mean;
    (cv > threshold, cv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_white_is_rejected_with_zero_cv() {
        let (accept, cv) = quality_check(&[255u8; 300], 0.1);
        assert!(!accept);
        assert_eq!(cv, 0.0);
    }

    #[test]
    fn all_black_is_rejected_as_degenerate() {
        let (accept, cv) = quality_check(&[0u8; 300], 0.1);
        assert!(!accept);
        assert!(cv.is_infinite());
    }

    #[test]
    fn half_black_half_white_has_unit_cv() {
        let mut rgb = vec![0u8; 150];
        rgb.extend_from_slice(&[255u8; 150]);
        let (accept, cv) = quality_check(&rgb, 0.1);
        assert!(accept);
        assert!((cv - 1.0).abs() < 1e-9, "cv = {cv}");
    }

    #[test]
    fn matches_single_pass_oracle_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let rgb: Vec<u8> = (0..3 * 257).map(|_| rng.gen()).collect();
            let (_, cv) = quality_check(&rgb, 0.1);
            // Independent single-pass (sum / sum-of-squares) computation.
            let n = (rgb.len() / 3) as f64;
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for px in rgb.chunks_exact(3) {
                let l = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                s += l;
                s2 += l * l;
            }
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            let oracle = var.sqrt() / mean;
            assert!((cv - oracle).abs() < 1e-9, "{cv} vs {oracle}");
        }
    }

    #[test]
    fn threshold_is_strict() {
        // Build a crop with a known cv, then check acceptance flips exactly
        // above it.
        let mut rgb = vec![100u8; 150];
        rgb.extend_from_slice(&[200u8; 150]);
        let (_, cv) = quality_check(&rgb, 0.0);
        let (hi, _) = quality_check(&rgb, cv); // threshold == cv → reject
        assert!(!hi);
        let (lo, _) = quality_check(&rgb, cv - 1e-9);
        assert!(lo);
    }
}
