//! Shared fixtures for the benchmark targets: deterministic synthetic
//! images, embeddings, and score matrices sized for quick iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hmae_core::tensor::Tensor;
use hmae_core::vit::ViTConfig;

/// A batch of smooth synthetic RGB images matching `cfg.input_size`.
pub fn synthetic_images(cfg: &ViTConfig, count: usize, seed: u64) -> Vec<Tensor> {
    let s = cfg.input_size;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            let fx: f32 = rng.gen_range(0.5..2.0);
            let fy: f32 = rng.gen_range(0.5..2.0);
            let mut data = Vec::with_capacity(s * s * 3);
            for y in 0..s {
                for x in 0..s {
                    let u = x as f32 / s as f32;
                    let v = y as f32 / s as f32;
                    data.push(0.5 + 0.4 * (fx * u * std::f32::consts::TAU).sin());
                    data.push(0.5 + 0.4 * (fy * v * std::f32::consts::TAU).cos());
                    data.push(0.5 + 0.2 * (u - v));
                }
            }
            Tensor::new(data, vec![s, s, 3]).unwrap()
        })
        .collect()
}

/// Row-major Gaussian blobs: `n` points, `dim` features, `k` separated
/// clusters. Returns the data plus each point's cluster id.
pub fn gaussian_blobs(n: usize, dim: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        for d in 0..dim {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            if d == class % dim {
                v += 12.0;
            }
            data.push(v);
        }
        labels.push(class);
    }
    (data, labels)
}

/// A random row-stochastic score matrix plus labels for metric benchmarks.
pub fn score_matrix(n: usize, k: usize, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let mut scores = Vec::with_capacity(n * k);
    for &t in &truth {
        let mut row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        row[t] += 1.5;
        let sum: f64 = row.iter().sum();
        scores.extend(row.into_iter().map(|v| v / sum));
    }
    (truth, scores)
}
