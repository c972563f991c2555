//! Macro one-vs-rest AUC via the rank-based Mann–Whitney statistic.

use crate::error::{Error, Result};

/// Per-class and macro one-vs-rest AUC. Classes without both a positive and
/// a negative example are skipped (`None`) and listed in `skipped`.
#[derive(Debug, Clone, PartialEq)]
pub struct AucOvr {
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: f64,
    pub skipped: Vec<usize>,
}

/// `scores` is row-major `n×k`; each row must sum to 1 within 1e-6. Ties get
/// 0.5 credit (midranks).
pub fn auc_ovr(true_labels: &[usize], scores: &[f64], k: usize) -> Result<AucOvr> {
    if k == 0 {
        return Err(Error::Metrics("auc_ovr needs at least one class".into()));
    }
    let n = true_labels.len();
    if n == 0 || scores.len() != n * k {
        return Err(Error::Metrics(format!(
            "score matrix has {} entries, expected {}x{}",
            scores.len(),
            n,
            k
        )));
    }
    if let Some(&bad) = true_labels.iter().find(|&&y| y >= k) {
        return Err(Error::Metrics(format!("label {bad} out of range for {k} classes")));
    }
    for (i, row) in scores.chunks_exact(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Metrics(format!(
                "score row {i} sums to {s}, expected 1"
            )));
        }
    }

    let mut per_class = vec![None; k];
    let mut skipped = Vec::new();
    for c in 0..k {
        let n_pos = true_labels.iter().filter(|&&y| y == c).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            skipped.push(c);
            continue;
        }
        // Midranks of the class-c scores.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[a * k + c]
                .partial_cmp(&scores[b * k + c])
                .expect("scores must be comparable")
        });
        let mut ranks = vec![0.0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n && scores[order[j] * k + c] == scores[order[i] * k + c] {
                j += 1;
            }
            // 1-based ranks i+1..=j share the midrank.
            let mid = (i + 1 + j) as f64 / 2.0;
            for &idx in &order[i..j] {
                ranks[idx] = mid;
            }
            i = j;
        }
        let rank_sum: f64 = (0..n)
            .filter(|&i| true_labels[i] == c)
            .map(|i| ranks[i])
            .sum();
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        per_class[c] = Some(u / (n_pos as f64 * n_neg as f64));
    }

    let evaluable: Vec<f64> = per_class.iter().filter_map(|&v| v).collect();
    if evaluable.is_empty() {
        return Err(Error::Metrics(
            "no class had both positive and negative examples".into(),
        ));
    }
    Ok(AucOvr {
        macro_auc: evaluable.iter().sum::<f64>() / evaluable.len() as f64,
        per_class,
        skipped,
    })
}
