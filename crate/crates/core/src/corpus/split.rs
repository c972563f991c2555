//! Stratified train/val/test assignment with largest-remainder rounding.

use rand::seq::SliceRandom;

use crate::corpus::manifest::{CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Assigns split tags to every labeled row, per class: members are shuffled
/// (class-indexed RNG stream off `seed`) and dealt into train/val/test with
/// largest-remainder quotas. Unlabeled rows are left untagged.
///
/// `fractions` must sum to 1; every class needs at least 3 members.
pub fn stratified_split(
    manifest: &mut CorpusManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let (ft, fv, fe) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut classes: Vec<String> = manifest
        .rows
        .iter()
        .filter_map(|r| r.label.clone())
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::InvalidParameter("no labeled rows to split".into()));
    }
    for (ci, class) in classes.iter().enumerate() {
        let mut members: Vec<usize> = manifest
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label.as_deref() == Some(class))
            .map(|(i, _)| i)
            .collect();
        if members.len() < 3 {
            return Err(Error::Corpus(format!(
                "class '{class}' has only {} members; stratified split needs at least 3",
                members.len()
            )));
        }
        let mut rng = stream_rng(seed, ci as u64);
        members.shuffle(&mut rng);
        let (n_train, n_val, _) = largest_remainder(members.len(), fractions);
        for (k, &row) in members.iter().enumerate() {
            manifest.rows[row].split = Some(if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(())
}

/// Integer quotas for `n` items under `fractions`: floors first, then the
/// leftover goes to the largest fractional remainders (ties broken in
/// train/val/test order).
pub fn largest_remainder(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let fr = [fractions.0, fractions.1, fractions.2];
    let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        quota[i] += 1;
    }
    (quota[0], quota[1], quota[2])
}
