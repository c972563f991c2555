//! The repeated-run protocol: run an experiment across a seed range and
//! report mean ± sample std per metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::confusion::ConfusionMatrix;
use crate::util::indexed_map;

/// Metrics from a single run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub f1_per_class: Vec<f64>,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub auc_ovr: f64,
    pub confusion: ConfusionMatrix,
}

/// Mean and (when runs > 1) sample standard deviation of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

/// `mean±std` with three decimals, matching table formatting; bare mean when
/// std is absent.
pub fn format_mean_std(m: &MeanStd) -> String {
    match m.std {
        Some(s) => format!("{:.3}±{:.3}", m.mean, s),
        None => format!("{:.3}", m.mean),
    }
}

/// Aggregated metrics block of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub f1_per_class: Vec<MeanStd>,
    pub f1_macro: MeanStd,
    pub f1_weighted: MeanStd,
    pub auc_ovr: MeanStd,
}

/// The full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub classes: Vec<String>,
    pub runs: usize,
    pub metrics: ReportMetrics,
    pub confusion_last_run: Vec<Vec<usize>>,
    pub config_digest: String,
    pub notes: Vec<String>,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    // Constant inputs have exactly zero sample deviation; short-circuit so
    // summation rounding cannot manufacture a tiny spread.
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return MeanStd {
            mean: values[0],
            std: (n > 1).then_some(0.0),
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    });
    MeanStd { mean, std }
}

/// Runs `experiment` with seeds `base_seed..base_seed + n_runs` (in parallel
/// when `threads > 1`; results are reduced in seed order) and aggregates the
/// metrics. Errors carry the failing run index and seed.
pub fn repeated_runs<F>(
    task: &str,
    classes: &[String],
    n_runs: usize,
    base_seed: u64,
    threads: usize,
    experiment: F,
) -> Result<MetricsReport>
where
    F: Fn(u64) -> Result<RunMetrics> + Sync,
{
    if n_runs == 0 {
        return Err(Error::InvalidParameter("repeated_runs needs n_runs >= 1".into()));
    }
    let results = indexed_map(n_runs, threads, |run| {
        let seed = base_seed + run as u64;
        experiment(seed).map_err(|e| Error::Run {
            run,
            seed,
            source: Box::new(e),
        })
    })?;

    let k = classes.len();
    for (run, r) in results.iter().enumerate() {
        if r.f1_per_class.len() != k || r.confusion.k() != k {
            return Err(Error::Metrics(format!(
                "run {run} reported {} classes, expected {k}",
                r.f1_per_class.len()
            )));
        }
    }
    let collect = |f: &dyn Fn(&RunMetrics) -> f64| -> Vec<f64> { results.iter().map(f).collect() };
    let f1_per_class = (0..k)
        .map(|c| mean_std(&collect(&|r| r.f1_per_class[c])))
        .collect();
    let metrics = ReportMetrics {
        f1_per_class,
        f1_macro: mean_std(&collect(&|r| r.f1_macro)),
        f1_weighted: mean_std(&collect(&|r| r.f1_weighted)),
        auc_ovr: mean_std(&collect(&|r| r.auc_ovr)),
    };
    Ok(MetricsReport {
        task: task.to_string(),
        classes: classes.to_vec(),
        runs: n_runs,
        metrics,
        confusion_last_run: results.last().expect("n_runs >= 1").confusion.rows(),
        config_digest: String::new(),
        notes: Vec::new(),
    })
}
