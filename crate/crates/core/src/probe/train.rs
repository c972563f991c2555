//! Linear and one-hidden-layer MLP probes over frozen embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::eval::{confusion, f1_scores};
use crate::probe::store::EmbeddingRecord;
use crate::rng::stream_rng;
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

/// Validation metric used to retain the best epoch's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[serde(rename = "macro")]
    MacroF1,
    #[serde(rename = "weighted")]
    WeightedF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden width; only used by the MLP probe.
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::Mlp,
            hidden_dim: 256,
            epochs: 40,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ProbeKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::InvalidParameter(
                "mlp probe needs hidden_dim >= 1".into(),
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter(
                "probe training needs epochs >= 1 and batch >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "probe learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// A trained classifier head. Weights live in a [`ParamStore`]:
/// `fc.w`, `fc.b` for linear; `fc1.w`, `fc1.b`, `fc2.w`, `fc2.b` for MLP.
#[derive(Debug)]
pub struct Probe {
    pub kind: ProbeKind,
    pub classes: Vec<String>,
    pub input_dim: usize,
    pub params: ParamStore,
}

impl Probe {
    /// Fresh probe with N(0, 0.02²) weights and zero biases.
    pub fn new(
        kind: ProbeKind,
        classes: Vec<String>,
        input_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a probe needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        if input_dim == 0 {
            return Err(Error::InvalidParameter("probe input_dim must be >= 1".into()));
        }
        let k = classes.len();
        let mut rng = stream_rng(seed, 0);
        let mut randn = |shape: Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    (z * 0.02) as f32
                })
                .collect();
            Tensor::new(data, shape)
        };
        let mut params = ParamStore::new();
        match kind {
            ProbeKind::Linear => {
                params.push("fc.w", randn(vec![input_dim, k])?)?;
                params.push("fc.b", Tensor::zeros(vec![k])?)?;
            }
            ProbeKind::Mlp => {
                if hidden_dim == 0 {
                    return Err(Error::InvalidParameter(
                        "mlp probe needs hidden_dim >= 1".into(),
                    ));
                }
                params.push("fc1.w", randn(vec![input_dim, hidden_dim])?)?;
                params.push("fc1.b", Tensor::zeros(vec![hidden_dim])?)?;
                params.push("fc2.w", randn(vec![hidden_dim, k])?)?;
                params.push("fc2.b", Tensor::zeros(vec![k])?)?;
            }
        }
        Ok(Probe {
            kind,
            classes,
            input_dim,
            params,
        })
    }

    /// Logits for a batch already registered on `tape` as `[n, input_dim]`.
    fn logits_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        match self.kind {
            ProbeKind::Linear => {
                let h = tape.matmul(x, vars[0])?;
                tape.add_row(h, vars[1])
            }
            ProbeKind::Mlp => {
                let h = tape.matmul(x, vars[0])?;
                let h = tape.add_row(h, vars[1])?;
                let h = tape.gelu(h)?;
                let h = tape.matmul(h, vars[2])?;
                tape.add_row(h, vars[3])
            }
        }
    }
}

fn batch_tensor(records: &[&EmbeddingRecord], dim: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut x = Vec::with_capacity(records.len() * dim);
    let mut y = Vec::with_capacity(records.len());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "probe batch",
                left: vec![r.vector.len()],
                right: vec![dim],
            });
        }
        x.extend_from_slice(&r.vector);
        y.push(r.label.ok_or_else(|| {
            Error::Probe(format!("record '{}' is unlabeled", r.id))
        })?);
    }
    Ok((x, y))
}

/// Softmax class probabilities and argmax labels (ties broken toward the
/// lowest class index) for `records`.
pub fn predict(probe: &Probe, records: &[EmbeddingRecord]) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    if records.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let dim = probe.input_dim;
    let mut x = Vec::with_capacity(records.len() * dim);
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: vec![r.vector.len()],
                right: vec![dim],
            });
        }
        x.extend_from_slice(&r.vector);
    }
    let mut tape = Tape::new();
    let vars = probe.params.bind(&mut tape);
    let xv = tape.constant(x, vec![records.len(), dim])?;
    let logits = probe.logits_on(&mut tape, &vars, xv)?;
    let probs = tape.softmax(logits, 1)?;
    let out = tape.tensor(probs);
    let k = probe.classes.len();
    let mut scores = Vec::with_capacity(records.len());
    let mut argmax = Vec::with_capacity(records.len());
    for row in out.data().chunks_exact(k) {
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        scores.push(row.to_vec());
        argmax.push(best);
    }
    Ok((scores, argmax))
}

fn f1_of(
    probe: &Probe,
    records: &[EmbeddingRecord],
    selection: SelectionMetric,
) -> Result<f64> {
    let (_, pred) = predict(probe, records)?;
    let truth: Vec<usize> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::Probe(format!("record '{}' is unlabeled", r.id))))
        .collect::<Result<_>>()?;
    let cm = confusion(&truth, &pred, &probe.classes)?;
    let scores = f1_scores(&cm);
    Ok(match selection {
        SelectionMetric::MacroF1 => scores.macro_f1,
        SelectionMetric::WeightedF1 => scores.weighted_f1,
    })
}

/// Trains a probe on the `train`-split records, retaining the weights of the
/// epoch with the best validation F1 (`selection` decides macro vs weighted).
/// The encoder is not involved: inputs are precomputed frozen embeddings.
pub fn train_probe(
    records: &[EmbeddingRecord],
    classes: &[String],
    cfg: &ProbeConfig,
    selection: SelectionMetric,
) -> Result<Probe> {
    cfg.validate()?;
    if classes.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "probe training needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let train: Vec<&EmbeddingRecord> = records
        .iter()
        .filter(|r| r.split == Some(Split::Train) && r.label.is_some())
        .collect();
    let val: Vec<EmbeddingRecord> = records
        .iter()
        .filter(|r| r.split == Some(Split::Val) && r.label.is_some())
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidParameter("no labeled train records".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidParameter("no labeled validation records".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for r in &train {
        let label = r.label.unwrap();
        if label >= classes.len() {
            return Err(Error::Probe(format!(
                "record '{}' has label id {label}, but there are {} classes",
                r.id,
                classes.len()
            )));
        }
        seen.insert(label);
    }
    if seen.len() < 2 {
        return Err(Error::InvalidParameter(
            "train split contains a single class; probes need at least two".into(),
        ));
    }
    for r in &val {
        if r.label.unwrap() >= classes.len() {
            return Err(Error::Probe(format!(
                "record '{}' has label id {}, but there are {} classes",
                r.id,
                r.label.unwrap(),
                classes.len()
            )));
        }
    }
    let dim = train[0].vector.len();

    let mut probe = Probe::new(cfg.kind, classes.to_vec(), dim, cfg.hidden_dim, cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    })?;

    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = probe.params.flatten();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, 1 + epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| train[i]).collect();
            let (x, y) = batch_tensor(&batch, dim)?;
            let mut tape = Tape::new();
            let vars = probe.params.bind(&mut tape);
            let xv = tape.constant(x, vec![batch.len(), dim])?;
            let logits = probe.logits_on(&mut tape, &vars, xv)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "probe loss became non-finite ({loss_val}) at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let grad_vecs: Vec<Vec<f32>> = vars
                .iter()
                .map(|&v| grads.or_zeros(v, tape.value(v).len()))
                .collect();
            opt.step(&mut probe.params, &grad_vecs)?;
        }
        let metric = f1_of(&probe, &val, selection)?;
        if metric > best_metric {
            best_metric = metric;
            best_params = probe.params.flatten();
        }
    }
    probe.params.unflatten(&best_params)?;
    Ok(probe)
}
