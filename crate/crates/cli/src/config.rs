//! Run configuration: one JSON document covering every pipeline stage, with
//! deep-merge from a config file and dotted `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use hmae_core::corpus::SizeDistribution;
use hmae_core::probe::{LabelMapping, ProbeConfig, SelectionMetric};
use hmae_core::vit::ViTConfig;
use hmae_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Loss-log cadence in steps.
    pub log_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 2000,
            batch: 8,
            lr: 1.5e-4,
            min_lr: 0.0,
            warmup_steps: 100,
            weight_decay: 0.05,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "training needs steps >= 1, batch >= 1, log_every >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("training lr must be positive, got {}", self.lr)));
        }
        if self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!(
                "training min_lr must lie in [0, lr], got {}",
                self.min_lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "training weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Number of crops to generate.
    pub count: usize,
    /// Coefficient-of-variation acceptance threshold.
    pub threshold: f64,
    pub seed: u64,
    pub dist: SizeDistribution,
    /// Label each crop with its source slide's name and stratify splits.
    pub label_by_slide: bool,
    /// Train/val/test fractions used when labels exist.
    pub split: [f64; 3],
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            count: 200,
            threshold: 0.05,
            seed: 0,
            dist: SizeDistribution::default(),
            label_by_slide: false,
            split: [0.7, 0.1, 0.2],
        }
    }
}

impl CorpusSection {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("corpus count must be >= 1".into()));
        }
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::Config(format!(
                "corpus threshold must be finite and non-negative, got {}",
                self.threshold
            )));
        }
        self.dist.validate()?;
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "corpus split fractions must be non-negative and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Task name recorded in the report.
    pub task: String,
    /// Number of repeated probe-training runs.
    pub runs: usize,
    pub seed: u64,
    /// F1 variant used for probe model selection and headline reporting.
    pub selection: SelectionMetric,
    /// Apply the coarse label map before probing.
    pub coarse: bool,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_learning_rate: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            task: "probe-eval".into(),
            runs: 10,
            seed: 0,
            selection: SelectionMetric::MacroF1,
            coarse: false,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            tsne_learning_rate: 200.0,
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("eval runs must be >= 1".into()));
        }
        if !(self.tsne_perplexity > 1.0) || self.tsne_iterations == 0 || !(self.tsne_learning_rate > 0.0)
        {
            return Err(Error::Config(
                "eval t-SNE settings need perplexity > 1, iterations >= 1, learning rate > 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of source slide PNGs.
    pub slides: PathBuf,
    /// Corpus output directory (images/ + manifest.csv).
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub report: PathBuf,
    pub projection: PathBuf,
    /// Optional scatter-plot PNG of the projection.
    pub projection_png: Option<PathBuf>,
    /// Attention-map output directory.
    pub attention: PathBuf,
    pub loss_log: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            slides: "slides".into(),
            corpus: "out/corpus".into(),
            checkpoint: "out/model.ckpt".into(),
            embeddings: "out/embeddings.bin".into(),
            report: "out/report.json".into(),
            projection: "out/projection.csv".into(),
            projection_png: None,
            attention: "out/attention".into(),
            loss_log: "out/loss.csv".into(),
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub training: TrainingConfig,
    pub corpus: CorpusSection,
    pub probe: ProbeConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
    /// Class names and optional coarse grouping. When absent, `embed`
    /// derives classes from the manifest's labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelMapping>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.corpus.validate()?;
        self.probe.validate()?;
        self.eval.validate()?;
        if let Some(labels) = &self.labels {
            labels.validate()?;
        }
        Ok(())
    }

    /// SHA-256 hex digest over every section except `paths`; identifies the
    /// experiment configuration in reports.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("paths");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named model presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 32² input, 8² patches, 64-dim encoder — seconds-scale smoke runs.
    Tiny,
    /// 64² input, four encoder blocks — small but non-trivial.
    Tiny64,
    /// The 224²/16² reference architecture.
    VitS16,
}

impl Preset {
    pub fn model(self) -> ViTConfig {
        match self {
            Preset::Tiny => ViTConfig::tiny(),
            Preset::Tiny64 => ViTConfig::tiny64(),
            Preset::VitS16 => ViTConfig::vit_s16(),
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("--set expects key.path=value, got '{spec}'"))
    })?;
    if path.is_empty() {
        return Err(Error::Config(format!("--set has an empty key in '{spec}'")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        if !slot.is_object() {
            *slot = Value::Object(serde_json::Map::new());
        }
        slot = slot
            .as_object_mut()
            .expect("just ensured object")
            .entry(key.to_string())
            .or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Builds the effective configuration: preset defaults, then the config
/// file (deep-merged), then `--set` overrides, then `--seed`.
pub fn load_config(
    preset: Option<Preset>,
    config_path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some(p) = preset {
        base.model = p.model();
    }
    let mut value = serde_json::to_value(&base)
        .map_err(|e| Error::Config(format!("default config failed to serialize: {e}")))?;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut value, overlay);
    }
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    if let Some(seed) = seed {
        cfg.training.seed = seed;
        cfg.corpus.seed = seed;
        cfg.probe.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model, ViTConfig::vit_s16());
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"training": {"steps": 10}, "eval": {"runs": 3, "selection": "weighted"}}"#,
        )
        .unwrap();
        let cfg = load_config(Some(Preset::Tiny), Some(&path), &[], None).unwrap();
        assert_eq!(cfg.training.steps, 10);
        assert_eq!(cfg.training.batch, TrainingConfig::default().batch);
        assert_eq!(cfg.eval.runs, 3);
        assert_eq!(cfg.eval.selection, SelectionMetric::WeightedF1);
        assert_eq!(cfg.model, ViTConfig::tiny());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"trainings": {"steps": 10}}"#).unwrap();
        let err = load_config(None, Some(&path), &[], None).unwrap_err();
        assert!(err.is_validation(), "{err}");
        std::fs::write(&path, r#"{"training": {"stps": 10}}"#).unwrap();
        assert!(load_config(None, Some(&path), &[], None).is_err());
    }

    #[test]
    fn set_overrides_parse_json_and_strings() {
        let cfg = load_config(
            Some(Preset::Tiny),
            None,
            &[
                "model.input_size=64".into(),
                "model.encoder_depth=4".into(),
                "eval.selection=weighted".into(),
                "corpus.split=[0.8,0.1,0.1]".into(),
                "eval.task=smoke".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.input_size, 64);
        assert_eq!(cfg.model.encoder_depth, 4);
        assert_eq!(cfg.eval.selection, SelectionMetric::WeightedF1);
        assert_eq!(cfg.corpus.split, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.eval.task, "smoke");
    }

    #[test]
    fn bad_set_specs_rejected() {
        assert!(load_config(None, None, &["model.input_size".into()], None).is_err());
        assert!(load_config(None, None, &["model.no_such=3".into()], None).is_err());
        assert!(load_config(None, None, &["model.input_size=abc".into()], None).is_err());
    }

    #[test]
    fn seed_flag_sets_every_section_seed() {
        let cfg = load_config(Some(Preset::Tiny), None, &[], Some(77)).unwrap();
        assert_eq!(cfg.training.seed, 77);
        assert_eq!(cfg.corpus.seed, 77);
        assert_eq!(cfg.probe.seed, 77);
        assert_eq!(cfg.eval.seed, 77);
    }

    #[test]
    fn digest_ignores_paths_but_tracks_model() {
        let a = load_config(Some(Preset::Tiny), None, &[], None).unwrap();
        let mut b = a.clone();
        b.paths.report = "elsewhere.json".into();
        assert_eq!(a.digest(), b.digest());
        let c = load_config(Some(Preset::Tiny64), None, &[], None).unwrap();
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn labels_section_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"labels": {"classes": ["a", "b"], "coarse": {"a": "g", "b": "g"}}}"#,
        )
        .unwrap();
        let cfg = load_config(Some(Preset::Tiny), Some(&path), &[], None).unwrap();
        let labels = cfg.labels.as_ref().unwrap();
        assert_eq!(labels.classes, vec!["a", "b"]);
        assert_eq!(labels.coarse_classes().unwrap(), vec!["g"]);
    }
}
