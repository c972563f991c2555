//! The six pipeline commands. Each takes the effective [`RunConfig`] plus the
//! shared `--threads` setting and reads/writes the paths it names.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use hmae_core::checkpoint::{load_checkpoint, load_model_expecting, save_checkpoint};
use hmae_core::corpus::{
    generate_corpus, load_rgb_tensor, resize_bilinear_rect, stratified_split, CorpusManifest,
    GenerateConfig, SlideImage, Split,
};
use hmae_core::eval::{
    auc_ovr, confusion, export_projection, export_report, f1_scores, format_mean_std,
    render_projection_png, repeated_runs, tsne, RunMetrics, TsneConfig,
};
use hmae_core::probe::{
    coarsen_labels, embed_corpus, predict, read_embeddings, train_probe, write_embeddings,
    EmbeddingRecord, LabelMapping, ProbeConfig, ProbeKind,
};
use hmae_core::rng::{stream_rng, stream_seed};
use hmae_core::tensor::{AdamW, AdamWConfig, LrSchedule, Tensor};
use hmae_core::vit::export_attention_maps;
use hmae_core::{Error, Result};

use crate::config::RunConfig;

/// Stream tag for batch-composition RNG during pretraining.
const BATCH_STREAM: u64 = 0xBA7C4;
/// Stream tag for the stratified-split shuffle.
const SPLIT_STREAM: u64 = 0x5B117;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.corpus.join("manifest.csv")
}

fn classes_sidecar(embeddings: &Path) -> PathBuf {
    let mut name = embeddings.file_name().unwrap_or_default().to_os_string();
    name.push(".classes.json");
    embeddings.with_file_name(name)
}

/// Generates the crop corpus from the slides directory and, when
/// `corpus.label_by_slide` is set, labels rows by source slide and assigns
/// stratified splits.
pub fn cmd_generate(cfg: &RunConfig, threads: usize) -> Result<()> {
    let slides_dir = &cfg.paths.slides;
    let entries = std::fs::read_dir(slides_dir).map_err(|e| Error::io(slides_dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no slide images (.png) found in {}",
            slides_dir.display()
        )));
    }
    let mut slides = Vec::with_capacity(files.len());
    for f in &files {
        slides.push(SlideImage::load(f)?);
    }

    let gen = GenerateConfig {
        count: cfg.corpus.count,
        threshold: cfg.corpus.threshold,
        input_size: cfg.model.input_size,
        seed: cfg.corpus.seed,
        threads,
    };
    let (mut manifest, stats) = generate_corpus(&slides, &cfg.corpus.dist, &gen, &cfg.paths.corpus)?;

    if cfg.corpus.label_by_slide {
        for row in &mut manifest.rows {
            row.label = Some(row.slide.clone());
        }
        let [ft, fv, fe] = cfg.corpus.split;
        stratified_split(
            &mut manifest,
            (ft, fv, fe),
            stream_seed(cfg.corpus.seed, SPLIT_STREAM),
        )?;
        manifest.write(&manifest_path(cfg))?;
    }

    println!(
        "generated {} crops from {} slides ({} candidates examined, acceptance rate {:.4})",
        manifest.rows.len(),
        slides.len(),
        stats.examined,
        stats.acceptance_rate()
    );
    println!("manifest: {}", manifest_path(cfg).display());
    Ok(())
}

fn load_training_image(path: &Path, input_size: usize) -> Result<Tensor> {
    let t = load_rgb_tensor(path)?;
    let shape = t.shape().to_vec();
    if shape[0] == input_size && shape[1] == input_size {
        return Ok(t);
    }
    let data = resize_bilinear_rect(t.data(), shape[1], shape[0], 3, input_size, input_size)?;
    Tensor::new(data, vec![input_size, input_size, 3])
}

/// Pretrains the masked autoencoder on the corpus, logging `step,loss` rows
/// and writing the checkpoint atomically at the end.
pub fn cmd_pretrain(cfg: &RunConfig, threads: usize, resume: bool) -> Result<()> {
    let manifest = CorpusManifest::read(&manifest_path(cfg))?;
    if manifest.rows.is_empty() {
        return Err(Error::Config("manifest has no rows; run generate first".into()));
    }
    let input = cfg.model.input_size;
    let mut images = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        images.push(load_training_image(&manifest.image_path(row), input)?);
    }

    let ckpt_path = &cfg.paths.checkpoint;
    let (mut model, start_step, base_seed) = if resume {
        let (model, step, seed) = load_model_expecting(ckpt_path, &cfg.model)?;
        println!("resuming from {} at step {step}", ckpt_path.display());
        (model, step, seed)
    } else {
        let seed = cfg.training.seed;
        (
            hmae_core::vit::MaeModel::new(cfg.model.clone(), seed)?,
            0,
            seed,
        )
    };
    let total = cfg.training.steps;
    if start_step >= total {
        println!(
            "checkpoint is already at step {start_step} (target {total}); nothing to do"
        );
        return Ok(());
    }

    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.training.lr,
        weight_decay: cfg.training.weight_decay,
        ..AdamWConfig::default()
    })?;
    let schedule = LrSchedule {
        base_lr: cfg.training.lr,
        min_lr: cfg.training.min_lr,
        warmup_steps: cfg.training.warmup_steps,
        total_steps: total,
    };

    ensure_parent(&cfg.paths.loss_log)?;
    let mut log: Box<dyn Write> = if resume && cfg.paths.loss_log.exists() {
        Box::new(
            std::fs::OpenOptions::new()
                .append(true)
                .open(&cfg.paths.loss_log)
                .map_err(|e| Error::io(&cfg.paths.loss_log, e))?,
        )
    } else {
        let mut f = std::fs::File::create(&cfg.paths.loss_log)
            .map_err(|e| Error::io(&cfg.paths.loss_log, e))?;
        writeln!(f, "step,loss").map_err(|e| Error::io(&cfg.paths.loss_log, e))?;
        Box::new(f)
    };

    let batch = cfg.training.batch;
    let mut final_loss = f32::NAN;
    for step in start_step..total {
        opt.cfg.lr = schedule.lr_at(step);
        let mut rng = stream_rng(stream_seed(base_seed, BATCH_STREAM), step);
        let chosen: Vec<Tensor> = (0..batch)
            .map(|_| images[rng.gen_range(0..images.len())].clone())
            .collect();
        let loss = model.pretrain_step(&chosen, step, base_seed, &mut opt, threads)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became non-finite ({loss}) at step {}",
                step + 1
            )));
        }
        final_loss = loss;
        let done = step + 1;
        if done % cfg.training.log_every == 0 || done == total {
            writeln!(log, "{done},{loss}").map_err(|e| Error::io(&cfg.paths.loss_log, e))?;
        }
    }
    drop(log);

    ensure_parent(ckpt_path)?;
    save_checkpoint(&model, total, base_seed, ckpt_path)?;
    println!("trained {} steps; final loss {final_loss}", total - start_step);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// Derives the label mapping for embedding: the config's `labels` section if
/// present, otherwise the sorted distinct labels in the manifest.
fn mapping_for_manifest(cfg: &RunConfig, manifest: &CorpusManifest) -> Result<(LabelMapping, bool)> {
    if let Some(m) = &cfg.labels {
        return Ok((m.clone(), true));
    }
    let mut classes: Vec<String> = manifest
        .rows
        .iter()
        .filter_map(|r| r.label.clone())
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        // No labels anywhere; a placeholder keeps the store writable.
        return Ok((LabelMapping::new(vec!["unlabeled".into()])?, false));
    }
    Ok((LabelMapping::new(classes)?, true))
}

/// Embeds every manifest row with the frozen checkpointed encoder and writes
/// the embedding store (plus a `.classes.json` sidecar naming the labels).
pub fn cmd_embed(cfg: &RunConfig, threads: usize) -> Result<()> {
    let ckpt = load_checkpoint(&cfg.paths.checkpoint)?;
    let model = ckpt.into_model()?;
    let manifest = CorpusManifest::read(&manifest_path(cfg))?;
    let (mapping, labeled) = mapping_for_manifest(cfg, &manifest)?;

    let records = embed_corpus(&model, &manifest, &mapping, threads)?;
    let dim = model.config().encoder_dim;
    ensure_parent(&cfg.paths.embeddings)?;
    write_embeddings(&records, dim, &cfg.paths.embeddings)?;
    if labeled {
        let sidecar = classes_sidecar(&cfg.paths.embeddings);
        let mut body = serde_json::to_vec_pretty(&mapping)?;
        body.push(b'\n');
        std::fs::write(&sidecar, body).map_err(|e| Error::io(&sidecar, e))?;
    }

    println!(
        "embedded {} regions (dim {dim}) -> {}",
        records.len(),
        cfg.paths.embeddings.display()
    );
    Ok(())
}

/// Loads the label mapping for evaluation: config `labels` first, then the
/// embed sidecar.
fn mapping_for_eval(cfg: &RunConfig) -> Result<LabelMapping> {
    if let Some(m) = &cfg.labels {
        return Ok(m.clone());
    }
    let sidecar = classes_sidecar(&cfg.paths.embeddings);
    let text = std::fs::read_to_string(&sidecar).map_err(|_| {
        Error::Config(format!(
            "no label mapping: provide a `labels` config section or keep {} next to the embeddings",
            sidecar.display()
        ))
    })?;
    let mapping: LabelMapping = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("sidecar {} is invalid: {e}", sidecar.display())))?;
    mapping.validate()?;
    Ok(mapping)
}

fn eval_records(cfg: &RunConfig) -> Result<(Vec<EmbeddingRecord>, Vec<String>, LabelMapping)> {
    let (records, _dim) = read_embeddings(&cfg.paths.embeddings)?;
    let mapping = mapping_for_eval(cfg)?;
    if cfg.eval.coarse {
        let (coarsened, classes) = coarsen_labels(&records, &mapping)?;
        Ok((coarsened, classes, mapping))
    } else {
        let classes = mapping.classes.clone();
        Ok((records, classes, mapping))
    }
}

/// Trains probes under the repeated-run protocol and writes the metrics
/// report.
pub fn cmd_probe_eval(cfg: &RunConfig, threads: usize) -> Result<()> {
    let (records, classes, _mapping) = eval_records(cfg)?;
    let test: Vec<EmbeddingRecord> = records
        .iter()
        .filter(|r| r.split == Some(Split::Test) && r.label.is_some())
        .cloned()
        .collect();
    if test.is_empty() {
        return Err(Error::Config(
            "no labeled test-split records; generate with labels and splits first".into(),
        ));
    }
    let k = classes.len();

    let experiment = |seed: u64| -> Result<RunMetrics> {
        let pcfg = ProbeConfig {
            seed,
            ..cfg.probe.clone()
        };
        let probe = train_probe(&records, &classes, &pcfg, cfg.eval.selection)?;
        let (scores, pred) = predict(&probe, &test)?;
        let truth: Vec<usize> = test.iter().map(|r| r.label.expect("filtered")).collect();
        let cm = confusion(&truth, &pred, &classes)?;
        let f1 = f1_scores(&cm);
        // Renormalize each probability row in f64 so AUC's row-sum check
        // cannot trip on accumulated f32 rounding.
        let mut flat = Vec::with_capacity(scores.len() * k);
        for row in &scores {
            let sum: f64 = row.iter().map(|v| *v as f64).sum();
            flat.extend(row.iter().map(|v| *v as f64 / sum));
        }
        let auc = auc_ovr(&truth, &flat, k)?;
        Ok(RunMetrics {
            f1_per_class: f1.per_class,
            f1_macro: f1.macro_f1,
            f1_weighted: f1.weighted_f1,
            auc_ovr: auc.macro_auc,
            confusion: cm,
        })
    };

    let mut report = repeated_runs(
        &cfg.eval.task,
        &classes,
        cfg.eval.runs,
        cfg.eval.seed,
        threads,
        experiment,
    )?;
    report.config_digest = cfg.digest();
    report.notes = vec![
        format!(
            "probe={}",
            match cfg.probe.kind {
                ProbeKind::Linear => "linear",
                ProbeKind::Mlp => "mlp",
            }
        ),
        format!("selection={:?}", cfg.eval.selection),
        format!("coarse={}", cfg.eval.coarse),
        "undefined F1 (no predictions and no truths for a class) reported as 0".into(),
    ];
    ensure_parent(&cfg.paths.report)?;
    export_report(&report, &cfg.paths.report)?;

    println!("classes: {}", classes.join(", "));
    println!(
        "macro F1 {}  weighted F1 {}  AUC {}  over {} runs",
        format_mean_std(&report.metrics.f1_macro),
        format_mean_std(&report.metrics.f1_weighted),
        format_mean_std(&report.metrics.auc_ovr),
        report.runs
    );
    println!("report: {}", cfg.paths.report.display());
    Ok(())
}

/// Renders per-head (and mean) CLS attention heatmaps for one image.
pub fn cmd_attend(cfg: &RunConfig, image: &Path) -> Result<()> {
    let ckpt = load_checkpoint(&cfg.paths.checkpoint)?;
    let model = ckpt.into_model()?;
    let input = model.config().input_size;
    let tensor = load_training_image(image, input)?;
    let maps = model.attention_maps(&tensor)?;
    let paths = export_attention_maps(&maps, input, &cfg.paths.attention)?;
    println!(
        "wrote {} attention maps ({} heads + mean) to {}",
        paths.len(),
        paths.len() - 1,
        cfg.paths.attention.display()
    );
    Ok(())
}

/// Projects the embedding store to 2-D with t-SNE and writes the CSV (and an
/// optional scatter PNG).
pub fn cmd_project(cfg: &RunConfig) -> Result<()> {
    let (records, dim) = read_embeddings(&cfg.paths.embeddings)?;
    let mapping = mapping_for_eval(cfg).ok();
    let (records, classes) = match (&mapping, cfg.eval.coarse) {
        (Some(m), true) => {
            let (r, c) = coarsen_labels(&records, m)?;
            (r, Some(c))
        }
        (Some(m), false) => (records, Some(m.classes.clone())),
        (None, _) => (records, None),
    };

    let n = records.len();
    let mut data = Vec::with_capacity(n * dim);
    for r in &records {
        data.extend(r.vector.iter().map(|v| *v as f64));
    }
    let projection = tsne(
        &data,
        n,
        dim,
        &TsneConfig {
            perplexity: cfg.eval.tsne_perplexity,
            iterations: cfg.eval.tsne_iterations,
            learning_rate: cfg.eval.tsne_learning_rate,
            seed: cfg.eval.seed,
        },
    )?;

    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let labels: Vec<Option<String>> = records
        .iter()
        .map(|r| {
            r.label.map(|id| match &classes {
                Some(c) if id < c.len() => c[id].clone(),
                _ => id.to_string(),
            })
        })
        .collect();
    ensure_parent(&cfg.paths.projection)?;
    export_projection(&ids, &projection.points, &labels, &cfg.paths.projection)?;
    if let Some(png) = &cfg.paths.projection_png {
        ensure_parent(png)?;
        render_projection_png(&projection.points, &labels, 800, png)?;
    }

    println!(
        "projected {n} embeddings (final KL {:.4}) -> {}",
        projection.kl,
        cfg.paths.projection.display()
    );
    Ok(())
}
