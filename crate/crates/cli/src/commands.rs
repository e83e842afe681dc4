//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use ssm::data::{
    generate_synthetic, list_images, load_checkpoint, load_image, load_normals, load_test,
    native_size, read_header, save_checkpoint, write_heatmap, Checkpoint, DatasetLayout, SynthSpec,
};
use ssm::eval::{assemble_report, evaluate, TestSample};
use ssm::inference::{detect, DetectionResult, InferenceConfig};
use ssm::masking::ScaleSet;
use ssm::metrics::LossWeights;
use ssm::net::{ArchConfig, ModelParams};
use ssm::rng::derive_seed;
use ssm::train::{
    split_validation, train, EpochRecord, ThresholdTable, TrainConfig, TrainObserver,
};

use crate::args::{
    Cli, Command, DetectArgs, EvalArgs, InferenceArgs, InspectArgs, SynthArgs, TrainArgs,
};

pub fn execute(cli: &Cli) -> Result<()> {
    let config = serde_json::to_value(&cli.command)?;
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a, config),
        Command::Detect(a) => detect_cmd(a, config),
        Command::Eval(a) => eval_cmd(a, config),
        Command::Inspect(a) => inspect(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        category: a
            .category
            .clone()
            .unwrap_or_else(|| a.family.name().to_string()),
        family: a.family,
        height: a.resolution.height,
        width: a.resolution.width,
        defects: a.defects.0.clone(),
        defect_size: (a.defect_min, a.defect_max),
        n_train: a.n_train,
        n_validation: a.n_val,
        n_test: a.n_test,
        seed: a.seed,
    };
    let manifest = generate_synthetic(&spec, &a.out)?;
    eprintln!(
        "wrote {} train, {} validation and {} test images ({} defective) to {}",
        spec.n_train,
        spec.n_validation,
        spec.n_test,
        manifest.defects.len(),
        a.out.join(&spec.category).display()
    );
    Ok(())
}

fn select_categories(layout: &DatasetLayout, only: Option<&str>) -> Result<Vec<(String, PathBuf)>> {
    match only {
        Some(name) => Ok(vec![(
            name.to_string(),
            layout.category(name)?.to_path_buf(),
        )]),
        None => Ok(layout.categories.clone()),
    }
}

/// Writes the epoch log and periodic checkpoints while training.
struct Recorder {
    dir: PathBuf,
    log: BufWriter<File>,
    every: usize,
    scales: ScaleSet,
    meta: Value,
    epoch_wall_s: Vec<f64>,
}

impl Recorder {
    fn partial(
        &self,
        params: &ModelParams<f32>,
        path: &Path,
        epoch: Option<usize>,
    ) -> ssm::error::Result<()> {
        let mut meta = self.meta.clone();
        meta["partial"] = json!(true);
        meta["epochs_completed"] = json!(epoch);
        let ckpt = Checkpoint {
            params: params.clone(),
            scales: self.scales.clone(),
            thresholds: ThresholdTable::new(),
            meta,
        };
        save_checkpoint(&ckpt, path)
    }
}

impl TrainObserver for Recorder {
    fn epoch_end(
        &mut self,
        record: &EpochRecord,
        params: &ModelParams<f32>,
    ) -> ssm::error::Result<()> {
        let io = |e: std::io::Error| {
            ssm::error::Error::Precondition(format!("writing training log: {e}"))
        };
        let line = json!({"epoch": record.epoch, "lr": record.lr, "loss": record.loss});
        writeln!(self.log, "{line}").map_err(io)?;
        self.log.flush().map_err(io)?;
        self.epoch_wall_s.push(record.wall_time_s);
        eprintln!(
            "epoch {:>4}  lr {:.3e}  loss {:.5}  ({:.1} s)",
            record.epoch + 1,
            record.lr,
            record.loss.total,
            record.wall_time_s
        );
        let done = record.epoch + 1;
        if self.every > 0 && done % self.every == 0 {
            let path = self.dir.join(format!("epoch_{done:04}.ckpt"));
            self.partial(params, &path, Some(done))?;
        }
        Ok(())
    }

    fn aborted(&mut self, last_good: &ModelParams<f32>, error: &ssm::error::Error) {
        let path = self.dir.join("last_good.ckpt");
        match self.partial(last_good, &path, Some(self.epoch_wall_s.len())) {
            Ok(()) => eprintln!("training aborted ({error}); saved {}", path.display()),
            Err(e) => eprintln!(
                "training aborted ({error}); could not save {}: {e}",
                path.display()
            ),
        }
    }
}

fn train_cmd(a: &TrainArgs, config: Value) -> Result<()> {
    let layout = DatasetLayout::discover(&a.data)?;
    for (name, dir) in select_categories(&layout, a.category.as_deref())? {
        let (height, width) = match a.resolution {
            Some(r) => (r.height, r.width),
            None => native_size(&dir)?,
        };
        a.scales.validate_for(height, width)?;
        let arch = ArchConfig::default()
            .with_resolution(height, width)
            .with_widths(a.widths.0.clone());
        arch.validate()?;
        let cfg = TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr0: a.lr,
            lr_halving_period: a.lr_halving,
            weight_decay: a.weight_decay,
            weights: LossWeights::new(a.lambda1, a.lambda2, a.lambda3, a.lambda4)?,
            scales: a.scales.clone(),
            p_mask: a.p_mask,
            seed: a.seed,
            ..TrainConfig::default()
        };
        cfg.validate()?;

        let (images, validation) = match load_normals(&dir, height, width)? {
            (images, Some(val)) => (images, val),
            (images, None) => {
                split_validation(images, a.val_fraction, derive_seed(a.seed, &[0x5a11]))?
            }
        };
        eprintln!(
            "{name}: training on {} images, {} for thresholds, {height}x{width}",
            images.len(),
            validation.len()
        );
        let out_dir = a.out.join(&name);
        fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let log_path = out_dir.join("train_log.jsonl");
        let log =
            File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
        // No paths here, so the checkpoint depends only on data and settings.
        let meta = json!({
            "category": name,
            "train": cfg,
            "n_train": images.len(),
            "n_validation": validation.len(),
        });
        let mut recorder = Recorder {
            dir: out_dir.clone(),
            log: BufWriter::new(log),
            every: a.checkpoint_every,
            scales: cfg.scales.clone(),
            meta: meta.clone(),
            epoch_wall_s: Vec::new(),
        };
        let start = Instant::now();
        let outcome = train(&arch, &images, &validation, &cfg, &mut recorder)?;
        let total_s = start.elapsed().as_secs_f64();

        let ckpt = Checkpoint {
            params: outcome.params,
            scales: cfg.scales.clone(),
            thresholds: outcome.thresholds.clone(),
            meta,
        };
        let ckpt_path = out_dir.join("model.ckpt");
        save_checkpoint(&ckpt, &ckpt_path)?;
        let final_loss = outcome.log.last().map(|r| r.loss);
        write_json(
            &out_dir.join("train.json"),
            &json!({
                "category": name,
                "checkpoint": "model.ckpt",
                "thresholds": outcome.thresholds,
                "final_loss": final_loss,
                "num_params": ckpt.params.num_params(),
                "config": config,
            }),
        )?;
        write_json(
            &out_dir.join("timing.json"),
            &json!({"total_s": total_s, "epoch_wall_s": recorder.epoch_wall_s}),
        )?;
        eprintln!("{name}: saved {} in {total_s:.1} s", ckpt_path.display());
    }
    Ok(())
}

fn inference_config(a: &InferenceArgs) -> Result<InferenceConfig> {
    let cfg = InferenceConfig {
        max_iters: a.max_iters,
        numerator: a.numerator.into(),
        ..InferenceConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn detection_scales(a: &InferenceArgs, ckpt: &Checkpoint) -> Result<ScaleSet> {
    let scales = a.scales.clone().unwrap_or_else(|| ckpt.scales.clone());
    for k in scales.iter() {
        ckpt.thresholds
            .get(k)
            .with_context(|| format!("the checkpoint has no threshold for grid size {k}"))?;
    }
    Ok(scales)
}

fn image_json(det: &DetectionResult) -> Value {
    let per = |f: &dyn Fn(&ssm::inference::RefinementState) -> Value| {
        det.scales
            .iter()
            .map(|s| (s.cell.to_string(), f(s)))
            .collect::<serde_json::Map<_, _>>()
    };
    json!({
        "epsilon": det.epsilon,
        "epsilon_k": per(&|s| json!(s.epsilon)),
        "iterations": per(&|s| json!(s.iterations)),
        "converged": per(&|s| json!(s.converged)),
    })
}

fn detect_cmd(a: &DetectArgs, config: Value) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = inference_config(&a.inference)?;
    let scales = detection_scales(&a.inference, &ckpt)?;
    let paths = match (&a.image, &a.data) {
        (Some(p), _) => vec![p.clone()],
        (None, Some(d)) => list_images(d)?,
        (None, None) => bail!("either --image or --data is required"),
    };
    let (h, w) = (ckpt.params.arch.height, ckpt.params.arch.width);
    let results: Vec<(PathBuf, DetectionResult)> = paths
        .par_iter()
        .map(|p| -> Result<_> {
            let img = load_image(p, h, w)?;
            let det = detect(&ckpt.params, &ckpt.thresholds, &img, &scales, &cfg)
                .with_context(|| format!("detecting {}", p.display()))?;
            Ok((p.clone(), det))
        })
        .collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(results.len());
    for (p, det) in &results {
        let mut entry = image_json(det);
        entry["path"] = json!(p);
        if let Some(dir) = &a.inference.heatmap_dir {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            let map = dir.join(format!("{stem}.png"));
            write_heatmap(&det.scores, &map, a.inference.normalize_heatmaps)?;
            entry["heatmap"] = json!(map);
        }
        images.push(entry);
    }
    let out = json!({"format_version": 1, "images": images, "config": config});
    match &a.out {
        Some(path) => write_json(path, &out),
        None => {
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
    }
}

fn category_checkpoint(path: &Path, category: &str, n_categories: usize) -> Result<PathBuf> {
    if path.is_dir() {
        return Ok(path.join(category).join("model.ckpt"));
    }
    if n_categories > 1 {
        bail!(
            "{} is a single checkpoint but {n_categories} categories are selected; \
             pass a train output directory or --category",
            path.display()
        );
    }
    Ok(path.to_path_buf())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn eval_cmd(a: &EvalArgs, config: Value) -> Result<()> {
    let cfg = inference_config(&a.inference)?;
    let layout = DatasetLayout::discover(&a.data)?;
    let categories = select_categories(&layout, a.category.as_deref())?;
    let dataset = layout
        .root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());

    let mut samples: Vec<TestSample> = Vec::new();
    let mut detections: Vec<DetectionResult> = Vec::new();
    let mut timing = Vec::new();
    for (name, dir) in &categories {
        let ckpt_path = category_checkpoint(&a.checkpoint, name, categories.len())?;
        let ckpt = load_checkpoint(&ckpt_path)?;
        let scales = detection_scales(&a.inference, &ckpt)?;
        let (h, w) = (ckpt.params.arch.height, ckpt.params.arch.width);
        let test = load_test(name, dir, &layout.root, h, w)?;
        let ev = evaluate(
            &ckpt.params,
            &ckpt.thresholds,
            &dataset,
            &test,
            &scales,
            &cfg,
            Value::Null,
        )?;
        eprintln!(
            "{name}: {} images in {:.1} s ({:.0} ms/image)",
            ev.timing.n_images, ev.timing.total_s, ev.timing.mean_image_ms
        );
        timing.push(json!({"category": name, "timing": ev.timing}));
        samples.extend(test);
        detections.extend(ev.detections);
    }

    if let Some(dir) = &a.inference.heatmap_dir {
        for (s, det) in samples.iter().zip(&detections) {
            write_heatmap(
                &det.scores,
                &dir.join(&s.id),
                a.inference.normalize_heatmaps,
            )?;
        }
    }
    let report = assemble_report(&dataset, &samples, &detections, config)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.out, report.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    let csv = a.out.with_extension("csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_json(&sibling(&a.out, "_timing.json"), &timing)?;

    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    for row in &report.categories {
        println!(
            "{:<20} image AUC {}  pixel AUC {}",
            row.category,
            fmt(row.image_auc.value()),
            fmt(row.pixel_auc.as_ref().and_then(|p| p.value()))
        );
    }
    println!(
        "{:<20} image AUC {}  pixel AUC {}",
        "mean",
        fmt(report.mean.image_auc),
        fmt(report.mean.pixel_auc)
    );
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let header = read_header(&a.checkpoint)?;
    let num_params: usize = header.tensors.iter().map(|t| t.len).sum();
    let mut value = serde_json::to_value(&header)?;
    value["num_params"] = json!(num_params);
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}
