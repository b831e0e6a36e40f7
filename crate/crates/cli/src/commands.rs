use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use lapseg_core::audit::{audit_suite, AuditOptions};
use lapseg_core::data::{
    load_image, load_mask, remap_to_single9, resize_image, resize_mask, save_mask, Dataset, DatasetConfig, Manifest,
    ManifestEntry, NormalizationStats, Palette, StatsAccumulator, Taxonomy,
};
use lapseg_core::loss::DiceLoss;
use lapseg_core::metrics::{metrics, predict_labelmap, ConfusionMatrix, MetricsReport};
use lapseg_core::model::{self, transfer_weights, Checkpoint, Head, Model, ModelConfig};
use lapseg_core::optim::{AdamConfig, AdamState, LrSchedule};
use lapseg_core::train::{JsonLog, TrainOptions, Trainer};
use rayon::prelude::*;

use crate::config::{RunConfig, Task};
use crate::exit::Failure;

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.task {
        Task::Pretrain => cmd_pretrain(cfg),
        Task::Train => cmd_train(cfg),
        Task::Eval => cmd_eval(cfg).map(|_| ()),
        Task::Predict => cmd_predict(cfg),
        Task::Remap => cmd_remap(cfg),
        Task::Stats => cmd_stats(cfg).map(|_| ()),
        Task::Gradcheck => cmd_gradcheck(cfg),
    }
}

fn manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.manifest.as_ref().ok_or_else(|| Failure::usage("no manifest given"))?;
    let m = Manifest::load(path).with_context(|| format!("manifest {}", path.display()))?;
    if m.is_empty() {
        return Err(Failure::usage("empty manifest").into());
    }
    Ok(m)
}

fn stats(cfg: &RunConfig) -> Result<NormalizationStats> {
    match &cfg.stats {
        Some(p) => NormalizationStats::load(p).with_context(|| format!("stats file {}", p.display())),
        None => Ok(NormalizationStats::default()),
    }
}

fn palette(cfg: &RunConfig) -> Result<Option<Palette>> {
    cfg.palette
        .as_ref()
        .map(|p| Palette::load(p).with_context(|| format!("palette {}", p.display())))
        .transpose()
}

fn open_log(cfg: &RunConfig) -> Result<JsonLog> {
    let log = match &cfg.log {
        Some(p) => JsonLog::append_file(p)?,
        None => JsonLog::new(Box::new(std::io::stdout())),
    };
    Ok(if cfg.deterministic { log.without_clock() } else { log })
}

fn dataset(cfg: &RunConfig, masks: bool, shuffle: bool, augment: bool) -> Result<Dataset> {
    let dc = DatasetConfig {
        batch_size: cfg.batch_size,
        shuffle,
        seed: cfg.seed,
        augment,
        image_size: cfg.image_size,
        taxonomy: cfg.taxonomy,
        masks,
    };
    Ok(Dataset::new(manifest(cfg)?, dc, stats(cfg)?, palette(cfg)?)?)
}

fn check_geometry(model: &Model<f32>, side: usize) -> Result<()> {
    model
        .plan(lapseg_core::Shape::new(1, 3, side, side))
        .map_err(|e| Failure::usage(format!("input size {side} does not fit the network: {e}")))?;
    Ok(())
}

fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        epochs: cfg.epochs,
        schedule: LrSchedule::new(cfg.initial_lr, cfg.lr_halving_period),
        loss: cfg.loss,
        dice: DiceLoss { excluded: cfg.dice_excluded_classes.clone(), ..DiceLoss::default() },
        checkpoint_every: cfg.checkpoint_every,
        checkpoint_path: cfg.checkpoint_out.clone(),
        log_every: cfg.log_every,
        max_steps: cfg.max_steps,
    }
}

fn adam(cfg: &RunConfig) -> AdamState<f32> {
    AdamState::new(AdamConfig { lr: cfg.initial_lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() })
}

fn fit(mut trainer: Trainer, data: &Dataset, log: &mut JsonLog) -> Result<Trainer> {
    log.event("start", format!("{} parameters, {} samples per epoch", trainer.model.param_count(), data.samples_per_epoch()))?;
    for s in trainer.fit(data, log)? {
        log.event("epoch", format!("epoch {} lr {} mean loss {} ({} steps, {} skipped)", s.epoch, s.lr, s.mean_loss, s.steps, s.skipped))?;
    }
    log.flush()?;
    Ok(trainer)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let data = dataset(cfg, false, true, cfg.augment)?;
    let mc = ModelConfig::reconstruction().with_widths(cfg.encoder_filters).with_seed(cfg.seed);
    let model = Model::build(mc)?;
    check_geometry(&model, if cfg.augment { lapseg_core::data::CROP_SIZE } else { cfg.image_size })?;
    let mut log = open_log(cfg)?;
    fit(Trainer::new(model, adam(cfg), train_options(cfg))?, &data, &mut log)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let nc = cfg.num_classes;
    let data = dataset(cfg, true, true, cfg.augment)?;
    let mut log = open_log(cfg)?;
    let options = train_options(cfg);
    let trainer = match &cfg.checkpoint_in {
        None => {
            let mc = ModelConfig::segmentation(nc).with_widths(cfg.encoder_filters).with_seed(cfg.seed);
            Trainer::new(Model::build(mc)?, adam(cfg), options)?
        }
        Some(path) => {
            let ckpt = model::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
            match ckpt.config.head {
                Head::Reconstruction => {
                    let mc = ModelConfig::segmentation(nc).with_widths(cfg.encoder_filters).with_seed(cfg.seed);
                    let (m, report) = transfer_weights(&ckpt, mc)?;
                    log.event("transfer", report.to_string())?;
                    Trainer::new(m, adam(cfg), options)?
                }
                Head::Segmentation => {
                    if ckpt.config.num_classes != nc {
                        return Err(Failure::usage(format!(
                            "checkpoint {} predicts {} classes, configuration asks for {nc}",
                            path.display(),
                            ckpt.config.num_classes
                        ))
                        .into());
                    }
                    let t = Trainer::resume(&ckpt, options)?;
                    log.event("resume", format!("resuming after epoch {} (step {})", t.epoch, t.step()))?;
                    t
                }
            }
        }
    };
    check_geometry(&trainer.model, if cfg.augment { lapseg_core::data::CROP_SIZE } else { cfg.image_size })?;
    fit(trainer, &data, &mut log)?;
    Ok(())
}

fn segmentation_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint_in.as_ref().ok_or_else(|| Failure::usage("no checkpoint given"))?;
    let ckpt = model::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    if ckpt.config.head != Head::Segmentation {
        return Err(Failure::usage(format!("{} holds a reconstruction network", path.display())).into());
    }
    let nc = ckpt.config.num_classes;
    if nc > cfg.taxonomy.len() {
        return Err(Failure::usage(format!("checkpoint predicts {nc} classes, {} has {}", cfg.taxonomy, cfg.taxonomy.len())).into());
    }
    if nc != cfg.num_classes && cfg.num_classes != cfg.taxonomy.len() {
        return Err(Failure::usage(format!("checkpoint predicts {nc} classes, configuration asks for {}", cfg.num_classes)).into());
    }
    Ok(ckpt)
}

fn unix_time() -> String {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs().to_string()).unwrap_or_default()
}

/// Evaluates on the resize-only path and writes `report.csv` / `report.json`
/// under `out_dir`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let ckpt = segmentation_checkpoint(cfg)?;
    let nc = ckpt.config.num_classes;
    let mut model = ckpt.to_model()?;
    check_geometry(&model, cfg.image_size)?;
    let data = dataset(cfg, true, false, false)?;
    let mut cm = ConfusionMatrix::new(nc);
    for batch in data.epoch(0) {
        let batch = batch?;
        let probs = model.infer(&batch.images)?;
        let pred = predict_labelmap(&probs, cfg.taxonomy)?;
        let truth = batch.labels.as_ref().ok_or_else(|| Failure::data("evaluation needs masks"))?;
        for ((p, t), id) in pred.iter().zip(truth).zip(&batch.ids) {
            cm.accumulate(p, t).with_context(|| format!("manifest entry {}", id.entry))?;
        }
    }
    let names = &cfg.taxonomy.classes()[..nc];
    let mut report = metrics(&cm, names, cfg.undefined_policy)?
        .with_provenance("checkpoint", cfg.checkpoint_in.as_ref().map(|p| p.display().to_string()).unwrap_or_default())
        .with_provenance("manifest", cfg.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default())
        .with_provenance("image_size", cfg.image_size.to_string())
        .with_provenance("epoch", ckpt.meta.epoch.to_string());
    if !cfg.deterministic {
        report = report.with_provenance("created", unix_time());
    }
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    report.write_csv(cfg.out_dir.join("report.csv"))?;
    report.write_json(cfg.out_dir.join("report.json"))?;
    for row in report.table_rows() {
        println!("{:<14}{:>8}{:>8}{:>8}{:>8}", row[0], row[1], row[2], row[3], row[4]);
    }
    Ok(report)
}

fn unique_stem(path: &Path, seen: &mut BTreeSet<String>) -> Result<String> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if !seen.insert(stem.clone()) {
        return Err(Failure::data(format!("two inputs share the output name {stem:?}")).into());
    }
    Ok(stem)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Writes `<stem>.pgm` (class indices) and `<stem>.ppm` (palette colors)
/// at each input's own resolution, plus a manifest pairing inputs with the
/// index masks.
pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let ckpt = segmentation_checkpoint(cfg)?;
    let mut model = ckpt.to_model()?;
    check_geometry(&model, cfg.image_size)?;
    let m = manifest(cfg)?;
    let st = stats(cfg)?;
    let pal = palette(cfg)?.unwrap_or_else(|| Palette::default_for(cfg.taxonomy));
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for e in &m.entries {
        let stem = unique_stem(&e.image, &mut seen)?;
        let img = load_image(&e.image)?;
        let (h, w) = (img.shape().h(), img.shape().w());
        let x = st.normalize(&resize_image(&img, cfg.image_size, cfg.image_size)?)?;
        let probs = model.infer(&x)?;
        let pred = predict_labelmap(&probs, cfg.taxonomy)?.remove(0);
        let pred = resize_mask(&pred, h, w)?;
        let mask = cfg.out_dir.join(format!("{stem}.pgm"));
        save_mask(&pred, &mask, None)?;
        save_mask(&pred, cfg.out_dir.join(format!("{stem}.ppm")), Some(&pal))?;
        entries.push(ManifestEntry { image: absolute(&e.image), mask: Some(absolute(&mask)) });
    }
    Manifest { entries }.save(cfg.out_dir.join("manifest.json"))?;
    Ok(())
}

/// Collapses full19 masks to single9, one `<stem>.pgm` per input mask.
pub fn cmd_remap(cfg: &RunConfig) -> Result<()> {
    let m = manifest(cfg)?;
    let pal = palette(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (i, e) in m.entries.iter().enumerate() {
        let src = e.mask.as_ref().ok_or_else(|| Failure::data(format!("manifest entry {i} has no mask")))?;
        let stem = unique_stem(src, &mut seen)?;
        let full = load_mask(src, Taxonomy::Full19, pal.as_ref())?;
        let dst = cfg.out_dir.join(format!("{stem}.pgm"));
        save_mask(&remap_to_single9(&full)?, &dst, None)?;
        entries.push(ManifestEntry { image: absolute(&e.image), mask: Some(absolute(&dst)) });
    }
    Manifest { entries }.save(cfg.out_dir.join("manifest.json"))?;
    Ok(())
}

/// Per-channel statistics over every pixel of every manifest image, at
/// native resolution.
pub fn cmd_stats(cfg: &RunConfig) -> Result<NormalizationStats> {
    let m = manifest(cfg)?;
    // per-image partials in parallel, merged in manifest order
    let parts: Vec<StatsAccumulator> = m
        .entries
        .par_iter()
        .map(|e| -> Result<StatsAccumulator> {
            let mut acc = StatsAccumulator::new();
            acc.add_image(&load_image(&e.image)?)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = StatsAccumulator::new();
    parts.iter().for_each(|p| acc.merge(p));
    let st = acc.finish()?;
    match &cfg.stats {
        Some(p) => st.save(p)?,
        None => println!("{}", serde_json::to_string_pretty(&st)?),
    }
    Ok(st)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let o = AuditOptions {
        scope: cfg.scope,
        seed: cfg.seed,
        model_widths: cfg.encoder_filters,
        model_input: cfg.image_size,
        model_classes: cfg.num_classes,
        ..AuditOptions::default()
    };
    let reports = audit_suite(&o)?;
    let mut out: Box<dyn Write> = if cfg.out_dir != Path::new(".") {
        std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Box::new(BufWriter::new(File::create(cfg.out_dir.join("gradcheck.jsonl"))?))
    } else {
        Box::new(std::io::stdout())
    };
    for r in &reports {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    eprintln!("gradcheck: {} checks, worst relative error {worst:.3e}, {} failed", reports.len(), failed.len());
    if !failed.is_empty() {
        return Err(Failure::audit(format!("gradient audit failed for {}", failed.join(", "))).into());
    }
    Ok(())
}
