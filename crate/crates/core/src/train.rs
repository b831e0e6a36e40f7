//! Training loop: per-step optimization, per-epoch learning-rate schedule,
//! JSON-lines logging and checkpoint cadence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, mse_loss, DiceLoss, LossKind};
use crate::model::{save, Checkpoint, Head, Model, TrainingMeta};
use crate::nn::Mode;
use crate::optim::{AdamState, LrSchedule};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: f64,
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub ts: f64,
    pub event: String,
    pub message: String,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Append-only JSON-lines training log.
pub struct JsonLog {
    out: Option<Box<dyn Write + Send>>,
    /// Records written so far, kept for callers that inspect the run.
    pub records: Vec<LogRecord>,
    pub events: Vec<LogEvent>,
    wall_clock: bool,
}

impl JsonLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        JsonLog { out: Some(out), records: Vec::new(), events: Vec::new(), wall_clock: true }
    }

    /// Keeps records in memory only.
    pub fn memory() -> Self {
        JsonLog { out: None, records: Vec::new(), events: Vec::new(), wall_clock: true }
    }

    pub fn append_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(Box::new(std::io::LineWriter::new(f))))
    }

    /// Writes `ts: 0` instead of wall-clock seconds, so logs of repeated
    /// runs compare equal.
    pub fn without_clock(mut self) -> Self {
        self.wall_clock = false;
        self
    }

    pub fn ts(&self) -> f64 {
        if self.wall_clock { now() } else { 0.0 }
    }

    fn write_line<S: Serialize>(&mut self, v: &S) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(v)?;
            writeln!(out, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }

    pub fn record(&mut self, r: LogRecord) -> Result<()> {
        self.write_line(&r)?;
        self.records.push(r);
        Ok(())
    }

    pub fn event(&mut self, event: &str, message: impl Into<String>) -> Result<()> {
        let e = LogEvent { ts: self.ts(), event: event.to_string(), message: message.into() };
        self.write_line(&e)?;
        self.events.push(e);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io("<training log>", e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: u32,
    pub schedule: LrSchedule,
    pub loss: LossKind,
    pub dice: DiceLoss,
    /// Write a checkpoint after every this many epochs (0 disables); the
    /// final epoch is always written when `checkpoint_path` is set.
    pub checkpoint_every: u32,
    pub checkpoint_path: Option<PathBuf>,
    /// Log every this many steps.
    pub log_every: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 90,
            schedule: LrSchedule::default(),
            loss: LossKind::Dice,
            dice: DiceLoss::default(),
            checkpoint_every: 10,
            checkpoint_path: None,
            log_every: 1,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Mean soft Dice coefficient of the batch (segmentation only).
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: u64,
    /// Batches skipped because train-mode batch norm had a single value
    /// per channel.
    pub skipped: u64,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub options: TrainOptions,
    /// Completed epochs.
    pub epoch: u32,
}

/// Whether every train-mode batch-norm layer sees at least two values per
/// channel for an input of `shape`.
pub fn batch_trainable(model: &Model<f32>, shape: Shape) -> Result<bool> {
    let plan = model.plan(shape)?;
    Ok(model.layers().iter().zip(&plan).filter(|(l, _)| l.bn.is_some()).all(|(_, s)| s.n() * s.plane() >= 2))
}

impl Trainer {
    pub fn new(model: Model<f32>, optimizer: AdamState<f32>, options: TrainOptions) -> Result<Self> {
        let head = model.config().head;
        match (head, options.loss) {
            (Head::Reconstruction, LossKind::Mse) | (Head::Segmentation, LossKind::Dice | LossKind::CrossEntropy) => {}
            (h, l) => return Err(Error::Config(format!("loss {l:?} does not fit the {h:?} head"))),
        }
        Ok(Trainer { model, optimizer, options, epoch: 0 })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// One optimizer update on `images` against `target` (one-hot labels for
    /// segmentation, `[0, 1]` RGB for reconstruction).
    pub fn train_step(&mut self, images: &Tensor<f32>, target: &Tensor<f32>) -> Result<StepOutcome> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let y = self.model.forward(&mut tape, x, Mode::Train)?;
        let loss = match self.options.loss {
            LossKind::Mse => mse_loss(&mut tape, y, target)?,
            LossKind::Dice => self.options.dice.forward(&mut tape, y, target)?,
            LossKind::CrossEntropy => cross_entropy_loss(&mut tape, y, target)?,
        };
        let loss_value = tape.value(loss).item()? as f64;
        let dice = match (self.options.loss, self.model.config().head) {
            (LossKind::Dice, _) => Some(1.0 - loss_value),
            (_, Head::Segmentation) => {
                let probs = tape.value(y);
                let mut t = Tape::new();
                let p = t.constant(&probs);
                let l = self.options.dice.forward(&mut t, p, target)?;
                Some(1.0 - t.value(l).item()? as f64)
            }
            _ => None,
        };
        if !loss_value.is_finite() {
            return Err(Error::Optimizer(format!("loss became {loss_value} at step {}", self.step() + 1)));
        }
        let mut grads = tape.backward(loss)?;
        drop(tape);
        self.model.zero_grad();
        self.model.accumulate_grads(&mut grads)?;
        let opt = &mut self.optimizer;
        self.model.with_params(|params| opt.step(params))?;
        Ok(StepOutcome { loss: loss_value, dice })
    }

    fn target_for(&self, batch: &Batch, dataset: &Dataset) -> Result<Tensor<f32>> {
        match self.model.config().head {
            Head::Segmentation => batch.one_hot(self.model.config().num_classes),
            Head::Reconstruction => dataset.stats().denormalize(&batch.images),
        }
    }

    /// Runs the next epoch over `dataset`.
    pub fn run_epoch(&mut self, dataset: &Dataset, log: &mut JsonLog) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let lr = self.options.schedule.lr_at(epoch);
        self.optimizer.set_lr(lr);
        // Dropout masks depend only on (seed, epoch), so a resumed run
        // replays exactly.
        let seed = self.model.config().seed;
        self.model.reseed_dropout(seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let (mut total, mut steps, mut skipped) = (0.0, 0u64, 0u64);
        for batch in dataset.epoch(epoch as u64) {
            if self.options.max_steps.is_some_and(|m| self.step() >= m) {
                break;
            }
            let batch = batch?;
            if !batch_trainable(&self.model, batch.images.shape())? {
                skipped += 1;
                log.event(
                    "skip_batch",
                    format!("epoch {epoch}: batch of {} cannot train batch norm at this input size", batch.len()),
                )?;
                continue;
            }
            let target = self.target_for(&batch, dataset)?;
            let out = self.train_step(&batch.images, &target)?;
            total += out.loss;
            steps += 1;
            if self.step() % self.options.log_every.max(1) == 0 {
                log.record(LogRecord { ts: log.ts(), step: self.step(), epoch, lr, loss: out.loss, dice: out.dice })?;
            }
        }
        self.epoch += 1;
        let mean_loss = if steps > 0 { total / steps as f64 } else { f64::NAN };
        Ok(EpochSummary { epoch, lr, mean_loss, steps, skipped })
    }

    /// Trains until `options.epochs` epochs are complete, writing periodic
    /// and final checkpoints.
    pub fn fit(&mut self, dataset: &Dataset, log: &mut JsonLog) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.epoch < self.options.epochs {
            if self.options.max_steps.is_some_and(|m| self.step() >= m) {
                break;
            }
            let summary = self.run_epoch(dataset, log)?;
            out.push(summary);
            let every = self.options.checkpoint_every;
            if let Some(path) = &self.options.checkpoint_path {
                if every > 0 && self.epoch % every == 0 && self.epoch < self.options.epochs {
                    save(periodic_path(path, self.epoch), &self.checkpoint())?;
                }
            }
        }
        if let Some(path) = &self.options.checkpoint_path {
            save(path, &self.checkpoint())?;
        }
        log.flush()?;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let lr = self.options.schedule.lr_at(self.epoch.saturating_sub(1));
        let meta = TrainingMeta::new(&self.model, self.epoch, self.step(), lr);
        Checkpoint::from_model(&self.model, meta, Some(&self.optimizer))
    }

    /// Continues from a checkpoint of the same head, restoring weights,
    /// optimizer moments and the epoch counter.
    pub fn resume(ckpt: &Checkpoint, options: TrainOptions) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut optimizer = ckpt.optimizer.clone().ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        optimizer.config.lr = options.schedule.lr_at(ckpt.meta.epoch);
        let mut t = Trainer::new(model, optimizer, options)?;
        t.epoch = ckpt.meta.epoch;
        Ok(t)
    }
}

/// `dir/model.lseg` -> `dir/model.epoch0010.lseg`.
pub fn periodic_path(path: &Path, epoch: u32) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "lseg".into());
    path.with_file_name(format!("{stem}.epoch{epoch:04}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetConfig, Manifest, ManifestEntry, NormalizationStats, Taxonomy, LabelMap, save_image, save_mask};
    use crate::model::ModelConfig;
    use crate::optim::AdamConfig;

    fn tiny_set(dir: &Path, n: usize) -> Dataset {
        let mut entries = Vec::new();
        for i in 0..n {
            let s = Shape::new(1, 3, 64, 64);
            let img = Tensor::from_buffer(s, (0..s.numel()).map(|k| ((k * (i + 3)) % 13) as f32 / 13.0).collect()).unwrap();
            let mask = LabelMap::new(64, 64, Taxonomy::Single9, (0..4096).map(|k| ((k / 64 / 22 + i) % 3) as u8).collect()).unwrap();
            save_image(&img, dir.join(format!("{i}.ppm"))).unwrap();
            save_mask(&mask, dir.join(format!("{i}.pgm")), None).unwrap();
            entries.push(ManifestEntry { image: dir.join(format!("{i}.ppm")), mask: Some(dir.join(format!("{i}.pgm"))) });
        }
        let cfg = DatasetConfig { batch_size: 2, augment: false, image_size: 64, seed: 1, ..Default::default() };
        Dataset::new(Manifest { entries }, cfg, NormalizationStats::default(), None).unwrap()
    }

    fn small_model(nc: usize) -> Model<f32> {
        Model::build(ModelConfig::segmentation(nc).with_widths([4, 4, 8, 8, 8]).with_seed(2)).unwrap()
    }

    #[test]
    fn schedule_applies_per_epoch_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_set(dir.path(), 4);
        let options = TrainOptions { epochs: 12, checkpoint_every: 5, checkpoint_path: Some(dir.path().join("m.lseg")), ..Default::default() };
        let mut t = Trainer::new(small_model(3), AdamState::new(AdamConfig::default()), options).unwrap();
        let mut log = JsonLog::memory();
        let summaries = t.fit(&ds, &mut log).unwrap();
        assert_eq!(summaries.len(), 12);
        assert_eq!(summaries[9].lr, 1e-4);
        assert_eq!(summaries[10].lr, 5e-5);
        assert_eq!(log.records.len(), 24);
        assert!(log.records.iter().all(|r| r.dice.is_some()));
        assert!(dir.path().join("m.epoch0005.lseg").exists());
        assert!(dir.path().join("m.epoch0010.lseg").exists());
        let ck = crate::model::load(dir.path().join("m.lseg")).unwrap();
        assert_eq!((ck.meta.epoch, ck.meta.step), (12, 24));
        assert_eq!(ck.optimizer.unwrap().step, 24);
    }

    #[test]
    fn skips_untrainable_trailing_batch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_set(dir.path(), 3);
        let mut t = Trainer::new(small_model(3), AdamState::new(AdamConfig::default()), TrainOptions { epochs: 1, ..Default::default() }).unwrap();
        let mut log = JsonLog::memory();
        let s = t.run_epoch(&ds, &mut log).unwrap();
        assert_eq!((s.steps, s.skipped), (1, 1));
        assert_eq!(log.events[0].event, "skip_batch");
    }

    #[test]
    fn resume_continues_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_set(dir.path(), 4);
        let opts = |epochs| TrainOptions { epochs, ..Default::default() };
        let mut straight = Trainer::new(small_model(3), AdamState::new(AdamConfig::default()), opts(3)).unwrap();
        straight.fit(&ds, &mut JsonLog::memory()).unwrap();

        let mut first = Trainer::new(small_model(3), AdamState::new(AdamConfig::default()), opts(2)).unwrap();
        first.fit(&ds, &mut JsonLog::memory()).unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes().unwrap()).unwrap();
        let mut resumed = Trainer::resume(&ck, opts(3)).unwrap();
        resumed.fit(&ds, &mut JsonLog::memory()).unwrap();
        assert_eq!(resumed.checkpoint().tensors, straight.checkpoint().tensors);
    }

    #[test]
    fn rejects_loss_head_mismatch() {
        let opts = TrainOptions { loss: LossKind::Mse, ..Default::default() };
        assert!(Trainer::new(small_model(3), AdamState::new(AdamConfig::default()), opts).is_err());
    }

    #[test]
    fn periodic_names() {
        assert_eq!(periodic_path(Path::new("out/m.lseg"), 10), PathBuf::from("out/m.epoch0010.lseg"));
    }
}
