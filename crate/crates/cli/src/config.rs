//! Run configuration: per-task defaults, overlaid by a JSON file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use lapseg_core::audit::AuditScope;
use lapseg_core::data::Taxonomy;
use lapseg_core::loss::LossKind;
use lapseg_core::metrics::UndefinedPolicy;
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pretrain,
    Train,
    Eval,
    Predict,
    Remap,
    Stats,
    Gradcheck,
}

/// Fully resolved configuration of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub manifest: Option<PathBuf>,
    pub taxonomy: Taxonomy,
    pub num_classes: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub initial_lr: f64,
    /// Epochs between learning-rate halvings; 0 keeps it constant.
    pub lr_halving_period: u32,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub checkpoint_every: u32,
    /// Normalization statistics to read; `stats` writes here instead.
    pub stats: Option<PathBuf>,
    pub augment: bool,
    pub image_size: usize,
    pub encoder_filters: [usize; 5],
    pub deterministic: bool,
    /// JSON-lines training log; standard output when unset.
    pub log: Option<PathBuf>,
    pub log_every: u64,
    pub out_dir: PathBuf,
    pub palette: Option<PathBuf>,
    pub dice_excluded_classes: Vec<usize>,
    pub undefined_policy: UndefinedPolicy,
    pub max_steps: Option<u64>,
    pub scope: AuditScope,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let mut c = RunConfig {
            task,
            manifest: None,
            taxonomy: Taxonomy::Single9,
            num_classes: Taxonomy::Single9.len(),
            batch_size: 2,
            epochs: 90,
            initial_lr: 1e-4,
            lr_halving_period: 10,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossKind::Dice,
            checkpoint_in: None,
            checkpoint_out: None,
            checkpoint_every: 10,
            stats: None,
            augment: false,
            image_size: 256,
            encoder_filters: [64, 128, 256, 512, 1024],
            deterministic: false,
            log: None,
            log_every: 1,
            out_dir: PathBuf::from("."),
            palette: None,
            dice_excluded_classes: Vec::new(),
            undefined_policy: UndefinedPolicy::Zero,
            max_steps: None,
            scope: AuditScope::All,
        };
        match task {
            Task::Pretrain => {
                c.initial_lr = 0.01;
                c.batch_size = 64;
                c.epochs = 1;
                c.loss = LossKind::Mse;
                c.checkpoint_out = Some(PathBuf::from("pretrain.lseg"));
            }
            Task::Train => {
                c.augment = true;
                c.checkpoint_out = Some(PathBuf::from("segmentation.lseg"));
            }
            Task::Gradcheck => c.image_size = 64,
            Task::Eval | Task::Predict | Task::Remap | Task::Stats => {}
        }
        c
    }

    /// Defaults, then `file` (if any), then `flags`.
    pub fn resolve(task: Task, file: Option<&Path>, flags: &Overrides) -> Result<Self, Failure> {
        let mut c = Self::defaults(task);
        let mut loss_set = false;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
            let o: Overrides = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
            if o.task.is_some_and(|t| t != task) {
                return Err(Failure::usage(format!("config {} is for task {:?}", path.display(), o.task.unwrap())));
            }
            loss_set |= o.loss.is_some();
            c.apply(&o);
        }
        loss_set |= flags.loss.is_some();
        c.apply(flags);
        c.enforce(loss_set)?;
        Ok(c)
    }

    fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = v.clone(); } )* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = Some(v.clone()); } )* };
        }
        set!(batch_size, epochs, initial_lr, lr_halving_period, weight_decay, seed, loss, checkpoint_every, augment);
        set!(image_size, deterministic, log_every, out_dir, dice_excluded_classes, undefined_policy, scope);
        set_opt!(manifest, checkpoint_in, checkpoint_out, stats, log, palette, max_steps);
        if let Some(t) = o.taxonomy {
            self.taxonomy = t;
            self.num_classes = t.len();
        }
        if let Some(n) = o.num_classes {
            self.num_classes = n;
        }
        if let Some(f) = &o.encoder_filters {
            if let Ok(a) = <[usize; 5]>::try_from(f.as_slice()) {
                self.encoder_filters = a;
            } else {
                // rejected in enforce
                self.encoder_filters = [0; 5];
            }
        }
    }

    fn enforce(&mut self, loss_set: bool) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::usage(m));
        match self.task {
            Task::Pretrain => {
                if loss_set && self.loss != LossKind::Mse {
                    return bad(format!("pretrain trains the reconstruction head with mse, not {:?}", self.loss));
                }
                self.loss = LossKind::Mse;
            }
            Task::Train => {
                if self.loss == LossKind::Mse {
                    return bad("train needs a segmentation loss (dice or cross_entropy)".into());
                }
            }
            _ => {}
        }
        if self.encoder_filters.contains(&0) {
            return bad("encoder_filters needs five positive widths".into());
        }
        if !(2..=self.taxonomy.len()).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside 2..={} for {}", self.num_classes, self.taxonomy.len(), self.taxonomy));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if matches!(self.task, Task::Pretrain | Task::Train) {
            if self.epochs == 0 {
                return bad("epochs must be at least 1".into());
            }
            if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
                return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
            }
            if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
                return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
            }
        }
        if let Some(&k) = self.dice_excluded_classes.iter().find(|&&k| k >= self.num_classes) {
            return bad(format!("dice_excluded_classes has {k}, beyond {} classes", self.num_classes));
        }
        let needs_manifest = !matches!(self.task, Task::Gradcheck);
        if needs_manifest && self.manifest.is_none() {
            return bad(format!("{:?} needs --manifest", self.task).to_lowercase());
        }
        if matches!(self.task, Task::Eval | Task::Predict) && self.checkpoint_in.is_none() {
            return bad(format!("{:?} needs --checkpoint-in", self.task).to_lowercase());
        }
        Ok(())
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

/// Every field of [`RunConfig`] as an optional override. Doubles as the
/// schema of the JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    /// Accepted in config files so a printed config can be fed back.
    #[arg(skip)]
    pub task: Option<Task>,
    /// JSON manifest of image (and mask) paths.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// full19 or single9.
    #[arg(long)]
    pub taxonomy: Option<Taxonomy>,
    /// Classes the network predicts; masks must stay below this.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub lr_halving_period: Option<u32>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// dice, cross_entropy or mse.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u32>,
    /// Normalization statistics (JSON); `stats` writes them here.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = parse_bool)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub encoder_filters: Option<Vec<usize>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = parse_bool)]
    pub deterministic: Option<bool>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Class colors (JSON) for color masks.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub dice_excluded_classes: Option<Vec<usize>>,
    /// zero or exclude.
    #[arg(long)]
    pub undefined_policy: Option<UndefinedPolicy>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// layer, model or all.
    #[arg(long)]
    pub scope: Option<AuditScope>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_defaults() {
        let p = RunConfig::defaults(Task::Pretrain);
        assert_eq!((p.initial_lr, p.batch_size, p.epochs, p.loss), (0.01, 64, 1, LossKind::Mse));
        let t = RunConfig::defaults(Task::Train);
        assert_eq!((t.initial_lr, t.lr_halving_period, t.epochs, t.batch_size), (1e-4, 10, 90, 2));
        assert_eq!((t.weight_decay, t.loss, t.augment), (5e-4, LossKind::Dice, true));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"manifest": "m.json", "epochs": 5, "batch_size": 4}"#).unwrap();
        let flags = Overrides { epochs: Some(7), ..Default::default() };
        let c = RunConfig::resolve(Task::Train, Some(&f), &flags).unwrap();
        assert_eq!((c.epochs, c.batch_size), (7, 4));
        assert_eq!(c.manifest.as_deref(), Some(Path::new("m.json")));
    }

    #[test]
    fn printed_config_round_trips() {
        let flags = Overrides { manifest: Some("m.json".into()), num_classes: Some(3), ..Default::default() };
        let c = RunConfig::resolve(Task::Train, None, &flags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Task::Train, Some(&f), &Overrides::default()).unwrap(), c);
        assert!(RunConfig::resolve(Task::Eval, Some(&f), &Overrides::default()).is_err());
    }

    #[test]
    fn invariants() {
        let m = || Overrides { manifest: Some("m".into()), ..Default::default() };
        let e = RunConfig::resolve(Task::Pretrain, None, &Overrides { loss: Some(LossKind::Dice), ..m() });
        assert!(e.is_err());
        assert!(RunConfig::resolve(Task::Train, None, &Overrides { loss: Some(LossKind::Mse), ..m() }).is_err());
        assert!(RunConfig::resolve(Task::Train, None, &Overrides { num_classes: Some(12), ..m() }).is_err());
        assert!(RunConfig::resolve(Task::Train, None, &Overrides::default()).is_err());
        assert!(RunConfig::resolve(Task::Train, None, &Overrides { encoder_filters: Some(vec![1, 2]), ..m() }).is_err());
        let c = RunConfig::resolve(Task::Train, None, &Overrides { taxonomy: Some(Taxonomy::Full19), ..m() }).unwrap();
        assert_eq!(c.num_classes, 19);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"manifest": "m.json", "learning_rate": 1}"#).unwrap();
        assert!(RunConfig::resolve(Task::Train, Some(&f), &Overrides::default()).is_err());
    }
}
