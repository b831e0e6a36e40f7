//! Pixel-wise confusion accumulation and IoU / precision / recall / F1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Taxonomy};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `counts[g * nc + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    nc: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(nc: usize) -> Self {
        ConfusionMatrix { nc, counts: vec![0; nc * nc] }
    }

    pub fn from_counts(nc: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != nc * nc {
            return Err(Error::shape(format!("{} counts for a {nc}x{nc} matrix", counts.len())));
        }
        Ok(ConfusionMatrix { nc, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.nc
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.nc + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.nc).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.nc).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.taxonomy() != truth.taxonomy() {
            return Err(Error::Data(format!(
                "prediction uses {}, ground truth uses {}",
                pred.taxonomy(),
                truth.taxonomy()
            )));
        }
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        self.accumulate_labels(pred.labels(), truth.labels())
    }

    pub fn accumulate_labels(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        if let Some(&l) = pred.iter().chain(truth).find(|&&l| l as usize >= self.nc) {
            return Err(Error::Data(format!("label {l} outside {} classes", self.nc)));
        }
        for (&p, &g) in pred.iter().zip(truth) {
            self.counts[g as usize * self.nc + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.nc != self.nc {
            return Err(Error::shape(format!("cannot merge {}-class and {}-class matrices", self.nc, other.nc)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// How classes with no ground truth and no prediction enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    #[default]
    Zero,
    Exclude,
}

impl std::str::FromStr for UndefinedPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(UndefinedPolicy::Zero),
            "exclude" => Ok(UndefinedPolicy::Exclude),
            _ => Err(Error::Config(format!("unknown undefined-metric policy {s:?} (zero|exclude)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` when the class never occurs in truth or prediction.
    pub scores: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean: Scores,
    pub total_pixels: u64,
    pub policy: UndefinedPolicy,
    /// Free-form provenance (checkpoint, manifest, ...).
    pub provenance: BTreeMap<String, String>,
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_scores(tp: u64, fp: u64, fn_: u64) -> Option<Scores> {
    if tp + fp + fn_ == 0 {
        return None;
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Some(Scores { iou: ratio(tp, tp + fp + fn_), precision, recall, f1: f1_score(precision, recall) })
}

/// Unweighted mean over classes under `policy`.
pub fn mean_over_classes(values: &[Option<f64>], policy: UndefinedPolicy) -> f64 {
    let kept: Vec<f64> = match policy {
        UndefinedPolicy::Zero => values.iter().map(|v| v.unwrap_or(0.0)).collect(),
        UndefinedPolicy::Exclude => values.iter().flatten().copied().collect(),
    };
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix, class_names: &[&str], policy: UndefinedPolicy) -> Result<MetricsReport> {
    if class_names.len() != cm.nc {
        return Err(Error::shape(format!("{} class names for {} classes", class_names.len(), cm.nc)));
    }
    let classes: Vec<ClassMetrics> = (0..cm.nc)
        .map(|c| {
            let (tp, fp, fn_) = (cm.tp(c), cm.fp(c), cm.fn_(c));
            ClassMetrics { class: class_names[c].to_string(), tp, fp, fn_, scores: class_scores(tp, fp, fn_) }
        })
        .collect();
    let col = |f: fn(&Scores) -> f64| -> f64 {
        let v: Vec<Option<f64>> = classes.iter().map(|c| c.scores.as_ref().map(f)).collect();
        mean_over_classes(&v, policy)
    };
    let mean = Scores { iou: col(|s| s.iou), precision: col(|s| s.precision), recall: col(|s| s.recall), f1: col(|s| s.f1) };
    Ok(MetricsReport { classes, mean, total_pixels: cm.total(), policy, provenance: BTreeMap::new() })
}

/// Half-up rounding to two decimals, as printed in result tables.
pub fn round2(x: f64) -> String {
    // the epsilon absorbs representation error such as 0.845 = 0.84499999...
    format!("{:.2}", ((x * 100.0) + 0.5 + 1e-9).floor() / 100.0)
}

impl MetricsReport {
    pub fn with_provenance(mut self, key: &str, value: impl Into<String>) -> Self {
        self.provenance.insert(key.to_string(), value.into());
        self
    }

    /// Rows of `[class, IoU, Precision, Recall, F1]` rounded to 2 decimals,
    /// followed by the Mean row. Undefined classes print `undefined`.
    pub fn table_rows(&self) -> Vec<[String; 5]> {
        let fmt = |s: &Scores| [round2(s.iou), round2(s.precision), round2(s.recall), round2(s.f1)];
        let mut rows: Vec<[String; 5]> = self
            .classes
            .iter()
            .map(|c| {
                let [a, b, d, e] = c.scores.as_ref().map(fmt).unwrap_or_else(|| std::array::from_fn(|_| "undefined".to_string()));
                [c.class.clone(), a, b, d, e]
            })
            .collect();
        let [a, b, d, e] = fmt(&self.mean);
        rows.push(["Mean".to_string(), a, b, d, e]);
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["class", "IoU", "Precision", "Recall", "F1"]).map_err(csv_err)?;
        for row in self.table_rows() {
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Full-precision report plus the rounded table view.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            #[serde(flatten)]
            report: &'a MetricsReport,
            rounded: Vec<[String; 5]>,
        }
        Ok(serde_json::to_string_pretty(&View { report: self, rounded: self.table_rows() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel argmax over channels of an `(n, nc, h, w)` probability
/// tensor; ties go to the lowest class index.
pub fn predict_labelmap<T: Element>(probs: &Tensor<T>, taxonomy: Taxonomy) -> Result<Vec<LabelMap>> {
    let s = probs.shape();
    if s.c() > taxonomy.len() {
        return Err(Error::shape(format!("{} channels exceed {taxonomy} ({} classes)", s.c(), taxonomy.len())));
    }
    let plane = s.plane();
    (0..s.n())
        .map(|n| {
            let base = &probs.data()[n * s.c() * plane..][..s.c() * plane];
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c() {
                        if base[c * plane + p] > base[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(s.h(), s.w(), taxonomy, labels)
        })
        .collect()
}
