//! Manifest-driven sample loading and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pnm::{load_image, load_mask, Palette};
use super::stats::NormalizationStats;
use super::taxonomy::{LabelMap, Taxonomy};
use super::transform::{resize_image, resize_mask, ten_crop_one, TRAIN_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// JSON array of `{image, mask?}`; relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(""));
        for e in &mut entries {
            e.image = root.join(&e.image);
            e.mask = e.mask.as_ref().map(|m| root.join(m));
        }
        Ok(Manifest { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(&self.entries)?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn describe(&self, i: usize) -> String {
        let e = &self.entries[i];
        match &e.mask {
            Some(m) => format!("pair {i} ({}, {})", e.image.display(), m.display()),
            None => format!("entry {i} ({})", e.image.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    /// Ten-crop every source image (requires `image_size` 256).
    pub augment: bool,
    /// Side length every image and mask is resized to before cropping.
    pub image_size: usize,
    pub taxonomy: Taxonomy,
    /// Load masks alongside images.
    pub masks: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            batch_size: 2,
            shuffle: true,
            seed: 0,
            augment: true,
            image_size: TRAIN_SIZE,
            taxonomy: Taxonomy::Single9,
            masks: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleId {
    pub entry: usize,
    pub crop: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Normalized `(n, 3, s, s)` images.
    pub images: Tensor<f32>,
    pub labels: Option<Vec<LabelMap>>,
    pub ids: Vec<SampleId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// One-hot `(n, nc, s, s)` targets.
    pub fn one_hot(&self, nc: usize) -> Result<Tensor<f32>> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::contract("batch has no masks"))?;
        one_hot(labels, nc)
    }
}

pub struct Dataset {
    manifest: Manifest,
    config: DatasetConfig,
    stats: NormalizationStats,
    palette: Option<Palette>,
}

impl Dataset {
    pub fn new(manifest: Manifest, config: DatasetConfig, stats: NormalizationStats, palette: Option<Palette>) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Config("empty manifest".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if config.augment && config.image_size != TRAIN_SIZE {
            return Err(Error::Config(format!(
                "ten-crop augmentation needs image_size {TRAIN_SIZE}, got {}",
                config.image_size
            )));
        }
        if config.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if config.masks {
            if let Some(i) = manifest.entries.iter().position(|e| e.mask.is_none()) {
                return Err(Error::Data(format!("{} has no mask", manifest.describe(i))));
            }
        }
        Ok(Dataset { manifest, config, stats, palette })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.manifest.len() * if self.config.augment { 10 } else { 1 }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples_per_epoch().div_ceil(self.config.batch_size)
    }

    /// Sample order for `epoch`, a pure function of the seed and epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<SampleId> {
        let crops: Vec<Option<usize>> = if self.config.augment { (0..10).map(Some).collect() } else { vec![None] };
        let mut ids: Vec<SampleId> = (0..self.manifest.len())
            .flat_map(|entry| crops.iter().map(move |&crop| SampleId { entry, crop }))
            .collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch);
            ids.shuffle(&mut rng);
        }
        ids
    }

    pub fn epoch(&self, epoch: u64) -> BatchIter<'_> {
        BatchIter { dataset: self, order: self.epoch_order(epoch), pos: 0 }
    }

    /// Loads, resizes and (for crop ids) crops one sample. The image is not
    /// normalized yet.
    pub fn load_sample(&self, id: SampleId) -> Result<(Tensor<f32>, Option<LabelMap>)> {
        let wrap = |e: Error| Error::Data(format!("{}: {e}", self.manifest.describe(id.entry)));
        let entry = &self.manifest.entries[id.entry];
        let s = self.config.image_size;
        let img = load_image(&entry.image).map_err(wrap)?;
        let mask = match (&entry.mask, self.config.masks) {
            (Some(p), true) => {
                let m = load_mask(p, self.config.taxonomy, self.palette.as_ref()).map_err(wrap)?;
                if (m.height(), m.width()) != (img.shape().h(), img.shape().w()) {
                    return Err(wrap(Error::shape(format!(
                        "mask is {}x{}, image is {}x{}",
                        m.height(),
                        m.width(),
                        img.shape().h(),
                        img.shape().w()
                    ))));
                }
                Some(resize_mask(&m, s, s).map_err(wrap)?)
            }
            _ => None,
        };
        let img = resize_image(&img, s, s).map_err(wrap)?;
        match id.crop {
            Some(k) => ten_crop_one(&img, mask.as_ref(), k).map_err(wrap),
            None => Ok((img, mask)),
        }
    }

    pub fn load_batch(&self, ids: &[SampleId]) -> Result<Batch> {
        let samples: Vec<(Tensor<f32>, Option<LabelMap>)> =
            ids.par_iter().map(|&id| self.load_sample(id)).collect::<Result<_>>()?;
        let (imgs, masks): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
        let images = self.stats.normalize(&Tensor::stack(&imgs)?)?;
        let labels = if self.config.masks { Some(masks.into_iter().map(|m| m.expect("masks enabled")).collect()) } else { None };
        Ok(Batch { images, labels, ids: ids.to_vec() })
    }
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<SampleId>,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.dataset.config.batch_size).min(self.order.len());
        let ids = &self.order[self.pos..end];
        self.pos = end;
        Some(self.dataset.load_batch(ids))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.dataset.config.batch_size);
        (left, Some(left))
    }
}

/// `(n, nc, h, w)` one-hot encoding of equally sized label maps.
pub fn one_hot(maps: &[LabelMap], nc: usize) -> Result<Tensor<f32>> {
    let first = maps.first().ok_or_else(|| Error::contract("one_hot of an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = vec![0.0f32; maps.len() * nc * plane];
    for (n, m) in maps.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape("label maps in a batch differ in size"));
        }
        for (p, &l) in m.labels().iter().enumerate() {
            if l as usize >= nc {
                return Err(Error::Data(format!("label {l} does not fit {nc} classes")));
            }
            data[(n * nc + l as usize) * plane + p] = 1.0;
        }
    }
    Tensor::from_buffer(Shape::new(maps.len(), nc, h, w), data)
}
