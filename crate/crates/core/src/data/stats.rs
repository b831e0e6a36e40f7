//! Per-channel normalization statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizationStats {
    /// Statistics of the laparoscopic video corpus, in `[0, 1]` pixel scale.
    fn default() -> Self {
        NormalizationStats { mean: [0.295, 0.204, 0.197], std: [0.221, 0.188, 0.182] }
    }
}

impl NormalizationStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if let Some(c) = std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Stats(format!("channel {c} has non-positive std {}", std[c])));
        }
        Ok(NormalizationStats { mean, std })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: NormalizationStats = serde_json::from_str(&text)?;
        Self::new(raw.mean, raw.std)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// `(x - mean_c) / std_c` on every sample of an `(n, 3, h, w)` tensor.
    pub fn normalize(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.apply(img, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.apply(img, |v, m, s| v * s + m)
    }

    fn apply(&self, img: &Tensor<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f32>> {
        let s = img.shape();
        if s.c() != 3 {
            return Err(Error::shape(format!("normalization needs 3 channels, got {s:?}")));
        }
        let plane = s.plane();
        let data = img
            .data()
            .chunks(plane.max(1))
            .enumerate()
            .flat_map(|(k, ch)| {
                let c = k % 3;
                let (m, sd) = (self.mean[c], self.std[c]);
                ch.iter().map(|&v| f(v as f64, m, sd) as f32).collect::<Vec<_>>()
            })
            .collect();
        Tensor::from_buffer(s, data)
    }
}

/// Running per-channel mean / variance, merged image by image with the
/// pairwise (Chan et al.) update so large corpora stay numerically stable.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    count: [u64; 3],
    mean: [f64; 3],
    m2: [f64; 3],
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, img: &Tensor<f32>) -> Result<()> {
        let s = img.shape();
        if s.c() != 3 {
            return Err(Error::shape(format!("stats need 3 channels, got {s:?}")));
        }
        let plane = s.plane();
        for c in 0..3 {
            let vals = || (0..s.n()).flat_map(move |n| img.data()[(n * 3 + c) * plane..][..plane].iter().map(|&v| v as f64));
            let nb = (s.n() * plane) as u64;
            if nb == 0 {
                continue;
            }
            let mb = vals().sum::<f64>() / nb as f64;
            let m2b = vals().map(|v| (v - mb) * (v - mb)).sum::<f64>();
            let na = self.count[c];
            let n = na + nb;
            let delta = mb - self.mean[c];
            self.mean[c] += delta * nb as f64 / n as f64;
            self.m2[c] += m2b + delta * delta * (na as f64) * (nb as f64) / n as f64;
            self.count[c] = n;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        for c in 0..3 {
            let (na, nb) = (self.count[c], other.count[c]);
            if nb == 0 {
                continue;
            }
            let n = na + nb;
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb as f64 / n as f64;
            self.m2[c] += other.m2[c] + delta * delta * (na as f64) * (nb as f64) / n as f64;
            self.count[c] = n;
        }
    }

    /// Population statistics over every pixel seen.
    pub fn finish(&self) -> Result<NormalizationStats> {
        if self.count[0] == 0 {
            return Err(Error::Stats("no pixels accumulated".into()));
        }
        let std = [0, 1, 2].map(|c| (self.m2[c] / self.count[c] as f64).sqrt());
        if let Some(c) = std.iter().position(|&s| s <= 0.0) {
            return Err(Error::Stats(format!("channel {c} has zero std (constant image set)")));
        }
        NormalizationStats::new(self.mean, std)
    }
}

pub fn compute_stats<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<NormalizationStats> {
    let mut acc = StatsAccumulator::new();
    for img in images {
        acc.add_image(img)?;
    }
    acc.finish()
}
