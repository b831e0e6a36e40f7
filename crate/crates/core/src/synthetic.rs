//! Deterministic toy scenes: colored elliptical blobs on a textured
//! background, with the matching label map. Used by tests, benchmarks and
//! smoke runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_image, save_mask, LabelMap, Manifest, ManifestEntry, Taxonomy};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Base color of class `c`; class 0 is the dark background.
fn class_color(c: usize) -> [f32; 3] {
    const COLORS: [[f32; 3]; 9] = [
        [0.12, 0.10, 0.10],
        [0.85, 0.30, 0.25],
        [0.30, 0.75, 0.35],
        [0.30, 0.35, 0.85],
        [0.85, 0.80, 0.30],
        [0.75, 0.35, 0.80],
        [0.30, 0.80, 0.80],
        [0.95, 0.60, 0.20],
        [0.60, 0.60, 0.60],
    ];
    COLORS[c % COLORS.len()]
}

/// One `side`x`side` scene over `nc` classes.
pub fn scene(side: usize, nc: usize, taxonomy: Taxonomy, seed: u64) -> Result<(Tensor<f32>, LabelMap)> {
    if nc < 2 || nc > taxonomy.len() {
        return Err(Error::Config(format!("synthetic scenes need 2..={} classes, got {nc}", taxonomy.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; side * side];
    let blobs = rng.random_range(2..=4usize.max(nc));
    let sf = side as f32;
    for b in 0..blobs {
        // every foreground class appears at least once
        let class = if b < nc - 1 { b + 1 } else { rng.random_range(1..nc) };
        let (cy, cx) = (rng.random_range(0.15..0.85) * sf, rng.random_range(0.15..0.85) * sf);
        let (ry, rx) = (rng.random_range(0.12..0.3) * sf, rng.random_range(0.12..0.3) * sf);
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = ((y as f32 + 0.5 - cy) / ry, (x as f32 + 0.5 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    labels[y * side + x] = class as u8;
                }
            }
        }
    }
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, &l) in labels.iter().enumerate() {
        let col = class_color(l as usize);
        let noise: f32 = rng.random_range(-0.06..0.06);
        for c in 0..3 {
            data[c * plane + p] = (col[c] + noise).clamp(0.0, 1.0);
        }
    }
    let img = Tensor::from_buffer(Shape::new(1, 3, side, side), data)?;
    Ok((img, LabelMap::new(side, side, taxonomy, labels)?))
}

/// Writes `count` scenes as `NNN.ppm` / `NNN.pgm` under `dir` plus a
/// `manifest.json`, and returns the manifest.
pub fn write_dataset(dir: &Path, count: usize, side: usize, nc: usize, taxonomy: Taxonomy, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (img, mask) = scene(side, nc, taxonomy, seed.wrapping_add(i as u64))?;
        let (ip, mp) = (format!("{i:03}.ppm"), format!("{i:03}.pgm"));
        save_image(&img, dir.join(&ip))?;
        save_mask(&mask, dir.join(&mp), None)?;
        entries.push(ManifestEntry { image: ip.into(), mask: Some(mp.into()) });
    }
    let manifest = Manifest { entries };
    manifest.save(dir.join("manifest.json"))?;
    Manifest::load(dir.join("manifest.json"))
}
