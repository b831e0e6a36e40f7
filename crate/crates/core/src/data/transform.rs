//! Resizing, flipping and the ten-crop augmentation.

use super::taxonomy::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const TRAIN_SIZE: usize = 256;
pub const CROP_SIZE: usize = 224;

/// Bilinear resize with half-pixel centers (no corner alignment): output
/// pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to the valid range.
pub fn resize_image(img: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.h() == 0 || s.w() == 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!("cannot resize {s:?} to {height}x{width}")));
    }
    if (s.h(), s.w()) == (height, width) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(height, s.h()), taps(width, s.w()));
    let mut out = Vec::with_capacity(s.n() * s.c() * height * width);
    for plane in img.data().chunks(s.plane()) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let p = |y: usize, x: usize| plane[y * s.w() + x];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::from_buffer(Shape::new(s.n(), s.c(), height, width), out)
}

/// Nearest-neighbour resize: output pixel `i` copies source
/// `floor((i + 0.5) * in / out)`. Labels are never blended.
pub fn resize_mask(map: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    let (ih, iw) = (map.height(), map.width());
    if ih == 0 || iw == 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!("cannot resize {ih}x{iw} mask to {height}x{width}")));
    }
    let pick = |i: usize, out: usize, inp: usize| (((2 * i + 1) * inp) / (2 * out)).min(inp - 1);
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = pick(y, height, ih);
        for x in 0..width {
            labels.push(map.get(sy, pick(x, width, iw)));
        }
    }
    Ok(LabelMap::from_parts_unchecked(height, width, map.taxonomy(), labels))
}

pub fn crop_image(img: &Tensor<f32>, top: usize, left: usize, size: usize, flip: bool) -> Result<Tensor<f32>> {
    let s = img.shape();
    if top + size > s.h() || left + size > s.w() {
        return Err(Error::shape(format!("crop {size} at ({top}, {left}) exceeds {s:?}")));
    }
    let mut out = Vec::with_capacity(s.n() * s.c() * size * size);
    for plane in img.data().chunks(s.plane()) {
        for y in top..top + size {
            let row = &plane[y * s.w() + left..][..size];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_buffer(Shape::new(s.n(), s.c(), size, size), out)
}

pub fn crop_mask(map: &LabelMap, top: usize, left: usize, size: usize, flip: bool) -> Result<LabelMap> {
    if top + size > map.height() || left + size > map.width() {
        return Err(Error::shape(format!(
            "crop {size} at ({top}, {left}) exceeds {}x{} mask",
            map.height(),
            map.width()
        )));
    }
    let mut labels = Vec::with_capacity(size * size);
    for y in top..top + size {
        let row = &map.labels()[y * map.width() + left..][..size];
        if flip {
            labels.extend(row.iter().rev());
        } else {
            labels.extend_from_slice(row);
        }
    }
    Ok(LabelMap::from_parts_unchecked(size, size, map.taxonomy(), labels))
}

/// `(top, left, flipped)` of crop `k` in `0..10` over a `TRAIN_SIZE`
/// square: top-left, top-right, bottom-left, bottom-right, center, then the
/// horizontal flips of each in the same order.
pub fn ten_crop_geometry(k: usize) -> (usize, usize, bool) {
    let far = TRAIN_SIZE - CROP_SIZE;
    let mid = far / 2;
    let (top, left) = [(0, 0), (0, far), (far, 0), (far, far), (mid, mid)][k % 5];
    (top, left, k >= 5)
}

fn check_train_size(h: usize, w: usize) -> Result<()> {
    if (h, w) != (TRAIN_SIZE, TRAIN_SIZE) {
        return Err(Error::shape(format!("ten_crop needs a {TRAIN_SIZE}x{TRAIN_SIZE} input, got {h}x{w}")));
    }
    Ok(())
}

/// Crop `k` of [`ten_crop`] alone.
pub fn ten_crop_one(img: &Tensor<f32>, mask: Option<&LabelMap>, k: usize) -> Result<(Tensor<f32>, Option<LabelMap>)> {
    check_train_size(img.shape().h(), img.shape().w())?;
    if let Some(m) = mask {
        check_train_size(m.height(), m.width())?;
    }
    let (top, left, flip) = ten_crop_geometry(k);
    let img = crop_image(img, top, left, CROP_SIZE, flip)?;
    let mask = mask.map(|m| crop_mask(m, top, left, CROP_SIZE, flip)).transpose()?;
    Ok((img, mask))
}

pub fn ten_crop(img: &Tensor<f32>, mask: &LabelMap) -> Result<Vec<(Tensor<f32>, LabelMap)>> {
    (0..10)
        .map(|k| {
            let (i, m) = ten_crop_one(img, Some(mask), k)?;
            Ok((i, m.expect("mask given")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::taxonomy::Taxonomy;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        let s = Shape::new(1, 3, h, w);
        Tensor::from_buffer(s, (0..s.numel()).map(|i| (i % (h * w)) as f32).collect()).unwrap()
    }

    #[test]
    fn same_size_is_identity() {
        let img = ramp(256, 256);
        assert_eq!(resize_image(&img, 256, 256).unwrap(), img);
    }

    #[test]
    fn nearest_upscale_makes_blocks() {
        let m = LabelMap::new(2, 2, Taxonomy::Single9, vec![0, 1, 2, 3]).unwrap();
        let r = resize_mask(&m, 4, 4).unwrap();
        assert_eq!(r.labels(), [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn bilinear_upscale_stays_in_range() {
        let s = Shape::new(1, 1, 1, 4);
        let img = Tensor::from_buffer(s, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_image(&img, 2, 8).unwrap();
        assert!(r.data().iter().all(|&v| (0.0..=3.0).contains(&v)));
        // half-pixel centers: output x=1 samples source 0.25
        assert!((r.data()[1] - 0.25).abs() < 1e-6);
        assert!(r.data().windows(2).take(7).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ten_crop_order_and_geometry() {
        let img = ramp(256, 256);
        let mask = LabelMap::new(256, 256, Taxonomy::Full19, (0..256 * 256).map(|i| (i % 19) as u8).collect()).unwrap();
        let crops = ten_crop(&img, &mask).unwrap();
        assert_eq!(crops.len(), 10);
        assert!(crops.iter().all(|(i, m)| i.shape() == Shape::new(1, 3, 224, 224) && m.height() == 224));
        assert_eq!(crops[0].0.get(0, 0, 0, 0), img.get(0, 0, 0, 0));
        assert_eq!(crops[1].0.get(0, 0, 0, 0), img.get(0, 0, 0, 32));
        assert_eq!(crops[3].0.get(0, 1, 0, 0), img.get(0, 1, 32, 32));
        assert_eq!(crops[4].0.get(0, 0, 0, 0), img.get(0, 0, 16, 16));
        // flipped TL: first column is source column 223
        assert_eq!(crops[5].0.get(0, 2, 7, 0), img.get(0, 2, 7, 223));
        assert_eq!(crops[5].1.get(7, 0), mask.get(7, 223));
        assert!(ten_crop(&ramp(255, 256), &mask).is_err());
    }

    #[test]
    fn center_crop_of_symmetric_image_is_flip_invariant() {
        let s = Shape::new(1, 3, 256, 256);
        let img = Tensor::from_buffer(s, (0..s.numel()).map(|i| {
            let x = i % 256;
            x.min(255 - x) as f32
        }).collect()).unwrap();
        let mask = LabelMap::filled(256, 256, Taxonomy::Single9, 2).unwrap();
        let crops = ten_crop(&img, &mask).unwrap();
        assert_eq!(crops[4].0, crops[9].0);
    }
}
