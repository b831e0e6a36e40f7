//! Binary PPM (P6) images and PGM (P5) / palette-colored PPM masks.
//!
//! Only 8-bit binary variants are supported. Image samples are scaled by
//! the declared maxval into `[0, 1]`; mask samples are taken verbatim as
//! class indices.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::taxonomy::{LabelMap, Taxonomy};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    /// Interleaved samples, row-major.
    pub samples: Vec<u8>,
}

fn decode_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Decode { path: path.to_path_buf(), msg: msg.into() }
}

impl Pnm {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(decode_err(path, "not a binary PGM/PPM (expected P5 or P6 magic)")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            // whitespace and '#' comments between header tokens
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| decode_err(path, "malformed header"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(decode_err(path, "malformed header"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(decode_err(path, format!("unsupported maxval {maxval} (8-bit only)")));
        }
        let need = width * height * channels;
        let body = &bytes[pos..];
        if body.len() < need {
            return Err(decode_err(path, format!("truncated: {} of {need} sample bytes", body.len())));
        }
        Ok(Pnm { channels, width, height, maxval: maxval as u8, samples: body[..need].to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Loads a P6 image as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let pnm = Pnm::read(path)?;
    if pnm.channels != 3 {
        return Err(decode_err(path, "expected a color (P6) image"));
    }
    image_from_pnm(&pnm)
}

fn image_from_pnm(pnm: &Pnm) -> Result<Tensor<f32>> {
    let plane = pnm.width * pnm.height;
    let scale = 1.0 / pnm.maxval as f32;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in pnm.samples.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 * scale;
        }
    }
    Tensor::from_buffer(Shape::new(1, 3, pnm.height, pnm.width), data)
}

/// Writes the first sample of an `(n, 3, h, w)` tensor in `[0, 1]` as P6,
/// clamping and rounding to 8 bits.
pub fn save_image(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let s = img.shape();
    if s.c() != 3 {
        return Err(Error::shape(format!("save_image needs 3 channels, got {s:?}")));
    }
    let plane = s.plane();
    let mut samples = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            samples.push((img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Pnm { channels: 3, width: s.w(), height: s.h(), maxval: 255, samples }.write(path.as_ref())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub index: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

/// Class index <-> RGB mapping for color masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
    by_rgb: HashMap<[u8; 3], u8>,
}

impl Palette {
    pub fn new(mut entries: Vec<PaletteEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        let mut by_rgb = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(Error::Config(format!("palette indices must be 0..{}, dense", entries.len())));
            }
            if by_rgb.insert(e.rgb, e.index).is_some() {
                return Err(Error::Config(format!("palette color {:?} is used twice", e.rgb)));
            }
        }
        Ok(Palette { entries, by_rgb })
    }

    /// Distinct colors for every class of `taxonomy`; used when no sidecar
    /// palette is supplied for writing previews.
    pub fn default_for(taxonomy: Taxonomy) -> Self {
        let entries = taxonomy
            .classes()
            .iter()
            .enumerate()
            .map(|(i, name)| {
                // spread hues over a coarse RGB lattice
                let k = (i as u32).wrapping_mul(2_654_435_761) >> 8;
                let rgb = if i == 0 { [0, 0, 0] } else { [(k & 0xff) as u8 | 0x20, ((k >> 8) & 0xff) as u8, ((k >> 16) & 0xff) as u8] };
                PaletteEntry { index: i as u8, name: name.to_string(), rgb }
            })
            .collect();
        Palette::new(entries).expect("generated palette is bijective")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<PaletteEntry> = serde_json::from_str(&text)?;
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn rgb(&self, index: u8) -> Option<[u8; 3]> {
        self.entries.get(index as usize).map(|e| e.rgb)
    }

    pub fn index(&self, rgb: [u8; 3]) -> Option<u8> {
        self.by_rgb.get(&rgb).copied()
    }
}

/// Loads a mask: P5 samples are class indices; P6 colors are looked up in
/// `palette`, which is then required.
pub fn load_mask(path: impl AsRef<Path>, taxonomy: Taxonomy, palette: Option<&Palette>) -> Result<LabelMap> {
    let path = path.as_ref();
    let pnm = Pnm::read(path)?;
    mask_from_pnm(&pnm, taxonomy, palette, path)
}

fn mask_from_pnm(pnm: &Pnm, taxonomy: Taxonomy, palette: Option<&Palette>, path: &Path) -> Result<LabelMap> {
    let labels: Vec<u8> = match pnm.channels {
        1 => pnm.samples.clone(),
        _ => {
            let palette = palette.ok_or_else(|| decode_err(path, "color mask needs a palette"))?;
            pnm.samples
                .chunks_exact(3)
                .enumerate()
                .map(|(i, px)| {
                    let rgb = [px[0], px[1], px[2]];
                    palette.index(rgb).ok_or_else(|| {
                        decode_err(
                            path,
                            format!("unknown color {rgb:?} at pixel (x={}, y={})", i % pnm.width, i / pnm.width),
                        )
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    LabelMap::new(pnm.height, pnm.width, taxonomy, labels).map_err(|e| decode_err(path, e.to_string()))
}

/// Writes a mask as index P5, or as palette-colored P6 when `palette` is
/// given.
pub fn save_mask(map: &LabelMap, path: impl AsRef<Path>, palette: Option<&Palette>) -> Result<()> {
    let pnm = match palette {
        None => Pnm {
            channels: 1,
            width: map.width(),
            height: map.height(),
            maxval: 255,
            samples: map.labels().to_vec(),
        },
        Some(p) => {
            let mut samples = Vec::with_capacity(3 * map.labels().len());
            for &l in map.labels() {
                let rgb = p
                    .rgb(l)
                    .ok_or_else(|| Error::Data(format!("palette has no color for class {l}")))?;
                samples.extend_from_slice(&rgb);
            }
            Pnm { channels: 3, width: map.width(), height: map.height(), maxval: 255, samples }
        }
    };
    pnm.write(path.as_ref())
}
