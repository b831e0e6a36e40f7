//! Class taxonomies and per-pixel label maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FULL19: [&str; 19] = [
    "Unknown",
    "Grasper",
    "Bipolar",
    "Hook",
    "Scissors",
    "Clipper",
    "Irrigator",
    "SpecimenBag",
    "Trocars",
    "Clip",
    "Liver",
    "Gallbladder",
    "Fat",
    "UpperWall",
    "Intestine",
    "Artery",
    "Bile",
    "Blood",
    "Black",
];

pub const SINGLE9: [&str; 9] = [
    "Unknown",
    "Instruments",
    "Liver",
    "Gallbladder",
    "Fat",
    "UpperWall",
    "Intestine",
    "Artery",
    "Black",
];

/// `FULL19` index -> `SINGLE9` index. Instruments collapse to one class;
/// Bile and Blood merge into Gallbladder.
pub const FULL19_TO_SINGLE9: [u8; 19] = [0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 3, 4, 5, 6, 7, 3, 3, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taxonomy {
    Full19,
    Single9,
}

impl Taxonomy {
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            Taxonomy::Full19 => &FULL19,
            Taxonomy::Single9 => &SINGLE9,
        }
    }

    pub fn len(self) -> usize {
        self.classes().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn name(self) -> &'static str {
        match self {
            Taxonomy::Full19 => "full19",
            Taxonomy::Single9 => "single9",
        }
    }

    pub fn index_of(self, class: &str) -> Option<usize> {
        self.classes().iter().position(|c| c.eq_ignore_ascii_case(class))
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Taxonomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full19" => Ok(Taxonomy::Full19),
            "single9" => Ok(Taxonomy::Single9),
            _ => Err(Error::Config(format!("unknown taxonomy '{s}' (expected full19 or single9)"))),
        }
    }
}

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    taxonomy: Taxonomy,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, taxonomy: Taxonomy, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} given {} labels",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= taxonomy.len()) {
            return Err(Error::Data(format!(
                "label {} at ({}, {}) is outside {taxonomy} ({} classes)",
                labels[pos],
                pos / width.max(1),
                pos % width.max(1),
                taxonomy.len()
            )));
        }
        Ok(LabelMap { height, width, taxonomy, labels })
    }

    pub fn filled(height: usize, width: usize, taxonomy: Taxonomy, class: u8) -> Result<Self> {
        Self::new(height, width, taxonomy, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn taxonomy(&self) -> Taxonomy {
        self.taxonomy
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.taxonomy.len()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Labels with the taxonomy tag dropped, for internal reshaping.
    pub(crate) fn from_parts_unchecked(height: usize, width: usize, taxonomy: Taxonomy, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), height * width);
        LabelMap { height, width, taxonomy, labels }
    }
}

pub fn remap_to_single9(map: &LabelMap) -> Result<LabelMap> {
    if map.taxonomy != Taxonomy::Full19 {
        return Err(Error::contract(format!("remap_to_single9 expects a full19 map, got {}", map.taxonomy)));
    }
    let labels = map.labels.iter().map(|&l| FULL19_TO_SINGLE9[l as usize]).collect();
    Ok(LabelMap::from_parts_unchecked(map.height, map.width, Taxonomy::Single9, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_orders() {
        assert_eq!(Taxonomy::Full19.len(), 19);
        assert_eq!(Taxonomy::Single9.len(), 9);
        assert_eq!(Taxonomy::Full19.index_of("Bile"), Some(16));
        assert_eq!(Taxonomy::Single9.index_of("Black"), Some(8));
        assert_eq!("single9".parse::<Taxonomy>().unwrap(), Taxonomy::Single9);
        assert!("full20".parse::<Taxonomy>().is_err());
    }

    #[test]
    fn remap_by_name() {
        for (src, dst) in FULL19.iter().zip(FULL19_TO_SINGLE9) {
            let expect = match *src {
                "Grasper" | "Bipolar" | "Hook" | "Scissors" | "Clipper" | "Irrigator" | "SpecimenBag" | "Trocars"
                | "Clip" => "Instruments",
                "Bile" | "Blood" => "Gallbladder",
                same => same,
            };
            assert_eq!(SINGLE9[dst as usize], expect);
        }
    }

    #[test]
    fn remap_examples() {
        let m = LabelMap::new(1, 3, Taxonomy::Full19, vec![2, 16, 10]).unwrap();
        assert_eq!(remap_to_single9(&m).unwrap().labels(), [1, 3, 2]);
        let single = remap_to_single9(&m).unwrap();
        assert!(matches!(remap_to_single9(&single), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let err = LabelMap::new(2, 2, Taxonomy::Single9, vec![0, 1, 9, 2]).unwrap_err();
        assert!(err.to_string().contains("(1, 0)"), "{err}");
    }
}
