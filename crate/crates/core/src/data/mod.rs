//! Images, masks, the class taxonomies and dataset iteration.

mod dataset;
mod pnm;
mod stats;
mod taxonomy;
mod transform;

pub use dataset::{one_hot, Batch, BatchIter, Dataset, DatasetConfig, Manifest, ManifestEntry, SampleId};
pub use pnm::{load_image, load_mask, save_image, save_mask, Palette, PaletteEntry, Pnm};
pub use stats::{compute_stats, NormalizationStats, StatsAccumulator};
pub use taxonomy::{remap_to_single9, LabelMap, Taxonomy, FULL19, FULL19_TO_SINGLE9, SINGLE9};
pub use transform::{
    crop_image, crop_mask, resize_image, resize_mask, ten_crop, ten_crop_geometry, ten_crop_one, CROP_SIZE, TRAIN_SIZE,
};
