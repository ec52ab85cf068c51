//! Dataset format, normalization, region selection, frame sampling,
//! tokenization, and batching.

mod binary;
mod boxes;
mod frames;
mod manifest;
mod select;
mod tokenizer;

pub use binary::{read_regions, write_regions, FORMAT_MAGIC, FORMAT_VERSION};
pub use boxes::{iou, normalize_box};
pub use frames::{derive_seed, sample_frames, SamplingMode};
pub use manifest::{
    read_dataset, write_dataset, Dataset, DatasetManifest, LoadedVideo, ManifestVideo,
};
pub use select::{select_regions_sorted, select_regions_tracked};
pub use tokenizer::{tokenize, Vocab};
