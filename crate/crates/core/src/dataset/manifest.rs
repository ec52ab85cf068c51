//! `manifest.json` plus per-video binaries on disk; `Dataset` in memory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{CaptionSample, RegionRecord};
use crate::error::DataError;

use super::binary::{read_regions, write_regions};
use super::tokenizer::{tokenize, Vocab};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub video_id: String,
    pub caption: String,
    pub num_frames_total: usize,
    pub frame_width: u32,
    pub frame_height: u32,
    pub feature_file: String,
    pub region_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dim: usize,
    pub cls_and_vocab: Vocab,
    pub videos: Vec<ManifestVideo>,
}

/// One fully loaded video: the detector's region pool (all frames) plus the
/// tokenized caption.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub video_id: String,
    pub caption: CaptionSample,
    pub num_frames_total: usize,
    pub frame_width: u32,
    pub frame_height: u32,
    pub regions: Vec<RegionRecord>,
}

impl LoadedVideo {
    /// Regions of the given original frame, in detector order.
    pub fn regions_in_frame(&self, frame: u32) -> Vec<RegionRecord> {
        self.regions
            .iter()
            .filter(|r| r.frame_index == frame)
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dim: usize,
    pub vocab: Vocab,
    pub videos: Vec<LoadedVideo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn find(&self, video_id: &str) -> Result<&LoadedVideo, DataError> {
        self.videos
            .iter()
            .find(|v| v.video_id == video_id)
            .ok_or_else(|| DataError::UnknownVideo(video_id.to_string()))
    }
}

/// Write a dataset directory: `manifest.json` plus one binary per video.
/// Output is byte-stable: writing the same dataset twice produces identical
/// files.
pub fn write_dataset(
    dir: &Path,
    vocab: &Vocab,
    dim: usize,
    videos: &[(ManifestVideo, Vec<RegionRecord>)],
) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest_videos = Vec::with_capacity(videos.len());
    for (meta, regions) in videos {
        if regions.len() != meta.region_count {
            return Err(DataError::RegionCountMismatch {
                video_id: meta.video_id.clone(),
                expected: meta.region_count,
                found: regions.len(),
            });
        }
        let bytes = write_regions(regions, dim)?;
        fs::write(dir.join(&meta.feature_file), bytes)?;
        manifest_videos.push(meta.clone());
    }
    let manifest = DatasetManifest {
        version: super::binary::FORMAT_VERSION,
        dim,
        cls_and_vocab: vocab.clone(),
        videos: manifest_videos,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Load a dataset directory back into memory, validating the binary headers
/// against the manifest and tokenizing every caption.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for meta in &manifest.videos {
        let bytes = fs::read(dir.join(&meta.feature_file))?;
        let regions = read_regions(&bytes, manifest.dim)?;
        if regions.len() != meta.region_count {
            return Err(DataError::RegionCountMismatch {
                video_id: meta.video_id.clone(),
                expected: meta.region_count,
                found: regions.len(),
            });
        }
        let caption = tokenize(&meta.caption, &manifest.cls_and_vocab)?;
        videos.push(LoadedVideo {
            video_id: meta.video_id.clone(),
            caption,
            num_frames_total: meta.num_frames_total,
            frame_width: meta.frame_width,
            frame_height: meta.frame_height,
            regions,
        });
    }
    Ok(Dataset {
        dim: manifest.dim,
        vocab: manifest.cls_and_vocab,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> (Vocab, Vec<(ManifestVideo, Vec<RegionRecord>)>) {
        let vocab = Vocab::from_words(["a", "dog", "runs"]);
        let regions = vec![RegionRecord {
            feature: vec![1.0, 2.0],
            location: [0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.25],
            confidence: 0.9,
            frame_index: 0,
        }];
        let meta = ManifestVideo {
            video_id: "vid0".into(),
            caption: "A dog runs.".into(),
            num_frames_total: 4,
            frame_width: 320,
            frame_height: 240,
            feature_file: "vid0.bin".into(),
            region_count: 1,
        };
        (vocab, vec![(meta, regions)])
    }

    #[test]
    fn round_trip_preserves_values() {
        let dir = tempdir().unwrap();
        let (vocab, videos) = sample();
        write_dataset(dir.path(), &vocab, 2, &videos).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.dim, 2);
        assert_eq!(ds.videos.len(), 1);
        assert_eq!(ds.videos[0].regions, videos[0].1);
        assert_eq!(ds.videos[0].caption.token_ids, vec![1, 3, 4, 5]);
    }

    #[test]
    fn writing_twice_is_byte_stable() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let (vocab, videos) = sample();
        write_dataset(d1.path(), &vocab, 2, &videos).unwrap();
        write_dataset(d2.path(), &vocab, 2, &videos).unwrap();
        for f in [MANIFEST_FILE, "vid0.bin"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn manifest_dim_mismatch_is_detected() {
        let dir = tempdir().unwrap();
        let (vocab, videos) = sample();
        write_dataset(dir.path(), &vocab, 2, &videos).unwrap();
        // Rewrite the manifest claiming a different dim.
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"dim\": 2", "\"dim\": 16")).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DataError::DimMismatch {
                expected: 16,
                found: 2
            })
        ));
    }

    #[test]
    fn region_count_mismatch_is_detected() {
        let dir = tempdir().unwrap();
        let (vocab, mut videos) = sample();
        videos[0].0.region_count = 7;
        assert!(matches!(
            write_dataset(dir.path(), &vocab, 2, &videos),
            Err(DataError::RegionCountMismatch { .. })
        ));
    }

    #[test]
    fn unknown_video_lookup_fails() {
        let dir = tempdir().unwrap();
        let (vocab, videos) = sample();
        write_dataset(dir.path(), &vocab, 2, &videos).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(ds.find("vid0").is_ok());
        assert!(matches!(
            ds.find("nope"),
            Err(DataError::UnknownVideo(_))
        ));
    }
}
