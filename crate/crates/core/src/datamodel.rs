//! Core domain types: regions, samples, batches, and their validation.
//!
//! All types are immutable value objects after construction and safe to share
//! across threads. Validation never panics on malformed numeric content; it
//! reports every violation it finds.

use serde::{Deserialize, Serialize};

use crate::config::{CLS_ID, PAD_ID};
use crate::error::DataError;

/// Tolerance for the derived-entry consistency checks on location vectors.
pub const LOCATION_TOL: f64 = 1e-6;

/// One detected region: pooled detector embedding plus box geometry.
///
/// `location` is `[x1, y1, x2, y2, w, h, w*h]`, all normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub feature: Vec<f32>,
    pub location: [f32; 7],
    pub confidence: f32,
    pub frame_index: u32,
}

/// A video's selected regions plus the frame bookkeeping needed to embed them.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub regions: Vec<RegionRecord>,
    pub num_frames_total: usize,
    pub sampled_frame_indices: Vec<u32>,
}

/// A tokenized caption; `token_ids[0]` is always the CLS id.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    pub text: String,
    pub token_ids: Vec<u32>,
}

impl CaptionSample {
    /// Number of content tokens (CLS excluded).
    pub fn content_len(&self) -> usize {
        self.token_ids.len().saturating_sub(1)
    }
}

/// Anything that can list its invariant violations.
pub trait Validate {
    /// All violations found; an empty list means the value is valid.
    fn violations(&self) -> Vec<String>;
}

impl Validate for RegionRecord {
    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let l: Vec<f64> = self.location.iter().map(|&v| v as f64).collect();
        for (i, v) in l.iter().enumerate() {
            if !v.is_finite() {
                out.push(format!("location[{i}] is not finite"));
            } else if !(0.0..=1.0).contains(v) {
                out.push(format!("location[{i}] = {v} outside [0, 1]"));
            }
        }
        if l[0] > l[2] {
            out.push(format!("x1 {} > x2 {}", l[0], l[2]));
        }
        if l[1] > l[3] {
            out.push(format!("y1 {} > y2 {}", l[1], l[3]));
        }
        if (l[4] - (l[2] - l[0])).abs() > LOCATION_TOL {
            out.push(format!(
                "width mismatch: location[4] = {} but x2-x1 = {}",
                l[4],
                l[2] - l[0]
            ));
        }
        if (l[5] - (l[3] - l[1])).abs() > LOCATION_TOL {
            out.push(format!(
                "height mismatch: location[5] = {} but y2-y1 = {}",
                l[5],
                l[3] - l[1]
            ));
        }
        if (l[6] - l[4] * l[5]).abs() > LOCATION_TOL {
            out.push(format!(
                "area mismatch: location[6] = {} but w*h = {}",
                l[6],
                l[4] * l[5]
            ));
        }
        let c = self.confidence as f64;
        if !c.is_finite() || !(0.0..=1.0).contains(&c) {
            out.push(format!("confidence {c} outside [0, 1]"));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            out.push("feature contains non-finite entries".into());
        }
        out
    }
}

impl Validate for VideoSample {
    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.regions.is_empty() {
            out.push("no regions after selection".into());
        }
        if self.num_frames_total == 0 {
            out.push("num_frames_total must be >= 1".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !self.sampled_frame_indices.contains(&r.frame_index) {
                out.push(format!(
                    "region {i} frame_index {} not in sampled frames {:?}",
                    r.frame_index, self.sampled_frame_indices
                ));
            }
            for v in r.violations() {
                out.push(format!("region {i}: {v}"));
            }
        }
        out
    }
}

impl VideoSample {
    /// Check the per-frame region budget `N <= object_num * |sampled frames|`.
    pub fn budget_violations(&self, object_num: usize) -> Vec<String> {
        let cap = object_num * self.sampled_frame_indices.len();
        if self.regions.len() > cap {
            vec![format!(
                "{} regions exceed budget {} ({} per frame x {} frames)",
                self.regions.len(),
                cap,
                object_num,
                self.sampled_frame_indices.len()
            )]
        } else {
            Vec::new()
        }
    }
}

impl Validate for CaptionSample {
    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.token_ids.first() {
            Some(&id) if id == CLS_ID => {}
            Some(&id) => out.push(format!("token_ids[0] = {id} is not the CLS id")),
            None => out.push("empty token sequence".into()),
        }
        if self.token_ids.len() < 2 {
            out.push("empty caption".into());
        }
        if self.token_ids.iter().skip(1).any(|&id| id == PAD_ID) {
            out.push("PAD id inside the sequence".into());
        }
        out
    }
}

/// B paired examples with right-padding masks. Masks are true exactly on
/// real positions: `region_pad_mask` is `[B x N_max]` over content regions,
/// `word_pad_mask` is `[B x (L_max + 1)]` over tokens including CLS.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pairs: Vec<(VideoSample, CaptionSample)>,
    pub region_pad_mask: Vec<Vec<bool>>,
    pub word_pad_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_regions(&self) -> usize {
        self.region_pad_mask.first().map_or(0, |m| m.len())
    }

    pub fn max_tokens(&self) -> usize {
        self.word_pad_mask.first().map_or(0, |m| m.len())
    }
}

/// Assemble a contrastive batch with right-padding masks.
pub fn make_batch(pairs: Vec<(VideoSample, CaptionSample)>) -> Result<Batch, DataError> {
    if pairs.len() < 2 {
        return Err(DataError::BatchTooSmall(pairs.len()));
    }
    let n_max = pairs.iter().map(|(v, _)| v.regions.len()).max().unwrap();
    let t_max = pairs.iter().map(|(_, c)| c.token_ids.len()).max().unwrap();
    let region_pad_mask = pairs
        .iter()
        .map(|(v, _)| {
            (0..n_max).map(|i| i < v.regions.len()).collect::<Vec<_>>()
        })
        .collect();
    let word_pad_mask = pairs
        .iter()
        .map(|(_, c)| {
            (0..t_max).map(|i| i < c.token_ids.len()).collect::<Vec<_>>()
        })
        .collect();
    Ok(Batch {
        pairs,
        region_pad_mask,
        word_pad_mask,
    })
}
