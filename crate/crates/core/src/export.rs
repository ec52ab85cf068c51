//! Attention export for offline heatmap plotting: the pre- and
//! post-refinement region-word attention of one (video, caption) pair plus
//! the region boxes.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::alignment::pair_attention;
use crate::config::ModelConfig;
use crate::dataset::{sample_frames, Dataset, SamplingMode};
use crate::encoders::{Model, ParameterStore};
use crate::error::ModelError;

#[derive(Clone, Debug, Serialize)]
pub struct AttentionExport {
    pub video_id: String,
    pub caption: String,
    /// Content words in caption order (CLS excluded).
    pub words: Vec<String>,
    /// One `[x1, y1, x2, y2, w, h, area]` row per region.
    pub region_boxes: Vec<[f32; 7]>,
    /// Pre-refinement attention, `[regions x words]`.
    pub attention: Vec<Vec<f64>>,
    /// Post-refinement attention, `[regions x words]`.
    pub refined: Vec<Vec<f64>>,
}

/// Compute the export payload for `video_id`, pairing the video with
/// `caption_override` or its own caption.
pub fn export_attention(
    store: &ParameterStore,
    config: &ModelConfig,
    dataset: &Dataset,
    video_id: &str,
    caption_override: Option<&str>,
    num_frames: usize,
) -> Result<AttentionExport, ModelError> {
    let video = dataset.find(video_id).map_err(ModelError::Data)?;
    let caption = match caption_override {
        Some(text) => crate::dataset::tokenize(text, &dataset.vocab).map_err(ModelError::Data)?,
        None => video.caption.clone(),
    };

    let m = num_frames
        .min(video.num_frames_total)
        .min(config.max_frames);
    let frames = sample_frames(video.num_frames_total, m, SamplingMode::Uniform, 0)
        .map_err(ModelError::Data)?;
    let per_frame: Vec<_> = frames.iter().map(|&f| video.regions_in_frame(f)).collect();
    let selected = crate::dataset::select_regions_sorted(&per_frame, config.object_num)
        .map_err(ModelError::Data)?;

    let model = Model::new(store, config);
    let vmask = vec![true; selected.len() + 1];
    let encoded_v = model.encode_video_sample(&selected, &frames, &vmask)?;
    let tmask = vec![true; caption.token_ids.len()];
    let encoded_t = model.encode_text_sample(&caption.token_ids, &tmask)?;

    let attn = pair_attention(&encoded_v.content(), &encoded_t.content())?;
    let words = caption
        .token_ids
        .iter()
        .skip(1)
        .map(|&id| {
            dataset
                .vocab
                .word_of(id)
                .unwrap_or(if id == crate::config::UNK_ID { "<unk>" } else { "<pad>" })
                .to_string()
        })
        .collect();
    Ok(AttentionExport {
        video_id: video_id.to_string(),
        caption: caption.text.clone(),
        words,
        region_boxes: selected.iter().map(|r| r.location).collect(),
        attention: attn.weights,
        refined: attn.refined,
    })
}

/// Write the export payload as pretty JSON.
pub fn write_attention_export(path: &Path, export: &AttentionExport) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(export)?)?;
    Ok(())
}
