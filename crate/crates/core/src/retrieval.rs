//! Ranking and metric computation for text-video retrieval with the combined
//! global + local similarity.

use serde::{Deserialize, Serialize};

use crate::alignment::{compute_bundle, LossFlags, SimilarityBundle};
use crate::config::ModelConfig;
use crate::dataset::{sample_frames, Dataset, SamplingMode};
use crate::datamodel::RegionRecord;
use crate::encoders::{Encoded, Model, ParameterStore};
use crate::error::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalDirection {
    /// Text query against a video gallery.
    T2v,
    /// Video query against a caption gallery.
    V2t,
}

impl std::fmt::Display for RetrievalDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrievalDirection::T2v => write!(f, "t2v"),
            RetrievalDirection::V2t => write!(f, "v2t"),
        }
    }
}

/// Final retrieval score: unweighted sum of the global and the
/// direction-appropriate local similarity. Range `[-2, 2]`.
pub fn final_similarity(global: f64, local: f64) -> f64 {
    global + local
}

/// 1-based rank of the ground truth under the pessimistic tie rule: ties
/// count against the truth.
pub fn rank_of_truth(scores: &[f64], truth_index: usize) -> usize {
    assert!(truth_index < scores.len(), "truth index out of range");
    let truth = scores[truth_index];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == truth_index {
            continue;
        }
        if s >= truth {
            rank += 1;
        }
    }
    rank
}

/// `R@K` in percent.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    assert!(!ranks.is_empty(), "no ranks");
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Median rank; the mean of the two middle ranks for even counts.
pub fn median_rank(ranks: &[usize]) -> f64 {
    assert!(!ranks.is_empty(), "no ranks");
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Metrics report in the shape written to `metrics.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: RetrievalDirection,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "MedR")]
    pub med_r: f64,
    pub num_queries: usize,
    pub checkpoint_id: String,
}

/// Options for one evaluation run.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Frames per video, uniformly sampled (clamped to each video's total).
    pub num_frames: usize,
    pub checkpoint_id: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            num_frames: 8,
            checkpoint_id: String::new(),
        }
    }
}

/// Encode every video and caption of a split once.
pub fn encode_split(
    store: &ParameterStore,
    config: &ModelConfig,
    dataset: &Dataset,
    num_frames: usize,
) -> Result<(Vec<Encoded>, Vec<Encoded>), ModelError> {
    let model = Model::new(store, config);
    let mut videos = Vec::with_capacity(dataset.len());
    let mut texts = Vec::with_capacity(dataset.len());
    for video in &dataset.videos {
        let m = num_frames.min(video.num_frames_total).min(config.max_frames);
        let frames = sample_frames(video.num_frames_total, m, SamplingMode::Uniform, 0)
            .map_err(ModelError::Data)?;
        let per_frame: Vec<Vec<RegionRecord>> = frames
            .iter()
            .map(|&f| video.regions_in_frame(f))
            .collect();
        let selected =
            crate::dataset::select_regions_sorted(&per_frame, config.object_num)
                .map_err(ModelError::Data)?;
        let vmask = vec![true; selected.len() + 1];
        videos.push(model.encode_video_sample(&selected, &frames, &vmask)?);
        let tmask = vec![true; video.caption.token_ids.len()];
        texts.push(model.encode_text_sample(&video.caption.token_ids, &tmask)?);
    }
    Ok((videos, texts))
}

/// Score matrix `[queries x gallery]` under the final similarity for one
/// direction.
pub fn score_matrix(bundle: &SimilarityBundle, direction: RetrievalDirection) -> Vec<Vec<f64>> {
    let b = bundle.batch_size();
    let mut scores = vec![vec![0.0; b]; b];
    for q in 0..b {
        for g in 0..b {
            scores[q][g] = match direction {
                // query = caption q, gallery item = video g
                RetrievalDirection::T2v => final_similarity(
                    bundle.s_global.at(g, q),
                    bundle.s_local_l2v.at(q, g),
                ),
                // query = video q, gallery item = caption g
                RetrievalDirection::V2t => final_similarity(
                    bundle.s_global.at(q, g),
                    bundle.s_local_v2l.at(q, g),
                ),
            };
        }
    }
    scores
}

/// Full retrieval evaluation of a dataset split: gallery encoded once,
/// every query scored against all gallery items, R@K and MedR reported.
pub fn evaluate_retrieval(
    store: &ParameterStore,
    config: &ModelConfig,
    dataset: &Dataset,
    direction: RetrievalDirection,
    opts: &EvalOptions,
) -> Result<MetricsReport, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::Data(crate::error::DataError::DatasetTooSmall(0)));
    }
    let (videos, texts) = encode_split(store, config, dataset, opts.num_frames)?;
    let flags = LossFlags {
        use_local_losses: true,
        use_refinement: config.use_refinement,
    };
    let bundle = compute_bundle(&videos, &texts, flags)?;
    let scores = score_matrix(&bundle, direction);
    let ranks: Vec<usize> = scores
        .iter()
        .enumerate()
        .map(|(q, row)| rank_of_truth(row, q))
        .collect();
    Ok(MetricsReport {
        direction,
        r1: recall_at_k(&ranks, 1),
        r5: recall_at_k(&ranks, 5),
        r10: recall_at_k(&ranks, 10),
        med_r: median_rank(&ranks),
        num_queries: ranks.len(),
        checkpoint_id: opts.checkpoint_id.clone(),
    })
}
