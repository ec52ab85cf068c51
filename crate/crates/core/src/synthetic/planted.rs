//! Synthetic datasets with a planted region-word correspondence.
//!
//! Each video's regions are noisy copies of concept vectors and its caption
//! contains exactly those concepts' words plus distractors, so retrieval and
//! fine-grained alignment both have a known ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::datamodel::RegionRecord;
use crate::dataset::{
    normalize_box, write_dataset, Dataset, LoadedVideo, ManifestVideo, SamplingMode, Vocab,
};
use crate::dataset::{sample_frames, tokenize};
use crate::encoders::{Model, ParameterStore};
use crate::error::{DataError, ModelError};
use crate::tensor::Tensor;

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Clone, Debug)]
pub struct PlantedParams {
    pub b_train: usize,
    pub b_test: usize,
    /// Regions per video (N).
    pub n_regions: usize,
    /// Content words per caption (L), concepts plus distractors.
    pub n_words: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub n_concepts: usize,
    pub n_distractors: usize,
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            b_train: 64,
            b_test: 32,
            n_regions: 8,
            n_words: 10,
            d: 32,
            noise_sigma: 0.1,
            n_concepts: 32,
            n_distractors: 16,
            seed: 0,
        }
    }
}

/// `video_id -> [(region index, content word index)]`.
pub type TruthMap = BTreeMap<String, Vec<(usize, usize)>>;

#[derive(Clone, Debug)]
pub struct PlantedVideo {
    pub video_id: String,
    pub caption: String,
    pub regions: Vec<RegionRecord>,
    pub truth: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct PlantedDataset {
    pub params: PlantedParams,
    pub vocab: Vocab,
    pub concepts: Vec<Vec<f64>>,
    pub train: Vec<PlantedVideo>,
    pub test: Vec<PlantedVideo>,
}

impl PlantedDataset {
    pub fn truth_map(videos: &[PlantedVideo]) -> TruthMap {
        videos
            .iter()
            .map(|v| (v.video_id.clone(), v.truth.clone()))
            .collect()
    }

    /// In-memory view of one split in the standard dataset shape.
    pub fn to_dataset(&self, videos: &[PlantedVideo]) -> Result<Dataset, DataError> {
        let loaded = videos
            .iter()
            .map(|v| {
                Ok(LoadedVideo {
                    video_id: v.video_id.clone(),
                    caption: tokenize(&v.caption, &self.vocab)?,
                    num_frames_total: 1,
                    frame_width: 100,
                    frame_height: 100,
                    regions: v.regions.clone(),
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Dataset {
            dim: self.params.d,
            vocab: self.vocab.clone(),
            videos: loaded,
        })
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Sample a planted dataset. Every region lives in frame 0 of a single-frame
/// video; captions hold the region concepts' words plus distractors in
/// shuffled order. Regions carry strictly decreasing confidences so sorted
/// selection preserves generation order and the truth map stays aligned.
pub fn generate_planted_dataset(params: &PlantedParams) -> Result<PlantedDataset, DataError> {
    let p = params;
    if p.n_concepts < p.n_regions {
        return Err(DataError::BadPlantedParams(format!(
            "n_concepts {} < regions per video {}",
            p.n_concepts, p.n_regions
        )));
    }
    if p.n_words < p.n_regions {
        return Err(DataError::BadPlantedParams(format!(
            "caption length {} < regions per video {}",
            p.n_words, p.n_regions
        )));
    }
    if p.n_distractors < p.n_words - p.n_regions {
        return Err(DataError::BadPlantedParams(format!(
            "{} distractor words cannot fill {} caption slots",
            p.n_distractors,
            p.n_words - p.n_regions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let concepts: Vec<Vec<f64>> = (0..p.n_concepts).map(|_| unit_vector(&mut rng, p.d)).collect();

    let mut vocab = Vocab::new();
    for c in 0..p.n_concepts {
        vocab.add(format!("c{c}"));
    }
    for k in 0..p.n_distractors {
        vocab.add(format!("d{k}"));
    }

    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).unwrap();
    let make_split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count);
        for v in 0..count {
            // pick N distinct concepts
            let mut pool: Vec<usize> = (0..p.n_concepts).collect();
            pool.shuffle(rng);
            let picked: Vec<usize> = pool[..p.n_regions].to_vec();

            let mut regions = Vec::with_capacity(p.n_regions);
            for (k, &c) in picked.iter().enumerate() {
                let mut feat: Vec<f64> = concepts[c].clone();
                if p.noise_sigma > 0.0 {
                    for x in feat.iter_mut() {
                        *x += noise.sample(rng);
                    }
                    let n = feat.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                    for x in feat.iter_mut() {
                        *x /= n;
                    }
                }
                let x1 = rng.gen_range(0.0..50.0);
                let y1 = rng.gen_range(0.0..50.0);
                let w = rng.gen_range(10.0..50.0);
                let h = rng.gen_range(10.0..50.0);
                let location = normalize_box((x1, y1, x1 + w, y1 + h), 100.0, 100.0)
                    .expect("generated box is valid");
                regions.push(RegionRecord {
                    feature: feat.iter().map(|&x| x as f32).collect(),
                    location,
                    confidence: (0.99 - 0.005 * k as f32).max(0.01),
                    frame_index: 0,
                });
            }

            // caption: concept words + distinct distractors, shuffled
            let mut words: Vec<(String, Option<usize>)> = picked
                .iter()
                .enumerate()
                .map(|(k, &c)| (format!("c{c}"), Some(k)))
                .collect();
            let mut dpool: Vec<usize> = (0..p.n_distractors).collect();
            dpool.shuffle(rng);
            for &k in dpool.iter().take(p.n_words - p.n_regions) {
                words.push((format!("d{k}"), None));
            }
            words.shuffle(rng);

            let caption = words
                .iter()
                .map(|(w, _)| w.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let truth: Vec<(usize, usize)> = words
                .iter()
                .enumerate()
                .filter_map(|(pos, (_, region))| region.map(|r| (r, pos)))
                .collect();

            out.push(PlantedVideo {
                video_id: format!("{prefix}{v:04}"),
                caption,
                regions,
                truth,
            });
        }
        out
    };

    let train = make_split("train", p.b_train, &mut rng);
    let test = make_split("test", p.b_test, &mut rng);
    Ok(PlantedDataset {
        params: p.clone(),
        vocab,
        concepts,
        train,
        test,
    })
}

/// Persist one split in the standard dataset format plus a `truth.json`
/// sidecar.
pub fn write_planted_dataset(
    dir: &Path,
    planted: &PlantedDataset,
    videos: &[PlantedVideo],
) -> Result<(), DataError> {
    let metas: Vec<(ManifestVideo, Vec<RegionRecord>)> = videos
        .iter()
        .map(|v| {
            (
                ManifestVideo {
                    video_id: v.video_id.clone(),
                    caption: v.caption.clone(),
                    num_frames_total: 1,
                    frame_width: 100,
                    frame_height: 100,
                    feature_file: format!("{}.bin", v.video_id),
                    region_count: v.regions.len(),
                },
                v.regions.clone(),
            )
        })
        .collect();
    write_dataset(dir, &planted.vocab, planted.params.d, &metas)?;
    let truth = PlantedDataset::truth_map(videos);
    fs::write(
        dir.join(TRUTH_FILE),
        serde_json::to_string_pretty(&truth)?,
    )?;
    Ok(())
}

/// Fraction of planted (region, word) pairs whose pre-refinement attention
/// argmax lands on the planted word, in percent.
pub fn planted_alignment_accuracy(
    store: &ParameterStore,
    config: &ModelConfig,
    dataset: &Dataset,
    truth: &TruthMap,
) -> Result<f64, ModelError> {
    let model = Model::new(store, config);
    let mut hits = 0usize;
    let mut total = 0usize;
    for video in &dataset.videos {
        let Some(pairs) = truth.get(&video.video_id) else {
            continue;
        };
        let frames = sample_frames(
            video.num_frames_total,
            video.num_frames_total.min(config.max_frames),
            SamplingMode::Uniform,
            0,
        )
        .map_err(ModelError::Data)?;
        let regions: Vec<RegionRecord> = video
            .regions
            .iter()
            .filter(|r| frames.contains(&r.frame_index))
            .cloned()
            .collect();
        let vmask = vec![true; regions.len() + 1];
        let encoded_v = model.encode_video_sample(&regions, &frames, &vmask)?;
        let tmask = vec![true; video.caption.token_ids.len()];
        let encoded_t = model.encode_text_sample(&video.caption.token_ids, &tmask)?;
        let r = encoded_v.content();
        let t = encoded_t.content();
        let sims = crate::alignment::cosine_matrix(&r, &t)?;
        for &(region_idx, word_idx) in pairs {
            let a = crate::alignment::attention_weights(
                sims.row(region_idx),
                &vec![true; t.rows()],
            )?;
            let argmax = a
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == word_idx {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(100.0 * hits as f64 / total.max(1) as f64)
}

/// Identity-encoder shortcut used by generator tests: attention accuracy
/// straight on the raw planted features.
pub fn raw_alignment_accuracy(planted: &PlantedDataset, videos: &[PlantedVideo]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for v in videos {
        let words: Vec<&str> = v.caption.split(' ').collect();
        let word_vecs: Vec<Vec<f64>> = words
            .iter()
            .map(|w| {
                if let Some(c) = w.strip_prefix('c') {
                    if let Ok(idx) = c.parse::<usize>() {
                        return planted.concepts[idx].clone();
                    }
                }
                // distractors: a fixed arbitrary direction far from any
                // concept is unnecessary; zeros keep them inert
                vec![0.0; planted.params.d]
            })
            .collect();
        let t = Tensor::from_rows(&word_vecs);
        let feats: Vec<Vec<f64>> = v
            .regions
            .iter()
            .map(|r| r.feature.iter().map(|&x| x as f64).collect())
            .collect();
        let r = Tensor::from_rows(&feats);
        let sims = crate::alignment::cosine_matrix(&r, &t).unwrap();
        for &(region_idx, word_idx) in &v.truth {
            let row = sims.row(region_idx);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == word_idx {
                hits += 1;
            }
            total += 1;
        }
    }
    100.0 * hits as f64 / total.max(1) as f64
}
