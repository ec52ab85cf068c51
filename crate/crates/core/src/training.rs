//! Optimizer, learning-rate schedule, training loop, and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{batch_loss_graph, LossFlags, LossTerms};
use crate::config::ModelConfig;
use crate::datamodel::{make_batch, CaptionSample, VideoSample};
use crate::dataset::{
    sample_frames, select_regions_sorted, select_regions_tracked, Dataset, SamplingMode,
};
use crate::dataset::derive_seed;
use crate::encoders::{frame_slots, DropoutCtx, ModelGraph, ParameterStore};
use crate::error::{DataError, ModelError};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Step schedule: the rate decays by `decay_factor` at each listed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl Schedule {
    /// Pre-training preset: 50 epochs at 1e-5, tenths at 30 and 40.
    pub fn pretrain() -> Self {
        Schedule {
            base_lr: 1e-5,
            decay_epochs: vec![30, 40],
            decay_factor: 0.1,
            total_epochs: 50,
        }
    }

    /// Fine-tuning preset: 10 epochs at 1e-5, tenths at 2, 4, and 8.
    pub fn finetune() -> Self {
        Schedule {
            base_lr: 1e-5,
            decay_epochs: vec![2, 4, 8],
            decay_factor: 0.1,
            total_epochs: 10,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.base_lr > 0.0 && self.decay_factor > 0.0) {
            return Err(ModelError::BadConfig(
                "learning rate and decay factor must be positive".into(),
            ));
        }
        if !self
            .decay_epochs
            .windows(2)
            .all(|w| w[0] < w[1])
        {
            return Err(ModelError::BadConfig(
                "decay_epochs must be strictly increasing".into(),
            ));
        }
        if self
            .decay_epochs
            .last()
            .is_some_and(|&e| e >= self.total_epochs)
        {
            return Err(ModelError::BadConfig(
                "decay epochs must lie before total_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// Round to 12 significant decimal digits. Schedule values come from decimal
/// config text; canonicalizing after each decay keeps chains like
/// 1e-5 -> 1e-6 -> 1e-7 exact instead of drifting by an ulp per multiply.
fn decimal12(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap()
}

/// Learning rate in effect at `epoch`.
pub fn lr_at_epoch(schedule: &Schedule, epoch: usize) -> Result<f64, ModelError> {
    if epoch >= schedule.total_epochs {
        return Err(ModelError::BadConfig(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    let mut lr = schedule.base_lr;
    for &at in &schedule.decay_epochs {
        if at <= epoch {
            lr = decimal12(lr * schedule.decay_factor);
        }
    }
    Ok(lr)
}

/// Adam state: first/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = store
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimState {
            step: 0,
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update over every parameter. Parameters without a
/// gradient entry decay their moments against a zero gradient. Values are
/// kept f32-representable.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
) -> Result<(), ModelError> {
    assert!(lr > 0.0, "learning rate must be positive");
    for (name, grad) in grads {
        if !grad.is_finite() {
            return Err(ModelError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let zero = Tensor::scalar(0.0);
    for (name, param) in store.iter_mut() {
        let g = grads.get(name).unwrap_or(&zero);
        let m = state.m.get_mut(name).expect("moment missing");
        let v = state.v.get_mut(name).expect("moment missing");
        let n = param.len();
        for i in 0..n {
            let gi = if g.len() == n { g.data()[i] } else { 0.0 };
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        param.round_to_f32();
        m.round_to_f32();
        v.round_to_f32();
    }
    Ok(())
}

/// How regions are picked from each sampled frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum RegionSelection {
    Sorted,
    Tracked { iou_threshold: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
    /// Frames sampled per video per epoch.
    pub num_frames: usize,
    pub frame_mode: SamplingMode,
    pub selection: RegionSelection,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 16,
            seed: 0,
            num_frames: 1,
            frame_mode: SamplingMode::Random,
            selection: RegionSelection::Sorted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

pub struct FitResult {
    pub store: ParameterStore,
    pub optim: OptimState,
    pub log: Vec<EpochLog>,
}

/// Build one training pair from a loaded video: sample frames, select
/// regions, attach the caption.
pub fn assemble_pair(
    video: &crate::dataset::LoadedVideo,
    config: &ModelConfig,
    opts: &TrainOptions,
    frame_seed: u64,
) -> Result<(VideoSample, CaptionSample), DataError> {
    let m = opts.num_frames.min(video.num_frames_total);
    let frames = sample_frames(video.num_frames_total, m, opts.frame_mode, frame_seed)?;
    let per_frame: Vec<Vec<crate::datamodel::RegionRecord>> = frames
        .iter()
        .map(|&f| video.regions_in_frame(f))
        .collect();
    let selected = match opts.selection {
        RegionSelection::Sorted => select_regions_sorted(&per_frame, config.object_num)?,
        RegionSelection::Tracked { iou_threshold } => {
            select_regions_tracked(&per_frame, config.object_num, iou_threshold)?
        }
    };
    Ok((
        VideoSample {
            video_id: video.video_id.clone(),
            regions: selected,
            num_frames_total: video.num_frames_total,
            sampled_frame_indices: frames,
        },
        video.caption.clone(),
    ))
}

/// Train for the full schedule. Deterministic: the loss log is a pure
/// function of (dataset, config, schedule, options, init).
pub fn fit(
    dataset: &Dataset,
    config: &ModelConfig,
    schedule: &Schedule,
    opts: &TrainOptions,
    init: Option<ParameterStore>,
) -> Result<FitResult, ModelError> {
    config.validate()?;
    schedule.validate()?;
    if dataset.len() < 2 {
        return Err(ModelError::Data(DataError::DatasetTooSmall(dataset.len())));
    }
    if opts.batch_size < 2 {
        return Err(ModelError::BadConfig(
            "batch_size must be at least 2 for contrastive training".into(),
        ));
    }
    if dataset.vocab.id_space() > config.vocab_size {
        return Err(ModelError::BadConfig(format!(
            "dataset vocabulary needs id space {} but vocab_size is {}",
            dataset.vocab.id_space(),
            config.vocab_size
        )));
    }
    for v in &dataset.videos {
        if v.caption.token_ids.len() > config.max_words {
            return Err(ModelError::BadConfig(format!(
                "caption of {} exceeds max_words {}",
                v.video_id, config.max_words
            )));
        }
    }

    let mut store = match init {
        Some(s) => {
            s.validate_shapes(config)?;
            s
        }
        None => ParameterStore::init(config, opts.seed),
    };
    store.check_finite()?;
    let mut optim = OptimState::new(&store);
    let flags = LossFlags {
        use_local_losses: config.use_local_losses,
        use_refinement: config.use_refinement,
    };

    let mut log = Vec::with_capacity(schedule.total_epochs);
    for epoch in 0..schedule.total_epochs {
        let lr = lr_at_epoch(schedule, epoch)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, epoch, usize::MAX));
        order.shuffle(&mut rng);

        let mut sums = LossTerms::default();
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // a trailing singleton cannot form a contrastive batch
            }
            let mut pairs = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                pairs.push(
                    assemble_pair(
                        &dataset.videos[idx],
                        config,
                        opts,
                        derive_seed(opts.seed, epoch, idx),
                    )
                    .map_err(ModelError::Data)?,
                );
            }
            let batch = make_batch(pairs).map_err(ModelError::Data)?;

            let mut g = Graph::new();
            let mg = ModelGraph::bind(&mut g, &store, config);
            let mut dropout = (config.dropout > 0.0).then(|| DropoutCtx {
                rng: ChaCha8Rng::seed_from_u64(derive_seed(
                    opts.seed,
                    epoch,
                    1_000_000 + step,
                )),
                p: config.dropout,
            });
            let mut videos = Vec::with_capacity(batch.len());
            let mut texts = Vec::with_capacity(batch.len());
            for (video, caption) in &batch.pairs {
                let slots =
                    frame_slots(&video.regions, &video.sampled_frame_indices, config.max_frames)?;
                let composed = mg.compose_region_input(&mut g, &video.regions, &slots);
                let vmask = vec![true; video.regions.len() + 1];
                let encoded =
                    mg.encode_video(&mut g, composed, &vmask, dropout.as_mut());
                videos.push((encoded, video.regions.len()));

                let composed_t = mg.compose_text_input(&mut g, &caption.token_ids);
                let tmask = vec![true; caption.token_ids.len()];
                let encoded_t =
                    mg.encode_text(&mut g, composed_t, &tmask, dropout.as_mut());
                texts.push((encoded_t, caption.token_ids.len() - 1));
            }

            let loss = batch_loss_graph(&mut g, &videos, &texts, config.sigma, flags);
            let grads = g.backward(loss.total);
            let mut grad_map = BTreeMap::new();
            for (name, var) in mg.param_vars() {
                if let Some(t) = grads.get(var) {
                    grad_map.insert(name.clone(), t.clone());
                }
            }
            adam_step(&mut store, &grad_map, &mut optim, lr)?;

            sums.global_v2l += g.value(loss.terms[0]).item();
            sums.global_l2v += g.value(loss.terms[1]).item();
            sums.local_v2l += g.value(loss.terms[2]).item();
            sums.local_l2v += g.value(loss.terms[3]).item();
            sums.total += g.value(loss.total).item();
            batches += 1;
        }
        if batches == 0 {
            return Err(ModelError::Data(DataError::DatasetTooSmall(dataset.len())));
        }
        let inv = 1.0 / batches as f64;
        log.push(EpochLog {
            epoch,
            lr,
            terms: LossTerms {
                global_v2l: sums.global_v2l * inv,
                global_l2v: sums.global_l2v * inv,
                local_v2l: sums.local_v2l * inv,
                local_l2v: sums.local_l2v * inv,
                total: sums.total * inv,
            },
        });
    }
    Ok(FitResult { store, optim, log })
}

// --- checkpoint serialization -------------------------------------------

pub const PARAMS_MANIFEST: &str = "params.json";
pub const PARAMS_BIN: &str = "params.bin";
pub const OPTIM_MANIFEST: &str = "optim.json";
pub const OPTIM_BIN: &str = "optim.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimManifest {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    tensors: Vec<TensorMeta>,
}

fn tensors_to_bin(ordered: &[(&String, &Tensor)]) -> Vec<u8> {
    let total: usize = ordered.iter().map(|(_, t)| t.len()).sum();
    let mut bin = Vec::with_capacity(total * 4);
    for (_, t) in ordered {
        for &v in t.data() {
            bin.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bin
}

fn bin_to_values(bytes: &[u8], expected: usize) -> Result<Vec<f64>, ModelError> {
    if bytes.len() != expected * 4 {
        return Err(ModelError::Data(DataError::Truncated {
            needed: expected * 4,
            found: bytes.len(),
        }));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write `params.json` + `params.bin` (+ `optim.json`/`optim.bin`) into
/// `dir`, tensors in canonical name order. Saving twice is byte-identical.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParameterStore,
    optim: Option<&OptimState>,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let ordered: Vec<(&String, &Tensor)> = store.iter().collect();
    let metas: Vec<TensorMeta> = ordered
        .iter()
        .map(|(n, t)| TensorMeta {
            name: (*n).clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        })
        .collect();
    fs::write(
        dir.join(PARAMS_MANIFEST),
        serde_json::to_string_pretty(&metas)?,
    )?;
    fs::write(dir.join(PARAMS_BIN), tensors_to_bin(&ordered))?;

    if let Some(state) = optim {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in &state.m {
            entries.push((format!("m.{n}"), t));
        }
        for (n, t) in &state.v {
            entries.push((format!("v.{n}"), t));
        }
        let manifest = OptimManifest {
            step: state.step,
            lr: state.lr,
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            tensors: entries
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        fs::write(
            dir.join(OPTIM_MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        let refs: Vec<(&String, &Tensor)> = entries.iter().map(|(n, t)| (n, *t)).collect();
        fs::write(dir.join(OPTIM_BIN), tensors_to_bin(&refs))?;
    }
    Ok(())
}

/// Load a checkpoint, validating names and shapes against `config`.
pub fn load_checkpoint(
    dir: &Path,
    config: &ModelConfig,
) -> Result<(ParameterStore, Option<OptimState>), ModelError> {
    let metas: Vec<TensorMeta> =
        serde_json::from_str(&fs::read_to_string(dir.join(PARAMS_MANIFEST))?)?;
    let bytes = fs::read(dir.join(PARAMS_BIN))?;
    let total: usize = metas.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    let values = bin_to_values(&bytes, total)?;

    let mut tensors = BTreeMap::new();
    let mut offset = 0usize;
    for meta in &metas {
        let n: usize = meta.shape.iter().product();
        let mut t = Tensor::zeros(&meta.shape);
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
        tensors.insert(meta.name.clone(), t);
    }
    let store = ParameterStore::from_tensors(tensors);
    store.validate_shapes(config)?;

    let optim_path = dir.join(OPTIM_MANIFEST);
    let optim = if optim_path.exists() {
        let manifest: OptimManifest = serde_json::from_str(&fs::read_to_string(optim_path)?)?;
        let bytes = fs::read(dir.join(OPTIM_BIN))?;
        let total: usize = manifest
            .tensors
            .iter()
            .map(|m| m.shape.iter().product::<usize>())
            .sum();
        let values = bin_to_values(&bytes, total)?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut offset = 0usize;
        for meta in &manifest.tensors {
            let n: usize = meta.shape.iter().product();
            let mut t = Tensor::zeros(&meta.shape);
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
            if let Some(name) = meta.name.strip_prefix("m.") {
                m.insert(name.to_string(), t);
            } else if let Some(name) = meta.name.strip_prefix("v.") {
                v.insert(name.to_string(), t);
            } else {
                return Err(ModelError::UnknownParameter(meta.name.clone()));
            }
        }
        for name in store.names() {
            if !m.contains_key(name) || !v.contains_key(name) {
                return Err(ModelError::MissingParameter(name.clone()));
            }
        }
        Some(OptimState {
            step: manifest.step,
            lr: manifest.lr,
            beta1: manifest.beta1,
            beta2: manifest.beta2,
            eps: manifest.eps,
            m,
            v,
        })
    } else {
        None
    };
    Ok((store, optim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pretrain_schedule_reproduces_decimal_rates() {
        let s = Schedule::pretrain();
        assert_eq!(lr_at_epoch(&s, 0).unwrap(), 1e-5);
        assert_eq!(lr_at_epoch(&s, 29).unwrap(), 1e-5);
        assert_eq!(lr_at_epoch(&s, 30).unwrap(), 1e-6);
        assert_eq!(lr_at_epoch(&s, 39).unwrap(), 1e-6);
        assert_eq!(lr_at_epoch(&s, 40).unwrap(), 1e-7);
        assert_eq!(lr_at_epoch(&s, 49).unwrap(), 1e-7);
    }

    #[test]
    fn finetune_schedule_applies_three_decays() {
        let s = Schedule::finetune();
        assert_eq!(lr_at_epoch(&s, 0).unwrap(), 1e-5);
        assert_eq!(lr_at_epoch(&s, 2).unwrap(), 1e-6);
        assert_eq!(lr_at_epoch(&s, 4).unwrap(), 1e-7);
        assert_eq!(lr_at_epoch(&s, 9).unwrap(), 1e-8);
    }

    #[test]
    fn lr_is_non_increasing() {
        let s = Schedule::pretrain();
        let mut prev = f64::INFINITY;
        for e in 0..s.total_epochs {
            let lr = lr_at_epoch(&s, e).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn epoch_out_of_range_is_an_error() {
        assert!(lr_at_epoch(&Schedule::pretrain(), 50).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule::pretrain();
        s.decay_epochs = vec![40, 30];
        assert!(s.validate().is_err());
        let mut s2 = Schedule::pretrain();
        s2.decay_epochs = vec![30, 60];
        assert!(s2.validate().is_err());
    }

    fn scalar_store(value: f64) -> ParameterStore {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::vector(vec![value]));
        ParameterStore::from_tensors(m)
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = scalar_store(0.5);
        let mut state = OptimState::new(&store);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![0.0]));
        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 0.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // bias correction makes mhat = g and vhat = g^2 on step one, so the
        // update is lr * sign(g) up to eps
        let mut store = scalar_store(0.0);
        let mut state = OptimState::new(&store);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![1.0]));
        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_abs_diff_eq!(store.get("p").unwrap().data()[0], -0.1, epsilon = 1e-7);
    }

    #[test]
    fn adam_identical_params_update_identically() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::vector(vec![0.25]));
        m.insert("b".to_string(), Tensor::vector(vec![0.25]));
        let mut store = ParameterStore::from_tensors(m);
        let mut state = OptimState::new(&store);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::vector(vec![0.7]));
        grads.insert("b".to_string(), Tensor::vector(vec![0.7]));
        adam_step(&mut store, &grads, &mut state, 0.05).unwrap();
        assert_eq!(
            store.get("a").unwrap().data()[0],
            store.get("b").unwrap().data()[0]
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = scalar_store(0.0);
        let mut state = OptimState::new(&store);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![f64::NAN]));
        let err = adam_step(&mut store, &grads, &mut state, 0.1).unwrap_err();
        match err {
            ModelError::NonFiniteGradient(name) => assert_eq!(name, "p"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
