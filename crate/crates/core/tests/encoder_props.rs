//! Structural properties of the encoders: padding invariance, permutation
//! equivariance, and finite-difference checks of parameter gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidalign_core::config::ModelConfig;
use vidalign_core::datamodel::RegionRecord;
use vidalign_core::encoders::{Model, ModelGraph, ParameterStore};
use vidalign_core::graph::Graph;
use vidalign_core::tensor::Tensor;

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::desk(12);
    c.d = 8;
    c.heads = 2;
    c.video_layers = 2;
    c.text_layers = 1;
    c.max_frames = 4;
    c.max_words = 8;
    c
}

fn rand_region(rng: &mut ChaCha8Rng, d: usize, frame: u32) -> RegionRecord {
    let x1: f32 = rng.gen_range(0.0..0.4);
    let y1: f32 = rng.gen_range(0.0..0.4);
    let w: f32 = rng.gen_range(0.1..0.5);
    let h: f32 = rng.gen_range(0.1..0.5);
    RegionRecord {
        feature: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        location: [x1, y1, x1 + w, y1 + h, w, h, w * h],
        confidence: rng.gen_range(0.1..1.0),
        frame_index: frame,
    }
}

/// Give the zero-initialized tables random values so the tests see a
/// non-degenerate model.
fn randomized_store(config: &ModelConfig, seed: u64) -> ParameterStore {
    let mut store = ParameterStore::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for name in ["video.temporal", "video.loc_proj.weight", "video.loc_proj.bias"] {
        let mut t = store.get(name).unwrap().clone();
        for v in t.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        t.round_to_f32();
        store.set(name, t).unwrap();
    }
    store
}

#[test]
fn padding_invariance() {
    let config = tiny_config();
    let store = randomized_store(&config, 3);
    let model = Model::new(&store, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    let regions: Vec<RegionRecord> = (0..3).map(|_| rand_region(&mut rng, config.d, 0)).collect();
    let frames = vec![0u32];

    let plain = model
        .encode_video_sample(&regions, &frames, &[true; 4])
        .unwrap();

    // junk rows appended under a false mask must not change real outputs
    let mut padded_regions = regions.clone();
    for _ in 0..2 {
        padded_regions.push(rand_region(&mut rng, config.d, 0));
    }
    let mask = vec![true, true, true, true, false, false];
    let padded = model
        .encode_video_sample(&padded_regions, &frames, &mask)
        .unwrap();

    for row in 0..4 {
        for (a, b) in plain.features.row(row).iter().zip(padded.features.row(row)) {
            assert!(
                (a - b).abs() < 1e-6,
                "row {row}: padded {b} vs plain {a}"
            );
        }
    }
}

#[test]
fn padding_invariance_text() {
    let config = tiny_config();
    let store = ParameterStore::init(&config, 4);
    let model = Model::new(&store, &config);

    let tokens = [1u32, 3, 5, 4];
    let plain = model.encode_text_sample(&tokens, &[true; 4]).unwrap();
    let padded_tokens = [1u32, 3, 5, 4, 0, 0];
    let mask = vec![true, true, true, true, false, false];
    let padded = model.encode_text_sample(&padded_tokens, &mask).unwrap();
    for row in 0..4 {
        for (a, b) in plain.features.row(row).iter().zip(padded.features.row(row)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn permutation_equivariance_over_regions() {
    let config = tiny_config();
    let store = randomized_store(&config, 5);
    let model = Model::new(&store, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(20);

    let regions: Vec<RegionRecord> = (0..4)
        .map(|i| rand_region(&mut rng, config.d, i % 2))
        .collect();
    let frames = vec![0u32, 1];
    let mask = vec![true; 5];

    let base = model.encode_video_sample(&regions, &frames, &mask).unwrap();

    // permute the non-CLS inputs; outputs must permute identically
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<RegionRecord> = perm.iter().map(|&i| regions[i].clone()).collect();
    let out = model.encode_video_sample(&permuted, &frames, &mask).unwrap();

    for (new_pos, &old_pos) in perm.iter().enumerate() {
        for (a, b) in out
            .features
            .row(new_pos + 1)
            .iter()
            .zip(base.features.row(old_pos + 1))
        {
            assert!((a - b).abs() < 1e-9, "permuted row mismatch");
        }
    }
    // CLS row unchanged
    for (a, b) in out.features.row(0).iter().zip(base.features.row(0)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn forward_is_deterministic() {
    let config = tiny_config();
    let store = randomized_store(&config, 6);
    let model = Model::new(&store, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let regions: Vec<RegionRecord> = (0..3).map(|_| rand_region(&mut rng, config.d, 0)).collect();
    let a = model
        .encode_video_sample(&regions, &[0], &[true; 4])
        .unwrap();
    let b = model
        .encode_video_sample(&regions, &[0], &[true; 4])
        .unwrap();
    assert_eq!(a.features, b.features);
}

/// Finite-difference check of encoder parameter gradients through the full
/// video + text forward into a scalar objective.
#[test]
fn parameter_gradients_match_finite_differences() {
    let mut config = tiny_config();
    config.video_layers = 1;
    config.text_layers = 1;
    let mut store = randomized_store(&config, 7);
    // fully random f64 parameters: FD needs full precision
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let mut t = store.get(name).unwrap().clone();
        for v in t.data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        if name.ends_with(".gamma") {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        store.set(name, t).unwrap();
    }

    let mut data_rng = ChaCha8Rng::seed_from_u64(71);
    let regions: Vec<RegionRecord> = (0..3)
        .map(|i| rand_region(&mut data_rng, config.d, i % 2))
        .collect();
    let token_ids = [1u32, 3, 7, 4];
    let frames = vec![0u32, 1];
    let mut target = Tensor::zeros(&[8, config.d]);
    for v in target.data_mut() {
        *v = data_rng.gen_range(-1.0..1.0);
    }

    let objective = |store: &ParameterStore| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
        let mut g = Graph::new();
        let mg = ModelGraph::bind(&mut g, store, &config);
        let slots = vidalign_core::encoders::frame_slots(&regions, &frames, config.max_frames)
            .unwrap();
        let composed = mg.compose_region_input(&mut g, &regions, &slots);
        let video = mg.encode_video(&mut g, composed, &[true; 4], None);
        let composed_t = mg.compose_text_input(&mut g, &token_ids);
        let text = mg.encode_text(&mut g, composed_t, &[true; 4], None);
        let both = g.concat_rows(&[video, text]);
        let t = g.leaf(target.clone());
        let root = g.mean_row_cosine(both, t);
        let value = g.value(root).item();
        let grads = g.backward(root);
        let mut map = std::collections::BTreeMap::new();
        for (name, var) in mg.param_vars() {
            if let Some(t) = grads.get(var) {
                map.insert(name.clone(), t.clone());
            }
        }
        (value, Some(map))
    };

    let (_, grads) = objective(&store);
    let grads = grads.unwrap();
    let h = 1e-6;
    let mut checked = 0usize;
    let mut pick = ChaCha8Rng::seed_from_u64(72);
    for name in &names {
        let len = store.get(name).unwrap().len();
        // a sample of coordinates per tensor keeps the test fast
        let coords: Vec<usize> = (0..len.min(4))
            .map(|_| pick.gen_range(0..len))
            .collect();
        for &k in &coords {
            let orig = store.get(name).unwrap().data()[k];
            let mut bump = |delta: f64, store: &mut ParameterStore| {
                store.get_mut(name).unwrap().data_mut()[k] = orig + delta;
            };
            bump(h, &mut store);
            let (up, _) = objective(&store);
            bump(-h, &mut store);
            let (down, _) = objective(&store);
            bump(0.0, &mut store);
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(name).map_or(0.0, |t| t.data()[k]);
            let denom = fd.abs().max(an.abs()).max(1e-4);
            assert!(
                ((fd - an) / denom).abs() < 1e-4,
                "{name}[{k}]: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 50, "too few coordinates checked: {checked}");
}

#[test]
fn dropout_draws_change_outputs_but_seeded_runs_agree() {
    let mut config = tiny_config();
    config.dropout = 0.5;
    let store = randomized_store(&config, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let regions: Vec<RegionRecord> = (0..3).map(|_| rand_region(&mut rng, config.d, 0)).collect();

    let run = |seed: u64| {
        let mut g = Graph::new();
        let mg = ModelGraph::bind(&mut g, &store, &config);
        let slots = vec![0usize; 3];
        let composed = mg.compose_region_input(&mut g, &regions, &slots);
        let mut ctx = vidalign_core::encoders::DropoutCtx {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p: config.dropout,
        };
        let out = mg.encode_video(&mut g, composed, &[true; 4], Some(&mut ctx));
        g.value(out).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
