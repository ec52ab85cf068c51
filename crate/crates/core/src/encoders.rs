//! Parameter store, location/temporal embeddings, and the two transformer
//! encoders.
//!
//! Both encoders share one pre-norm transformer implementation (self-attention
//! with masked keys, GELU MLP with 4x expansion, residuals, no final norm) and
//! differ only in their parameter sets and input composition. Temporal order
//! enters solely through the learned position table added before the stack;
//! the stack itself is permutation-equivariant over non-CLS rows.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::datamodel::RegionRecord;
use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const VIDEO_PREFIX: &str = "video";
pub const TEXT_PREFIX: &str = "text";

/// Named parameter tensors with canonical (lexicographic) iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    /// Shapes every parameter must have under `config`.
    pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let d = config.d;
        let mut shapes = BTreeMap::new();
        shapes.insert(format!("{VIDEO_PREFIX}.cls"), vec![d]);
        shapes.insert(format!("{VIDEO_PREFIX}.loc_proj.weight"), vec![d, 7]);
        shapes.insert(format!("{VIDEO_PREFIX}.loc_proj.bias"), vec![d]);
        shapes.insert(
            format!("{VIDEO_PREFIX}.temporal"),
            vec![config.max_frames, d],
        );
        shapes.insert(format!("{TEXT_PREFIX}.embed"), vec![config.vocab_size, d]);
        shapes.insert(format!("{TEXT_PREFIX}.pos"), vec![config.max_words, d]);
        for (prefix, layers) in [
            (VIDEO_PREFIX, config.video_layers),
            (TEXT_PREFIX, config.text_layers),
        ] {
            for i in 0..layers {
                let p = format!("{prefix}.layer{i}");
                for ln in ["ln1", "ln2"] {
                    shapes.insert(format!("{p}.{ln}.gamma"), vec![d]);
                    shapes.insert(format!("{p}.{ln}.beta"), vec![d]);
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    shapes.insert(format!("{p}.attn.{w}"), vec![d, d]);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    shapes.insert(format!("{p}.attn.{b}"), vec![d]);
                }
                shapes.insert(format!("{p}.mlp.w1"), vec![d, 4 * d]);
                shapes.insert(format!("{p}.mlp.b1"), vec![4 * d]);
                shapes.insert(format!("{p}.mlp.w2"), vec![4 * d, d]);
                shapes.insert(format!("{p}.mlp.b2"), vec![d]);
            }
        }
        shapes
    }

    /// Fresh parameters: truncated-normal std 0.02 weights, zero biases,
    /// unit layer-norm scales. The temporal table and location projection
    /// start at zero so an untrained model is temporally neutral.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut trunc = move || loop {
            let v: f64 = normal.sample(&mut rng);
            if v.abs() <= 0.04 {
                return v;
            }
        };
        let mut tensors = BTreeMap::new();
        // BTreeMap iteration gives a deterministic generation order.
        for (name, shape) in Self::expected_shapes(config) {
            let mut t = Tensor::zeros(&shape);
            let zero_init = name.ends_with(".temporal")
                || name.contains(".loc_proj.")
                || name.ends_with(".beta")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || (name.contains(".attn.b"));
            let one_init = name.ends_with(".gamma");
            if one_init {
                t.data_mut().fill(1.0);
            } else if !zero_init {
                for v in t.data_mut() {
                    *v = trunc();
                }
            }
            t.round_to_f32();
            tensors.insert(name, t);
        }
        ParameterStore { tensors }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        ParameterStore { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        match self.tensors.get_mut(name) {
            Some(t) => {
                if t.shape() != value.shape() {
                    return Err(ModelError::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: value.shape().to_vec(),
                    });
                }
                *t = value;
                Ok(())
            }
            None => Err(ModelError::UnknownParameter(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Keep every value exactly representable in the f32 checkpoint format.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }

    pub fn validate_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::expected_shapes(config);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(ModelError::UnknownParameter(name.clone()));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(ModelError::NonFiniteParameter(name.clone()));
            }
        }
        Ok(())
    }
}

/// Encoder output: `[T x d]` features whose row 0 is the CLS summary, plus
/// the validity mask carried through from the input.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

pub type EncodedVideo = Encoded;
pub type EncodedText = Encoded;

impl Encoded {
    /// Content rows (CLS excluded, padding dropped), compacted.
    pub fn content(&self) -> Tensor {
        let d = self.features.cols();
        let mut rows = Vec::new();
        for i in 1..self.features.rows() {
            if self.mask[i] {
                rows.extend_from_slice(self.features.row(i));
            }
        }
        Tensor::matrix(rows.len() / d, d, rows)
    }

    pub fn cls(&self) -> &[f64] {
        self.features.row(0)
    }
}

/// Affine location embedding `W l + b` for one 7-dim location vector.
pub fn embed_location(
    weight: &Tensor,
    bias: &Tensor,
    location: &[f64],
) -> Result<Vec<f64>, ModelError> {
    if location.len() != 7 || weight.cols() != 7 {
        return Err(ModelError::ShapeMismatch {
            name: "location".into(),
            expected: vec![7],
            found: vec![location.len()],
        });
    }
    let d = weight.rows();
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let row = weight.row(i);
        *o = bias.data()[i]
            + row
                .iter()
                .zip(location)
                .map(|(w, l)| w * l)
                .sum::<f64>();
    }
    Ok(out)
}

/// Map each region's original frame index to its slot in the sampled-frame
/// list; the slot indexes the temporal table.
pub fn frame_slots(
    regions: &[RegionRecord],
    sampled_frame_indices: &[u32],
    max_frames: usize,
) -> Result<Vec<usize>, ModelError> {
    let mut slots = Vec::with_capacity(regions.len());
    for r in regions {
        let slot = sampled_frame_indices
            .iter()
            .position(|&f| f == r.frame_index)
            .ok_or(ModelError::TemporalOverflow {
                slot: r.frame_index as usize,
                max: sampled_frame_indices.len(),
            })?;
        if slot >= max_frames {
            return Err(ModelError::TemporalOverflow {
                slot,
                max: max_frames,
            });
        }
        slots.push(slot);
    }
    Ok(slots)
}

/// Per-forward dropout state. `None` disables dropout entirely.
pub struct DropoutCtx {
    pub rng: ChaCha8Rng,
    pub p: f64,
}

/// Graph-level parameter bindings plus the model config, shared by all
/// builders in this module.
pub struct ModelGraph<'a> {
    pub config: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl<'a> ModelGraph<'a> {
    /// Insert every parameter as a leaf and remember its `Var`.
    pub fn bind(g: &mut Graph, store: &ParameterStore, config: &'a ModelConfig) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            vars.insert(name.clone(), g.leaf(tensor.clone()));
        }
        ModelGraph { config, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }

    /// Region input composition: row 0 is the learned CLS token, row n is
    /// `feature + W l_n + P[slot_n]`.
    pub fn compose_region_input(
        &self,
        g: &mut Graph,
        regions: &[RegionRecord],
        slots: &[usize],
    ) -> Var {
        assert_eq!(regions.len(), slots.len());
        let d = self.config.d;
        let feats: Vec<Vec<f64>> = regions
            .iter()
            .map(|r| r.feature.iter().map(|&v| v as f64).collect())
            .collect();
        let locs: Vec<Vec<f64>> = regions
            .iter()
            .map(|r| r.location.iter().map(|&v| v as f64).collect())
            .collect();
        let features = g.leaf(Tensor::from_rows(&feats));
        let locations = g.leaf(Tensor::from_rows(&locs));
        debug_assert_eq!(g.value(features).cols(), d);

        let w = self.var(&format!("{VIDEO_PREFIX}.loc_proj.weight"));
        let b = self.var(&format!("{VIDEO_PREFIX}.loc_proj.bias"));
        let loc_proj = g.matmul_nt(locations, w);
        let loc_emb = g.add_bias(loc_proj, b);

        let temporal = self.var(&format!("{VIDEO_PREFIX}.temporal"));
        let p_rows = g.gather_rows(temporal, slots.to_vec());

        let content = {
            let fl = g.add(features, loc_emb);
            g.add(fl, p_rows)
        };
        let cls = self.var(&format!("{VIDEO_PREFIX}.cls"));
        let cls_row = g.as_row(cls);
        g.concat_rows(&[cls_row, content])
    }

    /// Token input composition: embedding lookup plus the learned word
    /// position table.
    pub fn compose_text_input(&self, g: &mut Graph, token_ids: &[u32]) -> Var {
        let embed = self.var(&format!("{TEXT_PREFIX}.embed"));
        let pos = self.var(&format!("{TEXT_PREFIX}.pos"));
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(embed, ids);
        let pos_rows = g.slice_rows(pos, 0, token_ids.len());
        g.add(tok, pos_rows)
    }

    /// Pre-norm transformer stack over an already-composed input.
    pub fn encode(
        &self,
        g: &mut Graph,
        prefix: &str,
        layers: usize,
        input: Var,
        key_mask: &[bool],
        dropout: Option<&mut DropoutCtx>,
    ) -> Var {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut drop = dropout;
        let mut h = input;
        for layer in 0..layers {
            let p = format!("{prefix}.layer{layer}");
            let n1 = {
                let gamma = self.var(&format!("{p}.ln1.gamma"));
                let beta = self.var(&format!("{p}.ln1.beta"));
                g.layer_norm(h, gamma, beta)
            };
            let q = {
                let w = self.var(&format!("{p}.attn.wq"));
                let b = self.var(&format!("{p}.attn.bq"));
                let m = g.matmul(n1, w);
                g.add_bias(m, b)
            };
            let k = {
                let w = self.var(&format!("{p}.attn.wk"));
                let b = self.var(&format!("{p}.attn.bk"));
                let m = g.matmul(n1, w);
                g.add_bias(m, b)
            };
            let v = {
                let w = self.var(&format!("{p}.attn.wv"));
                let b = self.var(&format!("{p}.attn.bv"));
                let m = g.matmul(n1, w);
                g.add_bias(m, b)
            };
            let mut head_outputs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = g.slice_cols(q, head * dh, dh);
                let kh = g.slice_cols(k, head * dh, dh);
                let vh = g.slice_cols(v, head * dh, dh);
                let scores = g.matmul_nt(qh, kh);
                let scaled = g.scale(scores, scale);
                let mut probs = g.softmax_rows_masked(scaled, key_mask.to_vec());
                if let Some(ctx) = drop.as_deref_mut() {
                    probs = apply_dropout(g, probs, ctx);
                }
                head_outputs.push(g.matmul(probs, vh));
            }
            let ctx_all = g.concat_cols(&head_outputs);
            let attn_out = {
                let w = self.var(&format!("{p}.attn.wo"));
                let b = self.var(&format!("{p}.attn.bo"));
                let m = g.matmul(ctx_all, w);
                g.add_bias(m, b)
            };
            h = g.add(h, attn_out);

            let n2 = {
                let gamma = self.var(&format!("{p}.ln2.gamma"));
                let beta = self.var(&format!("{p}.ln2.beta"));
                g.layer_norm(h, gamma, beta)
            };
            let mlp = {
                let w1 = self.var(&format!("{p}.mlp.w1"));
                let b1 = self.var(&format!("{p}.mlp.b1"));
                let w2 = self.var(&format!("{p}.mlp.w2"));
                let b2 = self.var(&format!("{p}.mlp.b2"));
                let m = g.matmul(n2, w1);
                let mb = g.add_bias(m, b1);
                let mut a = g.gelu(mb);
                if let Some(ctx) = drop.as_deref_mut() {
                    a = apply_dropout(g, a, ctx);
                }
                let o = g.matmul(a, w2);
                g.add_bias(o, b2)
            };
            h = g.add(h, mlp);
        }
        h
    }

    pub fn encode_video(
        &self,
        g: &mut Graph,
        composed: Var,
        key_mask: &[bool],
        dropout: Option<&mut DropoutCtx>,
    ) -> Var {
        self.encode(
            g,
            VIDEO_PREFIX,
            self.config.video_layers,
            composed,
            key_mask,
            dropout,
        )
    }

    pub fn encode_text(
        &self,
        g: &mut Graph,
        composed: Var,
        key_mask: &[bool],
        dropout: Option<&mut DropoutCtx>,
    ) -> Var {
        self.encode(
            g,
            TEXT_PREFIX,
            self.config.text_layers,
            composed,
            key_mask,
            dropout,
        )
    }
}

/// Inverted dropout with a frozen per-forward mask.
fn apply_dropout(g: &mut Graph, x: Var, ctx: &mut DropoutCtx) -> Var {
    if ctx.p <= 0.0 {
        return x;
    }
    let keep = 1.0 - ctx.p;
    let mut mask = Tensor::zeros_like(g.value(x));
    for v in mask.data_mut() {
        if ctx.rng.gen::<f64>() < keep {
            *v = 1.0 / keep;
        }
    }
    g.mul_mask(x, mask)
}

fn check_mask(mask: &[bool]) -> Result<(), ModelError> {
    if mask.is_empty() || !mask[0] {
        return Err(ModelError::AllMasked);
    }
    Ok(())
}

/// Convenience forward passes that build a private graph and return plain
/// tensors; used by evaluation and tests.
pub struct Model<'a> {
    pub store: &'a ParameterStore,
    pub config: &'a ModelConfig,
}

impl<'a> Model<'a> {
    pub fn new(store: &'a ParameterStore, config: &'a ModelConfig) -> Self {
        Model { store, config }
    }

    pub fn encode_video_sample(
        &self,
        regions: &[RegionRecord],
        sampled_frame_indices: &[u32],
        mask: &[bool],
    ) -> Result<EncodedVideo, ModelError> {
        self.store.check_finite()?;
        check_mask(mask)?;
        let slots = frame_slots(regions, sampled_frame_indices, self.config.max_frames)?;
        let mut g = Graph::new();
        let mg = ModelGraph::bind(&mut g, self.store, self.config);
        let composed = mg.compose_region_input(&mut g, regions, &slots);
        let out = mg.encode_video(&mut g, composed, mask, None);
        Ok(Encoded {
            features: g.value(out).clone(),
            mask: mask.to_vec(),
        })
    }

    pub fn encode_text_sample(
        &self,
        token_ids: &[u32],
        mask: &[bool],
    ) -> Result<EncodedText, ModelError> {
        self.store.check_finite()?;
        check_mask(mask)?;
        if token_ids.len() > self.config.max_words {
            return Err(ModelError::BadConfig(format!(
                "caption of {} tokens exceeds max_words {}",
                token_ids.len(),
                self.config.max_words
            )));
        }
        let mut g = Graph::new();
        let mg = ModelGraph::bind(&mut g, self.store, self.config);
        let composed = mg.compose_text_input(&mut g, token_ids);
        let out = mg.encode_text(&mut g, composed, mask, None);
        Ok(Encoded {
            features: g.value(out).clone(),
            mask: mask.to_vec(),
        })
    }
}
