//! Similarity and loss computation: global video-sentence contrastive
//! alignment on normalized CLS embeddings, bidirectional region-word
//! alignment with threshold refinement, and the combined objective.
//!
//! CLS tokens never participate in local alignment; the local path runs on
//! content rows only. Attended features use the refined weights as-is (no
//! re-normalization), and a fully zeroed weight row yields a zero attended
//! vector whose cosine is 0 by convention.

use serde::Serialize;

use crate::encoders::Encoded;
use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::tensor::{self, Tensor};

/// Row/column softmax direction for the contrastive losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Row,
    Column,
}

/// Loss-term toggles: `use_local_losses = false` is the global-only baseline,
/// `use_refinement = false` keeps raw attention weights in the local path.
#[derive(Clone, Copy, Debug)]
pub struct LossFlags {
    pub use_local_losses: bool,
    pub use_refinement: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            use_local_losses: true,
            use_refinement: true,
        }
    }
}

/// All-pairs cosine similarity between rows of `x` and rows of `y`.
pub fn cosine_matrix(x: &Tensor, y: &Tensor) -> Result<Tensor, ModelError> {
    if x.cols() != y.cols() {
        return Err(ModelError::ShapeMismatch {
            name: "cosine_matrix".into(),
            expected: vec![x.cols()],
            found: vec![y.cols()],
        });
    }
    let (p, q) = (x.rows(), y.rows());
    let mut out = Tensor::zeros(&[p, q]);
    for i in 0..p {
        for j in 0..q {
            out.set(i, j, tensor::cosine(x.row(i), y.row(j)));
        }
    }
    Ok(out)
}

/// Softmax attention over the unmasked entries of one similarity row.
/// Masked entries are exactly 0.
pub fn attention_weights(sim_row: &[f64], mask: &[bool]) -> Result<Vec<f64>, ModelError> {
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::AllMasked);
    }
    Ok(tensor::softmax_masked(sim_row, mask))
}

/// Zero out weights at or below the row mean (mean over unmasked entries).
/// Rows with a single unmasked entry pass through unchanged: the threshold
/// would equal the sole weight and always erase it.
pub fn refine_weights(a_row: &[f64], mask: &[bool]) -> Vec<f64> {
    let count = mask.iter().filter(|&&m| m).count();
    if count <= 1 {
        return a_row.to_vec();
    }
    let mean = a_row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum::<f64>()
        / count as f64;
    a_row
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m && v > mean { v } else { 0.0 })
        .collect()
}

/// Weighted sum of counterpart feature rows under (refined) attention
/// weights, unnormalized.
pub fn attended_feature(weights: &[f64], feats: &Tensor) -> Vec<f64> {
    debug_assert_eq!(weights.len(), feats.rows());
    let d = feats.cols();
    let mut out = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(feats.row(i)) {
            *o += w * f;
        }
    }
    out
}

/// Fine-grained similarity of one (query, context) pair: each query row
/// attends over context rows, weights are refined, and the mean cosine
/// between query rows and their attended features is returned.
///
/// With `query = regions, context = words` this is the video-to-language
/// S_ij; swapped, the language-to-video S_ji.
pub fn local_similarity(
    query: &Tensor,
    context: &Tensor,
    use_refinement: bool,
) -> Result<f64, ModelError> {
    if query.rows() == 0 || context.rows() == 0 {
        return Err(ModelError::AllMasked);
    }
    let sims = cosine_matrix(query, context)?;
    let mask = vec![true; context.rows()];
    let mut total = 0.0;
    for n in 0..query.rows() {
        let a = attention_weights(sims.row(n), &mask)?;
        let w = if use_refinement {
            refine_weights(&a, &mask)
        } else {
            a
        };
        let attended = attended_feature(&w, context);
        total += tensor::cosine(query.row(n), &attended);
    }
    Ok(total / query.rows() as f64)
}

/// InfoNCE over a square similarity matrix: row direction matches queries
/// along the diagonal against each row's entries, column direction against
/// each column's.
pub fn info_nce(s: &Tensor, sigma: f64, direction: Direction) -> Result<f64, ModelError> {
    let b = s.rows();
    assert!(b >= 2, "contrastive loss needs B >= 2");
    assert!(sigma > 0.0, "temperature must be positive");
    for i in 0..b {
        for j in 0..s.cols() {
            if !s.at(i, j).is_finite() {
                return Err(ModelError::NonFiniteSimilarity { row: i, col: j });
            }
        }
    }
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = match direction {
            Direction::Row => s.row(i).iter().map(|v| v / sigma).collect(),
            Direction::Column => (0..b).map(|j| s.at(j, i) / sigma).collect(),
        };
        total += row[i] - tensor::log_sum_exp(&row);
    }
    Ok(-total / b as f64)
}

/// Global and local similarity matrices for a batch.
///
/// `s_global[i][j]` is the cosine of video i's and caption j's CLS
/// embeddings. `s_local_v2l[i][j]` is the region-attends-words similarity
/// S_ij. `s_local_l2v[j][i]` is caption-major: the words-attend-regions
/// similarity S_ji of caption j against video i.
#[derive(Clone, Debug)]
pub struct SimilarityBundle {
    pub s_global: Tensor,
    pub s_local_v2l: Tensor,
    pub s_local_l2v: Tensor,
}

impl SimilarityBundle {
    pub fn batch_size(&self) -> usize {
        self.s_global.rows()
    }
}

/// Per-term loss breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub global_v2l: f64,
    pub global_l2v: f64,
    pub local_v2l: f64,
    pub local_l2v: f64,
    pub total: f64,
}

/// Batched production path: bundle from encoded features.
pub fn compute_bundle(
    videos: &[Encoded],
    texts: &[Encoded],
    flags: LossFlags,
) -> Result<SimilarityBundle, ModelError> {
    assert_eq!(videos.len(), texts.len(), "unpaired batch");
    let b = videos.len();
    let video_cls = Tensor::from_rows(&videos.iter().map(|v| v.cls().to_vec()).collect::<Vec<_>>());
    let text_cls = Tensor::from_rows(&texts.iter().map(|t| t.cls().to_vec()).collect::<Vec<_>>());
    let s_global = cosine_matrix(&video_cls, &text_cls)?;

    let mut s_local_v2l = Tensor::zeros(&[b, b]);
    let mut s_local_l2v = Tensor::zeros(&[b, b]);
    if flags.use_local_losses {
        let region_content: Vec<Tensor> = videos.iter().map(|v| v.content()).collect();
        let word_content: Vec<Tensor> = texts.iter().map(|t| t.content()).collect();
        for i in 0..b {
            for j in 0..b {
                s_local_v2l.set(
                    i,
                    j,
                    local_similarity(&region_content[i], &word_content[j], flags.use_refinement)?,
                );
                s_local_l2v.set(
                    j,
                    i,
                    local_similarity(&word_content[j], &region_content[i], flags.use_refinement)?,
                );
            }
        }
    }
    Ok(SimilarityBundle {
        s_global,
        s_local_v2l,
        s_local_l2v,
    })
}

/// Sum of the four contrastive terms, honoring the ablation flags.
pub fn total_loss(
    bundle: &SimilarityBundle,
    sigma: f64,
    flags: LossFlags,
) -> Result<LossTerms, ModelError> {
    let global_v2l = info_nce(&bundle.s_global, sigma, Direction::Row)?;
    let global_l2v = info_nce(&bundle.s_global, sigma, Direction::Column)?;
    let (local_v2l, local_l2v) = if flags.use_local_losses {
        (
            info_nce(&bundle.s_local_v2l, sigma, Direction::Row)?,
            info_nce(&bundle.s_local_l2v, sigma, Direction::Row)?,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(LossTerms {
        global_v2l,
        global_l2v,
        local_v2l,
        local_l2v,
        total: global_v2l + global_l2v + local_v2l + local_l2v,
    })
}

/// Graph builders mirroring the pure path, used by training. Forward values
/// agree with `compute_bundle`/`total_loss`; gradients treat the refinement
/// indicator as a constant.
pub struct LossGraph {
    pub terms: [Var; 4],
    pub total: Var,
    pub s_global: Var,
    pub s_local_v2l: Option<Var>,
    pub s_local_l2v: Option<Var>,
}

/// One pre-refinement / post-refinement attention pair for export.
#[derive(Clone, Debug, Serialize)]
pub struct PairAttention {
    pub weights: Vec<Vec<f64>>,
    pub refined: Vec<Vec<f64>>,
}

/// Build the local similarity of one (query, context) pair on the graph.
/// Returns the scalar node; the refinement mask is computed from forward
/// attention values and frozen.
pub fn local_similarity_graph(
    g: &mut Graph,
    query: Var,
    context: Var,
    use_refinement: bool,
) -> Var {
    let l = g.value(context).rows();
    let sims = g.cosine_matrix(query, context);
    let attn = g.softmax_rows_masked(sims, vec![true; l]);
    let weights = if use_refinement && l > 1 {
        let a = g.value(attn);
        let mut mask = Tensor::zeros_like(a);
        for n in 0..a.rows() {
            let row = a.row(n);
            let mean = row.iter().sum::<f64>() / l as f64;
            for (slot, &v) in mask.row_mut(n).iter_mut().zip(row) {
                *slot = if v > mean { 1.0 } else { 0.0 };
            }
        }
        g.mul_mask(attn, mask)
    } else {
        attn
    };
    let attended = g.matmul(weights, context);
    g.mean_row_cosine(query, attended)
}

/// Assemble the four losses on the graph from per-sample encoder outputs.
/// `videos` and `texts` are full `[T x d]` nodes whose row 0 is CLS; content
/// row counts come from the true (unpadded) lengths.
pub fn batch_loss_graph(
    g: &mut Graph,
    videos: &[(Var, usize)],
    texts: &[(Var, usize)],
    sigma: f64,
    flags: LossFlags,
) -> LossGraph {
    assert_eq!(videos.len(), texts.len(), "unpaired batch");
    let b = videos.len();
    assert!(b >= 2, "contrastive loss needs B >= 2");

    let video_cls: Vec<Var> = videos.iter().map(|&(v, _)| g.select_row(v, 0)).collect();
    let text_cls: Vec<Var> = texts.iter().map(|&(t, _)| g.select_row(t, 0)).collect();
    let vc = g.stack_rows(&video_cls);
    let tc = g.stack_rows(&text_cls);
    let vcn = g.l2_normalize_rows(vc);
    let tcn = g.l2_normalize_rows(tc);
    let s_global = g.matmul_nt(vcn, tcn);

    let nce = |g: &mut Graph, s: Var, transpose: bool| -> Var {
        let m = if transpose { g.transpose(s) } else { s };
        let scaled = g.scale(m, 1.0 / sigma);
        let ls = g.log_softmax_rows(scaled);
        g.neg_mean_diag(ls)
    };
    let global_v2l = nce(g, s_global, false);
    let global_l2v = nce(g, s_global, true);

    let (local_v2l, local_l2v, s_v2l, s_l2v) = if flags.use_local_losses {
        let region_content: Vec<Var> = videos
            .iter()
            .map(|&(v, n)| g.slice_rows(v, 1, n))
            .collect();
        let word_content: Vec<Var> = texts
            .iter()
            .map(|&(t, l)| g.slice_rows(t, 1, l))
            .collect();
        let mut v2l_entries = Vec::with_capacity(b * b);
        let mut l2v_entries = vec![Var(0); b * b];
        for i in 0..b {
            for j in 0..b {
                v2l_entries.push(local_similarity_graph(
                    g,
                    region_content[i],
                    word_content[j],
                    flags.use_refinement,
                ));
                l2v_entries[j * b + i] = local_similarity_graph(
                    g,
                    word_content[j],
                    region_content[i],
                    flags.use_refinement,
                );
            }
        }
        let s_v2l = g.from_scalars(&v2l_entries, b, b);
        let s_l2v = g.from_scalars(&l2v_entries, b, b);
        (
            nce(g, s_v2l, false),
            nce(g, s_l2v, false),
            Some(s_v2l),
            Some(s_l2v),
        )
    } else {
        let zero_a = g.leaf(Tensor::scalar(0.0));
        let zero_b = g.leaf(Tensor::scalar(0.0));
        (zero_a, zero_b, None, None)
    };

    let g01 = g.add(global_v2l, global_l2v);
    let l01 = g.add(local_v2l, local_l2v);
    let total = g.add(g01, l01);
    LossGraph {
        terms: [global_v2l, global_l2v, local_v2l, local_l2v],
        total,
        s_global,
        s_local_v2l: s_v2l,
        s_local_l2v: s_l2v,
    }
}

/// Attention matrices of one (video, caption) pair for offline heatmaps.
pub fn pair_attention(
    regions: &Tensor,
    words: &Tensor,
) -> Result<PairAttention, ModelError> {
    let sims = cosine_matrix(regions, words)?;
    let mask = vec![true; words.rows()];
    let mut weights = Vec::with_capacity(regions.rows());
    let mut refined = Vec::with_capacity(regions.rows());
    for n in 0..regions.rows() {
        let a = attention_weights(sims.row(n), &mask)?;
        refined.push(refine_weights(&a, &mask));
        weights.push(a);
    }
    Ok(PairAttention { weights, refined })
}
