//! Naive per-scalar reimplementation of every similarity and loss term.
//!
//! Deliberately independent of the alignment module: plain loops, no shared
//! helpers, no batching. Used only to cross-check the fast path.

use crate::alignment::{LossFlags, LossTerms, SimilarityBundle};
use crate::tensor::Tensor;

/// Content features of one pair: regions `[N x d]`, words `[L x d]` as plain
/// row vectors.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub video_cls: Vec<f64>,
    pub text_cls: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
    pub words: Vec<Vec<f64>>,
}

fn dot_slow(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn cosine_slow(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_slow(a, a).sqrt();
    let nb = dot_slow(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot_slow(a, b) / (na * nb)
}

/// S_ij of one ordered (query, context) pair by direct evaluation of the
/// attention, refinement, attended-feature, and mean-cosine steps.
fn local_similarity_slow(query: &[Vec<f64>], context: &[Vec<f64>], refine: bool) -> f64 {
    let n = query.len();
    let l = context.len();
    let mut total = 0.0;
    for q in query {
        // softmax over raw cosines
        let mut sims = Vec::with_capacity(l);
        for c in context {
            sims.push(cosine_slow(q, c));
        }
        let mut max = f64::NEG_INFINITY;
        for &s in &sims {
            if s > max {
                max = s;
            }
        }
        let mut exps = Vec::with_capacity(l);
        let mut z = 0.0;
        for &s in &sims {
            let e = (s - max).exp();
            exps.push(e);
            z += e;
        }
        let mut a: Vec<f64> = exps.iter().map(|e| e / z).collect();

        if refine && l > 1 {
            let mut mean = 0.0;
            for &w in &a {
                mean += w;
            }
            mean /= l as f64;
            for w in a.iter_mut() {
                if *w <= mean {
                    *w = 0.0;
                }
            }
        }

        let d = q.len();
        let mut attended = vec![0.0; d];
        for (li, c) in context.iter().enumerate() {
            for k in 0..d {
                attended[k] += a[li] * c[k];
            }
        }
        total += cosine_slow(q, &attended);
    }
    total / n as f64
}

/// Every similarity matrix by triple loops over the batch.
pub fn brute_force_bundle(pairs: &[PairFeatures], flags: LossFlags) -> SimilarityBundle {
    let b = pairs.len();
    let mut s_global = Tensor::zeros(&[b, b]);
    let mut s_local_v2l = Tensor::zeros(&[b, b]);
    let mut s_local_l2v = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            s_global.set(i, j, cosine_slow(&pairs[i].video_cls, &pairs[j].text_cls));
            if flags.use_local_losses {
                s_local_v2l.set(
                    i,
                    j,
                    local_similarity_slow(
                        &pairs[i].regions,
                        &pairs[j].words,
                        flags.use_refinement,
                    ),
                );
                s_local_l2v.set(
                    j,
                    i,
                    local_similarity_slow(
                        &pairs[j].words,
                        &pairs[i].regions,
                        flags.use_refinement,
                    ),
                );
            }
        }
    }
    SimilarityBundle {
        s_global,
        s_local_v2l,
        s_local_l2v,
    }
}

fn nce_rows_slow(s: &Tensor, sigma: f64) -> f64 {
    let b = s.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut max = f64::NEG_INFINITY;
        for j in 0..b {
            let v = s.at(i, j) / sigma;
            if v > max {
                max = v;
            }
        }
        let mut z = 0.0;
        for j in 0..b {
            z += (s.at(i, j) / sigma - max).exp();
        }
        total += s.at(i, i) / sigma - max - z.ln();
    }
    -total / b as f64
}

/// All four loss terms evaluated against the brute-force bundle.
pub fn brute_force_total_loss(
    pairs: &[PairFeatures],
    sigma: f64,
    flags: LossFlags,
) -> LossTerms {
    let bundle = brute_force_bundle(pairs, flags);
    let b = bundle.s_global.rows();
    let mut transposed = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            transposed.set(j, i, bundle.s_global.at(i, j));
        }
    }
    let global_v2l = nce_rows_slow(&bundle.s_global, sigma);
    let global_l2v = nce_rows_slow(&transposed, sigma);
    let (local_v2l, local_l2v) = if flags.use_local_losses {
        (
            nce_rows_slow(&bundle.s_local_v2l, sigma),
            nce_rows_slow(&bundle.s_local_l2v, sigma),
        )
    } else {
        (0.0, 0.0)
    };
    LossTerms {
        global_v2l,
        global_l2v,
        local_v2l,
        local_l2v,
        total: global_v2l + global_l2v + local_v2l + local_l2v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_attention_instance_gives_zero_local() {
        // words identical: attention uniform, refinement erases everything
        let pairs = vec![
            PairFeatures {
                video_cls: vec![1.0, 0.0],
                text_cls: vec![1.0, 0.0],
                regions: vec![vec![1.0, 0.0]],
                words: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            },
            PairFeatures {
                video_cls: vec![0.0, 1.0],
                text_cls: vec![0.0, 1.0],
                regions: vec![vec![0.0, 1.0]],
                words: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            },
        ];
        let bundle = brute_force_bundle(&pairs, LossFlags::default());
        for v in bundle.s_local_v2l.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn hand_checkable_pair() {
        // pair 0 mirrors the worked single-region example: S_00 = 1
        let pairs = vec![
            PairFeatures {
                video_cls: vec![1.0, 0.0],
                text_cls: vec![1.0, 0.0],
                regions: vec![vec![1.0, 0.0]],
                words: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            PairFeatures {
                video_cls: vec![0.0, 1.0],
                text_cls: vec![0.0, 1.0],
                regions: vec![vec![0.0, 1.0]],
                words: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            },
        ];
        let bundle = brute_force_bundle(&pairs, LossFlags::default());
        assert_abs_diff_eq!(bundle.s_local_v2l.at(0, 0), 1.0, epsilon = 1e-12);
        // caption 1 vs video 1: one word matches the single region exactly
        // (N=1 bypass, cosine 1), the other is orthogonal: mean = 0.5
        assert_abs_diff_eq!(bundle.s_local_l2v.at(1, 1), 0.5, epsilon = 1e-12);
        assert_eq!(bundle.s_global.at(0, 0), 1.0);
        assert_eq!(bundle.s_global.at(0, 1), 0.0);
    }
}
