//! Token-budget and attention-cost estimator comparing region inputs against
//! patch inputs.
//!
//! The FLOPs model is deliberately simple and stated in the report header:
//! attention `4 T^2 d layers`, projections `8 T d^2 layers`, MLP
//! `16 T d^2 layers`, counting 2 FLOPs per multiply-add.

use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct FlopsModel {
    pub attention: &'static str,
    pub projection: &'static str,
    pub mlp: &'static str,
    pub convention: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostSide {
    pub tokens: usize,
    pub attention_flops: f64,
    pub projection_flops: f64,
    pub mlp_flops: f64,
    pub total_flops: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostRatios {
    pub tokens: f64,
    /// Ratio of the quadratic attention terms: `(T_patch / T_region)^2`.
    pub attention: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub flops_model: FlopsModel,
    pub frames: usize,
    pub regions_per_frame: usize,
    pub patches_per_frame: usize,
    pub d: usize,
    pub layers: usize,
    pub region: CostSide,
    pub patch: CostSide,
    pub patch_over_region: CostRatios,
}

fn side(tokens: usize, d: usize, layers: usize) -> CostSide {
    let t = tokens as f64;
    let df = d as f64;
    let lf = layers as f64;
    let attention = 4.0 * t * t * df * lf;
    let projection = 8.0 * t * df * df * lf;
    let mlp = 16.0 * t * df * df * lf;
    CostSide {
        tokens,
        attention_flops: attention,
        projection_flops: projection,
        mlp_flops: mlp,
        total_flops: attention + projection + mlp,
    }
}

/// Cost comparison for `frames` frames of `regions_per_frame` regions versus
/// `patches_per_frame` patches, CLS included on both sides.
pub fn estimate_cost(
    frames: usize,
    regions_per_frame: usize,
    patches_per_frame: usize,
    d: usize,
    layers: usize,
) -> CostReport {
    assert!(
        frames > 0 && regions_per_frame > 0 && patches_per_frame > 0 && d > 0 && layers > 0,
        "all estimator arguments must be positive"
    );
    let region = side(frames * regions_per_frame + 1, d, layers);
    let patch = side(frames * patches_per_frame + 1, d, layers);
    let token_ratio = patch.tokens as f64 / region.tokens as f64;
    CostReport {
        flops_model: FlopsModel {
            attention: "4 * T^2 * d * layers",
            projection: "8 * T * d^2 * layers",
            mlp: "16 * T * d^2 * layers",
            convention: "2 FLOPs per multiply-add",
        },
        frames,
        regions_per_frame,
        patches_per_frame,
        d,
        layers,
        patch_over_region: CostRatios {
            tokens: token_ratio,
            attention: token_ratio * token_ratio,
            total: patch.total_flops / region.total_flops,
        },
        region,
        patch,
    }
}

/// Standard patch grid of a 224x224 image with 16x16 patches.
pub const DEFAULT_PATCHES_PER_FRAME: usize = 196;
