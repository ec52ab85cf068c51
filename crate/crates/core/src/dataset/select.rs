//! Region selection: per-frame confidence top-k and greedy IoU tracklet
//! deduplication.

use crate::datamodel::RegionRecord;
use crate::error::DataError;

use super::boxes::iou;

/// Keep the `k` highest-confidence regions within each frame.
///
/// Output is ordered (frame ascending, confidence descending); equal
/// confidences keep the original detector order.
pub fn select_regions_sorted(
    frames: &[Vec<RegionRecord>],
    k: usize,
) -> Result<Vec<RegionRecord>, DataError> {
    assert!(k >= 1, "region budget k must be >= 1");
    if frames.iter().all(|f| f.is_empty()) {
        return Err(DataError::NoRegions);
    }
    let mut out = Vec::new();
    for frame in frames {
        let mut order: Vec<usize> = (0..frame.len()).collect();
        order.sort_by(|&a, &b| {
            frame[b]
                .confidence
                .partial_cmp(&frame[a].confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for &i in order.iter().take(k) {
            out.push(frame[i].clone());
        }
    }
    Ok(out)
}

/// Greedy frame-to-frame tracklet association followed by per-tracklet
/// deduplication and the same per-frame top-k cap as sorted selection.
///
/// A region in frame m+1 joins the tracklet whose frame-m member overlaps it
/// most, provided IoU >= `iou_threshold`; matches are made in descending IoU
/// and each tracklet extends by at most one region per frame. Each tracklet
/// keeps only its highest-confidence member.
pub fn select_regions_tracked(
    frames: &[Vec<RegionRecord>],
    k: usize,
    iou_threshold: f64,
) -> Result<Vec<RegionRecord>, DataError> {
    assert!(k >= 1, "region budget k must be >= 1");
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(DataError::BadIouThreshold(iou_threshold));
    }
    if frames.iter().all(|f| f.is_empty()) {
        return Err(DataError::NoRegions);
    }

    // Tracklets hold (best member so far, frame of their latest member).
    struct Tracklet {
        best: RegionRecord,
        last_box: [f32; 7],
        last_frame: usize,
    }
    let mut tracklets: Vec<Tracklet> = Vec::new();

    for (f, frame) in frames.iter().enumerate() {
        if f == 0 || tracklets.is_empty() {
            for r in frame {
                tracklets.push(Tracklet {
                    best: r.clone(),
                    last_box: r.location,
                    last_frame: f,
                });
            }
            continue;
        }
        // Candidate pairs against tracklets that ended in the previous frame.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in tracklets.iter().enumerate() {
            if t.last_frame + 1 != f {
                continue;
            }
            for (ri, r) in frame.iter().enumerate() {
                let v = iou(&t.last_box, &r.location);
                if v >= iou_threshold {
                    pairs.push((v, ti, ri));
                }
            }
        }
        // Descending IoU; ties resolved by (tracklet, region) order for
        // determinism.
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut tracklet_taken = vec![false; tracklets.len()];
        let mut region_taken = vec![false; frame.len()];
        for (_, ti, ri) in pairs {
            if tracklet_taken[ti] || region_taken[ri] {
                continue;
            }
            tracklet_taken[ti] = true;
            region_taken[ri] = true;
            let t = &mut tracklets[ti];
            let r = &frame[ri];
            if r.confidence > t.best.confidence {
                t.best = r.clone();
            }
            t.last_box = r.location;
            t.last_frame = f;
        }
        for (ri, r) in frame.iter().enumerate() {
            if !region_taken[ri] {
                tracklets.push(Tracklet {
                    best: r.clone(),
                    last_box: r.location,
                    last_frame: f,
                });
            }
        }
    }

    // Group surviving representatives by frame, then reuse the sorted cap.
    let frame_of = |r: &RegionRecord| r.frame_index;
    let mut grouped: Vec<Vec<RegionRecord>> = frames.iter().map(|_| Vec::new()).collect();
    let frame_ids: Vec<u32> = frames
        .iter()
        .map(|f| f.first().map_or(u32::MAX, |r| r.frame_index))
        .collect();
    for t in tracklets {
        let idx = frame_ids
            .iter()
            .position(|&fi| fi == frame_of(&t.best))
            .expect("representative frame not in input");
        grouped[idx].push(t.best);
    }
    select_regions_sorted(&grouped, k)
}
