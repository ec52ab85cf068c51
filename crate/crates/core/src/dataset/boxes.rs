//! Box normalization and IoU.

use crate::error::DataError;

/// Normalize a pixel-space box to the 7-dim location vector
/// `[x1/W, y1/H, x2/W, y2/H, w, h, w*h]`.
pub fn normalize_box(
    raw: (f64, f64, f64, f64),
    frame_w: f64,
    frame_h: f64,
) -> Result<[f32; 7], DataError> {
    let (x1, y1, x2, y2) = raw;
    let reject = |reason: &str| DataError::InvalidBox {
        x1,
        y1,
        x2,
        y2,
        frame_w,
        frame_h,
        reason: reason.into(),
    };
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(reject("frame dimensions must be positive"));
    }
    if [x1, y1, x2, y2].iter().any(|v| !v.is_finite()) {
        return Err(reject("non-finite coordinate"));
    }
    if x1 > x2 || y1 > y2 {
        return Err(reject("inverted box"));
    }
    if x1 < 0.0 || y1 < 0.0 || x2 > frame_w || y2 > frame_h {
        return Err(reject("box outside frame"));
    }
    let w = (x2 - x1) / frame_w;
    let h = (y2 - y1) / frame_h;
    Ok([
        (x1 / frame_w) as f32,
        (y1 / frame_h) as f32,
        (x2 / frame_w) as f32,
        (y2 / frame_h) as f32,
        w as f32,
        h as f32,
        (w * h) as f32,
    ])
}

/// Intersection-over-union of two boxes given as `[x1, y1, x2, y2, ...]`
/// prefixes of location vectors.
pub fn iou(a: &[f32], b: &[f32]) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64);
    let (bx1, by1, bx2, by2) = (b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Validate;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_reference_case() {
        let loc = normalize_box((10.0, 20.0, 60.0, 120.0), 100.0, 200.0).unwrap();
        let expect = [0.1, 0.1, 0.6, 0.6, 0.5, 0.5, 0.25];
        for (a, e) in loc.iter().zip(expect) {
            assert_abs_diff_eq!(*a as f64, e, epsilon = 1e-7);
        }
    }

    #[test]
    fn full_frame_box() {
        let loc = normalize_box((0.0, 0.0, 100.0, 200.0), 100.0, 200.0).unwrap();
        assert_eq!(loc, [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn degenerate_point_box() {
        let loc = normalize_box((5.0, 5.0, 5.0, 5.0), 10.0, 10.0).unwrap();
        assert_eq!(loc, [0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn inverted_box_is_rejected_with_coordinates() {
        let err = normalize_box((6.0, 0.0, 4.0, 5.0), 10.0, 10.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("inverted"), "{msg}");
        assert!(msg.contains('6') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn out_of_frame_box_is_rejected() {
        assert!(normalize_box((0.0, 0.0, 11.0, 5.0), 10.0, 10.0).is_err());
        assert!(normalize_box((-1.0, 0.0, 5.0, 5.0), 10.0, 10.0).is_err());
    }

    #[test]
    fn iou_reference_case() {
        // 10x10 vs 10x20 sharing the 10x10 corner: 100 / 200
        let a = [0.0, 0.0, 10.0, 10.0];
        let b = [0.0, 0.0, 10.0, 20.0];
        assert_abs_diff_eq!(iou(&a, &b), 0.5);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [2.0, 2.0, 3.0, 3.0];
        assert_eq!(iou(&a, &b), 0.0);
    }

    proptest! {
        #[test]
        fn normalized_box_satisfies_record_invariants(
            x1 in 0.0f64..500.0,
            y1 in 0.0f64..500.0,
            dw in 0.0f64..500.0,
            dh in 0.0f64..500.0,
        ) {
            let (w, h) = (1000.0, 1000.0);
            let loc = normalize_box((x1, y1, x1 + dw, y1 + dh), w, h).unwrap();
            let record = crate::datamodel::RegionRecord {
                feature: vec![0.0],
                location: loc,
                confidence: 0.5,
                frame_index: 0,
            };
            prop_assert!(record.violations().is_empty(), "{:?}", record.violations());
        }
    }
}
