//! Prior boxes, ground-truth matching, and center-size box encoding.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, GroundTruthBox};
use crate::error::{config_err, Error, Result};
use crate::model::ModelGraph;

pub const MATCH_IOU: f64 = 0.5;
/// Encoding variances for `(cx, cy, w, h)`.
pub const VARIANCES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Prior box as `(cx, cy, w, h)`, normalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    /// `(H_f, W_f, anchors per cell)` per head.
    pub heads: Vec<(usize, usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchor grid in head order, then row, column, scale, aspect ratio.
///
/// `image_aspect` is image height over width; it keeps ratio-1 anchors
/// square in pixels. Anchors are clipped to the unit square.
pub fn generate_anchors(
    head_shapes: &[(usize, usize)],
    scales: &[Vec<f64>],
    aspect_ratios: &[f64],
    image_aspect: f64,
) -> Result<AnchorSet> {
    if head_shapes.len() != scales.len() {
        return config_err("one scale list per head required");
    }
    if scales.iter().any(Vec::is_empty) || aspect_ratios.is_empty() {
        return config_err("empty anchor scale or ratio list");
    }
    if head_shapes.iter().any(|&(h, w)| h == 0 || w == 0) {
        return config_err("head feature maps must be non-empty");
    }
    let mut anchors = Vec::new();
    let mut heads = Vec::new();
    for (&(fh, fw), head_scales) in head_shapes.iter().zip(scales) {
        heads.push((fh, fw, head_scales.len() * aspect_ratios.len()));
        for y in 0..fh {
            for x in 0..fw {
                let cx = (x as f64 + 0.5) / fw as f64;
                let cy = (y as f64 + 0.5) / fh as f64;
                for &s in head_scales {
                    for &r in aspect_ratios {
                        let w = s * r.sqrt() * image_aspect;
                        let h = s / r.sqrt();
                        let b = BBox::from_center(cx, cy, w, h).clip(0.0, 1.0);
                        let (bcx, bcy) = b.center();
                        anchors.push(Anchor {
                            cx: bcx,
                            cy: bcy,
                            w: b.width(),
                            h: b.height(),
                        });
                    }
                }
            }
        }
    }
    Ok(AnchorSet { anchors, heads })
}

/// Anchors matching the row layout of `model`'s detection outputs.
pub fn model_anchors(model: &ModelGraph) -> Result<AnchorSet> {
    let [h, w, _] = model.config.backbone.input_shape;
    let heads = &model.config.heads;
    generate_anchors(
        &model.head_feature_shapes(),
        &heads.scales,
        &heads.aspect_ratios,
        h as f64 / w as f64,
    )
}

/// Per-anchor assignment: class label (0 = background) and matched box.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub matched: Vec<Option<usize>>,
}

impl Assignment {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Each anchor takes its highest-IoU ground truth when that IoU reaches the
/// threshold; then every ground truth claims its own best anchor
/// unconditionally (later boxes win a contested anchor). Ties go to the
/// lowest index.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> Assignment {
    let n = anchors.len();
    let mut labels = vec![0; n];
    let mut matched = vec![None; n];
    if gts.is_empty() {
        return Assignment { labels, matched };
    }
    let boxes: Vec<BBox> = anchors.anchors.iter().map(Anchor::bbox).collect();
    let mut best_anchor = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for (ai, ab) in boxes.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(ab, &g.bbox);
            if v > best.1 {
                best = (gi, v);
            }
            if v > best_anchor[gi].1 {
                best_anchor[gi] = (ai, v);
            }
        }
        if best.1 >= iou_threshold {
            labels[ai] = gts[best.0].class_id;
            matched[ai] = Some(best.0);
        }
    }
    for (gi, &(ai, _)) in best_anchor.iter().enumerate() {
        labels[ai] = gts[gi].class_id;
        matched[ai] = Some(gi);
    }
    Assignment { labels, matched }
}

/// Center-size offsets of `gt` relative to `anchor`, scaled by [`VARIANCES`].
pub fn encode_box(gt: &BBox, anchor: &Anchor) -> Result<[f64; 4]> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::Config(format!("degenerate anchor {anchor:?}")));
    }
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - anchor.cx) / (anchor.w * VARIANCES[0]),
        (gcy - anchor.cy) / (anchor.h * VARIANCES[1]),
        (gt.width() / anchor.w).ln() / VARIANCES[2],
        (gt.height() / anchor.h).ln() / VARIANCES[3],
    ])
}

pub fn decode_box(t: &[f64], anchor: &Anchor) -> Result<BBox> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::Config(format!("degenerate anchor {anchor:?}")));
    }
    let cx = anchor.cx + t[0] * VARIANCES[0] * anchor.w;
    let cy = anchor.cy + t[1] * VARIANCES[1] * anchor.h;
    let w = anchor.w * (t[2] * VARIANCES[2]).exp();
    let h = anchor.h * (t[3] * VARIANCES[3]).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cell_anchor() {
        let a = generate_anchors(&[(1, 1)], &[vec![0.5]], &[1.0], 1.0).unwrap();
        assert_eq!(a.len(), 1);
        let x = a.anchors[0];
        assert_eq!((x.cx, x.cy, x.w, x.h), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn counting() {
        let a = generate_anchors(&[(2, 2)], &[vec![0.3]], &[1.0, 2.0], 1.0).unwrap();
        assert_eq!(a.len(), 8);
        assert!(generate_anchors(&[(2, 2)], &[vec![]], &[1.0], 1.0).is_err());
    }

    #[test]
    fn identity_encoding() {
        let a = Anchor {
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
        };
        let t = encode_box(&a.bbox(), &a).unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-12), "{t:?}");
        let shifted = BBox::from_center(0.6, 0.5, 0.2, 0.2);
        let t = encode_box(&shifted, &a).unwrap();
        assert!((t[0] - 0.1 / 0.2 / 0.1).abs() < 1e-9);
    }

    #[test]
    fn empty_gts_all_background() {
        let a = generate_anchors(&[(3, 3)], &[vec![0.3]], &[1.0], 1.0).unwrap();
        assert_eq!(match_anchors(&a, &[], 0.5).num_positives(), 0);
    }

    #[test]
    fn self_match() {
        let a = generate_anchors(&[(2, 2)], &[vec![0.4]], &[1.0], 1.0).unwrap();
        let gt = GroundTruthBox {
            class_id: 2,
            bbox: a.anchors[3].bbox(),
        };
        let m = match_anchors(&a, &[gt], 0.5);
        assert_eq!(m.labels[3], 2);
        assert_eq!(m.matched[3], Some(0));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            acx in 0.1f64..0.9, acy in 0.1f64..0.9, aw in 0.05f64..0.8, ah in 0.05f64..0.8,
            gcx in 0.0f64..1.0, gcy in 0.0f64..1.0, gw in 0.01f64..1.0, gh in 0.01f64..1.0,
        ) {
            let a = Anchor { cx: acx, cy: acy, w: aw, h: ah };
            let g = BBox::from_center(gcx, gcy, gw, gh);
            let d = decode_box(&encode_box(&g, &a).unwrap(), &a).unwrap();
            prop_assert!((d.xmin - g.xmin).abs() < 1e-6);
            prop_assert!((d.ymin - g.ymin).abs() < 1e-6);
            prop_assert!((d.xmax - g.xmax).abs() < 1e-6);
            prop_assert!((d.ymax - g.ymax).abs() < 1e-6);
        }

        #[test]
        fn anchors_inside_unit_square(h in 1usize..6, w in 1usize..6, s in 0.05f64..1.5) {
            let a = generate_anchors(&[(h, w)], &[vec![s]], &[1.0, 2.0, 0.5], 0.75).unwrap();
            prop_assert_eq!(a.len(), h * w * 3);
            for x in &a.anchors {
                let b = x.bbox();
                prop_assert!(b.xmin >= -1e-12 && b.ymin >= -1e-12 && b.xmax <= 1.0 + 1e-12 && b.ymax <= 1.0 + 1e-12);
            }
        }
    }
}
