//! Detection average precision and early-exit classification metrics.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, Detection, GroundTruthBox};

pub const AP_IOU: f64 = 0.5;
/// Name of the precision-recall interpolation written into reports.
pub const INTERPOLATION: &str = "all-point";

/// Outcome of greedy matching for one class. Each detection, highest score
/// first, claims the best still-unmatched box of its image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
}

/// Average precision for one class over a set of images. Detections are
/// `(image, score, box)`; ground truths `(image, box)`. Returns `None` when
/// the class has no ground truth.
pub fn average_precision(
    dets: &[(usize, f64, BBox)],
    gts: &[(usize, BBox)],
    iou_thresh: f64,
) -> (Option<f64>, ClassCounts) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &d in &order {
        let (img, _, b) = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gi, gb)) in gts.iter().enumerate() {
            if gi != img || used[g] {
                continue;
            }
            let v = iou(b, gb);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp_flags.push(best.is_some());
    }
    let tp = tp_flags.iter().filter(|&&t| t).count();
    let counts = ClassCounts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        gt: gts.len(),
    };
    if gts.is_empty() {
        return (None, counts);
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut hits = 0usize;
    for (i, &t) in tp_flags.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / gts.len() as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    (Some(ap), counts)
}

/// Per-class AP for classes `1..num_classes` and their mean over classes
/// that have ground truth.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
) -> (Vec<Option<f64>>, f64, Vec<ClassCounts>) {
    let mut aps = Vec::new();
    let mut counts = Vec::new();
    for c in 1..num_classes {
        let d: Vec<(usize, f64, BBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter()
                    .filter(|d| d.class_id == c)
                    .map(move |d| (i, d.score, d.bbox))
            })
            .collect();
        let g: Vec<(usize, BBox)> = gts
            .iter()
            .enumerate()
            .flat_map(|(i, gs)| {
                gs.iter()
                    .filter(|g| g.class_id == c)
                    .map(move |g| (i, g.bbox))
            })
            .collect();
        let (ap, cc) = average_precision(&d, &g, AP_IOU);
        aps.push(ap);
        counts.push(cc);
    }
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (aps, map, counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EeMetrics {
    pub accuracy: f64,
    /// Share of non-empty images classified empty.
    pub fpr: f64,
    pub skip_rate: f64,
}

/// An image is predicted empty when `p_empty >= tau`.
pub fn ee_classification_metrics(p_empty: &[f64], y: &[u8], tau: f64) -> EeMetrics {
    let n = p_empty.len().max(1) as f64;
    let mut correct = 0usize;
    let mut skipped = 0usize;
    let mut fp = 0usize;
    let mut non_empty = 0usize;
    for (&p, &yi) in p_empty.iter().zip(y) {
        let pred = p >= tau;
        skipped += usize::from(pred);
        correct += usize::from(u8::from(pred) == yi);
        if yi == 0 {
            non_empty += 1;
            fp += usize::from(pred);
        }
    }
    EeMetrics {
        accuracy: correct as f64 / n,
        fpr: if non_empty == 0 {
            0.0
        } else {
            fp as f64 / non_empty as f64
        },
        skip_rate: skipped as f64 / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_hash: String,
    pub dataset_hash: String,
    pub tau: Option<f64>,
    pub interpolation: String,
    pub iou_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub images: usize,
    /// AP of classes `1..K`; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// mAP with gating disabled.
    pub map_no_ee: f64,
    pub ee_accuracy: Option<f64>,
    pub ee_fpr: Option<f64>,
    pub skip_rate: f64,
    pub counts: Vec<ClassCounts>,
}

impl EvalReport {
    pub fn validate(&self) -> bool {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        rate(self.map)
            && rate(self.map_no_ee)
            && rate(self.skip_rate)
            && self.ee_accuracy.is_none_or(rate)
            && self.ee_fpr.is_none_or(rate)
            && self.per_class_ap.iter().flatten().all(|&v| rate(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 0.1, 0.1)
    }

    #[test]
    fn perfect_and_null_detectors() {
        let gts = vec![(0, b(0.0)), (1, b(0.5))];
        let dets = vec![(0, 0.9, b(0.0)), (1, 0.8, b(0.5))];
        assert_eq!(average_precision(&dets, &gts, 0.5).0, Some(1.0));
        assert_eq!(average_precision(&[], &gts, 0.5).0, Some(0.0));
        assert_eq!(average_precision(&dets, &[], 0.5).0, None);
    }

    #[test]
    fn classifier_edge_cases() {
        let m = ee_classification_metrics(&[0.95, 0.9, 0.1, 0.05], &[1, 1, 0, 0], 0.5);
        assert_eq!((m.accuracy, m.fpr, m.skip_rate), (1.0, 0.0, 0.5));
        let m = ee_classification_metrics(&[0.95, 0.9, 0.99], &[1, 0, 1], 1.0);
        assert_eq!((m.fpr, m.skip_rate), (0.0, 0.0));
    }
}
