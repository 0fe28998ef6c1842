//! Dataset evaluation: gated and ungated mAP paired with early-exit
//! classification metrics in one report.

use crate::anchors::AnchorSet;
use crate::checkpoint::model_hash;
use crate::data::{dataset_hash, Sample};
use crate::error::Result;
use crate::gate::{check_tau, score_dataset, ScoreCache};
use crate::metrics::{
    ee_classification_metrics, mean_average_precision, EvalReport, ReportMeta, AP_IOU,
};
use crate::model::ModelGraph;
use crate::train::derive_empty_labels;

pub use crate::metrics::INTERPOLATION;

/// Builds a report from cached scores. With `tau = None`, or for a model
/// without a branch, the gated columns equal the ungated ones and nothing
/// is skipped.
pub fn report_from_cache(
    cache: &ScoreCache,
    samples: &[Sample],
    num_classes: usize,
    tau: Option<f64>,
    model_hash: String,
) -> Result<EvalReport> {
    if let Some(t) = tau {
        check_tau(t)?;
    }
    let gts: Vec<_> = samples.iter().map(Sample::gt_boxes).collect();
    let (_, map_no_ee, _) = mean_average_precision(&cache.detections, &gts, num_classes);
    let (per_class_ap, map, counts) = mean_average_precision(&cache.gated(tau), &gts, num_classes);
    let ee = match (&cache.p_empty, tau) {
        (Some(p), Some(t)) => Some(ee_classification_metrics(p, &derive_empty_labels(&gts), t)),
        _ => None,
    };
    Ok(EvalReport {
        metadata: ReportMeta {
            model_hash,
            dataset_hash: dataset_hash(samples),
            tau,
            interpolation: INTERPOLATION.into(),
            iou_threshold: AP_IOU,
        },
        images: samples.len(),
        per_class_ap,
        map,
        map_no_ee,
        ee_accuracy: ee.map(|m| m.accuracy),
        ee_fpr: ee.map(|m| m.fpr),
        skip_rate: ee.map_or(0.0, |m| m.skip_rate),
        counts,
    })
}

/// Scores every image once and reports mAP at `tau` next to mAP with the
/// gate disabled. Also returns the score cache the report was derived from.
pub fn evaluate(
    model: &ModelGraph,
    anchors: &AnchorSet,
    samples: &[Sample],
    tau: Option<f64>,
) -> Result<(EvalReport, ScoreCache)> {
    let cache = score_dataset(model, anchors, samples)?;
    let report = report_from_cache(
        &cache,
        samples,
        model.config.heads.num_classes,
        tau,
        model_hash(model),
    )?;
    Ok((report, cache))
}
