//! Early-exit gating: detection decoding, confidence-gated inference,
//! threshold selection on cached scores, and threshold sweeps.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, AnchorSet};
use crate::boxes::{iou, Detection, GroundTruthBox};
use crate::cost::{average_macs, csv_err};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::ee_probabilities;
use crate::metrics::{ee_classification_metrics, mean_average_precision};
use crate::model::{ModelGraph, SsdOutputs};
use crate::tensor::Tensor;

pub const NMS_IOU: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.01;
pub const MAX_DETECTIONS: usize = 200;
pub const TAU_MIN: f64 = 0.5;
pub const TAU_MAX: f64 = 1.0;
/// Resolution of the returned threshold.
pub const TAU_STEP: f64 = 1e-3;
pub const TERNARY_ITERATIONS: usize = 60;

pub fn check_tau(tau: f64) -> Result<()> {
    if (TAU_MIN..=TAU_MAX).contains(&tau) {
        Ok(())
    } else {
        Err(Error::ThresholdRange(tau))
    }
}

/// Greedy per-class suppression; keeps the highest-scoring box of every
/// overlapping group. Input order breaks score ties.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            keep.push(d);
        }
    }
    keep
}

/// Decoded, suppressed detections of batch row `i`.
pub fn decode_detections(
    out: &SsdOutputs,
    i: usize,
    anchors: &AnchorSet,
) -> Result<Vec<Detection>> {
    let (a, k) = (out.num_anchors(), out.num_classes());
    let logits = &out.cls_logits.data()[i * a * k..(i + 1) * a * k];
    let offsets = &out.box_offsets.data()[i * a * 4..(i + 1) * a * 4];
    let mut cand = Vec::new();
    for (j, anchor) in anchors.anchors.iter().enumerate() {
        let z = &logits[j * k..(j + 1) * k];
        let m = z
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v as f64));
        let denom: f64 = z.iter().map(|&v| (v as f64 - m).exp()).sum();
        let mut bbox = None;
        for c in 1..k {
            let p = (z[c] as f64 - m).exp() / denom;
            if p <= SCORE_THRESHOLD {
                continue;
            }
            let b = match bbox {
                Some(b) => b,
                None => {
                    let t: Vec<f64> = offsets[j * 4..j * 4 + 4]
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    let b = decode_box(&t, anchor)?.clip(0.0, 1.0);
                    bbox = Some(b);
                    b
                }
            };
            cand.push(Detection {
                class_id: c,
                score: p,
                bbox: b,
            });
        }
    }
    let mut kept = nms(cand, NMS_IOU);
    kept.truncate(MAX_DETECTIONS);
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub p_empty: f64,
    pub skipped: bool,
    /// Empty when skipped.
    pub detections: Vec<Detection>,
    /// Raw head outputs when the detector ran.
    pub outputs: Option<SsdOutputs>,
}

/// Runs the backbone to the exit point and the branch; stops there when
/// `P(empty) >= tau`, otherwise resumes from the cached activation.
pub fn gated_inference(
    model: &ModelGraph,
    anchors: &AnchorSet,
    image: &Tensor,
    tau: f64,
) -> Result<GateDecision> {
    check_tau(tau)?;
    let l = model
        .attach_layer()
        .ok_or_else(|| Error::Config("gated inference needs an early-exit branch".into()))?;
    let prefix = model.forward_prefix(image, l)?;
    let p_empty = ee_probabilities(&model.branch_logits(&prefix.features)?)[0][1];
    if p_empty >= tau {
        return Ok(GateDecision {
            p_empty,
            skipped: true,
            detections: vec![],
            outputs: None,
        });
    }
    let out = model.resume(prefix)?;
    Ok(GateDecision {
        p_empty,
        skipped: false,
        detections: decode_detections(&out, 0, anchors)?,
        outputs: Some(out),
    })
}

/// Ungated detections of one image.
pub fn static_inference(
    model: &ModelGraph,
    anchors: &AnchorSet,
    image: &Tensor,
) -> Result<(Vec<Detection>, SsdOutputs)> {
    let out = model.resume(model.forward_prefix(image, 0)?)?;
    Ok((decode_detections(&out, 0, anchors)?, out))
}

/// Per-image exit probabilities and ungated detections, computed with one
/// full pass per image so any threshold can be applied afterwards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreCache {
    /// Absent for models without a branch.
    pub p_empty: Option<Vec<f64>>,
    pub detections: Vec<Vec<Detection>>,
}

impl ScoreCache {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Detections after gating at `tau` (skipped images yield none).
    pub fn gated(&self, tau: Option<f64>) -> Vec<Vec<Detection>> {
        match (&self.p_empty, tau) {
            (Some(p), Some(t)) => self
                .detections
                .iter()
                .zip(p)
                .map(|(d, &pi)| if pi >= t { vec![] } else { d.clone() })
                .collect(),
            _ => self.detections.clone(),
        }
    }
}

pub fn score_dataset(
    model: &ModelGraph,
    anchors: &AnchorSet,
    samples: &[Sample],
) -> Result<ScoreCache> {
    let mut cache = ScoreCache {
        p_empty: model
            .attach_layer()
            .map(|_| Vec::with_capacity(samples.len())),
        detections: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let x = s.image.to_tensor();
        let out = match model.attach_layer() {
            Some(l) => {
                let prefix = model.forward_prefix(&x, l)?;
                let p = ee_probabilities(&model.branch_logits(&prefix.features)?)[0][1];
                cache.p_empty.as_mut().expect("branch present").push(p);
                model.resume(prefix)?
            }
            None => model.resume(model.forward_prefix(&x, 0)?)?,
        };
        cache.detections.push(decode_detections(&out, 0, anchors)?);
    }
    Ok(cache)
}

/// Threshold `0.5 + k * 0.001` as an exactly rounded decimal.
pub fn grid_tau(k: usize) -> f64 {
    (500 + k) as f64 / 1000.0
}

fn grid_len() -> usize {
    ((TAU_MAX - TAU_MIN) / TAU_STEP).round() as usize + 1
}

/// Classification accuracy is piecewise constant in the threshold. A
/// ternary search over `[0.5, 1]` brackets a maximum; the result is then
/// snapped to the grid point ending the best plateau among the score
/// breakpoints in that bracket, and checked against every other breakpoint
/// so that a multi-modal accuracy curve cannot trap the search. Ties go to
/// the largest threshold.
pub fn optimize_threshold(p_empty: &[f64], y: &[u8]) -> Result<f64> {
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::SingleClass);
    }
    let acc = |t: f64| ee_classification_metrics(p_empty, y, t).accuracy;
    let (mut lo, mut hi) = (TAU_MIN, TAU_MAX);
    for _ in 0..TERNARY_ITERATIONS {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if acc(m1) > acc(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let last = grid_len() - 1;
    let candidates = |from: f64, to: f64| -> Vec<usize> {
        let mut ks = vec![];
        for &p in p_empty
            .iter()
            .filter(|&&p| p >= from - TAU_STEP && p <= to + TAU_STEP)
        {
            let k = ((p - TAU_MIN) / TAU_STEP).floor();
            if k < -1.0 || k > last as f64 + 1.0 {
                continue;
            }
            let k = k as i64;
            ks.extend(
                (k - 1..=k + 1)
                    .filter(|&c| c >= 0 && c <= last as i64)
                    .map(|c| c as usize),
            );
        }
        ks
    };
    let pick = |ks: Vec<usize>, start: (usize, f64)| {
        ks.into_iter().fold(start, |best, k| {
            let a = acc(grid_tau(k));
            if a > best.1 || (a == best.1 && k > best.0) {
                (k, a)
            } else {
                best
            }
        })
    };
    let k_lo = ((lo - TAU_MIN) / TAU_STEP).floor().clamp(0.0, last as f64) as usize;
    let k_hi = ((hi - TAU_MIN) / TAU_STEP).ceil().clamp(0.0, last as f64) as usize;
    let local = pick(
        candidates(lo, hi),
        pick(vec![k_lo, k_hi], (k_lo, acc(grid_tau(k_lo)))),
    );
    let mut global = candidates(TAU_MIN, TAU_MAX);
    global.extend([0, last]);
    Ok(grid_tau(pick(global, local).0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub map: f64,
    pub skip_rate: f64,
    pub ee_accuracy: f64,
    pub mac_avg: f64,
}

/// `start, start + step, ...` up to and including `end`.
pub fn tau_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|i| ((start + i as f64 * step) * 1e6).round() / 1e6)
        .collect()
}

/// One point per threshold, derived from cached scores and detections only.
pub fn threshold_sweep(
    cache: &ScoreCache,
    gts: &[Vec<GroundTruthBox>],
    y: &[u8],
    taus: &[f64],
    mac_full: f64,
    mac_ee: f64,
    num_classes: usize,
) -> Result<Vec<SweepPoint>> {
    let p = cache
        .p_empty
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs early-exit scores".into()))?;
    taus.iter()
        .map(|&tau| {
            check_tau(tau)?;
            let m = ee_classification_metrics(p, y, tau);
            let (_, map, _) = mean_average_precision(&cache.gated(Some(tau)), gts, num_classes);
            Ok(SweepPoint {
                tau,
                map,
                skip_rate: m.skip_rate,
                ee_accuracy: m.accuracy,
                mac_avg: average_macs(mac_full, mac_ee, m.skip_rate),
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_sweep_csv(r: impl Read) -> Result<Vec<SweepPoint>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}
