//! End-to-end training: augmentation, batching, the composite loss, RMSprop
//! updates on a stepped learning-rate schedule, and per-epoch validation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, model_anchors, AnchorSet, MATCH_IOU};
use crate::boxes::GroundTruthBox;
use crate::cost::csv_err;
use crate::data::{normalize_boxes, sample_positive_crop, Sample};
use crate::error::{config_err, Error, Result};
use crate::gate::{optimize_threshold, score_dataset};
use crate::image::{GrayImage, PixelBox, Rect};
use crate::loss::{composite_loss, ee_loss, ssd_loss, LossWeights};
use crate::metrics::{ee_classification_metrics, mean_average_precision};
use crate::model::ModelGraph;
use crate::optim::{RmsProp, RmsPropConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Side-length range of augmentation crops, as a fraction of the image.
pub const CROP_SCALE: (f64, f64) = (0.6, 1.0);
pub const BRIGHTNESS_GAIN: (f64, f64) = (0.75, 1.25);
pub const BRIGHTNESS_SHIFT: (f64, f64) = (-20.0, 20.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub mirror: f64,
    pub crop: f64,
    pub brightness: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            mirror: 0.5,
            crop: 0.5,
            brightness: 0.5,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            mirror: 0.0,
            crop: 0.0,
            brightness: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    /// Learning-rate multiplier of the early-exit branch parameters.
    pub branch_lr_mult: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub optimizer: RmsPropConfig,
    pub augmentation: Augmentation,
    /// Share of the training images held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            initial_lr: 1e-4,
            branch_lr_mult: 1.0,
            batch_size: 24,
            lr_decay: 0.95,
            decay_every: 25,
            optimizer: RmsPropConfig::default(),
            augmentation: Augmentation::default(),
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return config_err("epochs, batch_size and decay_every must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return config_err(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(self.initial_lr > 0.0 && self.branch_lr_mult >= 0.0) {
            return config_err("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return config_err("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `initial_lr * lr_decay ^ floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// `1` for images without annotations.
pub fn derive_empty_labels<B>(annotations: &[Vec<B>]) -> Vec<u8> {
    annotations.iter().map(|a| u8::from(a.is_empty())).collect()
}

/// Deterministic train/validation split by a seeded shuffle.
pub fn split_validation(
    samples: &[Sample],
    fraction: f64,
    seed: u64,
) -> (Vec<Sample>, Vec<Sample>) {
    let n_val = (samples.len() as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng::substream(seed, "split"));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    val.sort_unstable();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    train.sort_unstable();
    (
        train.iter().map(|&i| samples[i].clone()).collect(),
        val.iter().map(|&i| samples[i].clone()).collect(),
    )
}

fn mirror_boxes(boxes: &[PixelBox], width: usize) -> Vec<PixelBox> {
    boxes
        .iter()
        .map(|b| PixelBox {
            xmin: width as f64 - b.xmax,
            xmax: width as f64 - b.xmin,
            ..*b
        })
        .collect()
}

/// Random mirror, crop and brightness change, each with its own probability.
/// Crops keep the image aspect ratio and are resized back to the input
/// size; crops of non-empty images contain at least one whole box.
pub fn augment(
    image: &GrayImage,
    boxes: &[PixelBox],
    aug: &Augmentation,
    rng: &mut Rng,
) -> (GrayImage, Vec<PixelBox>) {
    let (h, w) = (image.height, image.width);
    let mut img = image.clone();
    let mut bx = boxes.to_vec();
    if rng.random_bool(aug.mirror.clamp(0.0, 1.0)) {
        img = img.mirror();
        bx = mirror_boxes(&bx, w);
    }
    if rng.random_bool(aug.crop.clamp(0.0, 1.0)) {
        let (rect, kept) = if bx.is_empty() {
            let s = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
            let (cw, ch) = (
                ((w as f64 * s).round() as usize).max(1),
                ((h as f64 * s).round() as usize).max(1),
            );
            let r = Rect {
                x: rng.random_range(0..=w - cw),
                y: rng.random_range(0..=h - ch),
                width: cw,
                height: ch,
            };
            (r, vec![])
        } else {
            sample_positive_crop(h, w, &bx, CROP_SCALE, rng).expect("boxes present")
        };
        let (sx, sy) = (w as f64 / rect.width as f64, h as f64 / rect.height as f64);
        img = img.crop(&rect).resize(h, w);
        bx = kept
            .iter()
            .map(|b| PixelBox {
                xmin: b.xmin * sx,
                xmax: b.xmax * sx,
                ymin: b.ymin * sy,
                ymax: b.ymax * sy,
                ..*b
            })
            .collect();
    }
    if rng.random_bool(aug.brightness.clamp(0.0, 1.0)) {
        let gain = rng.random_range(BRIGHTNESS_GAIN.0..=BRIGHTNESS_GAIN.1);
        let shift = rng.random_range(BRIGHTNESS_SHIFT.0..=BRIGHTNESS_SHIFT.1);
        for p in &mut img.pixels {
            *p = (*p as f64 * gain + shift).round().clamp(0.0, 255.0) as u8;
        }
    }
    (img, bx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_loc: f64,
    pub loss_cls: f64,
    pub loss_ee: f64,
    pub loss_total: f64,
    pub val_map: f64,
    pub val_ee_acc: f64,
}

pub fn write_log_csv(rows: &[EpochLog], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_log_csv(r: impl Read) -> Result<Vec<EpochLog>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

/// Losses and output gradients of one batch, without touching parameters.
pub struct BatchLoss {
    pub loc: f64,
    pub cls: f64,
    pub ee: f64,
    pub total: f64,
}

/// Forward, loss and backward for one batch; gradients accumulate into the
/// model's parameters. The branch gradient is scaled by `lambda` and
/// skipped entirely when `lambda` is zero.
pub fn batch_gradients(
    model: &mut ModelGraph,
    anchors: &AnchorSet,
    x: &Tensor,
    gts: &[Vec<GroundTruthBox>],
    weights: &LossWeights,
) -> Result<BatchLoss> {
    let assignments: Vec<_> = gts
        .iter()
        .map(|g| match_anchors(anchors, g, MATCH_IOU))
        .collect();
    let (out, logits, state) = model.forward_train(x)?;
    let det = ssd_loss(&out, anchors, &assignments, gts)?;
    let (ee, d_ee) = match logits {
        Some(lg) if weights.lambda > 0.0 => {
            let y = derive_empty_labels(gts);
            let (v, g) = ee_loss(&lg, &y, weights)?;
            (v, Some(g.map(|d| d * weights.lambda as f32)))
        }
        Some(lg) => (ee_loss(&lg, &derive_empty_labels(gts), weights)?.0, None),
        None => (0.0, None),
    };
    model.backward(state, &det.d_cls, &det.d_loc, d_ee.as_ref())?;
    Ok(BatchLoss {
        loc: det.loc,
        cls: det.cls,
        ee,
        total: composite_loss(det.loc, det.cls, ee, weights),
    })
}

/// Validation mAP (ungated) and EE accuracy at the accuracy-optimal threshold.
pub fn validate_epoch(
    model: &ModelGraph,
    anchors: &AnchorSet,
    val: &[Sample],
) -> Result<(f64, f64, Option<f64>)> {
    let cache = score_dataset(model, anchors, val)?;
    let gts: Vec<_> = val.iter().map(Sample::gt_boxes).collect();
    let (_, map, _) =
        mean_average_precision(&cache.detections, &gts, model.config.heads.num_classes);
    let Some(p) = &cache.p_empty else {
        return Ok((map, 0.0, None));
    };
    let y = derive_empty_labels(&gts);
    match optimize_threshold(p, &y) {
        Ok(t) => Ok((map, ee_classification_metrics(p, &y, t).accuracy, Some(t))),
        Err(Error::SingleClass) => Ok((map, ee_classification_metrics(p, &y, 0.5).accuracy, None)),
        Err(e) => Err(e),
    }
}

/// Mutable run state handed to the per-epoch hook.
pub struct EpochEnd<'a> {
    pub model: &'a ModelGraph,
    pub optimizer: &'a RmsProp,
    pub log: &'a EpochLog,
    pub tau: Option<f64>,
}

/// Trains from epoch `start_epoch` (0 for a fresh run) to `cfg.epochs`.
/// Augmentation and batch order for each epoch derive from `cfg.seed` and
/// the epoch index alone, so a resumed run follows the same trajectory.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ModelGraph,
    optimizer: &mut RmsProp,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    weights.validate()?;
    if train_set.is_empty() {
        return config_err("training set is empty");
    }
    if val_set.is_empty() {
        return config_err("validation split is empty");
    }
    let weights = if model.branch.is_some() {
        *weights
    } else {
        LossWeights {
            lambda: 0.0,
            ..*weights
        }
    };
    let anchors = model_anchors(model)?;
    let mut logs = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::indexed(cfg.seed, "shuffle", epoch as u64));
        let mut aug_rng = rng::indexed(cfg.seed, "augment", epoch as u64);
        let mut sums = [0.0f64; 4];
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train_set[i];
                let (img, bx) = augment(&s.image, &s.boxes, &cfg.augmentation, &mut aug_rng);
                gts.push(normalize_boxes(&bx, img.height, img.width));
                images.push(img.to_tensor());
            }
            let x = Tensor::stack_batch(&images.iter().collect::<Vec<_>>())?;
            model.zero_grad();
            let l = batch_gradients(model, &anchors, &x, &gts, &weights)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            optimizer.step(model, lr, cfg.branch_lr_mult);
            for (s, v) in sums.iter_mut().zip([l.loc, l.cls, l.ee, l.total]) {
                *s += v;
            }
            batches += 1;
        }
        let (val_map, val_ee_acc, tau) = validate_epoch(model, &anchors, val_set)?;
        let b = batches as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss_loc: sums[0] / b,
            loss_cls: sums[1] / b,
            loss_ee: sums[2] / b,
            loss_total: sums[3] / b,
            val_map,
            val_ee_acc,
        };
        on_epoch(EpochEnd {
            model,
            optimizer,
            log: &log,
            tau,
        })?;
        logs.push(log);
    }
    model.zero_grad();
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert!((lr_at(25, &cfg) - 9.5e-5).abs() < 1e-15);
        assert!((lr_at(99, &cfg) - 1e-4 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn empty_labels_from_counts() {
        let ann: Vec<Vec<u8>> = vec![vec![1, 2], vec![], vec![3], vec![]];
        assert_eq!(derive_empty_labels(&ann), vec![0, 1, 0, 1]);
    }

    #[test]
    fn mirror_arithmetic() {
        let b = PixelBox {
            class: 1,
            xmin: 10.0,
            ymin: 0.0,
            xmax: 30.0,
            ymax: 5.0,
        };
        let m = mirror_boxes(&[b], 100);
        assert_eq!((m[0].xmin, m[0].xmax), (70.0, 90.0));
    }
}
