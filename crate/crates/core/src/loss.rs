//! Detection loss with hard-negative mining, the weighted early-exit
//! cross-entropy, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::anchors::{encode_box, AnchorSet, Assignment};
use crate::boxes::GroundTruthBox;
use crate::error::{config_err, Error, Result};
use crate::model::SsdOutputs;
use crate::tensor::Tensor;

/// Negatives kept per positive anchor.
pub const NEG_POS_RATIO: usize = 3;
/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the early-exit term.
    pub lambda: f64,
    /// Weight of non-empty images (`y = 0`).
    pub w0: f64,
    /// Weight of empty images (`y = 1`).
    pub w1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            w0: 1.0,
            w1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.w0 > 0.0 && self.w1 > 0.0)
            || !(self.lambda + self.w0 + self.w1).is_finite()
        {
            return config_err(format!("invalid loss weights {self:?}"));
        }
        Ok(())
    }
}

/// Detection loss components and their gradients w.r.t. the raw outputs.
#[derive(Clone, Debug)]
pub struct SsdLoss {
    pub loc: f64,
    pub cls: f64,
    pub num_pos: usize,
    pub d_cls: Tensor,
    pub d_loc: Tensor,
}

pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

fn log_softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let lse = m + z.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v as f64 - lse).collect()
}

/// Smooth-L1 localization over positive anchors and softmax cross-entropy
/// over positives plus the hardest negatives (three per positive, and three
/// for an image with no positives). Both terms are divided by the batch's
/// positive count (at least 1).
pub fn ssd_loss(
    out: &SsdOutputs,
    anchors: &AnchorSet,
    assignments: &[Assignment],
    gts: &[Vec<GroundTruthBox>],
) -> Result<SsdLoss> {
    let (n, a, k) = (
        out.cls_logits.shape()[0],
        out.num_anchors(),
        out.num_classes(),
    );
    if a != anchors.len() || assignments.len() != n || gts.len() != n {
        return Err(Error::Shape {
            layer: "ssd_loss".into(),
            expected: vec![n, anchors.len()],
            actual: vec![assignments.len(), a],
        });
    }
    let mut loc = 0.0;
    let mut cls = 0.0;
    let mut d_cls = vec![0.0f64; n * a * k];
    let mut d_loc = vec![0.0f64; n * a * 4];
    let num_pos: usize = assignments.iter().map(Assignment::num_positives).sum();
    let norm = num_pos.max(1) as f64;
    let logits = out.cls_logits.data();
    let offsets = out.box_offsets.data();
    for (i, asg) in assignments.iter().enumerate() {
        let mut neg_losses = Vec::new();
        let mut pos = 0;
        for j in 0..a {
            let row = (i * a + j) * k;
            let lp = log_softmax(&logits[row..row + k]);
            let label = asg.labels[j];
            if label >= k {
                return config_err(format!("class {label} outside {k} logits"));
            }
            if label == 0 {
                neg_losses.push((-lp[0], j, lp));
                continue;
            }
            pos += 1;
            cls -= lp[label];
            for c in 0..k {
                d_cls[row + c] = lp[c].exp() - f64::from(c == label);
            }
            let g = asg.matched[j].expect("positive anchors carry a match");
            let t = encode_box(&gts[i][g].bbox, &anchors.anchors[j])?;
            for (c, tc) in t.iter().enumerate() {
                let idx = (i * a + j) * 4 + c;
                let (v, dv) = smooth_l1(offsets[idx] as f64 - tc);
                loc += v;
                d_loc[idx] = dv;
            }
        }
        let keep = (NEG_POS_RATIO * pos.max(1)).min(neg_losses.len());
        neg_losses.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for (l, j, lp) in neg_losses.into_iter().take(keep) {
            cls += l;
            let row = (i * a + j) * k;
            for c in 0..k {
                d_cls[row + c] = lp[c].exp() - f64::from(c == 0);
            }
        }
    }
    let scale = |v: Vec<f64>, shape: Vec<usize>| {
        Tensor::new(shape, v.into_iter().map(|g| (g / norm) as f32).collect())
    };
    Ok(SsdLoss {
        loc: loc / norm,
        cls: cls / norm,
        num_pos,
        d_cls: scale(d_cls, vec![n, a, k])?,
        d_loc: scale(d_loc, vec![n, a, 4])?,
    })
}

/// Two-class probabilities of `[N, 2]` logits, computed in f64.
pub fn ee_probabilities(logits: &Tensor) -> Vec<[f64; 2]> {
    logits
        .data()
        .chunks(2)
        .map(|z| {
            let lp = log_softmax(z);
            [lp[0].exp(), lp[1].exp()]
        })
        .collect()
}

/// Weighted binary cross-entropy of `[N, 2]` logits against empty labels
/// (`1` = empty), with its gradient w.r.t. the logits.
pub fn ee_loss(logits: &Tensor, y: &[u8], w: &LossWeights) -> Result<(f64, Tensor)> {
    let n = y.len();
    if logits.shape() != [n, 2] {
        return Err(Error::Shape {
            layer: "ee_loss".into(),
            expected: vec![n, 2],
            actual: logits.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    let mut grad = vec![0.0f32; n * 2];
    for (i, (p, &yi)) in ee_probabilities(logits).iter().zip(y).enumerate() {
        let (t, c) = if yi == 1 { (1, w.w1) } else { (0, w.w0) };
        total -= c * p[t].max(LOG_FLOOR).ln();
        if p[t] > LOG_FLOOR {
            for (j, pj) in p.iter().enumerate() {
                grad[i * 2 + j] = (c * (pj - f64::from(j == t)) / n as f64) as f32;
            }
        }
    }
    Ok((total / n.max(1) as f64, Tensor::new(vec![n, 2], grad)?))
}

pub fn composite_loss(loc: f64, cls: f64, ee: f64, w: &LossWeights) -> f64 {
    loc + cls + w.lambda * ee
}
