//! Exported integer graph and its full-integer evaluator.
//!
//! Every tensor carries affine parameters. Convolutions and linear layers
//! accumulate `(x − z_x)(w − z_w)` in `i32` on top of an `i32` bias with
//! scale `s_x · s_w`, then requantize with a fixed-point multiplier. Clipping
//! activations need no separate op: the output range of a PaCT tensor is
//! exactly `[0, clip]`, so the final clamp implements them.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::data::Sample;
use crate::error::{config_err, Error, Result};
use crate::gate::{decode_detections, ScoreCache};
use crate::layers::{conv_out, im2col, LayerSpec};
use crate::loss::ee_probabilities;
use crate::model::{concat_rows, to_anchor_rows, ModelConfig, ModelGraph, SsdOutputs};
use crate::nn::{Layer, Seq};
use crate::quant::{observed_range, rounding_shift, weight_qparams, FixedMultiplier, QuantParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QOpKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Depthwise {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    GlobalAvgPool,
}

impl QOpKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            QOpKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![out_ch, in_ch, kernel, kernel],
            QOpKind::Depthwise {
                channels, kernel, ..
            } => vec![channels, 1, kernel, kernel],
            QOpKind::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
            QOpKind::GlobalAvgPool => vec![0],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            QOpKind::Conv { out_ch, .. } => out_ch,
            QOpKind::Depthwise { channels, .. } => channels,
            QOpKind::Linear { out_features, .. } => out_features,
            QOpKind::GlobalAvgPool => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match *self {
            QOpKind::Conv {
                out_ch,
                kernel,
                stride,
                ..
            } => vec![
                input[0],
                out_ch,
                conv_out(input[2], kernel, stride),
                conv_out(input[3], kernel, stride),
            ],
            QOpKind::Depthwise { kernel, stride, .. } => vec![
                input[0],
                input[1],
                conv_out(input[2], kernel, stride),
                conv_out(input[3], kernel, stride),
            ],
            QOpKind::Linear { out_features, .. } => vec![input[0], out_features],
            QOpKind::GlobalAvgPool => vec![input[0], input[1]],
        }
    }
}

/// One requantized integer op. Weights and biases travel as container blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QOp {
    pub name: String,
    pub op: QOpKind,
    pub input: QuantParams,
    pub output: QuantParams,
    pub weight: Option<QuantParams>,
    /// `s_x · s_w / s_out`, or `s_x / (h · w · s_out)` for pooling.
    pub multiplier: FixedMultiplier,
    #[serde(skip)]
    pub weights: Vec<i8>,
    #[serde(skip)]
    pub bias: Vec<i32>,
}

/// Residual addition rescaling both operands onto the output grid with a
/// shared shift, so the sum is rounded once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAdd {
    pub name: String,
    pub lhs: QuantParams,
    pub rhs: QuantParams,
    pub output: QuantParams,
    pub lhs_mult: i64,
    pub rhs_mult: i64,
    pub shift: u32,
}

impl QAdd {
    fn new(name: String, lhs: QuantParams, rhs: QuantParams, output: QuantParams) -> Result<Self> {
        let ma = lhs.scale / output.scale;
        let mb = rhs.scale / output.scale;
        let top = ma.max(mb).log2().floor() as i32 + 1;
        let shift = 31 - top;
        if !(0..=62).contains(&shift) {
            return config_err(format!(
                "{name}: operand scale ratio {} out of range",
                ma.max(mb)
            ));
        }
        Ok(Self {
            name,
            lhs,
            rhs,
            output,
            lhs_mult: (ma * 2f64.powi(shift)).round() as i64,
            rhs_mult: (mb * 2f64.powi(shift)).round() as i64,
            shift: shift as u32,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QBlock {
    pub ops: Vec<QOp>,
    pub add: Option<QAdd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QHead {
    pub attach_layer: usize,
    pub anchors_per_cell: usize,
    pub tower: Vec<QOp>,
    pub cls: Vec<QOp>,
    pub loc: Vec<QOp>,
}

/// A fully quantized detector with fixed parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Int8Model {
    /// The quantization-ready float configuration this was exported from.
    pub config: ModelConfig,
    pub tau: Option<f64>,
    pub input: QuantParams,
    pub stem: Vec<QOp>,
    pub blocks: Vec<QBlock>,
    pub branch: Option<Vec<QOp>>,
    pub heads: Vec<QHead>,
}

impl Int8Model {
    pub fn attach_layer(&self) -> Option<usize> {
        self.config.ee.as_ref().map(|e| e.attach_layer)
    }

    /// Every op in container order: stem, blocks, branch, heads.
    pub fn ops(&self) -> Vec<&QOp> {
        let mut v: Vec<&QOp> = self.stem.iter().collect();
        v.extend(self.blocks.iter().flat_map(|b| &b.ops));
        v.extend(self.branch.iter().flatten());
        for h in &self.heads {
            v.extend(h.tower.iter().chain(&h.cls).chain(&h.loc));
        }
        v
    }

    pub fn ops_mut(&mut self) -> Vec<&mut QOp> {
        let mut v: Vec<&mut QOp> = self.stem.iter_mut().collect();
        v.extend(self.blocks.iter_mut().flat_map(|b| &mut b.ops));
        v.extend(self.branch.iter_mut().flatten());
        for h in &mut self.heads {
            v.extend(h.tower.iter_mut().chain(&mut h.cls).chain(&mut h.loc));
        }
        v
    }
}

/// Integer tensor on an affine grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
    pub params: QuantParams,
}

impl QTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&q| self.params.dequantize(q))
            .collect()
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.dequantize().iter().map(|&v| v as f32).collect(),
        )
        .expect("shape")
    }
}

/// Raw outputs of one integer (or simulated) pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Int8Outputs {
    pub ee_logits: Option<QTensor>,
    /// `(class map, box map)` per head; empty when the gate skipped.
    pub heads: Vec<(QTensor, QTensor)>,
    pub skipped: bool,
}

impl Int8Outputs {
    /// Softmax of the dequantized exit logits, per image.
    pub fn p_empty(&self) -> Option<Vec<f64>> {
        self.ee_logits.as_ref().map(|l| {
            let t = Tensor::new(
                l.shape.clone(),
                l.dequantize().iter().map(|&v| v as f32).collect(),
            )
            .expect("shape");
            ee_probabilities(&t).iter().map(|p| p[1]).collect()
        })
    }

    /// Dequantized per-anchor predictions in the float model's layout.
    pub fn ssd_outputs(&self, model: &Int8Model) -> Option<SsdOutputs> {
        if self.heads.is_empty() {
            return None;
        }
        let k = model.config.heads.num_classes;
        let n = self.heads[0].0.shape[0];
        let mut cls = Vec::new();
        let mut loc = Vec::new();
        for ((c, l), h) in self.heads.iter().zip(&model.heads) {
            cls.push(to_anchor_rows(&c.to_tensor(), h.anchors_per_cell, k));
            loc.push(to_anchor_rows(&l.to_tensor(), h.anchors_per_cell, 4));
        }
        Some(SsdOutputs {
            cls_logits: concat_rows(cls, n, k),
            box_offsets: concat_rows(loc, n, 4),
        })
    }

    /// Largest disagreement with `other`, in output grid steps.
    pub fn max_step_diff(&self, other: &Int8Outputs) -> i32 {
        let pairs = self.ee_logits.iter().zip(&other.ee_logits).chain(
            self.heads
                .iter()
                .zip(&other.heads)
                .flat_map(|(a, b)| [(&a.0, &b.0), (&a.1, &b.1)]),
        );
        pairs
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .max()
            .unwrap_or(0)
    }
}

/// The per-op arithmetic: exact integer, or its float simulation.
pub(crate) trait Arithmetic {
    fn op(&self, op: &QOp, x: &QTensor) -> QTensor;
    fn add(&self, add: &QAdd, lhs: &QTensor, rhs: &QTensor) -> QTensor;
}

pub(crate) struct Integer;

fn clamp_q(v: i64, p: &QuantParams) -> i32 {
    v.clamp(p.qmin as i64, p.qmax as i64) as i32
}

impl Arithmetic for Integer {
    fn op(&self, op: &QOp, x: &QTensor) -> QTensor {
        let shape = op.op.output_shape(&x.shape);
        let zx = op.input.zero_point;
        let xc: Vec<i32> = x.data.iter().map(|&q| q - zx).collect();
        let zw = op.weight.map_or(0, |w| w.zero_point);
        let wc: Vec<i32> = op.weights.iter().map(|&q| q as i32 - zw).collect();
        let z = op.output.zero_point as i64;
        let req = |acc: i32| clamp_q(z + op.multiplier.apply(acc as i64), &op.output);
        let n = x.shape[0];
        let mut out = Vec::with_capacity(shape.iter().product());
        match op.op {
            QOpKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => {
                let (h, w) = (x.shape[2], x.shape[3]);
                let (ho, wo) = (shape[2], shape[3]);
                let p = ho * wo;
                let ck = in_ch * kernel * kernel;
                let mut col = vec![0i32; ck * p];
                let mut acc = vec![0i32; p];
                for i in 0..n {
                    let xi = &xc[i * in_ch * h * w..(i + 1) * in_ch * h * w];
                    let cols: &[i32] = if kernel == 1 && stride == 1 {
                        xi
                    } else {
                        im2col(xi, in_ch, h, w, kernel, stride, ho, wo, &mut col);
                        &col
                    };
                    for oc in 0..out_ch {
                        acc.iter_mut().for_each(|a| *a = op.bias[oc]);
                        for (kk, &wv) in wc[oc * ck..(oc + 1) * ck].iter().enumerate() {
                            if wv == 0 {
                                continue;
                            }
                            for (a, &c) in acc.iter_mut().zip(&cols[kk * p..(kk + 1) * p]) {
                                *a += wv * c;
                            }
                        }
                        out.extend(acc.iter().map(|&a| req(a)));
                    }
                }
            }
            QOpKind::Depthwise {
                channels,
                kernel,
                stride,
            } => {
                let (h, w) = (x.shape[2], x.shape[3]);
                let (ho, wo) = (shape[2], shape[3]);
                let pad = (kernel / 2) as isize;
                for i in 0..n {
                    for c in 0..channels {
                        let plane = &xc[(i * channels + c) * h * w..][..h * w];
                        let kern = &wc[c * kernel * kernel..(c + 1) * kernel * kernel];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut a = op.bias[c];
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        a += kern[ky * kernel + kx]
                                            * plane[iy as usize * w + ix as usize];
                                    }
                                }
                                out.push(req(a));
                            }
                        }
                    }
                }
            }
            QOpKind::Linear {
                in_features,
                out_features,
            } => {
                for i in 0..n {
                    let xi = &xc[i * in_features..(i + 1) * in_features];
                    for o in 0..out_features {
                        let a = wc[o * in_features..(o + 1) * in_features]
                            .iter()
                            .zip(xi)
                            .fold(op.bias[o], |a, (&w, &x)| a + w * x);
                        out.push(req(a));
                    }
                }
            }
            QOpKind::GlobalAvgPool => {
                let hw = x.shape[2] * x.shape[3];
                out.extend(xc.chunks(hw).map(|plane| req(plane.iter().sum())));
            }
        }
        QTensor {
            shape,
            data: out,
            params: op.output,
        }
    }

    fn add(&self, add: &QAdd, lhs: &QTensor, rhs: &QTensor) -> QTensor {
        let z = add.output.zero_point as i64;
        let data = lhs
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| {
                let v = add.lhs_mult as i128 * (a - add.lhs.zero_point) as i128
                    + add.rhs_mult as i128 * (b - add.rhs.zero_point) as i128;
                clamp_q(z + rounding_shift(v, add.shift) as i64, &add.output)
            })
            .collect();
        QTensor {
            shape: lhs.shape.clone(),
            data,
            params: add.output,
        }
    }
}

fn run_ops(ops: &[QOp], x: QTensor, arith: &impl Arithmetic) -> QTensor {
    ops.iter().fold(x, |x, op| arith.op(op, &x))
}

/// Walks the exported graph. With `gate`, returns right after the branch
/// when the exit probability reaches the threshold (single image only).
pub(crate) fn execute(
    model: &Int8Model,
    image: &Tensor,
    arith: &impl Arithmetic,
    gate: Option<f64>,
) -> Result<Int8Outputs> {
    let d = model.config.input_dims();
    if image.shape().len() != 4 || image.shape()[1..] != d[1..] {
        return Err(Error::Shape {
            layer: "input".into(),
            expected: d.to_vec(),
            actual: image.shape().to_vec(),
        });
    }
    if gate.is_some() && image.shape()[0] != 1 {
        return config_err("gated integer inference takes one image");
    }
    let x = QTensor {
        shape: image.shape().to_vec(),
        data: image
            .data()
            .iter()
            .map(|&v| model.input.quantize(v as f64))
            .collect(),
        params: model.input,
    };
    let mut y = run_ops(&model.stem, x, arith);
    let attach = model.attach_layer();
    let mut taps: Vec<(usize, QTensor)> = Vec::new();
    let mut ee_logits = None;
    for (i, b) in model.blocks.iter().enumerate() {
        let l = i + 1;
        let out = run_ops(&b.ops, y.clone(), arith);
        y = match &b.add {
            Some(a) => arith.add(a, &out, &y),
            None => out,
        };
        if attach == Some(l) {
            if let Some(br) = &model.branch {
                let logits = run_ops(br, y.clone(), arith);
                ee_logits = Some(logits);
                if let Some(tau) = gate {
                    let outputs = Int8Outputs {
                        ee_logits,
                        heads: vec![],
                        skipped: false,
                    };
                    if outputs.p_empty().expect("logits")[0] >= tau {
                        return Ok(Int8Outputs {
                            skipped: true,
                            ..outputs
                        });
                    }
                    ee_logits = outputs.ee_logits;
                }
            }
        }
        if model.heads.iter().any(|h| h.attach_layer == l) {
            taps.push((l, y.clone()));
        }
    }
    let mut heads = Vec::new();
    for h in &model.heads {
        let tap = taps
            .iter()
            .find(|t| t.0 == h.attach_layer)
            .expect("tap")
            .1
            .clone();
        let t = run_ops(&h.tower, tap, arith);
        heads.push((run_ops(&h.cls, t.clone(), arith), run_ops(&h.loc, t, arith)));
    }
    Ok(Int8Outputs {
        ee_logits,
        heads,
        skipped: false,
    })
}

/// Full-integer forward of every output.
pub fn int8_forward(model: &Int8Model, image: &Tensor) -> Result<Int8Outputs> {
    execute(model, image, &Integer, None)
}

/// Integer forward that stops after the branch when `p_empty ≥ tau`.
pub fn int8_gated(model: &Int8Model, image: &Tensor, tau: f64) -> Result<Int8Outputs> {
    crate::gate::check_tau(tau)?;
    execute(model, image, &Integer, Some(tau))
}

/// Exit probabilities and ungated detections from the integer path.
pub fn int8_score_dataset(
    model: &Int8Model,
    anchors: &AnchorSet,
    samples: &[Sample],
) -> Result<ScoreCache> {
    let mut cache = ScoreCache {
        p_empty: model
            .branch
            .as_ref()
            .map(|_| Vec::with_capacity(samples.len())),
        detections: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let out = int8_forward(model, &s.image.to_tensor())?;
        if let (Some(p), Some(v)) = (out.p_empty(), cache.p_empty.as_mut()) {
            v.push(p[0]);
        }
        let ssd = out.ssd_outputs(model).expect("full pass");
        cache.detections.push(decode_detections(&ssd, 0, anchors)?);
    }
    Ok(cache)
}

/// Fixes every quantizer of a trained quantization-ready model and converts
/// it to integers, rejecting any op whose worst-case accumulator could
/// leave the `i32` range.
pub fn export_model(model: &ModelGraph, tau: Option<f64>) -> Result<Int8Model> {
    let Some(q) = &model.config.quant else {
        return config_err("export needs a quantization-ready (folded) model");
    };
    if !(2..=8).contains(&q.bits) {
        return config_err(format!("export supports 2..=8 bits, got {}", q.bits));
    }
    let bits = q.bits;
    let input = QuantParams::pact(1.0, bits);
    let mut shape = model.config.input_dims().to_vec();
    let (stem, mut params) = export_seq(&model.stem, input, &mut shape, bits)?;
    let mut outs = vec![(params, shape.clone())];
    let mut blocks = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let (ops, p) = export_seq(&b.seq, params, &mut shape, bits)?;
        let add = if b.residual {
            let out = observer_params(b.post.layers.first(), bits)?;
            Some(QAdd::new(format!("block{}.add", i + 1), p, params, out)?)
        } else {
            None
        };
        params = add.as_ref().map_or(p, |a| a.output);
        blocks.push(QBlock { ops, add });
        outs.push((params, shape.clone()));
    }
    let branch = match (&model.branch, model.attach_layer()) {
        (Some(br), Some(l)) => {
            let (p, s) = &outs[l];
            Some(export_seq(br, *p, &mut s.clone(), bits)?.0)
        }
        _ => None,
    };
    let mut heads = Vec::new();
    for h in &model.heads {
        let (p, s) = &outs[h.attach_layer];
        let mut s = s.clone();
        let (tower, tp) = export_seq(&h.tower, *p, &mut s, bits)?;
        heads.push(QHead {
            attach_layer: h.attach_layer,
            anchors_per_cell: h.anchors_per_cell,
            tower,
            cls: export_seq(&h.cls, tp, &mut s.clone(), bits)?.0,
            loc: export_seq(&h.loc, tp, &mut s.clone(), bits)?.0,
        });
    }
    if let Some(t) = tau {
        crate::gate::check_tau(t)?;
    }
    Ok(Int8Model {
        config: model.config.clone(),
        tau,
        input,
        stem,
        blocks,
        branch,
        heads,
    })
}

fn observer_params(layer: Option<&Layer>, bits: u32) -> Result<QuantParams> {
    match layer {
        Some(l) => match l.spec {
            LayerSpec::Pact { .. } => Ok(QuantParams::pact(l.params[0].data()[0] as f64, bits)),
            LayerSpec::ActQuant { .. } => {
                if l.buffers[0].data()[2] == 0.0 {
                    return config_err(format!("observer {} has seen no data", l.name));
                }
                let (lo, hi) = observed_range(&l.buffers[0]);
                Ok(QuantParams::from_range(lo, hi, bits))
            }
            _ => config_err(format!("{} is not an activation quantizer", l.name)),
        },
        None => config_err("quantized op without an output quantizer"),
    }
}

fn export_seq(
    seq: &Seq,
    mut input: QuantParams,
    shape: &mut Vec<usize>,
    bits: u32,
) -> Result<(Vec<QOp>, QuantParams)> {
    let mut ops = Vec::new();
    let mut i = 0;
    while i < seq.layers.len() {
        let l = &seq.layers[i];
        let output = observer_params(seq.layers.get(i + 1), bits)?;
        let kind = match l.spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => QOpKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
            },
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                ..
            } => QOpKind::Depthwise {
                channels,
                kernel,
                stride,
            },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => QOpKind::Linear {
                in_features,
                out_features,
            },
            LayerSpec::GlobalAvgPool => QOpKind::GlobalAvgPool,
            _ => return config_err(format!("{} cannot be exported as an integer op", l.name)),
        };
        let op = if kind == QOpKind::GlobalAvgPool {
            let hw = (shape[2] * shape[3]) as f64;
            let op = QOp {
                name: l.name.clone(),
                op: kind,
                input,
                output,
                weight: None,
                multiplier: FixedMultiplier::from_real(input.scale / (hw * output.scale)),
                weights: vec![],
                bias: vec![],
            };
            check_accumulator(&op, shape)?;
            op
        } else {
            quantize_weighted(l, kind, input, output, bits, shape)?
        };
        *shape = kind.output_shape(shape);
        input = output;
        ops.push(op);
        i += 2;
    }
    Ok((ops, input))
}

fn quantize_weighted(
    l: &Layer,
    kind: QOpKind,
    input: QuantParams,
    output: QuantParams,
    bits: u32,
    shape: &[usize],
) -> Result<QOp> {
    let w = l.params[0].data();
    let wq = weight_qparams(w, bits);
    let weights = w.iter().map(|&v| wq.quantize(v as f64) as i8).collect();
    let bias_scale = input.scale * wq.scale;
    let n_out = kind.bias_len();
    let bias = match l.params.get(1) {
        Some(b) => b
            .data()
            .iter()
            .map(|&v| {
                let q = (v as f64 / bias_scale).round();
                if q.abs() > i32::MAX as f64 {
                    Err(Error::Overflow {
                        layer: l.name.clone(),
                        bound: q as i128,
                    })
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![0; n_out],
    };
    let op = QOp {
        name: l.name.clone(),
        op: kind,
        input,
        output,
        weight: Some(wq),
        multiplier: FixedMultiplier::from_real(bias_scale / output.scale),
        weights,
        bias,
    };
    check_accumulator(&op, shape)?;
    Ok(op)
}

/// Worst-case `|acc|` per output channel: `Σ |w − z_w| · max|x − z_x| + |b|`.
pub fn accumulator_bound(op: &QOp, input_shape: &[usize]) -> i128 {
    let p = &op.input;
    let x_max = (p.qmax - p.zero_point)
        .abs()
        .max((p.qmin - p.zero_point).abs()) as i128;
    match op.op {
        QOpKind::GlobalAvgPool => (input_shape[2] * input_shape[3]) as i128 * x_max,
        _ => {
            let zw = op.weight.map_or(0, |w| w.zero_point) as i128;
            let n_out = op.op.bias_len();
            let per = op.weights.len() / n_out;
            (0..n_out)
                .map(|o| {
                    let s: i128 = op.weights[o * per..(o + 1) * per]
                        .iter()
                        .map(|&w| (w as i128 - zw).abs())
                        .sum();
                    s * x_max + (op.bias[o] as i128).abs()
                })
                .max()
                .unwrap_or(0)
        }
    }
}

fn check_accumulator(op: &QOp, input_shape: &[usize]) -> Result<()> {
    let bound = accumulator_bound(op, input_shape);
    if bound > i32::MAX as i128 {
        return Err(Error::Overflow {
            layer: op.name.clone(),
            bound,
        });
    }
    Ok(())
}
