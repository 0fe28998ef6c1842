//! Layer kinds, their forward kernels, and hand-written reverse-mode rules.
//!
//! Every kernel is a pure function of its parameters and inputs. Training-mode
//! forwards return a [`Cache`] holding what the matching backward needs; eval
//! forwards retain nothing, so calling backward on them is rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, QuantParams};
use crate::tensor::{self, matmul, Mat, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    Relu6,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    Add,
    /// Learnable-clip activation quantizer (replaces ReLU6 under QAT).
    Pact {
        bits: u32,
    },
    /// Min-max observed fake quantizer for tensors without a clipping activation.
    ActQuant {
        bits: u32,
        momentum: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State retained by a training-mode forward.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    InputShape(Vec<usize>),
    BatchNorm { xhat: Tensor<T>, inv_std: Vec<T> },
    Softmax(Tensor<T>),
    Add,
    Clip { input: Tensor<T>, lo: f64, hi: f64 },
}

fn shape_err(layer: &str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

pub fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "DepthwiseConv2d",
            LayerSpec::BatchNorm { .. } => "BatchNorm",
            LayerSpec::Relu6 => "ReLU6",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::Softmax => "Softmax",
            LayerSpec::Add => "Add",
            LayerSpec::Pact { .. } => "Pact",
            LayerSpec::ActQuant { .. } => "ActQuant",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.name())));
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                if in_ch == 0 || out_ch == 0 {
                    return bad("channels must be positive");
                }
                if kernel % 2 == 0 || stride == 0 {
                    return bad("kernel must be odd and stride >= 1");
                }
            }
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                ..
            } => {
                if channels == 0 || kernel % 2 == 0 || stride == 0 {
                    return bad("invalid depthwise geometry");
                }
            }
            LayerSpec::BatchNorm { channels: 0, .. } => return bad("channels must be positive"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => return bad("features must be positive"),
            _ => {}
        }
        Ok(())
    }

    /// Shapes of the learnable parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_ch, in_ch, kernel, kernel]];
                if bias {
                    v.push(vec![out_ch]);
                }
                v
            }
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![channels, 1, kernel, kernel]];
                if bias {
                    v.push(vec![channels]);
                }
                v
            }
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            LayerSpec::Pact { .. } => vec![vec![1]],
            _ => vec![],
        }
    }

    /// Shapes of non-learnable state (running statistics, observed ranges).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            // [min, max, initialized]
            LayerSpec::ActQuant { .. } => vec![vec![3]],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Output shape for a given input shape; validates compatibility.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let four = |expected_c: usize| -> Result<(usize, usize, usize, usize)> {
            match *input {
                [n, c, h, w] if c == expected_c => Ok((n, c, h, w)),
                _ => Err(shape_err(
                    self.name(),
                    &[input.first().copied().unwrap_or(0), expected_c, 0, 0],
                    input,
                )),
            }
        };
        Ok(match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                let (n, _, h, w) = four(in_ch)?;
                vec![
                    n,
                    out_ch,
                    conv_out(h, kernel, stride),
                    conv_out(w, kernel, stride),
                ]
            }
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                ..
            } => {
                let (n, _, h, w) = four(channels)?;
                vec![
                    n,
                    channels,
                    conv_out(h, kernel, stride),
                    conv_out(w, kernel, stride),
                ]
            }
            LayerSpec::BatchNorm { channels, .. } => {
                four(channels)?;
                input.to_vec()
            }
            LayerSpec::GlobalAvgPool => match *input {
                [n, c, _, _] => vec![n, c],
                _ => return Err(shape_err(self.name(), &[0, 0, 0, 0], input)),
            },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match *input {
                [n, f] if f == in_features => vec![n, out_features],
                _ => return Err(shape_err(self.name(), &[0, in_features], input)),
            },
            LayerSpec::Softmax => match *input {
                [_, _] => input.to_vec(),
                _ => return Err(shape_err(self.name(), &[0, 0], input)),
            },
            _ => input.to_vec(),
        })
    }

    /// Multiply-accumulates for one forward pass at the given input shape
    /// (per whole batch). Element-wise kinds count zero.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } => {
                (out.iter().product::<usize>() * in_ch * kernel * kernel) as u64
            }
            LayerSpec::DepthwiseConv2d { kernel, .. } => {
                (out.iter().product::<usize>() * kernel * kernel) as u64
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (input[0] * in_features * out_features) as u64,
            _ => 0,
        })
    }

    /// Element-wise operations (the secondary "ops" column of the cost report).
    pub fn elementwise_ops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let n_in: usize = input.iter().product();
        let n_out: usize = out.iter().product();
        Ok(match self {
            LayerSpec::BatchNorm { .. } => 2 * n_out,
            LayerSpec::Relu6 | LayerSpec::Pact { .. } | LayerSpec::ActQuant { .. } => n_out,
            LayerSpec::GlobalAvgPool => n_in,
            LayerSpec::Softmax => 3 * n_out,
            LayerSpec::Add => n_out,
            LayerSpec::Conv2d { bias: true, .. }
            | LayerSpec::DepthwiseConv2d { bias: true, .. } => n_out,
            LayerSpec::Linear { .. } => n_out,
            _ => 0,
        } as u64)
    }
}

/// Result of one layer evaluation.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub output: Tensor<T>,
    /// Present only in train mode.
    pub cache: Option<Cache<T>>,
    /// Updated running state (BatchNorm statistics, observed ranges), train mode only.
    pub buffers: Option<Vec<Tensor<T>>>,
}

/// Runs one layer as a pure function of its spec, parameters, buffers and
/// inputs. Train mode additionally returns the backward cache and the
/// updated buffers; eval mode reads running statistics only.
pub fn layer_forward<T: Scalar>(
    spec: &LayerSpec,
    params: &[&Tensor<T>],
    buffers: &[Tensor<T>],
    inputs: &[&Tensor<T>],
    mode: Mode,
) -> Result<Forward<T>> {
    let x = inputs[0];
    let expected_shape = spec.output_shape(x.shape())?;
    let train = mode == Mode::Train;
    let mut new_buffers = None;
    let (y, cache) = match *spec {
        LayerSpec::Conv2d {
            in_ch: _,
            out_ch,
            kernel,
            stride,
            ..
        } => {
            let y = conv2d_forward(
                x,
                params[0].data(),
                params.get(1).map(|b| b.data()),
                out_ch,
                kernel,
                stride,
            );
            (y, train.then(|| Cache::Input(x.clone())))
        }
        LayerSpec::DepthwiseConv2d { kernel, stride, .. } => {
            let y = depthwise_forward(
                x,
                params[0].data(),
                params.get(1).map(|b| b.data()),
                kernel,
                stride,
            );
            (y, train.then(|| Cache::Input(x.clone())))
        }
        LayerSpec::BatchNorm { momentum, eps, .. } => {
            if train {
                let mut bufs = buffers.to_vec();
                let (y, xhat, inv_std) = batchnorm_train(
                    x,
                    params[0].data(),
                    params[1].data(),
                    &mut bufs,
                    momentum,
                    eps,
                );
                new_buffers = Some(bufs);
                (y, Some(Cache::BatchNorm { xhat, inv_std }))
            } else {
                (
                    batchnorm_eval(
                        x,
                        params[0].data(),
                        params[1].data(),
                        buffers[0].data(),
                        buffers[1].data(),
                        eps,
                    ),
                    None,
                )
            }
        }
        LayerSpec::Relu6 => {
            let six = T::from_f64(6.0);
            (
                x.map(|v| v.max(T::zero()).min(six)),
                train.then(|| Cache::Input(x.clone())),
            )
        }
        LayerSpec::GlobalAvgPool => {
            let (n, c, h, w) = x.dims4();
            let hw = h * w;
            let inv = T::from_f64(1.0 / hw as f64);
            let data = x
                .data()
                .chunks(hw)
                .map(|plane| plane.iter().copied().sum::<T>() * inv)
                .collect();
            (
                Tensor::new(vec![n, c], data)?,
                train.then(|| Cache::InputShape(x.shape().to_vec())),
            )
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            let n = x.shape()[0];
            let mut out = Vec::with_capacity(n * out_features);
            for _ in 0..n {
                out.extend_from_slice(params[1].data());
            }
            matmul(
                Mat::new(x.data(), n, in_features),
                Mat::new(params[0].data(), out_features, in_features).t(),
                &mut out,
                true,
            );
            (
                Tensor::new(vec![n, out_features], out)?,
                train.then(|| Cache::Input(x.clone())),
            )
        }
        LayerSpec::Softmax => {
            let y = softmax_rows(x);
            let cache = train.then(|| Cache::Softmax(y.clone()));
            (y, cache)
        }
        LayerSpec::Add => {
            let b = inputs
                .get(1)
                .ok_or_else(|| Error::Config("Add needs two inputs".into()))?;
            if b.shape() != x.shape() {
                return Err(shape_err("Add", x.shape(), b.shape()));
            }
            let data = x
                .data()
                .iter()
                .zip(b.data())
                .map(|(&a, &b)| a + b)
                .collect();
            (
                Tensor::new(x.shape().to_vec(), data)?,
                train.then_some(Cache::Add),
            )
        }
        LayerSpec::Pact { bits } => {
            let alpha = params[0].data()[0].as_f64();
            let qp = QuantParams::pact(alpha, bits);
            let y = x.map(|v| T::from_f64(quant::pact_value(v.as_f64(), alpha, &qp)));
            (
                y,
                train.then(|| Cache::Clip {
                    input: x.clone(),
                    lo: 0.0,
                    hi: alpha,
                }),
            )
        }
        LayerSpec::ActQuant { bits, momentum } => {
            let mut range = buffers[0].clone();
            if train {
                quant::observe_range(&mut range, x, momentum);
            }
            let (lo, hi) = quant::observed_range(&range);
            if train {
                new_buffers = Some(vec![range]);
            }
            let qp = QuantParams::from_range(lo, hi, bits);
            let y = x.map(|v| T::from_f64(qp.fake(v.as_f64())));
            (
                y,
                train.then(|| Cache::Clip {
                    input: x.clone(),
                    lo: qp.dequantize(qp.qmin),
                    hi: qp.dequantize(qp.qmax),
                }),
            )
        }
    };
    debug_assert_eq!(y.shape(), &expected_shape[..], "{}", spec.name());
    Ok(Forward {
        output: y,
        cache,
        buffers: new_buffers,
    })
}

/// Reverse-mode rule. Returns `(input_grads, param_grads)` shaped like the
/// inputs and parameters respectively.
pub fn layer_backward<T: Scalar>(
    spec: &LayerSpec,
    params: &[&Tensor<T>],
    cache: Option<&Cache<T>>,
    dy: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let cache = cache.ok_or_else(|| Error::NoForwardState(spec.name().to_string()))?;
    let mismatch = || Error::NoForwardState(format!("{} (cache of another kind)", spec.name()));
    match (spec, cache) {
        (
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                bias,
            },
            Cache::Input(x),
        ) => {
            let (dx, dw, db) = conv2d_backward(
                x,
                params[0].data(),
                dy,
                *in_ch,
                *out_ch,
                *kernel,
                *stride,
                *bias,
            );
            let mut grads = vec![Tensor::new(params[0].shape().to_vec(), dw)?];
            if let Some(db) = db {
                grads.push(Tensor::new(vec![*out_ch], db)?);
            }
            Ok((vec![dx], grads))
        }
        (
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                bias,
            },
            Cache::Input(x),
        ) => {
            let (dx, dw, db) = depthwise_backward(x, params[0].data(), dy, *kernel, *stride, *bias);
            let mut grads = vec![Tensor::new(params[0].shape().to_vec(), dw)?];
            if let Some(db) = db {
                grads.push(Tensor::new(vec![*channels], db)?);
            }
            Ok((vec![dx], grads))
        }
        (LayerSpec::BatchNorm { .. }, Cache::BatchNorm { xhat, inv_std }) => {
            let (dx, dgamma, dbeta) = batchnorm_backward(xhat, inv_std, params[0].data(), dy);
            let c = dgamma.len();
            Ok((
                vec![dx],
                vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?],
            ))
        }
        (LayerSpec::Relu6, Cache::Input(x)) => {
            let six = T::from_f64(6.0);
            let data = x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| {
                    if v > T::zero() && v < six {
                        g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok((vec![Tensor::new(x.shape().to_vec(), data)?], vec![]))
        }
        (LayerSpec::GlobalAvgPool, Cache::InputShape(shape)) => {
            let hw = shape[2] * shape[3];
            let inv = T::from_f64(1.0 / hw as f64);
            let mut data = Vec::with_capacity(shape.iter().product());
            for &g in dy.data() {
                data.extend(std::iter::repeat_n(g * inv, hw));
            }
            Ok((vec![Tensor::new(shape.clone(), data)?], vec![]))
        }
        (
            LayerSpec::Linear {
                in_features,
                out_features,
            },
            Cache::Input(x),
        ) => {
            let n = x.shape()[0];
            let mut dw = vec![T::zero(); in_features * out_features];
            matmul(
                Mat::new(dy.data(), n, *out_features).t(),
                Mat::new(x.data(), n, *in_features),
                &mut dw,
                false,
            );
            let mut db = vec![T::zero(); *out_features];
            for row in dy.data().chunks(*out_features) {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            let mut dx = vec![T::zero(); n * in_features];
            matmul(
                Mat::new(dy.data(), n, *out_features),
                Mat::new(params[0].data(), *out_features, *in_features),
                &mut dx,
                false,
            );
            Ok((
                vec![Tensor::new(vec![n, *in_features], dx)?],
                vec![
                    Tensor::new(vec![*out_features, *in_features], dw)?,
                    Tensor::new(vec![*out_features], db)?,
                ],
            ))
        }
        (LayerSpec::Softmax, Cache::Softmax(y)) => {
            let k = y.shape()[1];
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(k).zip(dy.data().chunks(k)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
            }
            Ok((vec![Tensor::new(y.shape().to_vec(), dx)?], vec![]))
        }
        (LayerSpec::Add, Cache::Add) => Ok((vec![dy.clone(), dy.clone()], vec![])),
        (LayerSpec::Pact { .. }, Cache::Clip { input, hi, .. }) => {
            let alpha = T::from_f64(*hi);
            let mut dalpha = T::zero();
            let data = input
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| {
                    if v >= alpha {
                        dalpha += g;
                        T::zero()
                    } else if v > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok((
                vec![Tensor::new(input.shape().to_vec(), data)?],
                vec![Tensor::scalar(dalpha)],
            ))
        }
        (LayerSpec::ActQuant { .. }, Cache::Clip { input, lo, hi }) => {
            let (lo, hi) = (T::from_f64(*lo), T::from_f64(*hi));
            let data = input
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| if v >= lo && v <= hi { g } else { T::zero() })
                .collect();
            Ok((vec![Tensor::new(input.shape().to_vec(), data)?], vec![]))
        }
        _ => Err(mismatch()),
    }
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().expect("softmax needs a non-empty shape");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Unfolds one `c×h×w` image into a `(c·k·k) × (ho·wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Copy + Default>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let pad = k / 2;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::default()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let pad = k / 2;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_ch: usize,
    k: usize,
    s: usize,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (conv_out(h, k, s), conv_out(w, k, s));
    let p = ho * wo;
    let ck = c * k * k;
    let mut out = vec![T::zero(); n * out_ch * p];
    let direct = k == 1 && s == 1;
    let mut col = if direct {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    for i in 0..n {
        let xi = x.item(i);
        let oi = &mut out[i * out_ch * p..(i + 1) * out_ch * p];
        if let Some(b) = bias {
            for (plane, &bv) in oi.chunks_mut(p).zip(b) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
        }
        let rhs = if direct {
            xi
        } else {
            im2col(xi, c, h, w, k, s, ho, wo, &mut col);
            &col[..]
        };
        matmul(
            Mat::new(weight, out_ch, ck),
            Mat::new(rhs, ck, p),
            oi,
            bias.is_some(),
        );
    }
    Tensor::new(vec![n, out_ch, ho, wo], out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    s: usize,
    bias: bool,
) -> (Tensor<T>, Vec<T>, Option<Vec<T>>) {
    let (n, c, h, w) = x.dims4();
    debug_assert_eq!(c, in_ch);
    let (ho, wo) = (conv_out(h, k, s), conv_out(w, k, s));
    let p = ho * wo;
    let ck = c * k * k;
    let direct = k == 1 && s == 1;
    let mut dw = vec![T::zero(); out_ch * ck];
    let mut db = bias.then(|| vec![T::zero(); out_ch]);
    let mut dx = vec![T::zero(); x.len()];
    let mut col = if direct {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    let mut dcol = if direct {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    for i in 0..n {
        let xi = x.item(i);
        let gi = dy.item(i);
        if let Some(db) = &mut db {
            for (b, plane) in db.iter_mut().zip(gi.chunks(p)) {
                *b += plane.iter().copied().sum::<T>();
            }
        }
        let dxi = &mut dx[i * c * h * w..(i + 1) * c * h * w];
        if direct {
            matmul(
                Mat::new(gi, out_ch, p),
                Mat::new(xi, c, p).t(),
                &mut dw,
                true,
            );
            matmul(
                Mat::new(weight, out_ch, c).t(),
                Mat::new(gi, out_ch, p),
                dxi,
                false,
            );
        } else {
            im2col(xi, c, h, w, k, s, ho, wo, &mut col);
            matmul(
                Mat::new(gi, out_ch, p),
                Mat::new(&col, ck, p).t(),
                &mut dw,
                true,
            );
            matmul(
                Mat::new(weight, out_ch, ck).t(),
                Mat::new(gi, out_ch, p),
                &mut dcol,
                false,
            );
            col2im(&dcol, c, h, w, k, s, ho, wo, dxi);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        dw,
        db,
    )
}

/// Valid output-column range `[lo, hi)` for kernel tap `kx`.
fn valid_cols(w: usize, wo: usize, kx: usize, pad: usize, s: usize) -> (usize, usize) {
    // ix = ox*s + kx - pad must lie in [0, w)
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
    let hi_excl = if w + pad > kx {
        ((w + pad - kx - 1) / s + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    k: usize,
    s: usize,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (conv_out(h, k, s), conv_out(w, k, s));
    let pad = k / 2;
    let mut out = vec![T::zero(); n * c * ho * wo];
    for i in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * h * w..][..h * w];
            let dst = &mut out[(i * c + ch) * ho * wo..][..ho * wo];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[ch]);
            }
            let kern = &weight[ch * k * k..(ch + 1) * k * k];
            // padded taps are skipped but counted, like the im2col path
            tensor::count_macs((ho * wo * k * k) as u64);
            for oy in 0..ho {
                let orow = &mut dst[oy * wo..(oy + 1) * wo];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        let (lo, hi) = valid_cols(w, wo, kx, pad, s);
                        if s == 1 {
                            let off = lo + kx - pad;
                            for (o, &v) in orow[lo..hi].iter_mut().zip(&irow[off..off + hi - lo]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).expect("depthwise output shape")
}

#[allow(clippy::type_complexity)]
fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    s: usize,
    bias: bool,
) -> (Tensor<T>, Vec<T>, Option<Vec<T>>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (conv_out(h, k, s), conv_out(w, k, s));
    let pad = k / 2;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); c * k * k];
    let mut db = bias.then(|| vec![T::zero(); c]);
    for i in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * h * w..][..h * w];
            let dplane = &mut dx[(i * c + ch) * h * w..][..h * w];
            let g = &dy.data()[(i * c + ch) * ho * wo..][..ho * wo];
            if let Some(db) = &mut db {
                db[ch] += g.iter().copied().sum::<T>();
            }
            let kern = &weight[ch * k * k..(ch + 1) * k * k];
            let dkern = &mut dw[ch * k * k..(ch + 1) * k * k];
            for oy in 0..ho {
                let grow = &g[oy * wo..(oy + 1) * wo];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        let (lo, hi) = valid_cols(w, wo, kx, pad, s);
                        let mut acc = T::zero();
                        for ox in lo..hi {
                            let ix = ox * s + kx - pad;
                            acc += grow[ox] * plane[iy * w + ix];
                            dplane[iy * w + ix] += wv * grow[ox];
                        }
                        dkern[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        dw,
        db,
    )
}

fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    buffers: &mut [Tensor<T>],
    momentum: f64,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = || (0..n).map(move |i| (i * c + ch) * hw);
        let mut sum = 0.0;
        for start in planes() {
            sum += x.data()[start..start + hw]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for start in planes() {
            sq += x.data()[start..start + hw]
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / m;
        let inv_std = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma[ch], beta[ch]);
        let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv_std));
        for start in planes() {
            for j in start..start + hw {
                let xh = (x.data()[j] - mean_t) * inv_t;
                xhat[j] = xh;
                y[j] = g * xh + b;
            }
        }
        inv_stds.push(inv_t);
        let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
        let rm = &mut buffers[0].data_mut()[ch];
        *rm = T::from_f64((1.0 - momentum) * rm.as_f64() + momentum * mean);
        let rv = &mut buffers[1].data_mut()[ch];
        *rv = T::from_f64((1.0 - momentum) * rv.as_f64() + momentum * unbiased);
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), y).expect("bn shape"),
        Tensor::new(shape, xhat).expect("bn shape"),
        inv_stds,
    )
}

fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut y = x.data().to_vec();
    for ch in 0..c {
        let scale = T::from_f64(gamma[ch].as_f64() / (var[ch].as_f64() + eps).sqrt());
        let shift = beta[ch] - mean[ch] * scale;
        for i in 0..n {
            for v in &mut y[(i * c + ch) * hw..][..hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).expect("bn shape")
}

fn batchnorm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = xhat.dims4();
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..n {
            let s = (i * c + ch) * hw;
            for j in s..s + hw {
                sum_g += dy.data()[j];
                sum_gx += dy.data()[j] * xhat.data()[j];
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let k = gamma[ch] * inv_std[ch] / m;
        for i in 0..n {
            let s = (i * c + ch) * hw;
            for j in s..s + hw {
                dx[j] = k * (m * dy.data()[j] - sum_g - xhat.data()[j] * sum_gx);
            }
        }
    }
    (
        Tensor::new(xhat.shape().to_vec(), dx).expect("bn shape"),
        dgamma,
        dbeta,
    )
}
