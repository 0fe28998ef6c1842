//! Folding eval-mode BatchNorm into the preceding convolution.

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{build_uninit, ModelConfig, ModelGraph, QuantGraphConfig};
use crate::nn::{Layer, Seq};

/// Smallest accepted `sqrt(var + eps)`.
const MIN_STD: f64 = 1e-12;

/// Conv (or depthwise conv) followed by BatchNorm, as one biased conv:
/// `w' = w · g`, `b' = (b − mean) · g + beta`, with `g = gamma / sqrt(var + eps)`
/// per output channel.
pub fn fold_batchnorm(conv: &Layer, bn: &Layer) -> Result<Layer> {
    let LayerSpec::BatchNorm { channels, eps, .. } = bn.spec else {
        return Err(Error::Config(format!("{} is not BatchNorm", bn.name)));
    };
    let spec = match conv.spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            ..
        } if out_ch == channels => LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            bias: true,
        },
        LayerSpec::DepthwiseConv2d {
            channels: c,
            kernel,
            stride,
            ..
        } if c == channels => LayerSpec::DepthwiseConv2d {
            channels: c,
            kernel,
            stride,
            bias: true,
        },
        _ => {
            return Err(Error::Config(format!(
                "cannot fold {} into {}",
                bn.name, conv.name
            )))
        }
    };
    let (gamma, beta) = (bn.params[0].data(), bn.params[1].data());
    let (mean, var) = (bn.buffers[0].data(), bn.buffers[1].data());
    let mut folded = Layer::new(conv.name.clone(), spec)?;
    folded.weight_bits = conv.weight_bits;
    let per_out = conv.params[0].len() / channels;
    let old_bias = conv.params.get(1).map(|b| b.data());
    let (w, b) = folded.params.split_at_mut(1);
    for c in 0..channels {
        let std = (var[c] as f64 + eps).sqrt();
        if !(std >= MIN_STD) {
            return Err(Error::Config(format!(
                "{}: variance {} + eps underflows",
                bn.name, var[c]
            )));
        }
        let g = gamma[c] as f64 / std;
        for (dst, &src) in w[0].data_mut()[c * per_out..(c + 1) * per_out]
            .iter_mut()
            .zip(&conv.params[0].data()[c * per_out..(c + 1) * per_out])
        {
            *dst = (src as f64 * g) as f32;
        }
        let b0 = old_bias.map_or(0.0, |b| b[c] as f64);
        b[0].data_mut()[c] = ((b0 - mean[c] as f64) * g + beta[c] as f64) as f32;
    }
    Ok(folded)
}

/// Rebuilds a float model as a quantization-ready graph: every BatchNorm
/// folded, ReLU6 replaced by PaCT (clip at its initial value), range
/// observers added, weight fake quantizers enabled at `bits`.
pub fn fold_model(model: &ModelGraph, bits: u32) -> Result<ModelGraph> {
    if model.config.quant.is_some() {
        return Err(Error::Config("model is already folded".into()));
    }
    let config = ModelConfig {
        quant: Some(QuantGraphConfig { bits }),
        ..model.config.clone()
    };
    let mut q = build_uninit(&config)?;
    copy_seq(&model.stem, &mut q.stem)?;
    for (src, dst) in model.blocks.iter().zip(&mut q.blocks) {
        copy_seq(&src.seq, &mut dst.seq)?;
    }
    if let (Some(src), Some(dst)) = (&model.branch, &mut q.branch) {
        copy_seq(src, dst)?;
    }
    for (src, dst) in model.heads.iter().zip(&mut q.heads) {
        copy_seq(&src.tower, &mut dst.tower)?;
        copy_seq(&src.cls, &mut dst.cls)?;
        copy_seq(&src.loc, &mut dst.loc)?;
    }
    Ok(q)
}

/// Copies weighted layers of a float sequence into the matching layers of
/// its folded counterpart, absorbing any BatchNorm that follows.
fn copy_seq(src: &Seq, dst: &mut Seq) -> Result<()> {
    let mut weighted = Vec::new();
    let mut i = 0;
    while i < src.layers.len() {
        let l = &src.layers[i];
        if l.has_weight() {
            match src.layers.get(i + 1) {
                Some(bn) if matches!(bn.spec, LayerSpec::BatchNorm { .. }) => {
                    weighted.push(fold_batchnorm(l, bn)?);
                    i += 1;
                }
                _ => weighted.push(l.clone()),
            }
        }
        i += 1;
    }
    let targets: Vec<&mut Layer> = dst.layers.iter_mut().filter(|l| l.has_weight()).collect();
    if targets.len() != weighted.len() {
        return Err(Error::Config(
            "folded graph does not match the float graph".into(),
        ));
    }
    for (t, w) in targets.into_iter().zip(weighted) {
        if t.name != w.name || t.params.len() != w.params.len() {
            return Err(Error::Config(format!(
                "layer {} has no folded counterpart",
                w.name
            )));
        }
        for (tp, wp) in t.params.iter_mut().zip(&w.params) {
            if tp.shape() != wp.shape() {
                return Err(Error::Shape {
                    layer: w.name.clone(),
                    expected: tp.shape().to_vec(),
                    actual: wp.shape().to_vec(),
                });
            }
            tp.data_mut().copy_from_slice(wp.data());
        }
    }
    Ok(())
}
