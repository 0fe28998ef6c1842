//! Float simulation of an exported graph: dequantized weights and inputs,
//! float64 arithmetic, and fake quantization onto each output grid.

use crate::error::Result;
use crate::layers::{conv2d_forward, depthwise_forward};
use crate::quant::int8::{
    execute, Arithmetic, Int8Model, Int8Outputs, QAdd, QOp, QOpKind, QTensor,
};
use crate::tensor::Tensor;

struct Simulated;

fn requantize(
    real: impl IntoIterator<Item = f64>,
    shape: Vec<usize>,
    op_out: crate::quant::QuantParams,
) -> QTensor {
    QTensor {
        shape,
        data: real.into_iter().map(|v| op_out.quantize(v)).collect(),
        params: op_out,
    }
}

impl Arithmetic for Simulated {
    fn op(&self, op: &QOp, x: &QTensor) -> QTensor {
        let shape = op.op.output_shape(&x.shape);
        let xr = Tensor::<f64>::new(x.shape.clone(), x.dequantize()).expect("shape");
        let w: Vec<f64> = match op.weight {
            Some(wq) => op
                .weights
                .iter()
                .map(|&q| wq.dequantize(q as i32))
                .collect(),
            None => vec![],
        };
        let bias_scale = op.input.scale * op.weight.map_or(0.0, |w| w.scale);
        let b: Vec<f64> = op.bias.iter().map(|&q| q as f64 * bias_scale).collect();
        let real: Vec<f64> = match op.op {
            QOpKind::Conv {
                out_ch,
                kernel,
                stride,
                ..
            } => conv2d_forward(&xr, &w, Some(&b), out_ch, kernel, stride).into_data(),
            QOpKind::Depthwise { kernel, stride, .. } => {
                depthwise_forward(&xr, &w, Some(&b), kernel, stride).into_data()
            }
            QOpKind::Linear {
                in_features,
                out_features,
            } => {
                let (w, b) = (&w, &b);
                xr.data()
                    .chunks(in_features)
                    .flat_map(|xi| {
                        (0..out_features).map(move |o| {
                            w[o * in_features..(o + 1) * in_features]
                                .iter()
                                .zip(xi)
                                .fold(b[o], |a, (w, x)| a + w * x)
                        })
                    })
                    .collect()
            }
            QOpKind::GlobalAvgPool => {
                let hw = x.shape[2] * x.shape[3];
                xr.data()
                    .chunks(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect()
            }
        };
        requantize(real, shape, op.output)
    }

    fn add(&self, add: &QAdd, lhs: &QTensor, rhs: &QTensor) -> QTensor {
        let real = lhs
            .dequantize()
            .into_iter()
            .zip(rhs.dequantize())
            .map(|(a, b)| a + b);
        requantize(real, lhs.shape.clone(), add.output)
    }
}

/// Every output of `model` computed by the float simulation.
pub fn simulate_export(model: &Int8Model, image: &Tensor) -> Result<Int8Outputs> {
    execute(model, image, &Simulated, None)
}
