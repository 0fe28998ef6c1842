//! Layers owning their parameters, and sequential containers of them.

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, Cache, LayerSpec, Mode};
use crate::quant::{self, DISABLED_BITS, PACT_INIT};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Layer<T: Scalar = f32> {
    pub name: String,
    pub spec: LayerSpec,
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
    /// Bit width of the weight fake quantizer; [`DISABLED_BITS`] keeps float weights.
    pub weight_bits: u32,
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer with neutral parameters: zero weights and biases,
    /// identity BatchNorm, PaCT clip at its initial value.
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let mut params: Vec<Tensor<T>> = spec
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let mut buffers: Vec<Tensor<T>> = spec
            .buffer_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        match spec {
            LayerSpec::BatchNorm { .. } => {
                params[0].data_mut().iter_mut().for_each(|v| *v = T::one());
                buffers[1].data_mut().iter_mut().for_each(|v| *v = T::one());
            }
            LayerSpec::Pact { .. } => params[0].data_mut()[0] = T::from_f64(PACT_INIT),
            _ => {}
        }
        Ok(Self {
            name: name.into(),
            spec,
            params,
            buffers,
            weight_bits: DISABLED_BITS,
        })
    }

    pub fn has_weight(&self) -> bool {
        matches!(
            self.spec,
            LayerSpec::Conv2d { .. } | LayerSpec::DepthwiseConv2d { .. } | LayerSpec::Linear { .. }
        )
    }

    pub fn quantizes_weights(&self) -> bool {
        self.has_weight() && self.weight_bits < DISABLED_BITS
    }

    fn run(
        &self,
        inputs: &[&Tensor<T>],
        buffers: &[Tensor<T>],
        mode: Mode,
    ) -> Result<crate::layers::Forward<T>> {
        let fq;
        let mut refs: Vec<&Tensor<T>> = self.params.iter().collect();
        if self.quantizes_weights() {
            fq = quant::fakequant_weights(&self.params[0], self.weight_bits).0;
            refs[0] = &fq;
        }
        layer_forward(&self.spec, &refs, buffers, inputs, mode).map_err(|e| self.annotate(e))
    }

    fn annotate(&self, e: Error) -> Error {
        match e {
            Error::Shape {
                layer,
                expected,
                actual,
            } => Error::Shape {
                layer: format!("{} ({layer})", self.name),
                expected,
                actual,
            },
            other => other,
        }
    }

    /// Eval-mode forward; running statistics are read, never updated.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(&[x], &self.buffers, Mode::Eval)?.output)
    }

    /// Train-mode forward; updates running buffers and returns the cache.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let f = self.run(&[x], &self.buffers, Mode::Train)?;
        if let Some(b) = f.buffers {
            self.buffers = b;
        }
        let cache = f
            .cache
            .ok_or_else(|| Error::NoForwardState(self.name.clone()))?;
        Ok((f.output, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// Quantized weights use the straight-through estimator.
    pub fn backward(&mut self, cache: &Cache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let fq;
        let mut refs: Vec<&Tensor<T>> = self.params.iter().collect();
        if self.quantizes_weights() {
            fq = quant::fakequant_weights(&self.params[0], self.weight_bits).0;
            refs[0] = &fq;
        }
        let (mut dx, dp) = layer_backward(&self.spec, &refs, Some(cache), dy)?;
        for (p, g) in self.params.iter_mut().zip(dp) {
            p.accumulate_grad(g.data());
        }
        Ok(dx.swap_remove(0))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            name: self.name.clone(),
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            weight_bits: self.weight_bits,
        }
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Seq<T: Scalar = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Seq<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter();
        let Some(first) = iter.next() else {
            return Ok(x.clone());
        };
        let mut y = first.forward(x)?;
        for l in iter {
            y = l.forward(&y)?;
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = x.clone();
        for l in &mut self.layers {
            let (out, c) = l.forward_train(&y)?;
            caches.push(c);
            y = out;
        }
        Ok((y, caches))
    }

    pub fn backward(&mut self, caches: &[Cache<T>], dy: &Tensor<T>) -> Result<Tensor<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::NoForwardState(format!(
                "sequence of {} layers given {} caches",
                self.layers.len(),
                caches.len()
            )));
        }
        let mut g = dy.clone();
        for (l, c) in self.layers.iter_mut().zip(caches).rev() {
            g = l.backward(c, &g)?;
        }
        Ok(g)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.spec.output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.params.iter_mut().for_each(Tensor::zero_grad);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Seq<U> {
        Seq {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_seq_is_identity() {
        let s = Seq::<f32>::default();
        let x = Tensor::full(&[1, 2], 3.0);
        assert_eq!(s.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_errors_carry_layer_name() {
        let l = Layer::<f32>::new(
            "block3.dw",
            LayerSpec::DepthwiseConv2d {
                channels: 4,
                kernel: 3,
                stride: 1,
                bias: false,
            },
        )
        .unwrap();
        let msg = l
            .forward(&Tensor::zeros(&[1, 3, 4, 4]))
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("block3.dw") && msg.contains("[1, 3, 4, 4]"),
            "{msg}"
        );
    }

    #[test]
    fn train_forward_updates_running_stats_eval_does_not() {
        let mut l = Layer::<f32>::new(
            "bn",
            LayerSpec::BatchNorm {
                channels: 1,
                momentum: 0.1,
                eps: 1e-5,
            },
        )
        .unwrap();
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        l.forward(&x).unwrap();
        assert_eq!(l.buffers[0].data(), &[0.0]);
        l.forward_train(&x).unwrap();
        assert!((l.buffers[0].data()[0] - 0.2).abs() < 1e-6);
        // unbiased variance 2 blended with the initial 1
        assert!((l.buffers[1].data()[0] - 1.1).abs() < 1e-6);
    }
}
