//! RMSprop with a separate learning-rate multiplier for the branch group.

use serde::{Deserialize, Serialize};

use crate::layers::LayerSpec;
use crate::model::{ModelGraph, ParamGroup};
use crate::quant::PACT_L2;
use crate::tensor::Tensor;

/// Floor keeping learned clip values positive.
pub const PACT_MIN_CLIP: f32 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsPropConfig {
    /// Smoothing constant of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            rho: 0.99,
            eps: 1e-8,
        }
    }
}

/// Per-parameter squared-gradient averages in [`ModelGraph::layers`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    pub square_avg: Vec<Vec<Tensor>>,
    pub steps: u64,
}

impl RmsProp {
    pub fn new(model: &ModelGraph, config: RmsPropConfig) -> Self {
        Self {
            config,
            square_avg: model
                .layers()
                .iter()
                .map(|(l, _)| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
            steps: 0,
        }
    }

    /// One update from the accumulated gradients. `v <- rho v + (1 - rho) g^2`,
    /// `p <- p - lr g / (sqrt(v) + eps)`. PaCT clip values get an L2 term.
    pub fn step(&mut self, model: &mut ModelGraph, lr: f64, branch_lr_mult: f64) {
        let RmsPropConfig { rho, eps } = self.config;
        let mut idx = 0;
        let avgs = &mut self.square_avg;
        model.for_each_layer_mut(|layer, group| {
            let lr = match group {
                ParamGroup::Main => lr,
                ParamGroup::Branch => lr * branch_lr_mult,
            };
            let pact = matches!(layer.spec, LayerSpec::Pact { .. });
            for (p, v) in layer.params.iter_mut().zip(avgs[idx].iter_mut()) {
                let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                    continue;
                };
                let data = p.data_mut();
                for ((w, &g), s) in data.iter_mut().zip(&g).zip(v.data_mut()) {
                    let g = g as f64 + if pact { PACT_L2 * *w as f64 } else { 0.0 };
                    let sv = rho * *s as f64 + (1.0 - rho) * g * g;
                    *s = sv as f32;
                    *w = (*w as f64 - lr * g / ((*s as f64).sqrt() + eps)) as f32;
                    if pact {
                        *w = w.max(PACT_MIN_CLIP);
                    }
                }
            }
            idx += 1;
        });
        self.steps += 1;
    }
}
