//! Quantization-aware fine-tuning from a float checkpoint.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{config_err, Result};
use crate::loss::LossWeights;
use crate::model::ModelGraph;
use crate::optim::RmsProp;
use crate::quant::{fold_model, DISABLED_BITS};
use crate::train::{train, EpochEnd, EpochLog, TrainConfig};

pub const QAT_INITIAL_LR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QatConfig {
    /// Weight and activation bit width; 32 or more disables quantization.
    pub bits: u32,
    pub train: TrainConfig,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            train: TrainConfig {
                initial_lr: QAT_INITIAL_LR,
                ..TrainConfig::default()
            },
        }
    }
}

/// The graph QAT trains: BatchNorm folded, PaCT and observers in place. With
/// quantization disabled the float graph is returned unchanged.
pub fn prepare_qat(model: &ModelGraph, bits: u32) -> Result<ModelGraph> {
    if bits >= DISABLED_BITS {
        return Ok(model.clone());
    }
    if bits < 2 {
        return config_err(format!("bit width {bits} below 2"));
    }
    fold_model(model, bits)
}

/// Trains a prepared model exactly like float training; quantizers act in
/// both the forward pass and the gradient computation.
#[allow(clippy::too_many_arguments)]
pub fn qat_train(
    model: &mut ModelGraph,
    optimizer: &mut RmsProp,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &QatConfig,
    weights: &LossWeights,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let prepared = match &model.config.quant {
        Some(q) => q.bits == cfg.bits,
        None => cfg.bits >= DISABLED_BITS,
    };
    if !prepared {
        return config_err(format!("model is not prepared for {}-bit QAT", cfg.bits));
    }
    train(
        model,
        optimizer,
        train_set,
        val_set,
        &cfg.train,
        weights,
        start_epoch,
        on_epoch,
    )
}
