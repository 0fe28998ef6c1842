//! Run configuration: one strict JSON document covering every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost::LatencyModel;
use crate::data::SceneSpec;
use crate::error::{config_err, Error, Result};
use crate::hpo::{Sampler, SearchSpace, TpeConfig};
use crate::loss::LossWeights;
use crate::model::{EEBranchConfig, ModelConfig};
use crate::quant::QatConfig;
use crate::rng::name_hash;
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_images: 400,
            test_images: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_step: f64,
    /// Static-model mAP used to score each sweep point; the best point is
    /// reported when present.
    pub baseline_map: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tau_start: 0.5,
            tau_end: 0.99,
            tau_step: 0.01,
            baseline_map: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoConfig {
    pub trials: usize,
    /// Restricts the attachment layer to one backbone stage.
    pub stage: Option<usize>,
    pub sampler: Sampler,
    /// Overrides the default detector space.
    pub space: Option<SearchSpace>,
    /// Epochs each trial trains for.
    pub trial_epochs: usize,
}

impl Default for HpoConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            stage: None,
            sampler: Sampler::Tpe(TpeConfig::default()),
            space: None,
            trial_epochs: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed; data, initialization, training and search draw from
    /// named substreams of it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub qat: QatConfig,
    pub sweep: SweepConfig,
    pub hpo: HpoConfig,
    pub latency: LatencyModel,
}

impl Default for RunConfig {
    /// The desk-scale setup: 96×128 grayscale, exit branch after layer 4,
    /// 50 epochs.
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig {
                ee: Some(EEBranchConfig::default()),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 50,
                initial_lr: DESK_LR,
                decay_every: 10,
                lr_decay: 0.5,
                ..TrainConfig::default()
            },
            loss: LossWeights::default(),
            qat: QatConfig {
                bits: 8,
                train: TrainConfig {
                    epochs: 5,
                    initial_lr: DESK_QAT_LR,
                    ..TrainConfig::default()
                },
            },
            sweep: SweepConfig::default(),
            hpo: HpoConfig::default(),
            latency: LatencyModel::default(),
        }
    }
}

/// Float learning rate of the desk setup.
pub const DESK_LR: f64 = 1e-3;
/// QAT learning rate of the desk setup.
pub const DESK_QAT_LR: f64 = 1e-4;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return config_err(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.data.scene.validate()?;
        if self.data.train_images == 0 {
            return config_err("train_images must be positive");
        }
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.qat.train.validate()?;
        self.latency.validate()?;
        let s = &self.sweep;
        if !(0.5 <= s.tau_start && s.tau_start <= s.tau_end && s.tau_end <= 1.0 && s.tau_step > 0.0)
        {
            return config_err("sweep needs 0.5 <= tau_start <= tau_end <= 1 and a positive step");
        }
        if self.hpo.trials == 0 || self.hpo.trial_epochs == 0 {
            return config_err("hpo trials and trial_epochs must be positive");
        }
        if let Some(space) = &self.hpo.space {
            space.validate()?;
        }
        Ok(())
    }

    /// Parses and validates. Keys absent from `text` keep their default
    /// values at any depth; unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut merged = Self::default().to_value();
        merge(&mut merged, user);
        let c: Self =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Seed of the named substream, e.g. `"data"`, `"init"`, `"train"`.
    pub fn stream_seed(&self, name: &str) -> u64 {
        self.seed ^ name_hash(name)
    }

    /// Search space of the `hpo` command, honoring the stage restriction.
    pub fn search_space(&self) -> Result<SearchSpace> {
        if let Some(s) = &self.hpo.space {
            return Ok(s.clone());
        }
        let layers = match self.hpo.stage {
            Some(s) => self.model.backbone.layers_of_stage(s)?,
            None => (1..=self.model.backbone.total_layers()).collect(),
        };
        Ok(SearchSpace::detector(&layers))
    }
}

/// Objects merge key by key; anything else, including a tagged object
/// whose `kind` changes, replaces the base.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o))
            if b.get("kind") == o.get("kind") || !o.contains_key("kind") =>
        {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
