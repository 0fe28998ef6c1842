//! Hyperparameter search with a Tree-structured Parzen Estimator over a
//! mixed categorical / continuous space, the composite objective, and a
//! resumable JSON-lines study.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::anchors::model_anchors;
use crate::checkpoint::Checkpoint;
use crate::cost::count_macs;
use crate::data::Sample;
use crate::error::{config_err, Error, Result};
use crate::loss::LossWeights;
use crate::model::{build_model, ModelConfig};
use crate::optim::RmsProp;
use crate::rng::{self, Rng};
use crate::train::{train, validate_epoch, TrainConfig};

/// Parameter name to value; categorical values are their choice.
pub type Assignment = BTreeMap<String, f64>;

pub const EE_LAYER: &str = "ee_layer";
pub const BRANCH_LR: &str = "branch_lr";
pub const BATCH_SIZE: &str = "batch_size";
pub const LAMBDA: &str = "lambda";
pub const W1: &str = "w1";

/// Smallest continuous kernel bandwidth, in the (possibly log) search axis.
pub const MIN_BANDWIDTH: f64 = 1e-3;
/// Rounds of candidate draws spent looking for an unevaluated assignment.
pub const MAX_DRAW_ROUNDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Categorical { choices: Vec<f64> },
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Domain::Categorical { choices } => {
                !choices.is_empty() && choices.iter().all(|c| c.is_finite())
            }
            Domain::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Domain::LogUniform { low, high } => *low > 0.0 && high.is_finite() && low < high,
        };
        if !ok {
            return config_err(format!("empty or invalid domain for {name}"));
        }
        Ok(())
    }

    /// Bounds on the axis the Parzen models work in.
    fn axis(&self) -> (f64, f64) {
        match *self {
            Domain::Categorical { ref choices } => (0.0, choices.len() as f64),
            Domain::Uniform { low, high } => (low, high),
            Domain::LogUniform { low, high } => (low.ln(), high.ln()),
        }
    }

    fn to_axis(&self, v: f64) -> Option<f64> {
        match self {
            Domain::Categorical { choices } => {
                choices.iter().position(|&c| c == v).map(|i| i as f64)
            }
            Domain::Uniform { .. } => Some(v),
            Domain::LogUniform { .. } => (v > 0.0).then(|| v.ln()),
        }
    }

    fn from_axis(&self, x: f64) -> f64 {
        match *self {
            Domain::Categorical { ref choices } => choices[x as usize],
            Domain::Uniform { low, high } => x.clamp(low, high),
            Domain::LogUniform { low, high } => x.exp().clamp(low, high),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match *self {
            Domain::Categorical { ref choices } => choices.contains(&v),
            Domain::Uniform { low, high } | Domain::LogUniform { low, high } => {
                v >= low && v <= high
            }
        }
    }

    fn sample_uniform(&self, rng: &mut Rng) -> f64 {
        match *self {
            Domain::Categorical { ref choices } => choices[rng.random_range(0..choices.len())],
            Domain::Uniform { low, high } => rng.random_range(low..high),
            Domain::LogUniform { low, high } => {
                rng.random_range(low.ln()..high.ln()).exp().clamp(low, high)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

impl SearchSpace {
    /// Attachment layer among `layers`, branch learning rate, batch size,
    /// loss weight and empty-class weight.
    pub fn detector(layers: &[usize]) -> Self {
        let p = |name: &str, domain| ParamSpec {
            name: name.into(),
            domain,
        };
        Self {
            params: vec![
                p(
                    EE_LAYER,
                    Domain::Categorical {
                        choices: layers.iter().map(|&l| l as f64).collect(),
                    },
                ),
                p(
                    BRANCH_LR,
                    Domain::LogUniform {
                        low: 1e-5,
                        high: 1e-2,
                    },
                ),
                p(
                    BATCH_SIZE,
                    Domain::Categorical {
                        choices: vec![8.0, 16.0, 24.0, 32.0],
                    },
                ),
                p(
                    LAMBDA,
                    Domain::LogUniform {
                        low: 0.1,
                        high: 10.0,
                    },
                ),
                p(
                    W1,
                    Domain::Uniform {
                        low: 0.25,
                        high: 4.0,
                    },
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return config_err("search space has no parameters");
        }
        for (i, p) in self.params.iter().enumerate() {
            p.domain.validate(&p.name)?;
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return config_err(format!("parameter {} declared twice", p.name));
            }
        }
        Ok(())
    }

    pub fn contains(&self, a: &Assignment) -> bool {
        a.len() == self.params.len()
            && self
                .params
                .iter()
                .all(|p| a.get(&p.name).is_some_and(|&v| p.domain.contains(v)))
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Assignment {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.domain.sample_uniform(rng)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub number: usize,
    pub assignment: Assignment,
    /// Maximized; present and finite for completed trials.
    pub objective: Option<f64>,
    pub status: TrialStatus,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    fn completed_objective(&self) -> Option<f64> {
        match (self.status, self.objective) {
            (TrialStatus::Complete, Some(j)) if j.is_finite() => Some(j),
            _ => None,
        }
    }
}

/// `mAP_no-EE × S(ℓ) × A_EE`; negative savings give a negative objective.
pub fn objective_j(map_baseline: f64, savings: f64, ee_accuracy: f64) -> f64 {
    map_baseline * savings * ee_accuracy
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeConfig {
    /// Share of completed trials forming the good set.
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || self.n_candidates == 0 {
            return config_err("TPE needs gamma in (0, 1] and at least one candidate");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Tpe(TpeConfig),
    Random,
}

/// One-dimensional Parzen density on a domain axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Parzen {
    /// Add-one smoothed frequencies over choice indices.
    Categorical(Vec<f64>),
    /// Equal-weight Gaussians truncated to `[low, high]`.
    Kernels {
        centers: Vec<f64>,
        bandwidth: f64,
        low: f64,
        high: f64,
    },
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

impl Parzen {
    /// Fits observations given on the domain axis.
    pub fn fit(domain: &Domain, observations: &[f64]) -> Self {
        let (low, high) = domain.axis();
        match domain {
            Domain::Categorical { choices } => {
                let k = choices.len();
                let mut w = vec![1.0; k];
                for &x in observations {
                    w[x as usize] += 1.0;
                }
                let total = (observations.len() + k) as f64;
                Parzen::Categorical(w.into_iter().map(|c| c / total).collect())
            }
            _ => {
                let n = observations.len().max(1) as f64;
                Parzen::Kernels {
                    centers: observations.to_vec(),
                    bandwidth: ((high - low) / n.sqrt()).max(MIN_BANDWIDTH),
                    low,
                    high,
                }
            }
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match self {
            Parzen::Categorical(p) => p[x as usize].ln(),
            Parzen::Kernels {
                centers,
                bandwidth: s,
                low,
                high,
            } => {
                if centers.is_empty() {
                    return -(high - low).ln();
                }
                let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
                let density: f64 = centers
                    .iter()
                    .map(|&m| {
                        let mass = normal_cdf((high - m) / s) - normal_cdf((low - m) / s);
                        norm * (-0.5 * ((x - m) / s).powi(2)).exp() / mass.max(1e-300)
                    })
                    .sum::<f64>()
                    / centers.len() as f64;
                density.max(1e-300).ln()
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Parzen::Categorical(p) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i as f64;
                    }
                }
                (p.len() - 1) as f64
            }
            Parzen::Kernels {
                centers,
                bandwidth: s,
                low,
                high,
            } => {
                if centers.is_empty() {
                    return rng.random_range(*low..*high);
                }
                let m = centers[rng.random_range(0..centers.len())];
                let normal = rand_distr::Normal::new(m, *s).expect("positive bandwidth");
                for _ in 0..100 {
                    let x = rng.sample(normal);
                    if x >= *low && x <= *high {
                        return x;
                    }
                }
                m.clamp(*low, *high)
            }
        }
    }
}

fn axis_values(space: &SearchSpace, trials: &[&Assignment], d: usize) -> Vec<f64> {
    let p = &space.params[d];
    trials
        .iter()
        .filter_map(|a| a.get(&p.name).and_then(|&v| p.domain.to_axis(v)))
        .collect()
}

/// Draws candidates from the good-set model and keeps the one with the
/// largest `l(x) / g(x)`, taken per dimension and multiplied. Ties keep the
/// earliest candidate. Candidates equal to an assignment in `seen` are
/// passed over (each assignment is evaluated at most once) unless no fresh
/// one turns up within [`MAX_DRAW_ROUNDS`] rounds of draws.
pub fn suggest_from_sets(
    space: &SearchSpace,
    good: &[&Assignment],
    bad: &[&Assignment],
    seen: &[&Assignment],
    n_candidates: usize,
    rng: &mut Rng,
) -> Assignment {
    let models: Vec<(Parzen, Parzen)> = (0..space.params.len())
        .map(|d| {
            let dom = &space.params[d].domain;
            (
                Parzen::fit(dom, &axis_values(space, good, d)),
                Parzen::fit(dom, &axis_values(space, bad, d)),
            )
        })
        .collect();
    let to_assignment = |x: &[f64]| -> Assignment {
        space
            .params
            .iter()
            .zip(x)
            .map(|(p, &xi)| (p.name.clone(), p.domain.from_axis(xi)))
            .collect()
    };
    let mut best_fresh: Option<(f64, Assignment)> = None;
    let mut best_any: Option<(f64, Assignment)> = None;
    for _ in 0..MAX_DRAW_ROUNDS {
        for _ in 0..n_candidates {
            let x: Vec<f64> = models.iter().map(|(l, _)| l.sample(rng)).collect();
            let score: f64 = x
                .iter()
                .zip(&models)
                .map(|(&xi, (l, g))| l.log_pdf(xi) - g.log_pdf(xi))
                .sum();
            let a = to_assignment(&x);
            let slot = if seen.contains(&&a) {
                &mut best_any
            } else {
                &mut best_fresh
            };
            if slot.as_ref().is_none_or(|b| score > b.0) {
                *slot = Some((score, a));
            }
        }
        if let Some((_, a)) = best_fresh {
            return a;
        }
    }
    best_any.expect("at least one candidate").1
}

/// Next assignment given the study so far. Failed trials are ignored.
pub fn tpe_suggest(
    history: &[TrialRecord],
    space: &SearchSpace,
    cfg: &TpeConfig,
    rng: &mut Rng,
) -> Assignment {
    let mut done: Vec<(f64, usize, &Assignment)> = history
        .iter()
        .filter_map(|t| {
            t.completed_objective()
                .map(|j| (j, t.number, &t.assignment))
        })
        .collect();
    if done.len() < cfg.n_startup.max(1) {
        return space.sample_uniform(rng);
    }
    done.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n_good = ((cfg.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len());
    let good: Vec<&Assignment> = done[..n_good].iter().map(|t| t.2).collect();
    let bad: Vec<&Assignment> = done[n_good..].iter().map(|t| t.2).collect();
    let seen: Vec<&Assignment> = history.iter().map(|t| &t.assignment).collect();
    suggest_from_sets(space, &good, &bad, &seen, cfg.n_candidates, rng)
}

/// Result of evaluating one assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialEval {
    pub objective: f64,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub history: Vec<TrialRecord>,
}

impl Study {
    /// Highest objective among completed trials; ties go to the earliest.
    pub fn best(&self) -> Option<&TrialRecord> {
        let mut best: Option<(&TrialRecord, f64)> = None;
        for t in &self.history {
            if let Some(j) = t.completed_objective() {
                if best.is_none_or(|b| j > b.1) {
                    best = Some((t, j));
                }
            }
        }
        best.map(|b| b.0)
    }

    /// Best objective after each trial.
    pub fn best_curve(&self) -> Vec<f64> {
        let mut cur = f64::NEG_INFINITY;
        self.history
            .iter()
            .map(|t| {
                if let Some(j) = t.completed_objective() {
                    cur = cur.max(j);
                }
                cur
            })
            .collect()
    }
}

pub fn load_history(path: &Path) -> Result<Vec<TrialRecord>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line)?;
        if rec.number != i {
            return Err(Error::Format(format!(
                "study line {} holds trial {}",
                i + 1,
                rec.number
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn append_record(path: &Path, rec: &TrialRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(rec)?;
    line.push(b'\n');
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

/// Runs trials until `n_trials` records exist. With `history_path`, records
/// already persisted there are kept and every new record is appended as
/// soon as it finishes. The suggestion for trial `t` draws from a stream
/// keyed by `(seed, t)`, so a resumed study continues exactly as an
/// uninterrupted one.
pub fn run_study(
    space: &SearchSpace,
    sampler: &Sampler,
    n_trials: usize,
    seed: u64,
    history_path: Option<&Path>,
    evaluator: &mut dyn FnMut(&Assignment, usize) -> Result<TrialEval>,
) -> Result<Study> {
    space.validate()?;
    if let Sampler::Tpe(c) = sampler {
        c.validate()?;
    }
    let mut history = match history_path {
        Some(p) => load_history(p)?,
        None => vec![],
    };
    while history.len() < n_trials {
        let number = history.len();
        let mut r = rng::indexed(seed, "hpo", number as u64);
        let assignment = match sampler {
            Sampler::Tpe(c) => tpe_suggest(&history, space, c, &mut r),
            Sampler::Random => space.sample_uniform(&mut r),
        };
        let rec = match evaluator(&assignment, number) {
            Ok(e) if e.objective.is_finite() => TrialRecord {
                number,
                assignment,
                objective: Some(e.objective),
                status: TrialStatus::Complete,
                metrics: e.metrics,
                artifacts: e.artifacts,
                error: None,
            },
            Ok(e) => TrialRecord {
                number,
                assignment,
                objective: None,
                status: TrialStatus::Failed,
                metrics: e.metrics,
                artifacts: e.artifacts,
                error: Some(format!("non-finite objective {}", e.objective)),
            },
            Err(err) => TrialRecord {
                number,
                assignment,
                objective: None,
                status: TrialStatus::Failed,
                metrics: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                error: Some(err.to_string()),
            },
        };
        if let Some(p) = history_path {
            append_record(p, &rec)?;
        }
        history.push(rec);
    }
    Ok(Study { history })
}

/// Trains one candidate on a shortened schedule and scores it on the
/// validation split: mAP without gating, threshold-optimal exit accuracy,
/// and the savings of its attachment layer.
pub struct PipelineEvaluator<'a> {
    pub model: ModelConfig,
    /// Schedule; `initial_lr` applies to the detector, the branch gets the
    /// searched learning rate.
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub train_set: &'a [Sample],
    pub val_set: &'a [Sample],
    pub init_seed: u64,
    /// Directory for per-trial checkpoints, if kept.
    pub out_dir: Option<PathBuf>,
}

fn param(a: &Assignment, name: &str) -> Result<f64> {
    a.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("assignment lacks {name}")))
}

impl PipelineEvaluator<'_> {
    pub fn configure(&self, a: &Assignment) -> Result<(ModelConfig, TrainConfig, LossWeights)> {
        let mut model = self.model.clone();
        let mut ee = model.ee.clone().unwrap_or_default();
        ee.attach_layer = param(a, EE_LAYER)? as usize;
        model.ee = Some(ee);
        let mut train = self.train.clone();
        train.branch_lr_mult = param(a, BRANCH_LR)? / train.initial_lr;
        train.batch_size = param(a, BATCH_SIZE)? as usize;
        let weights = LossWeights {
            lambda: param(a, LAMBDA)?,
            w1: param(a, W1)?,
            ..self.weights
        };
        Ok((model, train, weights))
    }

    pub fn evaluate(&self, a: &Assignment, trial: usize) -> Result<TrialEval> {
        let (mc, tc, w) = self.configure(a)?;
        let mut model = build_model(&mc, self.init_seed)?;
        let mut opt = RmsProp::new(&model, tc.optimizer);
        train(
            &mut model,
            &mut opt,
            self.train_set,
            self.val_set,
            &tc,
            &w,
            0,
            &mut |_| Ok(()),
        )?;
        let anchors = model_anchors(&model)?;
        let (map, acc, tau) = validate_epoch(&model, &anchors, self.val_set)?;
        let savings = count_macs(&model)?.savings.expect("branch configured");
        let mut metrics = BTreeMap::from([
            ("map_no_ee".to_string(), map),
            ("savings".to_string(), savings),
            ("ee_accuracy".to_string(), acc),
        ]);
        if let Some(t) = tau {
            metrics.insert("tau".into(), t);
        }
        let mut artifacts = BTreeMap::new();
        if let Some(dir) = &self.out_dir {
            let path = dir.join(format!("trial{trial:04}.ckpt"));
            Checkpoint::from_model(&model, None, tau, None).save(&path)?;
            artifacts.insert("checkpoint".into(), path.display().to_string());
        }
        Ok(TrialEval {
            objective: objective_j(map, savings, acc),
            metrics,
            artifacts,
        })
    }
}

/// Mixed benchmark shaped like the detector space, with its unique maximum
/// `1.0` at layer 5, lr 1e-3, batch 16, lambda 1, w1 1.5.
pub fn benchmark_space() -> SearchSpace {
    SearchSpace::detector(&[4, 5, 6])
}

pub fn benchmark_objective(a: &Assignment) -> f64 {
    let layer = match a[EE_LAYER] as usize {
        5 => 1.0,
        4 => 0.8,
        _ => 0.6,
    };
    let batch = match a[BATCH_SIZE] as usize {
        16 => 1.0,
        8 | 24 => 0.85,
        _ => 0.7,
    };
    let lr = (-0.5 * ((a[BRANCH_LR].log10() + 3.0) / 0.6).powi(2)).exp();
    let lambda = (-0.5 * (a[LAMBDA].log10() / 0.5).powi(2)).exp();
    let w1 = (-0.5 * ((a[W1] - 1.5) / 0.8).powi(2)).exp();
    layer * batch * lr * lambda * w1
}

/// Three categorical axes of four levels each; the objective has a unique
/// maximum at `(2, 1, 3)`.
pub fn grid_benchmark_space() -> SearchSpace {
    let axis = |name: &str| ParamSpec {
        name: name.into(),
        domain: Domain::Categorical {
            choices: vec![0.0, 1.0, 2.0, 3.0],
        },
    };
    SearchSpace {
        params: vec![axis("a"), axis("b"), axis("c")],
    }
}

pub fn grid_benchmark_objective(a: &Assignment) -> f64 {
    let d = |name: &str, target: f64| (a[name] - target).abs();
    -(d("a", 2.0) + 0.8 * d("b", 1.0) + 0.6 * d("c", 3.0))
}
