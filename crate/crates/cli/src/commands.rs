use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use eedet::anchors::model_anchors;
use eedet::checkpoint::{model_hash, Checkpoint, TrainingState};
use eedet::config::RunConfig;
use eedet::cost::{count_macs, exceeds_static, latency_report, CostReport, LatencyReport};
use eedet::data::{dataset_hash, load_split, write_dataset, Sample};
use eedet::eval::{evaluate, report_from_cache};
use eedet::gate::{score_dataset, tau_grid, threshold_sweep, write_sweep_csv, SweepPoint};
use eedet::hpo::{
    benchmark_objective, objective_j, run_study, PipelineEvaluator, TrialEval, TrialRecord,
    BATCH_SIZE, BRANCH_LR, EE_LAYER, LAMBDA, W1,
};
use eedet::metrics::EvalReport;
use eedet::model::{build_model, build_uninit, ModelGraph};
use eedet::optim::RmsProp;
use eedet::quant::{
    export_hash, export_model, int8_score_dataset, load_export, prepare_qat, qat_train, save_export,
};
use eedet::train::{
    derive_empty_labels, read_log_csv, split_validation, train, write_log_csv, EpochLog,
};

use crate::{
    Cli, Command, EvalArgs, ExportArgs, Global, HpoArgs, QatArgs, ReportArgs, RunInt8Args,
    SweepArgs, TrainArgs, EXIT_CHECK, EXIT_RUNTIME, EXIT_USAGE,
};

/// Bad flags or configuration.
#[derive(Debug)]
pub struct Usage(pub String);

/// A requested check did not hold.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for CheckFailed {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<CheckFailed>() {
            return EXIT_CHECK;
        }
        if let Some(eedet::Error::Config(_)) = cause.downcast_ref::<eedet::Error>() {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}

/// Every JSON output: the resolved configuration, hashes of the inputs,
/// and the payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub run_config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub result: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    config: RunConfig,
    inputs: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CostSummary {
    pub mac_static: u64,
    pub mac_full: u64,
    pub mac_ee: Option<u64>,
    pub savings: Option<f64>,
    pub skip_rate: f64,
    pub mac_avg: f64,
    /// `1 - mac_avg / mac_static`.
    pub reduction_vs_static: f64,
    /// The average cost is above the static model's.
    pub exceeds_static: bool,
    pub params_total: usize,
    pub branch_params: usize,
}

impl CostSummary {
    fn new(cost: &CostReport, latency: &LatencyReport, skip_rate: f64) -> Self {
        Self {
            mac_static: cost.mac_static,
            mac_full: cost.mac_full,
            mac_ee: cost.mac_ee,
            savings: cost.savings,
            skip_rate,
            mac_avg: latency.mac_avg,
            reduction_vs_static: 1.0 - latency.mac_avg / cost.mac_static as f64,
            exceeds_static: exceeds_static(latency.mac_avg, cost.mac_static as f64),
            params_total: cost.params_total,
            branch_params: cost.branch_params,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub savings: f64,
    pub points: Vec<SweepPoint>,
    pub baseline_map: Option<f64>,
    /// Point maximizing `baseline_map * savings * ee_accuracy`.
    pub best: Option<SweepBest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepBest {
    pub objective: f64,
    pub point: SweepPoint,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Int8Run {
    pub report: EvalReport,
    pub cost: CostSummary,
    pub latency: LatencyReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelReport {
    pub cost: CostSummary,
    pub latency: LatencyReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportSummary {
    pub source_model_hash: String,
    pub export_hash: String,
    pub tau: Option<f64>,
    pub ops: usize,
    pub weight_bytes: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let cfg = resolve(&g)?;
    match cli.command {
        Command::GenData => gen_data(&g, &cfg),
        Command::Train(a) => cmd_train(&g, cfg, a),
        Command::Qat(a) => cmd_qat(&g, cfg, a),
        Command::Eval(a) => cmd_eval(&g, &cfg, a),
        Command::Sweep(a) => cmd_sweep(&g, &cfg, a),
        Command::Hpo(a) => cmd_hpo(&g, cfg, a),
        Command::Export(a) => cmd_export(&g, &cfg, a),
        Command::RunInt8(a) => cmd_run_int8(&g, &cfg, a),
        Command::Report(a) => cmd_report(&g, &cfg, a),
    }
}

/// Configuration file (or defaults), seed override, derived stream seeds.
fn resolve(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.stream_seed("augment");
    cfg.qat.train.seed = cfg.stream_seed("qat");
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn artifact<T: Serialize>(
    path: &Path,
    cfg: &RunConfig,
    inputs: &BTreeMap<String, String>,
    result: T,
) -> Result<()> {
    write_json(
        path,
        &Artifact {
            run_config: cfg.clone(),
            inputs: inputs.clone(),
            result,
        },
    )
}

/// Creates the output directory and refuses to replace existing outputs
/// unless forced.
fn prepare_out(g: &Global, files: &[&str]) -> Result<()> {
    fs::create_dir_all(&g.out)?;
    if g.force {
        return Ok(());
    }
    for f in files {
        let p = g.out.join(f);
        if p.exists() {
            return usage(format!(
                "{} exists; pass --force to replace it",
                p.display()
            ));
        }
    }
    Ok(())
}

fn resume_path(g: &Global) -> Option<&Path> {
    g.resume.as_deref().filter(|p| !p.is_empty()).map(Path::new)
}

fn load_data(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    load_split(dir, split).with_context(|| format!("loading split {split} from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_tau(arg: Option<&str>, stored: Option<f64>, has_branch: bool) -> Result<Option<f64>> {
    match arg {
        Some("none") => Ok(None),
        Some(s) => match s.parse::<f64>() {
            Ok(t) => Ok(Some(t)),
            Err(_) => usage(format!("--tau expects a number or `none`, got {s}")),
        },
        None if !has_branch => Ok(None),
        None => match stored {
            Some(t) => Ok(Some(t)),
            None => usage("no --tau given and the model stores no threshold"),
        },
    }
}

fn gen_data(g: &Global, cfg: &RunConfig) -> Result<()> {
    let out = &g.out;
    if out.exists() && fs::read_dir(out)?.next().is_some() && !g.force {
        return usage(format!(
            "{} is not empty; pass --force to replace it",
            out.display()
        ));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Usage(format!("{} has no directory name", out.display())))?;
    let staging = out.with_file_name(format!(".{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let written = write_dataset(
        &staging,
        &cfg.data.scene,
        cfg.data.train_images,
        cfg.data.test_images,
        cfg.stream_seed("data"),
    )
    .map_err(anyhow::Error::from)
    .and_then(|m| {
        write_json(&staging.join("run_config.json"), cfg)?;
        Ok(m)
    });
    let manifest = match written {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(&staging, out)?;
    println!(
        "train {} images ({} empty), test {} images ({} empty) -> {}",
        manifest.train.count,
        manifest.train.empty,
        manifest.test.count,
        manifest.test.empty,
        out.display()
    );
    Ok(())
}

/// Float or QAT training with per-epoch checkpoints for resumption.
struct Fit<'a> {
    g: &'a Global,
    cfg: RunConfig,
    inputs: BTreeMap<String, String>,
    qat: bool,
    /// Output file stem: `model` or `qat`.
    stem: &'static str,
}

impl Fit<'_> {
    fn run(
        &self,
        mut model: ModelGraph,
        mut opt: RmsProp,
        start: usize,
        train_set: &[Sample],
        val_set: &[Sample],
    ) -> Result<()> {
        let out = &self.g.out;
        let log_path = out.join(format!("{}_log.csv", self.stem));
        let last_path = out.join(format!("{}_last.ckpt", self.stem));
        let mut logs: Vec<EpochLog> = if start > 0 && log_path.exists() {
            read_log_csv(File::open(&log_path)?)?
                .into_iter()
                .take(start)
                .collect()
        } else {
            vec![]
        };
        let tc = if self.qat {
            &self.cfg.qat.train
        } else {
            &self.cfg.train
        };
        let provenance = serde_json::to_value(Provenance {
            config: self.cfg.clone(),
            inputs: self.inputs.clone(),
        })?;
        if start >= tc.epochs {
            return usage(format!("checkpoint already completed {start} epochs"));
        }
        let mut final_tau = None;
        let mut on_epoch = |e: eedet::train::EpochEnd<'_>| -> eedet::Result<()> {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  val mAP {:.4}  exit acc {:.4}",
                e.log.epoch, e.log.lr, e.log.loss_total, e.log.val_map, e.log.val_ee_acc
            );
            logs.push(e.log.clone());
            write_log_csv(&logs, File::create(&log_path)?)?;
            let state = TrainingState {
                epoch: e.log.epoch + 1,
                seed: tc.seed,
                optimizer: tc.optimizer,
                optimizer_steps: e.optimizer.steps,
            };
            Checkpoint::from_model(
                e.model,
                Some((e.optimizer, state)),
                e.tau,
                Some(provenance.clone()),
            )
            .save(&last_path)?;
            final_tau = e.tau;
            Ok(())
        };
        if self.qat {
            qat_train(
                &mut model,
                &mut opt,
                train_set,
                val_set,
                &self.cfg.qat,
                &self.cfg.loss,
                start,
                &mut on_epoch,
            )?;
        } else {
            train(
                &mut model,
                &mut opt,
                train_set,
                val_set,
                &self.cfg.train,
                &self.cfg.loss,
                start,
                &mut on_epoch,
            )?;
        }
        let final_path = out.join(format!("{}.ckpt", self.stem));
        let mut ck = load_checkpoint(&last_path)?;
        ck.header.tau = final_tau;
        ck.save(&final_path)?;
        println!(
            "{} (threshold {:?}, hash {})",
            final_path.display(),
            final_tau,
            model_hash(&model)
        );
        Ok(())
    }
}

/// Restores model, optimizer, epoch and the embedded configuration.
fn resume_from(path: &Path) -> Result<(ModelGraph, RmsProp, usize, Provenance)> {
    let ck = load_checkpoint(path)?;
    let state = ck
        .header
        .training
        .clone()
        .ok_or_else(|| Usage(format!("{} has no training state", path.display())))?;
    let prov: Provenance = serde_json::from_value(
        ck.header
            .run_config
            .clone()
            .ok_or_else(|| Usage(format!("{} embeds no configuration", path.display())))?,
    )?;
    let model = ck.to_model()?;
    let opt = ck.optimizer(&model)?.expect("training state present");
    Ok((model, opt, state.epoch, prov))
}

fn split(
    cfg: &RunConfig,
    data: &Path,
    val_fraction: f64,
) -> Result<(Vec<Sample>, Vec<Sample>, String)> {
    let all = load_data(data, "train")?;
    let hash = dataset_hash(&all);
    let (tr, va) = split_validation(&all, val_fraction, cfg.stream_seed("split"));
    Ok((tr, va, hash))
}

fn cmd_train(g: &Global, mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(p) = resume_path(g) {
        let (model, opt, start, prov) = resume_from(p)?;
        fs::create_dir_all(&g.out)?;
        let (tr, va, _) = split(&prov.config, &a.data, prov.config.train.val_fraction)?;
        let fit = Fit {
            g,
            cfg: prov.config,
            inputs: prov.inputs,
            qat: false,
            stem: "model",
        };
        return fit.run(model, opt, start, &tr, &va);
    }
    match a.ee.as_deref() {
        None => {}
        Some("none") => cfg.model.ee = None,
        Some(s) => {
            let l: usize = s
                .parse()
                .map_err(|_| Usage(format!("--ee expects a layer number or `none`, got {s}")))?;
            cfg.model
                .ee
                .get_or_insert_with(Default::default)
                .attach_layer = l;
        }
    }
    if cfg.model.ee.is_none() {
        cfg.loss.lambda = 0.0;
    }
    cfg.validate()?;
    prepare_out(g, &["model.ckpt", "model_last.ckpt", "model_log.csv"])?;
    write_json(&g.out.join("run_config.json"), &cfg)?;
    let (tr, va, hash) = split(&cfg, &a.data, cfg.train.val_fraction)?;
    let model = build_model(&cfg.model, cfg.stream_seed("init"))?;
    let opt = RmsProp::new(&model, cfg.train.optimizer);
    let fit = Fit {
        g,
        cfg,
        inputs: BTreeMap::from([("dataset".into(), hash)]),
        qat: false,
        stem: "model",
    };
    fit.run(model, opt, 0, &tr, &va)
}

fn cmd_qat(g: &Global, cfg: RunConfig, a: QatArgs) -> Result<()> {
    if let Some(p) = resume_path(g) {
        let (model, opt, start, prov) = resume_from(p)?;
        fs::create_dir_all(&g.out)?;
        let (tr, va, _) = split(&prov.config, &a.data, prov.config.qat.train.val_fraction)?;
        let fit = Fit {
            g,
            cfg: prov.config,
            inputs: prov.inputs,
            qat: true,
            stem: "qat",
        };
        return fit.run(model, opt, start, &tr, &va);
    }
    let Some(from) = &a.from else {
        return usage("qat requires --from <float checkpoint>");
    };
    let float = load_checkpoint(from)?.to_model()?;
    if float.config.quant.is_some() {
        return usage(format!("{} is already quantized", from.display()));
    }
    let mut cfg = cfg;
    cfg.model = float.config.clone();
    prepare_out(g, &["qat.ckpt", "qat_last.ckpt", "qat_log.csv"])?;
    write_json(&g.out.join("run_config.json"), &cfg)?;
    let (tr, va, hash) = split(&cfg, &a.data, cfg.qat.train.val_fraction)?;
    let model = prepare_qat(&float, cfg.qat.bits)?;
    let opt = RmsProp::new(&model, cfg.qat.train.optimizer);
    let fit = Fit {
        g,
        cfg,
        inputs: BTreeMap::from([
            ("dataset".into(), hash),
            ("float_model".into(), model_hash(&float)),
        ]),
        qat: true,
        stem: "qat",
    };
    fit.run(model, opt, 0, &tr, &va)
}

fn cmd_eval(g: &Global, cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    prepare_out(g, &["eval.json", "scores.json"])?;
    let ck = load_checkpoint(&a.model)?;
    let model = ck.to_model()?;
    let tau = parse_tau(a.tau.as_deref(), ck.header.tau, model.branch.is_some())?;
    let samples = load_data(&a.data, &a.split)?;
    let anchors = model_anchors(&model)?;
    let (report, cache) = evaluate(&model, &anchors, &samples, tau)?;
    let inputs = BTreeMap::from([
        ("model".into(), report.metadata.model_hash.clone()),
        ("dataset".into(), report.metadata.dataset_hash.clone()),
    ]);
    println!(
        "mAP {:.4}  mAP without exit {:.4}  skip rate {:.4}  exit accuracy {}",
        report.map,
        report.map_no_ee,
        report.skip_rate,
        report
            .ee_accuracy
            .map_or("n/a".to_string(), |v| format!("{v:.4}"))
    );
    artifact(&g.out.join("eval.json"), cfg, &inputs, &report)?;
    artifact(&g.out.join("scores.json"), cfg, &inputs, &cache)
}

fn cmd_sweep(g: &Global, cfg: &RunConfig, a: SweepArgs) -> Result<()> {
    prepare_out(g, &["sweep.csv", "sweep.json"])?;
    let model = load_checkpoint(&a.model)?.to_model()?;
    let cost = count_macs(&model)?;
    let (Some(mac_ee), Some(savings)) = (cost.mac_ee, cost.savings) else {
        return usage("sweep needs a model with an exit branch");
    };
    let samples = load_data(&a.data, &a.split)?;
    let anchors = model_anchors(&model)?;
    let cache = score_dataset(&model, &anchors, &samples)?;
    let gts: Vec<_> = samples.iter().map(Sample::gt_boxes).collect();
    let y = derive_empty_labels(&gts);
    let s = &cfg.sweep;
    let taus = tau_grid(s.tau_start, s.tau_end, s.tau_step);
    let points = threshold_sweep(
        &cache,
        &gts,
        &y,
        &taus,
        cost.mac_full as f64,
        mac_ee as f64,
        model.config.heads.num_classes,
    )?;
    write_sweep_csv(&points, File::create(g.out.join("sweep.csv"))?)?;
    let baseline_map = a.baseline_map.or(s.baseline_map);
    let best = baseline_map.and_then(|b| {
        let mut best: Option<SweepBest> = None;
        for p in &points {
            let j = objective_j(b, savings, p.ee_accuracy);
            if best.as_ref().is_none_or(|x| j > x.objective) {
                best = Some(SweepBest {
                    objective: j,
                    point: *p,
                });
            }
        }
        best
    });
    if let Some(b) = &best {
        println!(
            "best threshold {} (objective {:.4}, mAP {:.4}, skip {:.4})",
            b.point.tau, b.objective, b.point.map, b.point.skip_rate
        );
    }
    println!("{} sweep points", points.len());
    let inputs = BTreeMap::from([
        ("model".into(), model_hash(&model)),
        ("dataset".into(), dataset_hash(&samples)),
    ]);
    artifact(
        &g.out.join("sweep.json"),
        cfg,
        &inputs,
        SweepSummary {
            savings,
            points,
            baseline_map,
            best,
        },
    )
}

/// Closed-form stand-in for a training run, for dry runs of the search.
fn stub_objective(a: &eedet::hpo::Assignment) -> eedet::Result<f64> {
    for k in [EE_LAYER, BRANCH_LR, BATCH_SIZE, LAMBDA, W1] {
        if !a.contains_key(k) {
            return Err(eedet::Error::Config(format!(
                "stub evaluator needs parameter {k}"
            )));
        }
    }
    Ok(benchmark_objective(a))
}

fn cmd_hpo(g: &Global, mut cfg: RunConfig, a: HpoArgs) -> Result<()> {
    if let Some(s) = a.stage {
        cfg.hpo.stage = Some(s);
    }
    if let Some(n) = a.trials {
        cfg.hpo.trials = n;
    }
    cfg.validate()?;
    let space = cfg.search_space()?;
    fs::create_dir_all(&g.out)?;
    let study_path = g.out.join("study.jsonl");
    if study_path.exists() {
        if g.force {
            fs::remove_file(&study_path)?;
        } else if g.resume.is_none() {
            return usage(format!(
                "{} exists; pass --resume to continue it or --force to restart",
                study_path.display()
            ));
        }
    }
    write_json(&g.out.join("run_config.json"), &cfg)?;
    let (train_set, val_set, mut inputs) = match (&a.data, a.evaluator.as_str()) {
        (Some(d), _) => {
            let (tr, va, hash) = split(&cfg, d, cfg.train.val_fraction)?;
            (tr, va, BTreeMap::from([("dataset".to_string(), hash)]))
        }
        (None, "stub") => (vec![], vec![], BTreeMap::new()),
        (None, _) => return usage("hpo with the pipeline evaluator needs --data"),
    };
    inputs.insert("evaluator".into(), a.evaluator.clone());
    let trials_dir = g.out.join("trials");
    let pipeline = PipelineEvaluator {
        model: cfg.model.clone(),
        train: eedet::train::TrainConfig {
            epochs: cfg.hpo.trial_epochs,
            ..cfg.train.clone()
        },
        weights: cfg.loss,
        train_set: &train_set,
        val_set: &val_set,
        init_seed: cfg.stream_seed("init"),
        out_dir: Some(trials_dir.clone()),
    };
    let mut evaluator: Box<dyn FnMut(&eedet::hpo::Assignment, usize) -> eedet::Result<TrialEval>> =
        match a.evaluator.as_str() {
            "stub" => Box::new(|x, _| {
                Ok(TrialEval {
                    objective: stub_objective(x)?,
                    ..Default::default()
                })
            }),
            "pipeline" => {
                fs::create_dir_all(&trials_dir)?;
                Box::new(|x, t| {
                    let r = pipeline.evaluate(x, t);
                    if let Ok(e) = &r {
                        eprintln!("trial {t}: objective {:.4}", e.objective);
                    }
                    r
                })
            }
            other => return usage(format!("unknown evaluator {other}")),
        };
    let study = run_study(
        &space,
        &cfg.hpo.sampler,
        cfg.hpo.trials,
        cfg.stream_seed("hpo"),
        Some(&study_path),
        &mut *evaluator,
    )?;
    drop(evaluator);
    let best: TrialRecord = study
        .best()
        .cloned()
        .ok_or_else(|| anyhow!("no trial completed"))?;
    let (model, train_cfg, weights) = pipeline.configure(&best.assignment)?;
    let best_config = RunConfig {
        model,
        train: eedet::train::TrainConfig {
            epochs: cfg.train.epochs,
            ..train_cfg
        },
        loss: weights,
        ..cfg.clone()
    };
    println!(
        "{} trials, best #{} objective {:.4}",
        study.history.len(),
        best.number,
        best.objective.unwrap_or(f64::NAN)
    );
    artifact(&g.out.join("best_trial.json"), &cfg, &inputs, &best)?;
    write_json(&g.out.join("best_config.json"), &best_config)
}

fn cmd_export(g: &Global, cfg: &RunConfig, a: ExportArgs) -> Result<()> {
    prepare_out(g, &["model.eeq8", "export.json"])?;
    let ck = load_checkpoint(&a.from)?;
    let model = ck.to_model()?;
    if model.config.quant.is_none() {
        return usage(format!("{} is not a QAT checkpoint", a.from.display()));
    }
    let tau = a.tau.or(ck.header.tau);
    let int8 = export_model(&model, tau)?;
    let path = g.out.join("model.eeq8");
    save_export(&int8, &path)?;
    let summary = ExportSummary {
        source_model_hash: model_hash(&model),
        export_hash: export_hash(&int8)?,
        tau,
        ops: int8.ops().len(),
        weight_bytes: int8.ops().iter().map(|o| o.weights.len()).sum(),
    };
    println!(
        "{} ({} ops, threshold {:?})",
        path.display(),
        summary.ops,
        tau
    );
    let inputs = BTreeMap::from([("model".into(), summary.source_model_hash.clone())]);
    artifact(&g.out.join("export.json"), cfg, &inputs, summary)
}

fn cmd_run_int8(g: &Global, cfg: &RunConfig, a: RunInt8Args) -> Result<()> {
    prepare_out(g, &["int8_eval.json"])?;
    let int8 = load_export(&a.model)
        .with_context(|| format!("loading int8 model {}", a.model.display()))?;
    let tau = parse_tau(a.tau.as_deref(), int8.tau, int8.branch.is_some())?;
    let graph = build_uninit(&int8.config)?;
    let anchors = model_anchors(&graph)?;
    let samples = load_data(&a.data, &a.split)?;
    let cache = int8_score_dataset(&int8, &anchors, &samples)?;
    let hash = export_hash(&int8)?;
    let report = report_from_cache(
        &cache,
        &samples,
        int8.config.heads.num_classes,
        tau,
        hash.clone(),
    )?;
    let cost = count_macs(&graph)?;
    let latency = latency_report(&cost, report.skip_rate, &cfg.latency);
    println!(
        "int8 mAP {:.4}  mAP without exit {:.4}  skip rate {:.4}  {:.1} fps",
        report.map, report.map_no_ee, report.skip_rate, latency.fps_avg
    );
    let inputs = BTreeMap::from([
        ("model".into(), hash),
        ("dataset".into(), report.metadata.dataset_hash.clone()),
    ]);
    let summary = CostSummary::new(&cost, &latency, report.skip_rate);
    artifact(
        &g.out.join("int8_eval.json"),
        cfg,
        &inputs,
        Int8Run {
            report,
            cost: summary,
            latency,
        },
    )
}

/// Skip rate recorded in an `eval` or `run-int8` output.
fn skip_rate_of(path: &Path) -> Result<f64> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let r = &v["result"];
    r["skip_rate"]
        .as_f64()
        .or_else(|| r["report"]["skip_rate"].as_f64())
        .ok_or_else(|| Usage(format!("{} records no skip rate", path.display())).into())
}

fn cmd_report(g: &Global, cfg: &RunConfig, a: ReportArgs) -> Result<()> {
    prepare_out(g, &["cost.csv", "report.json"])?;
    let (model, mut inputs) = match &a.model {
        Some(p) => {
            let m = load_checkpoint(p)?.to_model()?;
            let h = model_hash(&m);
            (m, BTreeMap::from([("model".to_string(), h)]))
        }
        None => (build_uninit(&cfg.model)?, BTreeMap::new()),
    };
    let skip_rate = match (a.skip_rate, &a.eval) {
        (Some(s), _) => s,
        (None, Some(p)) => {
            inputs.insert("eval".into(), p.display().to_string());
            skip_rate_of(p)?
        }
        (None, None) => 0.0,
    };
    if !(0.0..=1.0).contains(&skip_rate) {
        return usage(format!("skip rate {skip_rate} outside [0, 1]"));
    }
    let cost = count_macs(&model)?;
    cost.write_csv(File::create(g.out.join("cost.csv"))?)?;
    let latency = latency_report(&cost, skip_rate, &cfg.latency);
    let summary = CostSummary::new(&cost, &latency, skip_rate);
    println!(
        "static {} MACs, full {}, exit {:?}, average {:.0} ({:.1}% below static), {:.1} fps",
        summary.mac_static,
        summary.mac_full,
        summary.mac_ee,
        summary.mac_avg,
        100.0 * summary.reduction_vs_static,
        latency.fps_avg
    );
    if summary.exceeds_static || summary.savings.is_some_and(|s| s < 0.0) {
        eprintln!("warning: the exit path does not pay off against the static model");
    }
    let reduction = summary.reduction_vs_static;
    artifact(
        &g.out.join("report.json"),
        cfg,
        &inputs,
        ModelReport {
            cost: summary,
            latency,
        },
    )?;
    if let Some(min) = a.min_mac_reduction {
        if reduction < min {
            return Err(CheckFailed(format!(
                "average cost reduction {reduction:.4} below required {min}"
            ))
            .into());
        }
    }
    Ok(())
}
