use eedet::anchors::model_anchors;
use eedet::checkpoint::{model_hash, Checkpoint, TrainingState};
use eedet::data::{generate_dataset, Sample, SceneSpec};
use eedet::eval::evaluate;
use eedet::loss::LossWeights;
use eedet::model::{build_model, EEBranchConfig, ModelConfig, ModelGraph};
use eedet::optim::RmsProp;
use eedet::train::{train, Augmentation, EpochLog, TrainConfig};

fn with_branch() -> ModelConfig {
    ModelConfig {
        ee: Some(EEBranchConfig::default()),
        ..Default::default()
    }
}

fn data(n: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(&SceneSpec::default(), n, seed).unwrap()
}

fn schedule(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        initial_lr: 1e-3,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn fit(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    set: &[Sample],
    val: &[Sample],
) -> (ModelGraph, Vec<EpochLog>, Option<f64>) {
    let mut m = build_model(cfg, 5).unwrap();
    let mut opt = RmsProp::new(&m, tc.optimizer);
    let mut tau = None;
    let logs = train(
        &mut m,
        &mut opt,
        set,
        val,
        tc,
        &LossWeights::default(),
        0,
        &mut |e| {
            tau = e.tau;
            Ok(())
        },
    )
    .unwrap();
    (m, logs, tau)
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let (set, val) = (data(12, 1), data(4, 2));
    let (a, la, _) = fit(&with_branch(), &schedule(2, 9), &set, &val);
    let (b, lb, _) = fit(&with_branch(), &schedule(2, 9), &set, &val);
    let (c, _, _) = fit(&with_branch(), &schedule(2, 10), &set, &val);
    assert_eq!(model_hash(&a), model_hash(&b));
    assert_eq!(la, lb);
    assert_ne!(model_hash(&a), model_hash(&c));
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let (set, val) = (data(12, 3), data(4, 4));
    let tc = schedule(3, 2);
    let (straight, logs, _) = fit(&with_branch(), &tc, &set, &val);

    let mut m = build_model(&with_branch(), 5).unwrap();
    let mut opt = RmsProp::new(&m, tc.optimizer);
    let mut saved = None;
    train(
        &mut m,
        &mut opt,
        &set,
        &val,
        &TrainConfig {
            epochs: 1,
            ..tc.clone()
        },
        &LossWeights::default(),
        0,
        &mut |e| {
            let state = TrainingState {
                epoch: e.log.epoch + 1,
                seed: tc.seed,
                optimizer: tc.optimizer,
                optimizer_steps: e.optimizer.steps,
            };
            saved = Some(
                Checkpoint::from_model(e.model, Some((e.optimizer, state)), e.tau, None)
                    .to_bytes()
                    .unwrap(),
            );
            Ok(())
        },
    )
    .unwrap();

    let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut m = ck.to_model().unwrap();
    let mut opt = ck.optimizer(&m).unwrap().expect("optimizer state");
    let start = ck.header.training.as_ref().unwrap().epoch;
    let rest = train(
        &mut m,
        &mut opt,
        &set,
        &val,
        &tc,
        &LossWeights::default(),
        start,
        &mut |_| Ok(()),
    )
    .unwrap();
    assert_eq!(model_hash(&m), model_hash(&straight));
    assert_eq!(rest, logs[1..]);
}

#[test]
fn loss_falls_on_a_small_set() {
    let set = data(8, 5);
    let tc = TrainConfig {
        augmentation: Augmentation::none(),
        ..schedule(12, 1)
    };
    let (_, logs, tau) = fit(&with_branch(), &tc, &set, &data(4, 6));
    let (first, last) = (logs[0].loss_total, logs[logs.len() - 1].loss_total);
    assert!(last < 0.7 * first, "{first} -> {last}");
    assert!(tau.is_some_and(|t| (0.5..=1.0).contains(&t)));
}

#[test]
fn static_model_trains_without_a_threshold() {
    let (m, logs, tau) = fit(
        &ModelConfig::default(),
        &schedule(1, 1),
        &data(8, 7),
        &data(4, 8),
    );
    assert!(m.branch.is_none());
    assert_eq!(tau, None);
    assert_eq!(logs[0].loss_ee, 0.0);
}

#[test]
fn empty_inputs_are_rejected() {
    let mut m = build_model(&with_branch(), 1).unwrap();
    let mut opt = RmsProp::new(&m, Default::default());
    let w = LossWeights::default();
    let tc = schedule(1, 1);
    assert!(
        train(&mut m, &mut opt, &[], &data(2, 1), &tc, &w, 0, &mut |_| Ok(
            ()
        ))
        .is_err()
    );
    assert!(
        train(&mut m, &mut opt, &data(2, 1), &[], &tc, &w, 0, &mut |_| Ok(
            ()
        ))
        .is_err()
    );
}

#[test]
fn ungated_evaluation_reports_no_skips() {
    let m = build_model(&with_branch(), 3).unwrap();
    let anchors = model_anchors(&m).unwrap();
    let test = data(10, 9);
    let (r, cache) = evaluate(&m, &anchors, &test, None).unwrap();
    assert_eq!(r.map, r.map_no_ee);
    assert_eq!(r.skip_rate, 0.0);
    assert_eq!(r.ee_accuracy, None);
    assert_eq!(r.images, 10);
    assert_eq!(cache.detections.len(), 10);
    assert!(r.validate());
    // Skipped images contribute no detections; the ungated column is unchanged.
    let (gated, _) = evaluate(&m, &anchors, &test, Some(0.5)).unwrap();
    let p = cache.p_empty.as_ref().unwrap();
    for (dets, &pi) in cache.gated(Some(0.5)).iter().zip(p) {
        assert!(pi < 0.5 || dets.is_empty());
    }
    assert_eq!(gated.map_no_ee, r.map_no_ee);
}
