use eedet::checkpoint::{model_hash, Checkpoint};
use eedet::data::{generate_dataset, Sample, SceneSpec};
use eedet::layers::LayerSpec;
use eedet::loss::LossWeights;
use eedet::model::{build_model, EEBranchConfig, ModelConfig, ModelGraph};
use eedet::optim::{RmsProp, RmsPropConfig};
use eedet::quant::{
    export_model, fold_model, int8_forward, int8_gated, prepare_qat, qat_train, read_export,
    simulate_export, write_export, QatConfig, DISABLED_BITS,
};
use eedet::rng::substream;
use eedet::train::{train, TrainConfig};
use eedet::Tensor;
use rand::Rng;

fn config() -> ModelConfig {
    ModelConfig {
        ee: Some(EEBranchConfig::default()),
        ..ModelConfig::default()
    }
}

fn data(n: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(&SceneSpec::default(), n, seed).unwrap()
}

fn short_run(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        initial_lr: lr,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    }
}

/// Random BatchNorm statistics so folding has something to fold.
fn perturb_batchnorm(model: &mut ModelGraph, seed: u64) {
    let mut rng = substream(seed, "bn");
    model.for_each_layer_mut(|l, _| {
        if let LayerSpec::BatchNorm { .. } = l.spec {
            for v in l.params[0].data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            for v in l.params[1].data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
            for v in l.buffers[0].data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
            for v in l.buffers[1].data_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
    });
}

fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().fold(0f64, |m, &v| m.max((v as f64).abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()));
    diff / scale.max(1e-12)
}

#[test]
fn folding_preserves_the_forward_pass() {
    let mut model = build_model(&config(), 3).unwrap();
    perturb_batchnorm(&mut model, 3);
    let folded = fold_model(&model, DISABLED_BITS).unwrap();
    for s in data(4, 6) {
        let x = s.image.to_tensor();
        let (a, la) = model.forward_full(&x).unwrap();
        let (b, lb) = folded.forward_full(&x).unwrap();
        assert!(max_rel_diff(&a.cls_logits, &b.cls_logits) < 1e-5);
        assert!(max_rel_diff(&a.box_offsets, &b.box_offsets) < 1e-5);
        assert!(max_rel_diff(&la.unwrap(), &lb.unwrap()) < 1e-5);
    }
}

#[test]
fn disabled_quantization_trains_like_float() {
    let set = data(16, 1);
    let base = build_model(&config(), 2).unwrap();
    let w = LossWeights::default();

    let mut float = base.clone();
    let mut opt = RmsProp::new(&float, RmsPropConfig::default());
    train(
        &mut float,
        &mut opt,
        &set,
        &data(4, 99),
        &short_run(1e-3),
        &w,
        0,
        &mut |_| Ok(()),
    )
    .unwrap();

    let mut q = prepare_qat(&base, DISABLED_BITS).unwrap();
    let mut opt = RmsProp::new(&q, RmsPropConfig::default());
    let cfg = QatConfig {
        bits: DISABLED_BITS,
        train: short_run(1e-3),
    };
    qat_train(
        &mut q,
        &mut opt,
        &set,
        &data(4, 99),
        &cfg,
        &w,
        0,
        &mut |_| Ok(()),
    )
    .unwrap();

    assert_eq!(model_hash(&float), model_hash(&q));
}

#[test]
fn unprepared_model_is_rejected_for_qat() {
    let mut m = build_model(&config(), 2).unwrap();
    let mut opt = RmsProp::new(&m, RmsPropConfig::default());
    let cfg = QatConfig {
        bits: 8,
        train: short_run(1e-3),
    };
    let r = qat_train(
        &mut m,
        &mut opt,
        &data(4, 1),
        &data(4, 99),
        &cfg,
        &LossWeights::default(),
        0,
        &mut |_| Ok(()),
    );
    assert!(r.is_err());
}

fn calibrated_qat_model() -> ModelGraph {
    let mut model = build_model(&config(), 8).unwrap();
    perturb_batchnorm(&mut model, 8);
    let mut q = prepare_qat(&model, 8).unwrap();
    let mut opt = RmsProp::new(&q, RmsPropConfig::default());
    let cfg = QatConfig {
        bits: 8,
        train: short_run(1e-4),
    };
    qat_train(
        &mut q,
        &mut opt,
        &data(24, 2),
        &data(4, 99),
        &cfg,
        &LossWeights::default(),
        0,
        &mut |_| Ok(()),
    )
    .unwrap();
    q
}

#[test]
fn integer_path_matches_simulation() {
    let q = calibrated_qat_model();
    let int8 = export_model(&q, Some(0.5)).unwrap();
    let images = data(20, 12);
    let mut scores = Vec::new();
    for s in &images {
        let x = s.image.to_tensor();
        let a = int8_forward(&int8, &x).unwrap();
        let b = simulate_export(&int8, &x).unwrap();
        assert!(a.max_step_diff(&b) <= 1, "{}", a.max_step_diff(&b));
        scores.push((a.p_empty().unwrap()[0], b.p_empty().unwrap()[0]));
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.0).collect();
    sorted.sort_by(f64::total_cmp);
    // Gate at the median so both paths are exercised.
    let tau = sorted[sorted.len() / 2].max(0.5);
    for (s, &(p_int, p_sim)) in images.iter().zip(&scores) {
        assert_eq!(p_int >= tau, p_sim >= tau);
        let g = int8_gated(&int8, &s.image.to_tensor(), tau).unwrap();
        assert_eq!(g.skipped, p_int >= tau);
        assert_eq!(g.heads.is_empty(), g.skipped);
    }
}

#[test]
fn containers_round_trip_byte_identically() {
    let q = calibrated_qat_model();
    let int8 = export_model(&q, Some(0.7)).unwrap();
    let bytes = write_export(&int8).unwrap();
    let back = read_export(&bytes).unwrap();
    assert_eq!(back, int8);
    assert_eq!(write_export(&back).unwrap(), bytes);

    let ck = Checkpoint::from_model(&q, None, Some(0.7), None);
    let bytes = ck.to_bytes().unwrap();
    let again = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(again.to_bytes().unwrap(), bytes);
    let m = again.to_model().unwrap();
    assert_eq!(model_hash(&m), model_hash(&q));
    let x = data(1, 3)[0].image.to_tensor();
    let (a, _) = q.forward_full(&x).unwrap();
    let (b, _) = m.forward_full(&x).unwrap();
    assert_eq!(a.cls_logits.data(), b.cls_logits.data());
}

#[test]
fn corrupted_containers_are_rejected() {
    let q = calibrated_qat_model();
    let mut bytes = write_export(&export_model(&q, None).unwrap()).unwrap();
    bytes[0] ^= 0xff;
    assert!(read_export(&bytes).is_err());
    let mut ck = Checkpoint::from_model(&q, None, None, None)
        .to_bytes()
        .unwrap();
    ck.truncate(ck.len() - 3);
    assert!(Checkpoint::from_bytes(&ck).is_err());
}

#[test]
fn float_model_cannot_be_exported() {
    assert!(export_model(&build_model(&config(), 1).unwrap(), None).is_err());
}
