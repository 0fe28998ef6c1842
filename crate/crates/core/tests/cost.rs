use eedet::anchors::model_anchors;
use eedet::cost::{
    average_macs, count_macs, estimate_latency, exceeds_static, latency_report, savings,
    LatencyModel,
};
use eedet::data::{generate_dataset, SceneSpec};
use eedet::gate::gated_inference;
use eedet::hpo::objective_j;
use eedet::layers::LayerSpec;
use eedet::model::{build_model, EEBranchConfig, HeadConfig, ModelConfig};
use eedet::nn::Layer;
use eedet::tensor::{mac_counter, reset_mac_counter};
use eedet::Tensor;

const M: f64 = 1e6;

#[test]
fn stage_four_average_cost() {
    let avg = average_macs(539.0 * M, 230.0 * M, 0.398);
    assert!((avg / (414.0 * M) - 1.0).abs() < 0.01, "{avg}");
    assert!((savings(534.0 * M, 230.0 * M) - 0.569).abs() <= 1e-3);
}

#[test]
fn exit_costlier_than_static_is_flagged() {
    assert!(savings(534.0 * M, 708.0 * M) < 0.0);
    assert!(exceeds_static(708.0 * M, 534.0 * M));
    assert!(!exceeds_static(414.0 * M, 534.0 * M));
}

#[test]
fn deployment_latencies() {
    // (MMACs, MAC/cycle, ms, fps)
    for (macs, eff, ms, fps) in [
        (534.0, 4.96, 666.7, 1.50),
        (358.0, 4.22, 523.6, 1.91),
        (193.0, 4.14, 285.3, 3.50),
    ] {
        let m = LatencyModel {
            clock_hz: 160e6,
            efficiency: eff,
        };
        let (s, f) = estimate_latency(macs * M, &m);
        assert!((s * 1e3 / ms - 1.0).abs() < 0.025, "{macs}: {} ms", s * 1e3);
        assert!((f / fps - 1.0).abs() < 0.025, "{macs}: {f} fps");
    }
}

#[test]
fn selection_objective() {
    assert!((objective_j(0.591, 0.569, 0.944) - 0.3175).abs() < 1e-4);
    assert!(objective_j(0.6, -0.3, 0.9) < 0.0);
}

#[test]
fn depthwise_closed_form() {
    let spec = LayerSpec::DepthwiseConv2d {
        channels: 8,
        kernel: 3,
        stride: 1,
        bias: false,
    };
    assert_eq!(spec.macs(&[1, 8, 4, 4]).unwrap(), 4 * 4 * 8 * 9);
    let layer = Layer::<f32>::new("dw", spec).unwrap();
    reset_mac_counter();
    layer.forward(&Tensor::zeros(&[1, 8, 4, 4])).unwrap();
    assert_eq!(mac_counter(), 1152);
}

fn with_branch() -> ModelConfig {
    ModelConfig {
        ee: Some(EEBranchConfig::default()),
        ..Default::default()
    }
}

fn architectures() -> Vec<ModelConfig> {
    let ee = |l| {
        Some(EEBranchConfig {
            attach_layer: l,
            ..Default::default()
        })
    };
    let mut v = vec![ModelConfig::default()];
    for l in [1, 4, 9, 12] {
        v.push(ModelConfig {
            ee: ee(l),
            ..Default::default()
        });
    }
    let mut wide = ModelConfig {
        ee: ee(6),
        ..Default::default()
    };
    wide.backbone.width_multiplier = 1.0;
    v.push(wide);
    v.push(ModelConfig {
        ee: ee(3),
        heads: HeadConfig {
            tower_channels: 0,
            ..Default::default()
        },
        ..Default::default()
    });
    v
}

#[test]
fn analytic_count_matches_instrumented_forward() {
    for cfg in architectures() {
        let model = build_model(&cfg, 1).unwrap();
        let cost = count_macs(&model).unwrap();
        let x = Tensor::zeros(&cfg.input_dims());
        reset_mac_counter();
        model.forward_full(&x).unwrap();
        assert_eq!(mac_counter(), cost.mac_full, "{:?}", cfg.ee);
        if let Some(l) = model.attach_layer() {
            reset_mac_counter();
            let p = model.forward_prefix(&x, l).unwrap();
            model.branch_logits(&p.features).unwrap();
            assert_eq!(Some(mac_counter()), cost.mac_ee);
        } else {
            assert_eq!(cost.mac_full, cost.mac_static);
        }
    }
}

#[test]
fn gated_images_cost_the_exit_path() {
    let model = build_model(&with_branch(), 2).unwrap();
    let anchors = model_anchors(&model).unwrap();
    let cost = count_macs(&model).unwrap();
    let img = generate_dataset(&SceneSpec::default(), 1, 3).unwrap()[0]
        .image
        .to_tensor();
    for tau in [0.5, 1.0] {
        reset_mac_counter();
        let g = gated_inference(&model, &anchors, &img, tau).unwrap();
        let expect = if g.skipped {
            cost.mac_ee.unwrap()
        } else {
            cost.mac_full
        };
        assert_eq!(mac_counter(), expect, "tau {tau}");
    }
}

#[test]
fn branch_cost_closed_form() {
    for l in [2, 4, 7, 11] {
        let ee = EEBranchConfig {
            attach_layer: l,
            ..Default::default()
        };
        let cfg = ModelConfig {
            ee: Some(ee.clone()),
            ..Default::default()
        };
        let model = build_model(&cfg, 1).unwrap();
        let cost = count_macs(&model).unwrap();
        let s = &model.layer_output_shapes().unwrap()[l];
        let (c, h, w) = (s[1] as u64, s[2] as u64, s[3] as u64);
        let (m, f) = (ee.mid_channels as u64, ee.fc_hidden as u64);
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let macs = h * w * c * c * 9 + h2 * w2 * m * c * 9 + m * f + f * 2;
        assert_eq!(cost.mac_full - cost.mac_static, macs, "layer {l}");
        assert_eq!(cost.branch_macs, macs);
        // conv weights, two BN affine pairs, two biased linears
        let params = c * c * 9 + 2 * c + m * c * 9 + 2 * m + (m * f + f) + (f * 2 + 2);
        assert_eq!(cost.branch_params as u64, params, "layer {l}");
        assert_eq!(model.branch_param_count() as u64, params);
    }
}

#[test]
fn prefix_cost_grows_with_depth() {
    let model = build_model(&ModelConfig::default(), 1).unwrap();
    let cost = count_macs(&model).unwrap();
    let prefix: Vec<u64> = (0..=model.total_layers())
        .map(|l| cost.prefix_macs(l))
        .collect();
    assert!(prefix.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*prefix.last().unwrap() + cost.head_macs, cost.mac_static);
}

#[test]
fn latency_report_is_harmonic_in_fps() {
    let model = build_model(&with_branch(), 1).unwrap();
    let cost = count_macs(&model).unwrap();
    let m = LatencyModel::default();
    let r = latency_report(&cost, 0.4, &m);
    let full = estimate_latency(cost.mac_full as f64, &m).0;
    let ee = estimate_latency(cost.mac_ee.unwrap() as f64, &m).0;
    assert!((r.latency_avg_s - (0.4 * ee + 0.6 * full)).abs() < 1e-15);
    assert!((r.fps_avg - 1.0 / r.latency_avg_s).abs() < 1e-9);
    assert!(
        (r.mac_avg - average_macs(cost.mac_full as f64, cost.mac_ee.unwrap() as f64, 0.4)).abs()
            < 1e-6
    );
}
