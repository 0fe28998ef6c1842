use eedet::gradcheck::{
    gradient_check, gradient_check_smooth, nll_of_probabilities, projection, Fragment, GradReport,
};
use eedet::layers::LayerSpec;
use eedet::model::{build_model, EEBranchConfig, ModelConfig};
use eedet::nn::{Layer, Seq};
use eedet::rng::{substream, Rng};
use eedet::Tensor;
use rand::Rng as _;

pub const TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn layer(name: &str, spec: LayerSpec, rng: &mut Rng) -> Layer<f64> {
    let mut l = Layer::<f64>::new(name, spec).unwrap();
    for p in &mut l.params {
        for v in p.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    l
}

fn projection_for(seq: &Seq<f64>, input: &[usize], rng: &mut Rng) -> Fragment {
    let out: usize = seq.output_shape(input).unwrap().iter().product();
    Fragment {
        seq: seq.clone(),
        residual: false,
        objective: projection((0..out).map(|_| rng.random_range(-1.0..1.0)).collect()),
    }
}

fn check(seq: Seq<f64>, input: &[usize], seed: u64) -> GradReport {
    let mut rng = substream(seed, "gradients");
    let frag = projection_for(&seq, input, &mut rng);
    let x = random_tensor(input, -1.0, 1.0, &mut rng);
    gradient_check(&frag, &x, TOL, &mut rng).unwrap()
}

pub fn conv3x3_on_5x5_input(out: &mut Vec<GradReport>) {
    let mut rng = substream(1, "conv");
    let l = layer(
        "conv",
        LayerSpec::Conv2d {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            bias: true,
        },
        &mut rng,
    );
    out.push(check(Seq::new(vec![l]), &[2, 2, 5, 5], 1));
}

pub fn strided_conv_without_bias(out: &mut Vec<GradReport>) {
    let mut rng = substream(2, "conv");
    let l = layer(
        "conv",
        LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 4,
            kernel: 3,
            stride: 2,
            bias: false,
        },
        &mut rng,
    );
    out.push(check(Seq::new(vec![l]), &[1, 3, 7, 6], 2));
}

pub fn pointwise_conv(out: &mut Vec<GradReport>) {
    let mut rng = substream(3, "conv");
    let l = layer(
        "pw",
        LayerSpec::Conv2d {
            in_ch: 5,
            out_ch: 2,
            kernel: 1,
            stride: 1,
            bias: true,
        },
        &mut rng,
    );
    out.push(check(Seq::new(vec![l]), &[2, 5, 3, 4], 3));
}

pub fn depthwise_conv_both_strides(out: &mut Vec<GradReport>) {
    for (stride, seed) in [(1, 4), (2, 5)] {
        let mut rng = substream(seed, "dw");
        let l = layer(
            "dw",
            LayerSpec::DepthwiseConv2d {
                channels: 3,
                kernel: 3,
                stride,
                bias: true,
            },
            &mut rng,
        );
        out.push(check(Seq::new(vec![l]), &[2, 3, 6, 5], seed));
    }
}

pub fn batchnorm_train_mode(out: &mut Vec<GradReport>) {
    let mut rng = substream(6, "bn");
    let l = layer(
        "bn",
        LayerSpec::BatchNorm {
            channels: 3,
            momentum: 0.1,
            eps: 1e-5,
        },
        &mut rng,
    );
    out.push(check(Seq::new(vec![l]), &[3, 3, 2, 2], 6));
}

pub fn linear(out: &mut Vec<GradReport>) {
    let mut rng = substream(7, "fc");
    let l = layer(
        "fc",
        LayerSpec::Linear {
            in_features: 6,
            out_features: 4,
        },
        &mut rng,
    );
    out.push(check(Seq::new(vec![l]), &[3, 6], 7));
}

pub fn global_average_pool(out: &mut Vec<GradReport>) {
    let mut rng = substream(8, "gap");
    let l = layer("gap", LayerSpec::GlobalAvgPool, &mut rng);
    out.push(check(Seq::new(vec![l]), &[2, 3, 4, 5], 8));
}

pub fn relu6_away_from_kinks(out: &mut Vec<GradReport>) {
    let mut rng = substream(9, "relu6");
    let seq = Seq::new(vec![layer("act", LayerSpec::Relu6, &mut rng)]);
    let frag = projection_for(&seq, &[2, 3, 4, 4], &mut rng);
    let r = gradient_check_smooth(
        &frag,
        |r: &mut Rng| random_tensor(&[2, 3, 4, 4], -3.0, 9.0, r),
        TOL,
        &mut rng,
        1000,
    )
    .unwrap()
    .expect("smooth point found");
    out.push(r);
}

pub fn softmax_with_cross_entropy(out: &mut Vec<GradReport>) {
    let mut rng = substream(10, "softmax");
    let frag = Fragment {
        seq: Seq::new(vec![layer("softmax", LayerSpec::Softmax, &mut rng)]),
        residual: false,
        objective: nll_of_probabilities(vec![0, 2, 1, 2]),
    };
    let x = random_tensor(&[4, 3], -2.0, 2.0, &mut rng);
    out.push(gradient_check(&frag, &x, TOL, &mut rng).unwrap());
}

pub fn residual_add(out: &mut Vec<GradReport>) {
    let mut rng = substream(11, "add");
    let seq = Seq::new(vec![layer(
        "proj",
        LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 3,
            kernel: 1,
            stride: 1,
            bias: true,
        },
        &mut rng,
    )]);
    let mut frag = projection_for(&seq, &[2, 3, 3, 3], &mut rng);
    frag.residual = true;
    let x = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    out.push(gradient_check(&frag, &x, TOL, &mut rng).unwrap());
}

pub fn quantizers_disabled_are_differentiable(out: &mut Vec<GradReport>) {
    // With quantization off, PaCT is a learnable clamp (checked on the
    // surrogate, including the clip gradient) and the observer is identity.
    let mut rng = substream(12, "pact");
    let mut pact = Layer::<f64>::new("pact", LayerSpec::Pact { bits: 32 }).unwrap();
    pact.params[0].data_mut()[0] = 2.0;
    let seq = Seq::new(vec![
        pact,
        Layer::new(
            "obs",
            LayerSpec::ActQuant {
                bits: 32,
                momentum: 0.1,
            },
        )
        .unwrap(),
    ]);
    let frag = projection_for(&seq, &[2, 2, 3, 3], &mut rng);
    let r = gradient_check_smooth(
        &frag,
        |r: &mut Rng| random_tensor(&[2, 2, 3, 3], -1.0, 3.5, r),
        TOL,
        &mut rng,
        1000,
    )
    .unwrap()
    .expect("smooth point found");
    assert!(r.errors.iter().any(|(n, _)| n == "pact.0"));
    out.push(r);
}

pub fn inverted_residual_block_pieces(out: &mut Vec<GradReport>) {
    let mut rng = substream(13, "block");
    let seq = Seq::new(vec![
        layer(
            "expand",
            LayerSpec::Conv2d {
                in_ch: 4,
                out_ch: 8,
                kernel: 1,
                stride: 1,
                bias: false,
            },
            &mut rng,
        ),
        layer(
            "bn1",
            LayerSpec::BatchNorm {
                channels: 8,
                momentum: 0.1,
                eps: 1e-5,
            },
            &mut rng,
        ),
        layer(
            "dw",
            LayerSpec::DepthwiseConv2d {
                channels: 8,
                kernel: 3,
                stride: 1,
                bias: false,
            },
            &mut rng,
        ),
        layer(
            "project",
            LayerSpec::Conv2d {
                in_ch: 8,
                out_ch: 4,
                kernel: 1,
                stride: 1,
                bias: false,
            },
            &mut rng,
        ),
    ]);
    let mut frag = projection_for(&seq, &[2, 4, 5, 5], &mut rng);
    frag.residual = true;
    let x = random_tensor(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
    out.push(gradient_check(&frag, &x, TOL, &mut rng).unwrap());
}

pub fn full_exit_branch(out: &mut Vec<GradReport>) {
    for attach in [2, 4, 9] {
        let cfg = ModelConfig {
            ee: Some(EEBranchConfig {
                attach_layer: attach,
                ..Default::default()
            }),
            ..Default::default()
        };
        let model = build_model(&cfg, 21).unwrap();
        let mut seq = Seq::new(
            model
                .branch
                .as_ref()
                .unwrap()
                .layers
                .iter()
                .map(Layer::cast)
                .collect(),
        );
        seq.layers
            .push(Layer::new("softmax", LayerSpec::Softmax).unwrap());
        // The branch pools globally, so a small map of the right depth suffices.
        let shape = model.layer_output_shapes().unwrap()[attach].clone();
        let input = [2, shape[1], 4, 4];
        let frag = Fragment {
            seq,
            residual: false,
            objective: nll_of_probabilities(vec![0, 1]),
        };
        let mut rng = substream(attach as u64, "branch");
        let r = gradient_check_smooth(
            &frag,
            |r: &mut Rng| random_tensor(&input, 0.0, 2.0, r),
            TOL,
            &mut rng,
            1000,
        )
        .unwrap()
        .expect("smooth point found");
        out.push(r);
    }
}

type Case = fn(&mut Vec<GradReport>);

/// Every layer kind, a residual block and the exit branch at three depths.
pub const SUITE: &[(&str, Case)] = &[
    ("conv3x3", conv3x3_on_5x5_input),
    ("strided_conv", strided_conv_without_bias),
    ("pointwise_conv", pointwise_conv),
    ("depthwise_conv", depthwise_conv_both_strides),
    ("batchnorm", batchnorm_train_mode),
    ("linear", linear),
    ("global_avg_pool", global_average_pool),
    ("relu6", relu6_away_from_kinks),
    ("softmax_nll", softmax_with_cross_entropy),
    ("residual_add", residual_add),
    (
        "quantizers_disabled",
        quantizers_disabled_are_differentiable,
    ),
    ("inverted_residual", inverted_residual_block_pieces),
    ("exit_branch", full_exit_branch),
];

pub fn run(case: Case) -> Vec<GradReport> {
    let mut out = Vec::new();
    case(&mut out);
    out
}
