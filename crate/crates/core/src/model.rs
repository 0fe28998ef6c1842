//! Width-scalable inverted-residual backbone with SSD heads and an optional
//! early-exit classification branch.
//!
//! Backbone layers are numbered `1..=total` across five stages; the early-exit
//! branch reads the output of layer `attach_layer`, and each detection head
//! reads the output of its own attachment layer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::layers::{Cache, LayerSpec, BN_EPS, BN_MOMENTUM};
use crate::nn::{Layer, Seq};
use crate::rng;
use crate::tensor::Tensor;

/// Momentum of the min-max range observers inserted for QAT.
pub const OBSERVER_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// `[height, width, channels]`.
    pub input_shape: [usize; 3],
    pub width_multiplier: f64,
    pub stage_layer_counts: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stage_expansion: Vec<usize>,
    pub stem_channels: usize,
    pub stem_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_shape: [96, 128, 1],
            width_multiplier: 0.5,
            stage_layer_counts: vec![1, 2, 3, 4, 3],
            stage_channels: vec![16, 24, 32, 64, 96],
            stage_strides: vec![1, 2, 2, 2, 1],
            stage_expansion: vec![1, 6, 6, 6, 6],
            stem_channels: 32,
            stem_stride: 2,
        }
    }
}

/// Rounds a scaled channel count to a multiple of 8 (at least 8), never
/// going below 90% of the unrounded value.
pub fn round_channels(c: f64) -> usize {
    let mut v = (((c + 4.0) as usize) / 8 * 8).max(8);
    if (v as f64) < 0.9 * c {
        v += 8;
    }
    v
}

impl BackboneConfig {
    pub fn total_layers(&self) -> usize {
        self.stage_layer_counts.iter().sum()
    }

    pub fn scaled(&self, c: usize) -> usize {
        round_channels(c as f64 * self.width_multiplier)
    }

    pub fn stem_out(&self) -> usize {
        self.scaled(self.stem_channels)
    }

    /// Output channels of layer `l` (1-based).
    pub fn layer_channels(&self, l: usize) -> Result<usize> {
        Ok(self.scaled(self.stage_channels[stage_of_layer(l, self)? - 1]))
    }

    /// Layers owned by stage `s` (1-based).
    pub fn layers_of_stage(&self, s: usize) -> Result<Vec<usize>> {
        if s == 0 || s > self.stage_layer_counts.len() {
            return config_err(format!(
                "stage {s} out of range 1..={}",
                self.stage_layer_counts.len()
            ));
        }
        let start: usize = self.stage_layer_counts[..s - 1].iter().sum();
        Ok((start + 1..=start + self.stage_layer_counts[s - 1]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_layer_counts.len();
        if n != 5 {
            return config_err("stage_layer_counts must have 5 entries");
        }
        if [
            &self.stage_channels,
            &self.stage_strides,
            &self.stage_expansion,
        ]
        .iter()
        .any(|v| v.len() != n)
        {
            return config_err("per-stage lists must all have 5 entries");
        }
        if self.stage_layer_counts.contains(&0) || self.stage_expansion.contains(&0) {
            return config_err("stage layer counts and expansion ratios must be positive");
        }
        if self
            .stage_strides
            .iter()
            .chain([&self.stem_stride])
            .any(|&s| s == 0)
        {
            return config_err("strides must be >= 1");
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return config_err("width_multiplier must be positive");
        }
        if self.input_shape.contains(&0) {
            return config_err("input_shape must be positive");
        }
        Ok(())
    }
}

/// Stage (1-based) owning backbone layer `l` under cumulative layer counts.
pub fn stage_of_layer(l: usize, cfg: &BackboneConfig) -> Result<usize> {
    let mut end = 0;
    for (s, &count) in cfg.stage_layer_counts.iter().enumerate() {
        end += count;
        if l >= 1 && l <= end {
            return Ok(s + 1);
        }
    }
    config_err(format!("layer {l} outside 1..={}", cfg.total_layers()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EEBranchConfig {
    pub attach_layer: usize,
    pub mid_channels: usize,
    pub fc_hidden: usize,
    pub num_classes: usize,
}

impl Default for EEBranchConfig {
    fn default() -> Self {
        Self {
            attach_layer: 4,
            mid_channels: 64,
            fc_hidden: 64,
            num_classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub attach_layers: Vec<usize>,
    /// Width of the 3×3 conv preceding each head's predictors; 0 disables it.
    pub tower_channels: usize,
    /// Including background at index 0.
    pub num_classes: usize,
    /// Anchor scales per head, as fractions of the image height.
    pub scales: Vec<Vec<f64>>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            attach_layers: vec![10, 13],
            tower_channels: 64,
            num_classes: 3,
            scales: vec![vec![0.12, 0.2], vec![0.3, 0.45]],
            aspect_ratios: vec![1.0, 2.0, 0.5],
        }
    }
}

impl HeadConfig {
    pub fn anchors_per_cell(&self, head: usize) -> usize {
        self.scales[head].len() * self.aspect_ratios.len()
    }
}

/// Marks a graph rebuilt for quantization-aware training: BatchNorm folded
/// into convolutions, clipping activations replaced by PaCT, and range
/// observers on every other tensor that reaches integer arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantGraphConfig {
    pub bits: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub ee: Option<EEBranchConfig>,
    #[serde(default)]
    pub heads: HeadConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantGraphConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let total = self.backbone.total_layers();
        if let Some(ee) = &self.ee {
            if ee.attach_layer == 0 || ee.attach_layer > total {
                return config_err(format!(
                    "EE attach layer {} outside 1..={total}",
                    ee.attach_layer
                ));
            }
            if ee.num_classes != 2 {
                return config_err("EE branch must have exactly 2 classes");
            }
            if ee.mid_channels == 0 || ee.fc_hidden == 0 {
                return config_err("EE branch widths must be positive");
            }
        }
        let h = &self.heads;
        if h.attach_layers.is_empty() || h.attach_layers.len() != h.scales.len() {
            return config_err("heads need one scale list per attachment layer");
        }
        if h.attach_layers.iter().any(|&l| l == 0 || l > total) {
            return config_err("head attachment layer out of range");
        }
        if h.scales.iter().any(|s| s.is_empty()) || h.aspect_ratios.is_empty() {
            return config_err("empty anchor scale or ratio list");
        }
        if h.num_classes < 2 {
            return config_err("heads need background plus at least one class");
        }
        Ok(())
    }

    /// `[1, C, H, W]` for one image.
    pub fn input_dims(&self) -> [usize; 4] {
        let [h, w, c] = self.backbone.input_shape;
        [1, c, h, w]
    }
}

/// Whether parameters belong to the early-exit branch (own learning rate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    Branch,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub seq: Seq,
    pub residual: bool,
    /// Applied after the residual add (range observer in QAT graphs).
    pub post: Seq,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.seq.forward(x)?;
        if !self.residual {
            return Ok(y);
        }
        self.post.forward(&add(&y, x)?)
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            layer: "Add".into(),
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Head {
    pub attach_layer: usize,
    pub anchors_per_cell: usize,
    pub tower: Seq,
    pub cls: Seq,
    pub loc: Seq,
}

/// Per-anchor predictions: class logits `[N, A, K]` and box offsets `[N, A, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdOutputs {
    pub cls_logits: Tensor,
    pub box_offsets: Tensor,
}

impl SsdOutputs {
    pub fn num_anchors(&self) -> usize {
        self.cls_logits.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.cls_logits.shape()[2]
    }

    /// Row `i` of the batch as single-image outputs.
    pub fn image(&self, i: usize) -> SsdOutputs {
        SsdOutputs {
            cls_logits: self.cls_logits.slice_batch(i, i + 1),
            box_offsets: self.box_offsets.slice_batch(i, i + 1),
        }
    }
}

/// Per-component evaluation counts (in images) since the last reset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EvalCounts {
    pub stem: u64,
    /// Index `l - 1` counts evaluations of backbone layer `l`.
    pub layers: Vec<u64>,
    pub branch: u64,
    pub heads: u64,
}

#[derive(Debug, Default)]
struct Counters {
    stem: AtomicU64,
    layers: Vec<AtomicU64>,
    branch: AtomicU64,
    heads: AtomicU64,
}

impl Counters {
    fn new(n: usize) -> Self {
        Self {
            layers: (0..n).map(|_| AtomicU64::new(0)).collect(),
            ..Default::default()
        }
    }
}

/// Backbone activations up to and including layer `layer`, plus any head
/// features already produced, so the rest of the network can resume.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub layer: usize,
    pub features: Tensor,
    taps: Vec<(usize, Tensor)>,
}

#[derive(Debug)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub stem: Seq,
    pub blocks: Vec<Block>,
    pub branch: Option<Seq>,
    pub heads: Vec<Head>,
    counters: Counters,
}

impl Clone for ModelGraph {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            branch: self.branch.clone(),
            heads: self.heads.clone(),
            counters: Counters::new(self.blocks.len()),
        }
    }
}

/// What follows a convolution in the layer plan.
#[derive(Clone, Copy, PartialEq)]
enum Post {
    /// BatchNorm then ReLU6.
    BnRelu,
    /// BatchNorm only (linear bottleneck).
    Bn,
    /// Nothing (biased predictor).
    None,
}

struct Builder {
    bits: Option<u32>,
}

impl Builder {
    fn layer(&self, name: String, spec: LayerSpec) -> Result<Layer> {
        let mut l = Layer::new(name, spec)?;
        if let Some(b) = self.bits {
            if l.has_weight() {
                l.weight_bits = b;
            }
        }
        Ok(l)
    }

    fn observer(&self, name: &str) -> Result<Vec<Layer>> {
        Ok(match self.bits {
            Some(bits) => vec![self.layer(
                format!("{name}.q"),
                LayerSpec::ActQuant {
                    bits,
                    momentum: OBSERVER_MOMENTUM,
                },
            )?],
            None => vec![],
        })
    }

    fn relu(&self, name: &str) -> Result<Layer> {
        match self.bits {
            Some(bits) => self.layer(format!("{name}.act"), LayerSpec::Pact { bits }),
            None => self.layer(format!("{name}.act"), LayerSpec::Relu6),
        }
    }

    /// Convolution (regular or depthwise) with its post-processing. In QAT
    /// graphs BatchNorm is folded, so the convolution carries a bias.
    fn conv(
        &self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
        post: Post,
    ) -> Result<Vec<Layer>> {
        let folded = self.bits.is_some();
        let bias = post == Post::None || folded;
        let spec = if depthwise {
            LayerSpec::DepthwiseConv2d {
                channels: in_ch,
                kernel,
                stride,
                bias,
            }
        } else {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                bias,
            }
        };
        let mut v = vec![self.layer(format!("{name}.conv"), spec)?];
        if post != Post::None && !folded {
            v.push(self.layer(
                format!("{name}.bn"),
                LayerSpec::BatchNorm {
                    channels: out_ch,
                    momentum: BN_MOMENTUM,
                    eps: BN_EPS,
                },
            )?);
        }
        match post {
            Post::BnRelu => v.push(self.relu(name)?),
            Post::Bn | Post::None => v.extend(self.observer(name)?),
        }
        Ok(v)
    }
}

/// Builds the graph and initializes every layer from a stream keyed by the
/// layer name, so adding or removing the branch leaves the rest unchanged.
pub fn build_model(config: &ModelConfig, init_seed: u64) -> Result<ModelGraph> {
    let mut m = build_uninit(config)?;
    m.for_each_layer_mut(|l, _| init_layer(l, init_seed));
    Ok(m)
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
fn init_layer(l: &mut Layer, seed: u64) {
    let fan_in = match l.spec {
        LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
        LayerSpec::DepthwiseConv2d { kernel, .. } => kernel * kernel,
        LayerSpec::Linear { in_features, .. } => in_features,
        _ => return,
    };
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut r = rng::substream(seed, &l.name);
    for v in l.params[0].data_mut() {
        *v = r.random_range(-bound..bound) as f32;
    }
}

/// Builds the layer structure with neutral parameters.
pub fn build_uninit(config: &ModelConfig) -> Result<ModelGraph> {
    config.validate()?;
    let bb = &config.backbone;
    let b = Builder {
        bits: config.quant.as_ref().map(|q| q.bits),
    };
    let [_, _, in_c] = bb.input_shape;
    let stem = Seq::new(b.conv(
        "stem",
        in_c,
        bb.stem_out(),
        3,
        bb.stem_stride,
        false,
        Post::BnRelu,
    )?);

    let mut blocks = Vec::new();
    let mut cin = bb.stem_out();
    let mut l = 0;
    for s in 0..5 {
        let cout = bb.scaled(bb.stage_channels[s]);
        for i in 0..bb.stage_layer_counts[s] {
            l += 1;
            let stride = if i == 0 { bb.stage_strides[s] } else { 1 };
            let t = bb.stage_expansion[s];
            let hidden = cin * t;
            let name = format!("block{l}");
            let mut layers = Vec::new();
            if t != 1 {
                layers.extend(b.conv(
                    &format!("{name}.expand"),
                    cin,
                    hidden,
                    1,
                    1,
                    false,
                    Post::BnRelu,
                )?);
            }
            layers.extend(b.conv(
                &format!("{name}.dw"),
                hidden,
                hidden,
                3,
                stride,
                true,
                Post::BnRelu,
            )?);
            layers.extend(b.conv(
                &format!("{name}.project"),
                hidden,
                cout,
                1,
                1,
                false,
                Post::Bn,
            )?);
            let residual = stride == 1 && cin == cout;
            let post = if residual {
                Seq::new(b.observer(&format!("{name}.add"))?)
            } else {
                Seq::default()
            };
            blocks.push(Block {
                seq: Seq::new(layers),
                residual,
                post,
            });
            cin = cout;
        }
    }

    let branch = match &config.ee {
        Some(ee) => {
            let c = bb.layer_channels(ee.attach_layer)?;
            let mut v = b.conv("ee.conv1", c, c, 3, 1, false, Post::BnRelu)?;
            v.extend(b.conv("ee.conv2", c, ee.mid_channels, 3, 2, false, Post::BnRelu)?);
            v.push(b.layer("ee.gap".into(), LayerSpec::GlobalAvgPool)?);
            v.extend(b.observer("ee.gap")?);
            v.push(b.layer(
                "ee.fc1".into(),
                LayerSpec::Linear {
                    in_features: ee.mid_channels,
                    out_features: ee.fc_hidden,
                },
            )?);
            v.push(b.relu("ee.fc1")?);
            v.push(b.layer(
                "ee.fc2".into(),
                LayerSpec::Linear {
                    in_features: ee.fc_hidden,
                    out_features: ee.num_classes,
                },
            )?);
            v.extend(b.observer("ee.fc2")?);
            Some(Seq::new(v))
        }
        None => None,
    };

    let hc = &config.heads;
    let mut heads = Vec::new();
    for (i, &al) in hc.attach_layers.iter().enumerate() {
        let c = bb.layer_channels(al)?;
        let a = hc.anchors_per_cell(i);
        let name = format!("head{}", i + 1);
        let (tower, tc) = if hc.tower_channels > 0 {
            (
                Seq::new(b.conv(
                    &format!("{name}.tower"),
                    c,
                    hc.tower_channels,
                    3,
                    1,
                    false,
                    Post::BnRelu,
                )?),
                hc.tower_channels,
            )
        } else {
            (Seq::default(), c)
        };
        heads.push(Head {
            attach_layer: al,
            anchors_per_cell: a,
            tower,
            cls: Seq::new(b.conv(
                &format!("{name}.cls"),
                tc,
                a * hc.num_classes,
                3,
                1,
                false,
                Post::None,
            )?),
            loc: Seq::new(b.conv(&format!("{name}.loc"), tc, a * 4, 3, 1, false, Post::None)?),
        });
    }

    let total = blocks.len();
    let m = ModelGraph {
        config: config.clone(),
        stem,
        blocks,
        branch,
        heads,
        counters: Counters::new(total),
    };
    m.check_shapes()?;
    Ok(m)
}

/// Reorders a head map `[N, A·D, H, W]` into per-anchor rows `[N, H·W·A, D]`.
pub(crate) fn to_anchor_rows(t: &Tensor, a: usize, d: usize) -> Vec<Vec<f32>> {
    let (n, _, h, w) = t.dims4();
    let hw = h * w;
    (0..n)
        .map(|i| {
            let src = t.item(i);
            let mut out = vec![0.0; hw * a * d];
            for ai in 0..a {
                for di in 0..d {
                    let plane = &src[(ai * d + di) * hw..][..hw];
                    for (p, &v) in plane.iter().enumerate() {
                        out[(p * a + ai) * d + di] = v;
                    }
                }
            }
            out
        })
        .collect()
}

/// Inverse of [`to_anchor_rows`] for one head's slice of a gradient.
fn from_anchor_rows(rows: &Tensor, offset: usize, shape: &[usize], a: usize, d: usize) -> Tensor {
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let hw = h * w;
    let total = rows.shape()[1];
    let mut out = vec![0.0; n * a * d * hw];
    for i in 0..n {
        let src = &rows.data()[(i * total + offset) * d..][..hw * a * d];
        let dst = &mut out[i * a * d * hw..][..a * d * hw];
        for p in 0..hw {
            for ai in 0..a {
                for di in 0..d {
                    dst[(ai * d + di) * hw + p] = src[(p * a + ai) * d + di];
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("head map shape")
}

pub(crate) fn concat_rows(per_head: Vec<Vec<Vec<f32>>>, n: usize, d: usize) -> Tensor {
    let anchors: usize = per_head.iter().map(|h| h[0].len() / d).sum();
    let mut data = Vec::with_capacity(n * anchors * d);
    for i in 0..n {
        for head in &per_head {
            data.extend_from_slice(&head[i]);
        }
    }
    Tensor::new(vec![n, anchors, d], data).expect("anchor rows")
}

/// Caches of one training-mode pass.
pub struct TrainState {
    stem: Vec<Cache<f32>>,
    blocks: Vec<(Vec<Cache<f32>>, Vec<Cache<f32>>)>,
    branch: Option<Vec<Cache<f32>>>,
    heads: Vec<HeadCaches>,
    input_shape: Vec<usize>,
}

struct HeadCaches {
    tower: Vec<Cache<f32>>,
    cls: Vec<Cache<f32>>,
    loc: Vec<Cache<f32>>,
    map_shape_cls: Vec<usize>,
    map_shape_loc: Vec<usize>,
    feature_shape: Vec<usize>,
}

impl ModelGraph {
    pub fn total_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn attach_layer(&self) -> Option<usize> {
        self.config.ee.as_ref().map(|e| e.attach_layer)
    }

    pub fn num_anchors(&self) -> usize {
        self.head_feature_shapes()
            .iter()
            .zip(&self.heads)
            .map(|(s, h)| s.0 * s.1 * h.anchors_per_cell)
            .sum()
    }

    /// `(H_f, W_f)` of each head's feature map for a single image.
    pub fn head_feature_shapes(&self) -> Vec<(usize, usize)> {
        let shapes = self.layer_output_shapes().expect("validated at build");
        self.heads
            .iter()
            .map(|h| {
                let s = &shapes[h.attach_layer];
                (s[2], s[3])
            })
            .collect()
    }

    /// Output shape of the stem (index 0) and of every layer, for one image.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut s = self.stem.output_shape(&self.config.input_dims())?;
        let mut out = vec![s.clone()];
        for b in &self.blocks {
            s = b.seq.output_shape(&s)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let shapes = self.layer_output_shapes()?;
        if let (Some(b), Some(l)) = (&self.branch, self.attach_layer()) {
            b.output_shape(&shapes[l])?;
        }
        for h in &self.heads {
            let t = h.tower.output_shape(&shapes[h.attach_layer])?;
            h.cls.output_shape(&t)?;
            h.loc.output_shape(&t)?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = self.config.input_dims();
        let s = x.shape();
        if s.len() != 4 || s[1..] != d[1..] {
            return Err(Error::Shape {
                layer: "input".into(),
                expected: d.to_vec(),
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Every layer in declared order with its parameter group.
    pub fn layers(&self) -> Vec<(&Layer, ParamGroup)> {
        let main = ParamGroup::Main;
        let mut v: Vec<(&Layer, ParamGroup)> = self.stem.layers.iter().map(|l| (l, main)).collect();
        for b in &self.blocks {
            v.extend(b.seq.layers.iter().chain(&b.post.layers).map(|l| (l, main)));
        }
        if let Some(br) = &self.branch {
            v.extend(br.layers.iter().map(|l| (l, ParamGroup::Branch)));
        }
        for h in &self.heads {
            v.extend(
                h.tower
                    .layers
                    .iter()
                    .chain(&h.cls.layers)
                    .chain(&h.loc.layers)
                    .map(|l| (l, main)),
            );
        }
        v
    }

    pub fn for_each_layer_mut(&mut self, mut f: impl FnMut(&mut Layer, ParamGroup)) {
        let main = ParamGroup::Main;
        self.stem.layers.iter_mut().for_each(|l| f(l, main));
        for b in &mut self.blocks {
            b.seq
                .layers
                .iter_mut()
                .chain(&mut b.post.layers)
                .for_each(|l| f(l, main));
        }
        if let Some(br) = &mut self.branch {
            br.layers.iter_mut().for_each(|l| f(l, ParamGroup::Branch));
        }
        for h in &mut self.heads {
            h.tower
                .layers
                .iter_mut()
                .chain(&mut h.cls.layers)
                .chain(&mut h.loc.layers)
                .for_each(|l| f(l, main));
        }
    }

    pub fn find_layer(&self, name: &str) -> Option<&Layer> {
        self.layers()
            .into_iter()
            .map(|l| l.0)
            .find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.0.param_count()).sum()
    }

    pub fn branch_param_count(&self) -> usize {
        self.branch.as_ref().map_or(0, Seq::param_count)
    }

    pub fn zero_grad(&mut self) {
        self.for_each_layer_mut(|l, _| l.params.iter_mut().for_each(Tensor::zero_grad));
    }

    pub fn counts(&self) -> EvalCounts {
        let c = &self.counters;
        EvalCounts {
            stem: c.stem.load(Ordering::Relaxed),
            layers: c.layers.iter().map(|a| a.load(Ordering::Relaxed)).collect(),
            branch: c.branch.load(Ordering::Relaxed),
            heads: c.heads.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        let c = &self.counters;
        c.stem.store(0, Ordering::Relaxed);
        c.layers.iter().for_each(|a| a.store(0, Ordering::Relaxed));
        c.branch.store(0, Ordering::Relaxed);
        c.heads.store(0, Ordering::Relaxed);
    }

    /// Runs the stem and layers `1..=layer`.
    pub fn forward_prefix(&self, x: &Tensor, layer: usize) -> Result<Prefix> {
        self.check_input(x)?;
        if layer > self.total_layers() {
            return config_err(format!("layer {layer} outside 0..={}", self.total_layers()));
        }
        let n = x.shape()[0] as u64;
        self.counters.stem.fetch_add(n, Ordering::Relaxed);
        let mut y = self.stem.forward(x)?;
        let mut taps = Vec::new();
        for l in 1..=layer {
            self.counters.layers[l - 1].fetch_add(n, Ordering::Relaxed);
            y = self.blocks[l - 1].forward(&y)?;
            if self.heads.iter().any(|h| h.attach_layer == l) {
                taps.push((l, y.clone()));
            }
        }
        Ok(Prefix {
            layer,
            features: y,
            taps,
        })
    }

    /// Backbone activation at layer `layer` (0 is the stem output).
    pub fn forward_to_layer(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        Ok(self.forward_prefix(x, layer)?.features)
    }

    /// Continues a prefix through the remaining layers and the heads.
    pub fn resume(&self, prefix: Prefix) -> Result<SsdOutputs> {
        let n = prefix.features.shape()[0] as u64;
        let mut taps = prefix.taps;
        let mut y = prefix.features;
        for l in prefix.layer + 1..=self.total_layers() {
            self.counters.layers[l - 1].fetch_add(n, Ordering::Relaxed);
            y = self.blocks[l - 1].forward(&y)?;
            if self.heads.iter().any(|h| h.attach_layer == l) {
                taps.push((l, y.clone()));
            }
        }
        self.counters.heads.fetch_add(n, Ordering::Relaxed);
        self.run_heads(&taps)
    }

    fn run_heads(&self, taps: &[(usize, Tensor)]) -> Result<SsdOutputs> {
        let k = self.config.heads.num_classes;
        let mut cls = Vec::new();
        let mut loc = Vec::new();
        let mut n = 0;
        for h in &self.heads {
            let feat = &taps
                .iter()
                .find(|t| t.0 == h.attach_layer)
                .expect("head feature captured")
                .1;
            n = feat.shape()[0];
            let t = h.tower.forward(feat)?;
            cls.push(to_anchor_rows(&h.cls.forward(&t)?, h.anchors_per_cell, k));
            loc.push(to_anchor_rows(&h.loc.forward(&t)?, h.anchors_per_cell, 4));
        }
        Ok(SsdOutputs {
            cls_logits: concat_rows(cls, n, k),
            box_offsets: concat_rows(loc, n, 4),
        })
    }

    /// EE logits `[N, 2]` from the activation at the attachment layer.
    pub fn branch_logits(&self, features: &Tensor) -> Result<Tensor> {
        let br = self
            .branch
            .as_ref()
            .ok_or_else(|| Error::Config("model has no early-exit branch".into()))?;
        self.counters
            .branch
            .fetch_add(features.shape()[0] as u64, Ordering::Relaxed);
        br.forward(features)
    }

    /// Full pipeline: detection outputs and, when configured, EE logits.
    pub fn forward_full(&self, x: &Tensor) -> Result<(SsdOutputs, Option<Tensor>)> {
        match self.attach_layer() {
            Some(l) => {
                let p = self.forward_prefix(x, l)?;
                let logits = self.branch_logits(&p.features)?;
                Ok((self.resume(p)?, Some(logits)))
            }
            None => Ok((self.resume(self.forward_prefix(x, 0)?)?, None)),
        }
    }

    /// Stem output followed by every layer output.
    pub fn trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut y = self.stem.forward(x)?;
        let mut out = vec![y.clone()];
        for b in &self.blocks {
            y = b.forward(&y)?;
            out.push(y.clone());
        }
        Ok(out)
    }

    /// Training-mode forward retaining every cache.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
    ) -> Result<(SsdOutputs, Option<Tensor>, TrainState)> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let k = self.config.heads.num_classes;
        let (mut y, stem) = self.stem.forward_train(x)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut taps: Vec<(usize, Tensor)> = Vec::new();
        let attach = self.attach_layer();
        let mut branch_in = None;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let l = i + 1;
            let (out, c) = b.seq.forward_train(&y)?;
            let (out, pc) = if b.residual {
                b.post.forward_train(&add(&out, &y)?)?
            } else {
                (out, vec![])
            };
            block_caches.push((c, pc));
            y = out;
            if attach == Some(l) {
                branch_in = Some(y.clone());
            }
            if self.heads.iter().any(|h| h.attach_layer == l) {
                taps.push((l, y.clone()));
            }
        }
        let (logits, branch) = match (&mut self.branch, branch_in) {
            (Some(br), Some(f)) => {
                let (lg, c) = br.forward_train(&f)?;
                (Some(lg), Some(c))
            }
            _ => (None, None),
        };
        let mut heads = Vec::new();
        let mut cls_rows = Vec::new();
        let mut loc_rows = Vec::new();
        for h in &mut self.heads {
            let feat = &taps.iter().find(|t| t.0 == h.attach_layer).expect("tap").1;
            let (t, tower) = h.tower.forward_train(feat)?;
            let (cm, cls) = h.cls.forward_train(&t)?;
            let (lm, loc) = h.loc.forward_train(&t)?;
            cls_rows.push(to_anchor_rows(&cm, h.anchors_per_cell, k));
            loc_rows.push(to_anchor_rows(&lm, h.anchors_per_cell, 4));
            heads.push(HeadCaches {
                tower,
                cls,
                loc,
                map_shape_cls: cm.shape().to_vec(),
                map_shape_loc: lm.shape().to_vec(),
                feature_shape: feat.shape().to_vec(),
            });
        }
        let out = SsdOutputs {
            cls_logits: concat_rows(cls_rows, n, k),
            box_offsets: concat_rows(loc_rows, n, 4),
        };
        let state = TrainState {
            stem,
            blocks: block_caches,
            branch,
            heads,
            input_shape: x.shape().to_vec(),
        };
        Ok((out, logits, state))
    }

    /// Accumulates parameter gradients from output gradients.
    pub fn backward(
        &mut self,
        state: TrainState,
        d_cls: &Tensor,
        d_loc: &Tensor,
        d_ee: Option<&Tensor>,
    ) -> Result<()> {
        let k = self.config.heads.num_classes;
        let mut tap_grads: Vec<(usize, Tensor)> = Vec::new();
        let mut offset = 0;
        for (h, hc) in self.heads.iter_mut().zip(&state.heads) {
            let a = h.anchors_per_cell;
            let dcm = from_anchor_rows(d_cls, offset, &hc.map_shape_cls, a, k);
            let dlm = from_anchor_rows(d_loc, offset, &hc.map_shape_loc, a, 4);
            offset += hc.map_shape_cls[2] * hc.map_shape_cls[3] * a;
            let mut dt = h.cls.backward(&hc.cls, &dcm)?;
            let dt2 = h.loc.backward(&hc.loc, &dlm)?;
            accumulate(&mut dt, &dt2);
            let df = h.tower.backward(&hc.tower, &dt)?;
            debug_assert_eq!(df.shape(), &hc.feature_shape[..]);
            match tap_grads.iter_mut().find(|t| t.0 == h.attach_layer) {
                Some(t) => accumulate(&mut t.1, &df),
                None => tap_grads.push((h.attach_layer, df)),
            }
        }
        if let (Some(br), Some(bc), Some(g), Some(l)) = (
            &mut self.branch,
            &state.branch,
            d_ee,
            self.config.ee.as_ref().map(|e| e.attach_layer),
        ) {
            let df = br.backward(bc, g)?;
            match tap_grads.iter_mut().find(|t| t.0 == l) {
                Some(t) => accumulate(&mut t.1, &df),
                None => tap_grads.push((l, df)),
            }
        }
        let mut g: Option<Tensor> = None;
        for (i, (b, (c, pc))) in self.blocks.iter_mut().zip(&state.blocks).enumerate().rev() {
            let l = i + 1;
            if let Some(pos) = tap_grads.iter().position(|t| t.0 == l) {
                let tg = tap_grads.swap_remove(pos).1;
                match &mut g {
                    Some(gg) => accumulate(gg, &tg),
                    None => g = Some(tg),
                }
            }
            let Some(gy) = g.take() else {
                continue;
            };
            let gy = if b.residual {
                b.post.backward(pc, &gy)?
            } else {
                gy
            };
            let mut gx = b.seq.backward(c, &gy)?;
            if b.residual {
                accumulate(&mut gx, &gy);
            }
            g = Some(gx);
        }
        if let Some(g) = g {
            let dx = self.stem.backward(&state.stem, &g)?;
            debug_assert_eq!(dx.shape(), &state.input_shape[..]);
        }
        Ok(())
    }
}

fn accumulate(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += *y;
    }
}
