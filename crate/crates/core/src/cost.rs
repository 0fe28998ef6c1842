//! Analytic MAC and parameter accounting, early-exit path costs, and a
//! cycles-per-MAC latency model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::ModelGraph;
use crate::nn::Seq;

/// Which execution path a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Stem,
    Backbone,
    Branch,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub section: Section,
    /// Backbone layer index (0 for the stem); `None` outside the backbone.
    pub layer: Option<usize>,
    pub macs: u64,
    pub ops: u64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    /// Stem (index 0) plus each backbone layer.
    pub backbone_macs: Vec<u64>,
    pub branch_macs: u64,
    pub head_macs: u64,
    /// Backbone and heads only.
    pub mac_static: u64,
    /// Static cost plus the branch.
    pub mac_full: u64,
    /// Stem, layers up to the attachment point, and the branch.
    pub mac_ee: Option<u64>,
    /// `1 - mac_ee / mac_full`.
    pub savings: Option<f64>,
    pub params_total: usize,
    pub branch_params: usize,
}

fn seq_costs(
    seq: &Seq,
    input: &[usize],
    section: Section,
    layer: Option<usize>,
    out: &mut Vec<LayerCost>,
) -> Result<Vec<usize>> {
    let mut s = input.to_vec();
    for l in &seq.layers {
        out.push(LayerCost {
            name: l.name.clone(),
            section,
            layer,
            macs: l.spec.macs(&s)?,
            ops: l.spec.elementwise_ops(&s)?,
            params: l.param_count(),
        });
        s = l.spec.output_shape(&s)?;
    }
    Ok(s)
}

/// Per-layer costs of one single-image forward pass.
pub fn count_macs(model: &ModelGraph) -> Result<CostReport> {
    let mut layers = Vec::new();
    let mut shape = seq_costs(
        &model.stem,
        &model.config.input_dims(),
        Section::Stem,
        Some(0),
        &mut layers,
    )?;
    let mut outputs = vec![shape.clone()];
    for (i, b) in model.blocks.iter().enumerate() {
        let l = i + 1;
        shape = seq_costs(&b.seq, &shape, Section::Backbone, Some(l), &mut layers)?;
        if b.residual {
            layers.push(LayerCost {
                name: format!("block{l}.add"),
                section: Section::Backbone,
                layer: Some(l),
                macs: 0,
                ops: shape.iter().product::<usize>() as u64,
                params: 0,
            });
            shape = seq_costs(&b.post, &shape, Section::Backbone, Some(l), &mut layers)?;
        }
        outputs.push(shape.clone());
    }
    if let (Some(br), Some(l)) = (&model.branch, model.attach_layer()) {
        seq_costs(br, &outputs[l], Section::Branch, None, &mut layers)?;
    }
    for h in &model.heads {
        let t = seq_costs(
            &h.tower,
            &outputs[h.attach_layer],
            Section::Head,
            None,
            &mut layers,
        )?;
        seq_costs(&h.cls, &t, Section::Head, None, &mut layers)?;
        seq_costs(&h.loc, &t, Section::Head, None, &mut layers)?;
    }
    let mut backbone_macs = vec![0u64; model.total_layers() + 1];
    let (mut branch_macs, mut head_macs) = (0, 0);
    for c in &layers {
        match (c.section, c.layer) {
            (Section::Branch, _) => branch_macs += c.macs,
            (Section::Head, _) => head_macs += c.macs,
            (_, Some(l)) => backbone_macs[l] += c.macs,
            _ => {}
        }
    }
    let backbone: u64 = backbone_macs.iter().sum();
    let mac_static = backbone + head_macs;
    let mac_full = mac_static + branch_macs;
    let mac_ee = model
        .attach_layer()
        .map(|l| backbone_macs[..=l].iter().sum::<u64>() + branch_macs);
    Ok(CostReport {
        savings: mac_ee.map(|e| savings(mac_full as f64, e as f64)),
        params_total: layers.iter().map(|c| c.params).sum(),
        branch_params: model.branch_param_count(),
        layers,
        backbone_macs,
        branch_macs,
        head_macs,
        mac_static,
        mac_full,
        mac_ee,
    })
}

impl CostReport {
    /// Stem plus layers `1..=l`.
    pub fn prefix_macs(&self, l: usize) -> u64 {
        self.backbone_macs[..=l.min(self.backbone_macs.len() - 1)]
            .iter()
            .sum()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["name", "section", "layer", "macs", "ops", "params"])
            .map_err(csv_err)?;
        for c in &self.layers {
            let section = serde_json::to_value(c.section)?;
            wr.write_record([
                c.name.clone(),
                section.as_str().unwrap_or_default().to_string(),
                c.layer.map(|l| l.to_string()).unwrap_or_default(),
                c.macs.to_string(),
                c.ops.to_string(),
                c.params.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("csv: {e}"))
}

/// Expected cost per image when a fraction `skip_rate` takes the exit.
pub fn average_macs(mac_full: f64, mac_ee: f64, skip_rate: f64) -> f64 {
    skip_rate * mac_ee + (1.0 - skip_rate) * mac_full
}

/// `1 - mac_ee / mac_full`; negative when the exit path costs more.
pub fn savings(mac_full: f64, mac_ee: f64) -> f64 {
    1.0 - mac_ee / mac_full
}

/// Whether the gated model costs more per image, on average, than the
/// static model it replaces (an exit placed too early).
pub fn exceeds_static(mac_avg: f64, mac_static: f64) -> bool {
    mac_avg > mac_static
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub clock_hz: f64,
    /// Sustained MACs per cycle.
    pub efficiency: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            clock_hz: 160e6,
            efficiency: 1.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.clock_hz > 0.0 && self.efficiency > 0.0) {
            return config_err("latency model needs positive clock and efficiency");
        }
        Ok(())
    }
}

/// `(seconds, frames per second)` for `macs` operations.
pub fn estimate_latency(macs: f64, m: &LatencyModel) -> (f64, f64) {
    let s = macs / (m.efficiency * m.clock_hz);
    (s, 1.0 / s)
}

/// Throughput over a set of frames: reciprocal of the mean latency.
pub fn average_fps(latencies: &[f64]) -> f64 {
    let mean = latencies.iter().sum::<f64>() / latencies.len() as f64;
    1.0 / mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub latency_model: LatencyModel,
    pub mac_avg: f64,
    pub latency_full_s: f64,
    pub latency_ee_s: Option<f64>,
    pub latency_avg_s: f64,
    pub fps_avg: f64,
}

/// Latency summary for a run with the given skip rate.
pub fn latency_report(cost: &CostReport, skip_rate: f64, m: &LatencyModel) -> LatencyReport {
    let full = cost.mac_full as f64;
    let (lat_full, _) = estimate_latency(full, m);
    let lat_ee = cost.mac_ee.map(|e| estimate_latency(e as f64, m).0);
    let mac_avg = cost
        .mac_ee
        .map_or(full, |e| average_macs(full, e as f64, skip_rate));
    let lat_avg = skip_rate * lat_ee.unwrap_or(lat_full) + (1.0 - skip_rate) * lat_full;
    LatencyReport {
        latency_model: *m,
        mac_avg,
        latency_full_s: lat_full,
        latency_ee_s: lat_ee,
        latency_avg_s: lat_avg,
        fps_avg: 1.0 / lat_avg,
    }
}
