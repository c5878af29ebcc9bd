use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

use super::{GroupPartition, SparsityMode};

/// Layer geometry needed by the FLOP model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        h_out: usize,
        w_out: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerKind {
    /// Multiply-add count of one forward pass for a single sample, counted as
    /// two FLOPs per multiply-add.
    pub fn flops(&self) -> u64 {
        match *self {
            LayerKind::Conv {
                c_out,
                c_in,
                kh,
                kw,
                h_out,
                w_out,
            } => 2 * (c_out * c_in * kh * kw * h_out * w_out) as u64,
            LayerKind::Dense { inputs, outputs } => 2 * (inputs * outputs) as u64,
        }
    }

    pub fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Conv { c_out, c_in, kh, kw, .. } => c_out * c_in * kh * kw,
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
        }
    }
}

/// One governed weight tensor together with its geometry.
#[derive(Clone, Copy, Debug)]
pub struct GovernedLayer<'a> {
    pub partition: &'a GroupPartition,
    pub data: &'a [f64],
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityMetrics {
    pub parameter_sparsity_percent: f64,
    pub group_sparsity_percent: f64,
    /// `total / nonzero` governed parameters; `None` when nothing is nonzero.
    pub compression_ratio: Option<f64>,
    /// `total / nonzero` FLOPs; `None` when nothing is nonzero.
    pub speed_up: Option<f64>,
    pub total_params: usize,
    pub nonzero_params: usize,
    pub total_groups: usize,
    pub zero_groups: usize,
    pub total_flops: f64,
    pub nonzero_flops: f64,
}

/// Sparsity, compression ratio and speed-up over a set of governed layers.
pub fn measure(layers: &[GovernedLayer<'_>]) -> Result<SparsityMetrics> {
    let mut total_params = 0;
    let mut nonzero_params = 0;
    let mut total_groups = 0;
    let mut zero_groups = 0;
    let mut total_flops = 0.0;
    let mut nonzero_flops = 0.0;
    for l in layers {
        if l.data.len() != l.partition.numel() || l.data.len() != l.kind.weight_count() {
            return Err(shape_err(
                "measure",
                format!(
                    "{}: {} entries, partition over {}, geometry implies {}",
                    l.partition.parameter_id(),
                    l.data.len(),
                    l.partition.numel(),
                    l.kind.weight_count()
                ),
            ));
        }
        let governed = l.partition.governed();
        let nz = l.partition.groups().iter().flatten().filter(|&&i| l.data[i] != 0.0).count();
        let zg = l.partition.zero_groups(l.data).iter().filter(|&&z| z).count();
        total_params += governed;
        nonzero_params += nz;
        total_groups += l.partition.len();
        zero_groups += zg;

        let flops = l.kind.flops() as f64;
        let active = match l.partition.mode() {
            SparsityMode::Structured if !l.partition.is_empty() => (l.partition.len() - zg) as f64 / l.partition.len() as f64,
            _ if governed > 0 => nz as f64 / governed as f64,
            _ => 1.0,
        };
        total_flops += flops;
        nonzero_flops += flops * active;
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(SparsityMetrics {
        parameter_sparsity_percent: pct(total_params - nonzero_params, total_params),
        group_sparsity_percent: pct(zero_groups, total_groups),
        compression_ratio: (nonzero_params > 0).then(|| total_params as f64 / nonzero_params as f64),
        speed_up: (nonzero_flops > 0.0).then(|| total_flops / nonzero_flops),
        total_params,
        nonzero_params,
        total_groups,
        zero_groups,
        total_flops,
        nonzero_flops,
    })
}
