use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

use super::GroupPartition;

/// Group-lasso penalty `λ·Σ_g √n^g·‖θ^g‖₂` as a differentiable graph node.
pub fn penalty(g: &mut Graph, partition: &GroupPartition, params: Var, lambda_eff: f64) -> Result<Var> {
    if partition.is_empty() {
        return Err(invalid(format!("{}: empty partition", partition.parameter_id())));
    }
    if !(lambda_eff >= 0.0) {
        return Err(invalid(format!("penalty strength must be non-negative, got {lambda_eff}")));
    }
    if g.value(params).len() != partition.numel() {
        return Err(shape_err(
            "penalty",
            format!("partition covers {} entries, tensor has {}", partition.numel(), g.value(params).len()),
        ));
    }
    let sum = g.group_lasso(params, &partition.weighted_groups())?;
    g.scale(sum, lambda_eff)
}

/// Unscaled `Σ_g √n^g·‖θ^g‖₂` evaluated directly on raw values.
pub fn group_norm_sum(partition: &GroupPartition, data: &[f64]) -> f64 {
    (0..partition.len()).map(|g| partition.weight(g) * partition.group_norm(g, data)).sum()
}

/// Closed-form proximal map of `α·λ·√n^g·‖·‖₂` (block soft-thresholding).
///
/// Groups whose norm is at or below the threshold `α·λ·√n^g` become exactly zero.
pub fn prox_group(values: &[f64], alpha: f64, lambda_eff: f64, n_g: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    shrink(&mut out, norm, alpha * lambda_eff * (n_g as f64).sqrt());
    out
}

fn shrink(values: &mut [f64], norm: f64, threshold: f64) {
    if norm <= threshold {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let scale = 1.0 - threshold / norm;
        values.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Applies the proximal map group by group, in place. Entries outside the
/// partition are left untouched. A zero `lambda_eff` is the identity.
pub fn prox_in_place(data: &mut [f64], alpha: f64, lambda_eff: f64, partition: &GroupPartition) {
    if lambda_eff == 0.0 {
        return;
    }
    let mut buf = Vec::new();
    for (gi, group) in partition.groups().iter().enumerate() {
        buf.clear();
        buf.extend(group.iter().map(|&i| data[i]));
        let norm = partition.group_norm(gi, data);
        shrink(&mut buf, norm, alpha * lambda_eff * partition.weight(gi));
        for (&i, &v) in group.iter().zip(&buf) {
            data[i] = v;
        }
    }
}

/// One proximal-gradient step: `θ ← prox(θ − α·∇)`.
pub fn prox_step(params: &mut Tensor, grad: &[f64], alpha: f64, lambda_eff: f64, partition: &GroupPartition) -> Result<()> {
    if grad.len() != params.numel() || partition.numel() != params.numel() {
        return Err(shape_err(
            "prox_step",
            format!(
                "params {:?}, grad of {} entries, partition over {}",
                params.shape(),
                grad.len(),
                partition.numel()
            ),
        ));
    }
    if !(alpha > 0.0) || !(lambda_eff >= 0.0) {
        return Err(invalid(format!("prox_step needs alpha > 0 and lambda >= 0, got {alpha}, {lambda_eff}")));
    }
    let data = params.data_mut();
    for (p, g) in data.iter_mut().zip(grad) {
        *p -= alpha * g;
    }
    prox_in_place(data, alpha, lambda_eff, partition);
    Ok(())
}
