//! Group partitions, the group-lasso penalty, its proximal operator, masks
//! and sparsity metrics.
//!
//! Only the shared backbone weights are governed. In structured mode every
//! input channel of a conv kernel (every input feature of a dense weight) is
//! one group; in unstructured mode every weight is its own group and the
//! penalty is the plain L1 norm.

mod mask;
mod metrics;
mod partition;
mod prox;

pub use mask::{apply_mask, build_mask, extend_mask, mask_is_subset, mask_sparsity_percent, MaskOutcome, MaskSet, MaskStrategy, MaskTarget};
pub use metrics::{measure, GovernedLayer, LayerKind, SparsityMetrics};
pub use partition::{GroupPartition, SparsityMode};
pub use prox::{group_norm_sum, penalty, prox_group, prox_in_place, prox_step};

use serde::{Deserialize, Serialize};

use crate::autodiff::softplus;

/// One point of a sparsity profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub epoch: usize,
    pub parameter_sparsity_percent: f64,
    pub group_sparsity_percent: f64,
}

/// Penalty strength, active masks and the recorded sparsity profile of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityState {
    /// Unconstrained value behind the effective strength.
    pub lambda_raw: f64,
    /// Softplus temperature.
    pub beta: f64,
    pub masks: MaskSet,
    pub profile: Vec<ProfilePoint>,
}

impl SparsityState {
    pub fn new(lambda_raw: f64, beta: f64) -> Self {
        Self {
            lambda_raw,
            beta,
            masks: MaskSet::new(),
            profile: Vec::new(),
        }
    }

    /// `softplus(lambda_raw; beta)`, always strictly positive.
    pub fn lambda_eff(&self) -> f64 {
        softplus(self.lambda_raw, self.beta)
    }

    pub fn record(&mut self, epoch: usize, metrics: &SparsityMetrics) {
        self.profile.push(ProfilePoint {
            epoch,
            parameter_sparsity_percent: metrics.parameter_sparsity_percent,
            group_sparsity_percent: metrics.group_sparsity_percent,
        });
    }
}
