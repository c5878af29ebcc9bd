use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How a governed weight tensor is split into groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// One group per input channel of a conv weight (per input feature of a dense weight).
    #[default]
    Structured,
    /// One group per weight; the group lasso reduces to the plain L1 penalty.
    Unstructured,
}

impl std::fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SparsityMode::Structured => "structured",
            SparsityMode::Unstructured => "unstructured",
        })
    }
}

/// Disjoint groups of entries of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    parameter_id: String,
    numel: usize,
    groups: Vec<Vec<usize>>,
    mode: SparsityMode,
}

impl GroupPartition {
    pub fn new(parameter_id: impl Into<String>, numel: usize, groups: Vec<Vec<usize>>, mode: SparsityMode) -> Result<Self> {
        let parameter_id = parameter_id.into();
        let mut seen = vec![false; numel];
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(invalid(format!("{parameter_id}: group {gi} is empty")));
            }
            match mode {
                SparsityMode::Structured if g.len() < 2 => {
                    return Err(invalid(format!("{parameter_id}: structured group {gi} has a single entry")))
                }
                SparsityMode::Unstructured if g.len() != 1 => {
                    return Err(invalid(format!("{parameter_id}: unstructured group {gi} is not a singleton")))
                }
                _ => {}
            }
            for &i in g {
                if i >= numel {
                    return Err(invalid(format!("{parameter_id}: index {i} out of range ({numel} entries)")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(invalid(format!("{parameter_id}: entry {i} appears in two groups")));
                }
            }
        }
        Ok(Self {
            parameter_id,
            numel,
            groups,
            mode,
        })
    }

    /// Channel groups `θ[:, c, :, :]` of a `[c_out, c_in, kh, kw]` kernel.
    pub fn conv_channels(parameter_id: impl Into<String>, shape: &[usize]) -> Result<Self> {
        let [c_out, c_in, kh, kw] = *shape else {
            return Err(invalid(format!("conv kernel must be 4-d, got {shape:?}")));
        };
        let per = kh * kw;
        let groups = (0..c_in)
            .map(|c| {
                (0..c_out)
                    .flat_map(|o| {
                        let base = (o * c_in + c) * per;
                        base..base + per
                    })
                    .collect()
            })
            .collect();
        Self::new(parameter_id, c_out * c_in * per, groups, SparsityMode::Structured)
    }

    /// Input-feature groups of a dense `[inputs, outputs]` weight: every
    /// weight leaving input feature `i` forms one group.
    pub fn dense_inputs(parameter_id: impl Into<String>, inputs: usize, outputs: usize) -> Result<Self> {
        let groups = (0..inputs).map(|i| (i * outputs..(i + 1) * outputs).collect()).collect();
        Self::new(parameter_id, inputs * outputs, groups, SparsityMode::Structured)
    }

    pub fn singletons(parameter_id: impl Into<String>, numel: usize) -> Result<Self> {
        Self::new(parameter_id, numel, (0..numel).map(|i| vec![i]).collect(), SparsityMode::Unstructured)
    }

    /// Partition for a weight of the given shape (4-d conv or 2-d dense).
    pub fn for_weight(parameter_id: impl Into<String>, shape: &[usize], mode: SparsityMode) -> Result<Self> {
        match mode {
            SparsityMode::Unstructured => Self::singletons(parameter_id, shape.iter().product()),
            SparsityMode::Structured => match shape.len() {
                4 => Self::conv_channels(parameter_id, shape),
                2 => Self::dense_inputs(parameter_id, shape[0], shape[1]),
                _ => Err(invalid(format!("no structured grouping for shape {shape:?}"))),
            },
        }
    }

    pub fn parameter_id(&self) -> &str {
        &self.parameter_id
    }

    pub fn numel(&self) -> usize {
        self.numel
    }

    pub fn mode(&self) -> SparsityMode {
        self.mode
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Number of entries covered by the partition.
    pub fn governed(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// `√n^g`, the per-group penalty weight.
    pub fn weight(&self, g: usize) -> f64 {
        (self.groups[g].len() as f64).sqrt()
    }

    pub fn group_norm(&self, g: usize, data: &[f64]) -> f64 {
        self.groups[g].iter().map(|&i| data[i] * data[i]).sum::<f64>().sqrt()
    }

    pub fn group_norms(&self, data: &[f64]) -> Vec<f64> {
        (0..self.groups.len()).map(|g| self.group_norm(g, data)).collect()
    }

    /// True where every entry of the group is exactly zero.
    pub fn zero_groups(&self, data: &[f64]) -> Vec<bool> {
        self.groups.iter().map(|g| g.iter().all(|&i| data[i] == 0.0)).collect()
    }

    /// Groups paired with their penalty weights, as consumed by
    /// [`Graph::group_lasso`](crate::autodiff::Graph::group_lasso).
    pub fn weighted_groups(&self) -> Vec<(Vec<usize>, f64)> {
        self.groups.iter().enumerate().map(|(g, idx)| (idx.clone(), self.weight(g))).collect()
    }
}
