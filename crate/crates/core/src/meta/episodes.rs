use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::TaskId;

/// Largest task count accepted by [`enumerate_episodes`].
pub const MAX_TASKS: usize = 10;

/// A learning episode: a nonempty subset of the meta-training tasks. Support
/// and query batches come from the disjoint support and query splits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Episode {
    pub tasks: Vec<TaskId>,
    /// Subset bitmask over the positions of the enumerated task list.
    pub bitmask: u32,
}

impl Episode {
    pub fn is_single_task(&self) -> bool {
        self.tasks.len() == 1
    }
}

/// All nonempty subsets of `tasks`, ordered by ascending bitmask.
pub fn enumerate_episodes(tasks: &[TaskId]) -> Result<Vec<Episode>> {
    let n = tasks.len();
    if n == 0 || n > MAX_TASKS {
        return Err(invalid(format!("episodes need between 1 and {MAX_TASKS} tasks, got {n}")));
    }
    let mut seen = tasks.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != n {
        return Err(invalid(format!("duplicate task ids in {tasks:?}")));
    }
    Ok((1u32..1 << n)
        .map(|bitmask| Episode {
            tasks: (0..n).filter(|i| bitmask >> i & 1 == 1).map(|i| tasks[i]).collect(),
            bitmask,
        })
        .collect())
}

/// Uniform draw of one episode.
pub fn sample_episode<'a>(episodes: &'a [Episode], rng: &mut impl Rng) -> Result<&'a Episode> {
    if episodes.is_empty() {
        return Err(invalid("cannot sample from an empty episode list"));
    }
    Ok(&episodes[rng.random_range(0..episodes.len())])
}
