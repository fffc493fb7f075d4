//! Imitation-learning datasets: expert-labeled trajectories with
//! train/validation/test tags.

use crate::flocking::{rollout, sample_scenario, Policy, Scenario, ScenarioConfig, Trajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One scenario with an expert-labeled trajectory: the recorded controls
/// are the expert's actions at every visited state, whether the states
/// came from the expert itself or from a learned policy being relabeled.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scenario: Scenario,
    pub trajectory: Trajectory,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of labeled states (one per control step).
    pub fn labeled_states(&self) -> usize {
        self.samples.iter().map(|s| s.trajectory.steps()).sum()
    }

    pub fn push_train(&mut self, scenario: Scenario, trajectory: Trajectory) {
        self.samples.push(Sample {
            scenario,
            trajectory,
            split: Split::Train,
        });
    }
}

/// 70/10/20 split sizes; train and validation round down, test takes the rest.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = (count as f64 * 0.7).floor() as usize;
    let validation = (count as f64 * 0.1).floor() as usize;
    (train, validation, count - train - validation)
}

fn split_for_index(index: usize, count: usize) -> Split {
    let (train, validation, _) = split_sizes(count);
    if index < train {
        Split::Train
    } else if index < train + validation {
        Split::Validation
    } else {
        Split::Test
    }
}

/// Rolls the expert on freshly sampled scenarios. Team sizes cycle through
/// a random draw from `team_sizes` per trajectory.
pub fn generate_expert_dataset<R: Rng>(
    count: usize,
    team_sizes: &[usize],
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Dataset, LearnError> {
    assert!(!team_sizes.is_empty());
    let mut dataset = Dataset::default();
    for index in 0..count {
        let n = team_sizes[rng.gen_range(0..team_sizes.len())];
        let scenario = sample_scenario(rng, n, cfg)?;
        let trajectory = rollout(Policy::Expert, &scenario, 0)?;
        dataset.samples.push(Sample {
            scenario,
            trajectory,
            split: split_for_index(index, count),
        });
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn split_sizes_match_the_protocol() {
        assert_eq!(split_sizes(120), (84, 12, 24));
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(1), (0, 0, 1));
    }

    #[test]
    fn expert_dataset_counts_and_splits() {
        let mut rng = StdRng::seed_from_u64(50);
        let mut cfg = ScenarioConfig::default();
        cfg.horizon = 0.3; // keep the test quick
        let ds = generate_expert_dataset(10, &[3, 4], &cfg, &mut rng).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.indices(Split::Train).len(), 7);
        assert_eq!(ds.indices(Split::Validation).len(), 1);
        assert_eq!(ds.indices(Split::Test).len(), 2);
        assert_eq!(ds.labeled_states(), 10 * 30);
        for s in &ds.samples {
            assert_eq!(s.trajectory.features.len(), s.trajectory.controls.len());
        }
    }
}
