//! Deterministic generation of continual few-shot episodes.
//!
//! An episode is drawn block by block. For class block `a` (1-based) the
//! sampler selects `n_way` classes, without replacement within the episode,
//! by a Fisher-Yates prefix pass over the remaining class pool in manifest
//! order. For each selected class (in selection order) it then draws
//! `cci * k_shot + k_target` distinct instances the same way: the first
//! `cci * k_shot` feed support sets `(a-1)*cci + 1 ..= a*cci` (`k_shot`
//! each, in order) and the last `k_target` feed the target set. Once every
//! block is drawn the target set is shuffled. All draws come from one
//! [`SplitMix64`] stream seeded with `derive_seed(config.seed, episode_index)`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, TaskConfig};
use crate::pack::DatasetPack;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("episode needs {needed} classes, pack has {available}")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("class {class} has {available} samples, episode needs {needed}")]
    NotEnoughSamples {
        class: u32,
        needed: u32,
        available: u32,
    },
    #[error("evaluation suite must contain at least one episode")]
    EmptySuite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub class: u32,
    pub instance: u32,
}

/// A sample with the label it carries inside the episode (post-overwrite).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample: SampleId,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSetRef {
    /// 1-based position `n` within the episode.
    pub position: u32,
    /// 1-based class block `a`.
    pub block: u32,
    pub entries: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSetRef {
    pub entries: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub config: TaskConfig,
    pub episode_index: u64,
    /// Class ids per block, in selection order; position `c` gets the
    /// `c`-th label of the block's label range.
    pub class_blocks: Vec<Vec<u32>>,
    pub support_sets: Vec<SupportSetRef>,
    pub target_set: TargetSetRef,
}

impl Episode {
    pub fn label_map(&self) -> BTreeMap<SampleId, u32> {
        self.support_sets
            .iter()
            .flat_map(|s| &s.entries)
            .chain(&self.target_set.entries)
            .map(|e| (e.sample, e.label))
            .collect()
    }

    /// Assigned label to the true class ids it stands for.
    pub fn true_class_map(&self) -> BTreeMap<u32, BTreeSet<u32>> {
        let mut map: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for set in &self.support_sets {
            for e in &set.entries {
                map.entry(e.label).or_default().insert(e.sample.class);
            }
        }
        map
    }

    pub fn support_input_count(&self) -> usize {
        self.support_sets.iter().map(|s| s.entries.len()).sum()
    }

    /// The episode manifest: sample ids, labels and block structure as JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("episode always serializes")
    }
}

/// Labels of block `block` (1-based).
pub fn label_assignment(block: u32, config: &TaskConfig) -> Result<std::ops::Range<u32>, ConfigError> {
    config.label_range(block)
}

/// Checks that `pack` can host episodes of `config`.
pub fn check_feasible(pack: &DatasetPack, config: &TaskConfig) -> Result<(), SampleError> {
    config.ensure_valid()?;
    let needed = (config.n_way * config.num_blocks()) as usize;
    if pack.num_classes() < needed {
        return Err(SampleError::NotEnoughClasses {
            needed,
            available: pack.num_classes(),
        });
    }
    let per_class = config.cci * config.k_shot + config.k_target;
    if let Some(class) = pack
        .manifest()
        .classes
        .iter()
        .find(|c| c.count < per_class)
    {
        return Err(SampleError::NotEnoughSamples {
            class: class.id,
            needed: per_class,
            available: class.count,
        });
    }
    Ok(())
}

pub fn sample_episode(
    pack: &DatasetPack,
    config: &TaskConfig,
    episode_index: u64,
) -> Result<Episode, SampleError> {
    check_feasible(pack, config)?;
    let mut rng = SplitMix64::for_stream(config.seed, episode_index);
    let n_way = config.n_way as usize;
    let cci = config.cci as usize;
    let k_shot = config.k_shot as usize;
    let per_class = cci * k_shot + config.k_target as usize;

    let mut pool: Vec<u32> = (0..pack.num_classes() as u32).collect();
    let mut class_blocks = Vec::with_capacity(config.num_blocks() as usize);
    let mut support_sets = Vec::with_capacity(config.nss as usize);
    let mut target = Vec::with_capacity(config.target_set_size());

    for a in 1..=config.num_blocks() {
        let start = (a as usize - 1) * n_way;
        rng.select_prefix(&mut pool, start, n_way);
        let classes = pool[start..start + n_way].to_vec();
        let labels = config.label_range(a)?;

        let mut blocks: Vec<SupportSetRef> = (1..=config.cci)
            .map(|b| SupportSetRef {
                position: (a - 1) * config.cci + b,
                block: a,
                entries: Vec::with_capacity(n_way * k_shot),
            })
            .collect();

        for (&class, label) in classes.iter().zip(labels) {
            let mut instances: Vec<u32> = (0..pack.class_count(class)).collect();
            rng.select_prefix(&mut instances, 0, per_class);
            let labeled = |instance: u32| LabeledSample {
                sample: SampleId { class, instance },
                label,
            };
            for (b, set) in blocks.iter_mut().enumerate() {
                set.entries.extend(
                    instances[b * k_shot..(b + 1) * k_shot]
                        .iter()
                        .map(|&i| labeled(i)),
                );
            }
            target.extend(instances[cci * k_shot..per_class].iter().map(|&i| labeled(i)));
        }
        support_sets.extend(blocks);
        class_blocks.push(classes);
    }
    rng.shuffle(&mut target);

    Ok(Episode {
        config: *config,
        episode_index,
        class_blocks,
        support_sets,
        target_set: TargetSetRef { entries: target },
    })
}

/// Episodes `0..count`, each an independent draw.
pub fn sample_eval_suite(
    pack: &DatasetPack,
    config: &TaskConfig,
    count: usize,
) -> Result<Vec<Episode>, SampleError> {
    if count == 0 {
        return Err(SampleError::EmptySuite);
    }
    check_feasible(pack, config)?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_episode(pack, config, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::uniform_pack;

    fn config(nss: u32, cci: u32, overwrite: bool) -> TaskConfig {
        TaskConfig::five_way_one_shot(nss, cci, overwrite)
    }

    #[test]
    fn counts_for_task_b_nss3() {
        let pack = uniform_pack(40, 10, 2);
        let ep = sample_episode(&pack, &config(3, 1, false), 0).unwrap();
        assert_eq!(ep.support_sets.len(), 3);
        assert!(ep.support_sets.iter().all(|s| s.entries.len() == 5));
        let classes: BTreeSet<u32> = ep.class_blocks.iter().flatten().copied().collect();
        assert_eq!(classes.len(), 15);
        assert_eq!(ep.target_set.entries.len(), 75);
    }

    #[test]
    fn counts_for_task_a_nss10() {
        let pack = uniform_pack(20, 20, 2);
        let ep = sample_episode(&pack, &config(10, 10, true), 3).unwrap();
        let classes: BTreeSet<u32> = ep.class_blocks.iter().flatten().copied().collect();
        assert_eq!(classes.len(), 5);
        assert_eq!(ep.target_set.entries.len(), 25);
        let positions: Vec<u32> = ep.support_sets.iter().map(|s| s.position).collect();
        assert_eq!(positions, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn determinism() {
        let pack = uniform_pack(30, 8, 2);
        let c = config(4, 2, false);
        let a = sample_episode(&pack, &c, 17).unwrap();
        let b = sample_episode(&pack, &c, 17).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a, sample_episode(&pack, &c, 18).unwrap());
    }

    #[test]
    fn labels_follow_blocks() {
        assert_eq!(label_assignment(2, &config(3, 1, false)).unwrap(), 5..10);
        assert_eq!(label_assignment(3, &config(3, 1, true)).unwrap(), 0..5);
        let pack = uniform_pack(30, 8, 2);
        let ep = sample_episode(&pack, &config(3, 1, false), 0).unwrap();
        for set in &ep.support_sets {
            let range = (set.block - 1) * 5..set.block * 5;
            assert!(set.entries.iter().all(|e| range.contains(&e.label)));
        }
        assert!(matches!(
            label_assignment(0, &config(3, 1, false)),
            Err(ConfigError::BlockIndex { .. })
        ));
    }

    #[test]
    fn overwrite_maps_each_label_to_block_count_classes() {
        let pack = uniform_pack(60, 8, 2);
        let ep = sample_episode(&pack, &config(10, 1, true), 2).unwrap();
        let map = ep.true_class_map();
        assert_eq!(map.len(), 5);
        assert!(map.values().all(|classes| classes.len() == 10));
    }

    #[test]
    fn infeasible_packs() {
        let pack = uniform_pack(10, 8, 2);
        assert_eq!(
            sample_episode(&pack, &config(3, 1, false), 0),
            Err(SampleError::NotEnoughClasses { needed: 15, available: 10 })
        );
        let pack = uniform_pack(10, 3, 2);
        assert_eq!(
            sample_episode(&pack, &config(2, 1, false), 0),
            Err(SampleError::NotEnoughSamples { class: 0, needed: 6, available: 3 })
        );
        let mut bad = config(4, 3, false);
        bad.nss = 4;
        assert!(matches!(
            sample_episode(&pack, &bad, 0),
            Err(SampleError::Config(_))
        ));
    }

    #[test]
    fn suite_of_one_matches_single_episode() {
        let pack = uniform_pack(12, 10, 2);
        let c = config(2, 1, false);
        let suite = sample_eval_suite(&pack, &c, 1).unwrap();
        assert_eq!(suite, vec![sample_episode(&pack, &c, 0).unwrap()]);
        assert_eq!(sample_eval_suite(&pack, &c, 0), Err(SampleError::EmptySuite));
    }
}
