//! Task configuration and the algebra mapping `(nss, cci, overwrite)` onto
//! the four continual task types.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One episode family: how many support sets, how often classes change,
/// way/shot sizes and whether block labels are overwritten onto `0..n_way`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Number of support sets per episode.
    pub nss: u32,
    /// Class-change interval: consecutive support sets sharing a class set.
    pub cci: u32,
    pub n_way: u32,
    pub k_shot: u32,
    /// Target samples per distinct class.
    pub k_target: u32,
    pub overwrite: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid task config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("block index {index} out of range 1..={blocks}")]
    BlockIndex { index: u32, blocks: u32 },
    #[error("reading config {path}: {message}")]
    Read { path: String, message: String },
}

/// A single broken invariant, returned as data by [`TaskConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroCount(&'static str),
    NssNotDivisibleByCci { nss: u32, cci: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroCount(field) => write!(f, "{field} >= 1 required"),
            Violation::NssNotDivisibleByCci { nss, cci } => {
                write!(f, "nss not divisible by cci ({nss} mod {cci} != 0)")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    /// Task A: one class set, fresh instances in every support set.
    NewSamples,
    /// Task B: every support set brings new classes with new output units.
    NewClasses,
    /// Task C: new classes every support set, labels folded onto `0..n_way`.
    NewClassesOverwrite,
    /// Task D: class set changes every `cci` support sets.
    NewClassesNewSamples,
    /// A single support set: plain few-shot learning.
    SingleFsl,
}

impl TaskKind {
    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::NewSamples => "A",
            TaskKind::NewClasses => "B",
            TaskKind::NewClassesOverwrite => "C",
            TaskKind::NewClassesNewSamples => "D",
            TaskKind::SingleFsl => "FSL",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Self> {
        Some(match name {
            "A" => TaskKind::NewSamples,
            "B" => TaskKind::NewClasses,
            "C" => TaskKind::NewClassesOverwrite,
            "D" => TaskKind::NewClassesNewSamples,
            "FSL" => TaskKind::SingleFsl,
            _ => return None,
        })
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Output label layout of an episode family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    pub num_output_labels: u32,
    /// Label range per class block, index 0 is block `a = 1`.
    pub block_assignments: Vec<Range<u32>>,
}

impl TaskConfig {
    /// Five-way one-shot with five target samples per class.
    pub fn five_way_one_shot(nss: u32, cci: u32, overwrite: bool) -> Self {
        TaskConfig {
            nss,
            cci,
            n_way: 5,
            k_shot: 1,
            k_target: 5,
            overwrite,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();
        for (name, value) in [
            ("nss", self.nss),
            ("cci", self.cci),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("k_target", self.k_target),
        ] {
            if value == 0 {
                violations.push(Violation::ZeroCount(name));
            }
        }
        if self.nss != 0 && self.cci != 0 && !self.nss.is_multiple_of(self.cci) {
            violations.push(Violation::NssNotDivisibleByCci {
                nss: self.nss,
                cci: self.cci,
            });
        }
        violations
    }

    pub fn ensure_valid(&self) -> Result<(), ConfigError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(violations))
        }
    }

    /// Task type as a pure function of `(nss, cci, overwrite)`.
    ///
    /// `cci == nss` yields a single class block, so the overwrite flag has no
    /// effect there and both settings map to [`TaskKind::NewSamples`].
    /// Likewise `1 < cci < nss` is Task D with or without overwrite.
    pub fn task_kind(&self) -> TaskKind {
        if self.nss == 1 {
            TaskKind::SingleFsl
        } else if self.cci == self.nss {
            TaskKind::NewSamples
        } else if self.cci == 1 {
            if self.overwrite {
                TaskKind::NewClassesOverwrite
            } else {
                TaskKind::NewClasses
            }
        } else {
            TaskKind::NewClassesNewSamples
        }
    }

    /// Number of class blocks, `nss / cci`. Meaningful only for valid configs.
    pub fn num_blocks(&self) -> u32 {
        self.nss / self.cci
    }

    pub fn expected_distinct_classes(&self) -> Result<u32, ConfigError> {
        self.ensure_valid()?;
        Ok(self.n_way * self.num_blocks())
    }

    pub fn output_label_count(&self) -> Result<u32, ConfigError> {
        self.ensure_valid()?;
        Ok(if self.overwrite {
            self.n_way
        } else {
            self.n_way * self.num_blocks()
        })
    }

    /// Labels assigned to the classes of block `block` (1-based, as in the
    /// sampling loop). Labels themselves are 0-based.
    pub fn label_range(&self, block: u32) -> Result<Range<u32>, ConfigError> {
        self.ensure_valid()?;
        let blocks = self.num_blocks();
        if block == 0 || block > blocks {
            return Err(ConfigError::BlockIndex {
                index: block,
                blocks,
            });
        }
        Ok(if self.overwrite {
            0..self.n_way
        } else {
            (block - 1) * self.n_way..block * self.n_way
        })
    }

    pub fn label_space(&self) -> Result<LabelSpace, ConfigError> {
        let num_output_labels = self.output_label_count()?;
        let block_assignments = (1..=self.num_blocks())
            .map(|a| self.label_range(a))
            .collect::<Result<_, _>>()?;
        Ok(LabelSpace {
            num_output_labels,
            block_assignments,
        })
    }

    pub fn support_set_size(&self) -> usize {
        (self.n_way * self.k_shot) as usize
    }

    pub fn target_set_size(&self) -> usize {
        (self.k_target * self.n_way * self.num_blocks()) as usize
    }

    /// Loads a config from TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let read_err = |message: String| ConfigError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let config: TaskConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| read_err(e.to_string()))?
        };
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(nss: u32, cci: u32, overwrite: bool) -> TaskConfig {
        TaskConfig::five_way_one_shot(nss, cci, overwrite)
    }

    #[test]
    fn table_columns_map_to_kinds() {
        assert_eq!(cfg(10, 1, false).task_kind(), TaskKind::NewClasses);
        assert_eq!(cfg(1, 1, false).task_kind(), TaskKind::SingleFsl);
        assert_eq!(cfg(8, 2, false).task_kind(), TaskKind::NewClassesNewSamples);
        assert_eq!(cfg(10, 1, true).task_kind(), TaskKind::NewClassesOverwrite);
        assert_eq!(cfg(5, 5, true).task_kind(), TaskKind::NewSamples);
        assert_eq!(cfg(4, 2, false).task_kind(), TaskKind::NewClassesNewSamples);
    }

    #[test]
    fn distinct_classes() {
        assert_eq!(cfg(10, 1, false).expected_distinct_classes().unwrap(), 50);
        assert_eq!(cfg(10, 10, false).expected_distinct_classes().unwrap(), 5);
        assert_eq!(cfg(10, 5, false).expected_distinct_classes().unwrap(), 10);
    }

    #[test]
    fn output_labels() {
        assert_eq!(cfg(10, 1, true).output_label_count().unwrap(), 5);
        assert_eq!(cfg(3, 1, false).output_label_count().unwrap(), 15);
        assert_eq!(cfg(1, 1, false).output_label_count().unwrap(), 5);
        // enumerate the label blocks for nss=3: {0..4}, {5..9}, {10..14}
        let space = cfg(3, 1, false).label_space().unwrap();
        assert_eq!(space.block_assignments, vec![0..5, 5..10, 10..15]);
    }

    #[test]
    fn validation() {
        let v = cfg(4, 3, false).validate();
        assert_eq!(v, vec![Violation::NssNotDivisibleByCci { nss: 4, cci: 3 }]);
        assert!(v[0].to_string().contains("nss not divisible by cci"));
        assert!(cfg(8, 2, false).validate().is_empty());
        let mut zero_shot = cfg(3, 1, false);
        zero_shot.k_shot = 0;
        let v = zero_shot.validate();
        assert_eq!(v, vec![Violation::ZeroCount("k_shot")]);
        assert_eq!(v[0].to_string(), "k_shot >= 1 required");
        assert!(matches!(
            zero_shot.output_label_count(),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn label_ranges() {
        assert_eq!(cfg(3, 1, false).label_range(2).unwrap(), 5..10);
        assert_eq!(cfg(3, 1, true).label_range(3).unwrap(), 0..5);
        assert_eq!(cfg(3, 1, false).label_range(1).unwrap(), 0..5);
        assert!(matches!(
            cfg(3, 1, false).label_range(4),
            Err(ConfigError::BlockIndex { index: 4, blocks: 3 })
        ));
        assert!(cfg(3, 1, false).label_range(0).is_err());
    }

    #[test]
    fn toml_keys_are_fixed() {
        let c = TaskConfig {
            seed: 42,
            ..cfg(8, 2, false)
        };
        let text = c.to_toml();
        for key in ["nss", "cci", "n_way", "k_shot", "k_target", "overwrite", "seed"] {
            assert!(text.contains(&format!("{key} = ")), "{key} missing in {text}");
        }
        let back: TaskConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<TaskConfig>(&format!("{text}extra = 1\n")).is_err());
    }

    fn valid_config() -> impl Strategy<Value = TaskConfig> {
        (1u32..=6, 1u32..=6, 1u32..=10, 1u32..=5, 1u32..=5, any::<bool>(), any::<u64>()).prop_map(
            |(cci, blocks, n_way, k_shot, k_target, overwrite, seed)| TaskConfig {
                nss: cci * blocks,
                cci,
                n_way,
                k_shot,
                k_target,
                overwrite,
                seed,
            },
        )
    }

    proptest! {
        #[test]
        fn distinct_equals_output_without_overwrite(c in valid_config()) {
            prop_assert!(c.validate().is_empty());
            let _ = c.task_kind();
            if !c.overwrite {
                prop_assert_eq!(c.expected_distinct_classes().unwrap(), c.output_label_count().unwrap());
            } else {
                prop_assert_eq!(c.output_label_count().unwrap(), c.n_way);
            }
        }

        #[test]
        fn label_ranges_tile_output_space(c in valid_config()) {
            let space = c.label_space().unwrap();
            for range in &space.block_assignments {
                prop_assert_eq!(range.len() as u32, c.n_way);
                prop_assert!(range.end <= space.num_output_labels);
            }
        }
    }
}
