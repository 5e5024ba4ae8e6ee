//! Benchmark runs over grids of task configurations and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{TaskConfig, TaskKind};
use crate::learners::{run_episode, Hyperparams, LearnerError, LearnerKind};
use crate::metrics::{mean_std, SuiteSummary};
use crate::pack::{DatasetPack, PackError};
use crate::sampler::sample_eval_suite;
use crate::session::EpisodeSession;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("reading plan {path}: {message}")]
    Plan { path: PathBuf, message: String },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("report is empty")]
    EmptyReport,
    #[error("malformed report csv: {0}")]
    Csv(String),
}

/// One grid column: everything in a [`TaskConfig`] except the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub nss: u32,
    pub cci: u32,
    #[serde(default)]
    pub overwrite: bool,
    #[serde(default = "default_way")]
    pub n_way: u32,
    #[serde(default = "default_one")]
    pub k_shot: u32,
    #[serde(default = "default_way")]
    pub k_target: u32,
}

fn default_way() -> u32 {
    5
}

fn default_one() -> u32 {
    1
}

impl CellSpec {
    pub const fn new(nss: u32, cci: u32, overwrite: bool) -> Self {
        CellSpec {
            nss,
            cci,
            overwrite,
            n_way: 5,
            k_shot: 1,
            k_target: 5,
        }
    }

    pub fn config(&self, seed: u64) -> TaskConfig {
        TaskConfig {
            nss: self.nss,
            cci: self.cci,
            n_way: self.n_way,
            k_shot: self.k_shot,
            k_target: self.k_target,
            overwrite: self.overwrite,
            seed,
        }
    }
}

/// The twelve result columns of the reference benchmark table, in order.
pub const DEFAULT_GRID: [CellSpec; 12] = [
    CellSpec::new(1, 1, false),
    CellSpec::new(3, 1, false),
    CellSpec::new(3, 1, true),
    CellSpec::new(3, 3, true),
    CellSpec::new(4, 2, false),
    CellSpec::new(5, 1, false),
    CellSpec::new(5, 1, true),
    CellSpec::new(5, 5, true),
    CellSpec::new(8, 2, false),
    CellSpec::new(10, 1, false),
    CellSpec::new(10, 1, true),
    CellSpec::new(10, 10, true),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    /// Episodes are drawn from this split only.
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    pub datasets: Vec<DatasetSpec>,
    #[serde(default = "default_grid")]
    pub cells: Vec<CellSpec>,
    #[serde(default = "default_learners")]
    pub learners: Vec<LearnerKind>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Learner seeds; one report row per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed of the evaluation episodes, shared by every learner and seed.
    #[serde(default)]
    pub episode_seed: u64,
    #[serde(default)]
    pub hyper: Hyperparams,
}

fn default_grid() -> Vec<CellSpec> {
    DEFAULT_GRID.to_vec()
}

fn default_learners() -> Vec<LearnerKind> {
    vec![LearnerKind::Random, LearnerKind::Prototype, LearnerKind::LinearFineTune]
}

fn default_episodes() -> usize {
    600
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl BenchPlan {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let err = |message: String| BenchError::Plan {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut plan: BenchPlan = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        // pack paths are relative to the plan file
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut plan.datasets {
            for p in [Some(&mut d.test), d.train.as_mut(), d.val.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.datasets.is_empty() || self.cells.is_empty() || self.learners.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::InvalidPlan(
                "datasets, cells, learners and seeds must be nonempty".into(),
            ));
        }
        if self.episodes == 0 {
            return Err(BenchError::InvalidPlan("episodes must be at least 1".into()));
        }
        for cell in &self.cells {
            let violations = cell.config(self.episode_seed).validate();
            if !violations.is_empty() {
                return Err(BenchError::InvalidPlan(format!("cell {cell:?}: {violations:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dataset: String,
    pub task_kind: TaskKind,
    pub nss: u32,
    pub cci: u32,
    pub overwrite: bool,
    pub learner: String,
    pub seed: u64,
    /// Summary, or why the cell could not run.
    pub outcome: Result<SuiteSummary, String>,
}

impl BenchRow {
    fn cell_key(&self) -> (TaskKind, u32, u32, bool) {
        (self.task_kind, self.nss, self.cci, self.overwrite)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

const CSV_HEADER: [&str; 13] = [
    "task_kind", "nss", "cci", "overwrite", "n_episodes", "acc_mean", "acc_std", "atm_mean",
    "mac_mean", "dataset", "learner", "seed", "status",
];

impl BenchReport {
    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.outcome.is_err())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            let metrics: [String; 5] = match &r.outcome {
                Ok(s) => [
                    s.n_episodes.to_string(),
                    s.accuracy_mean.to_string(),
                    s.accuracy_std.to_string(),
                    s.atm_mean.to_string(),
                    s.mac_mean.to_string(),
                ],
                Err(_) => Default::default(),
            };
            let status = match &r.outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("error: {e}"),
            };
            let mut record = vec![
                r.task_kind.short_name().to_string(),
                r.nss.to_string(),
                r.cci.to_string(),
                r.overwrite.to_string(),
            ];
            record.extend(metrics);
            record.extend([r.dataset.clone(), r.learner.clone(), r.seed.to_string(), status]);
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| BenchError::Csv(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(BenchError::Csv(format!("unexpected header {headers:?}")));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let r = record.map_err(|e| BenchError::Csv(e.to_string()))?;
            let bad = |field: &str| BenchError::Csv(format!("bad {field} in {r:?}"));
            let num = |i: usize, field: &str| r[i].parse::<f64>().map_err(|_| bad(field));
            let status = &r[12];
            let outcome = if status == "ok" {
                Ok(SuiteSummary {
                    n_episodes: r[4].parse().map_err(|_| bad("n_episodes"))?,
                    accuracy_mean: num(5, "acc_mean")?,
                    accuracy_std: num(6, "acc_std")?,
                    atm_mean: num(7, "atm_mean")?,
                    mac_mean: num(8, "mac_mean")?,
                })
            } else {
                Err(status.strip_prefix("error: ").unwrap_or(status).to_string())
            };
            rows.push(BenchRow {
                task_kind: TaskKind::from_short_name(&r[0]).ok_or_else(|| bad("task_kind"))?,
                nss: r[1].parse().map_err(|_| bad("nss"))?,
                cci: r[2].parse().map_err(|_| bad("cci"))?,
                overwrite: r[3].parse().map_err(|_| bad("overwrite"))?,
                dataset: r[9].to_string(),
                learner: r[10].to_string(),
                seed: r[11].parse().map_err(|_| bad("seed"))?,
                outcome,
            });
        }
        Ok(BenchReport { rows })
    }

    /// One markdown table per dataset: a row per learner, a column per cell,
    /// entries are cross-seed mean ± std of accuracy in percent.
    pub fn to_markdown(&self) -> Result<String, BenchError> {
        if self.rows.is_empty() {
            return Err(BenchError::EmptyReport);
        }
        let mut out = String::new();
        for dataset in first_seen(self.rows.iter().map(|r| r.dataset.clone())) {
            let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.dataset == dataset).collect();
            let cells = first_seen(rows.iter().map(|r| r.cell_key()));
            let learners = first_seen(rows.iter().map(|r| r.learner.clone()));
            let _ = writeln!(out, "### {dataset}\n");
            out.push_str("| Learner |");
            for (kind, nss, cci, overwrite) in &cells {
                let ow = if *kind == TaskKind::SingleFsl {
                    "-".to_string()
                } else if *overwrite {
                    "True".into()
                } else {
                    "False".into()
                };
                let _ = write!(out, " {kind} / {nss} / {cci} / {ow} |");
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(cells.len()));
            out.push('\n');
            for learner in &learners {
                let _ = write!(out, "| {learner} |");
                for cell in &cells {
                    let group: Vec<&&BenchRow> = rows
                        .iter()
                        .filter(|r| &r.learner == learner && &r.cell_key() == cell)
                        .collect();
                    let accs: Option<Vec<f64>> =
                        group.iter().map(|r| r.outcome.as_ref().ok().map(|s| s.accuracy_mean)).collect();
                    match accs.as_deref().and_then(mean_std) {
                        Some((m, s)) => {
                            let _ = write!(out, " {:.2} ± {:.2} |", 100.0 * m, 100.0 * s);
                        }
                        None => out.push_str(" — |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn first_seen<T: PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut seen = Vec::new();
    for item in items {
        if !seen.contains(&item) {
            seen.push(item);
        }
    }
    seen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String, BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    match format {
        ReportFormat::Csv => Ok(report.to_csv()),
        ReportFormat::Markdown => report.to_markdown(),
    }
}

/// Loads every dataset's test pack from disk and runs the plan.
pub fn run_benchmark(plan: &BenchPlan) -> Result<BenchReport, BenchError> {
    plan.validate()?;
    let packs = plan
        .datasets
        .iter()
        .map(|d| Ok((d.name.clone(), Arc::new(DatasetPack::read(&d.test)?))))
        .collect::<Result<Vec<_>, BenchError>>()?;
    run_benchmark_on(plan, &packs)
}

/// Runs the plan on already loaded test packs, one per dataset entry.
pub fn run_benchmark_on(
    plan: &BenchPlan,
    packs: &[(String, Arc<DatasetPack>)],
) -> Result<BenchReport, BenchError> {
    plan.validate()?;
    let mut rows = Vec::new();
    for (dataset, pack) in packs {
        for cell in &plan.cells {
            let config = cell.config(plan.episode_seed);
            let row = |learner: LearnerKind, seed: u64, outcome| BenchRow {
                dataset: dataset.clone(),
                task_kind: config.task_kind(),
                nss: cell.nss,
                cci: cell.cci,
                overwrite: cell.overwrite,
                learner: learner.name().to_string(),
                seed,
                outcome,
            };
            // the same episodes go to every learner and seed
            let suite = sample_eval_suite(pack, &config, plan.episodes);
            for &learner in &plan.learners {
                for &seed in &plan.seeds {
                    let outcome = match &suite {
                        Err(e) => Err(format!("infeasible: {e}")),
                        Ok(episodes) => {
                            let hyper = Hyperparams { seed, ..plan.hyper };
                            run_suite(pack, episodes, learner, hyper).map_err(|e| e.to_string())
                        }
                    };
                    rows.push(row(learner, seed, outcome));
                }
            }
        }
    }
    Ok(BenchReport { rows })
}

fn run_suite(
    pack: &Arc<DatasetPack>,
    episodes: &[crate::sampler::Episode],
    learner: LearnerKind,
    hyper: Hyperparams,
) -> Result<SuiteSummary, LearnerError> {
    let per_episode = episodes
        .par_iter()
        .map(|ep| {
            let mut session = EpisodeSession::new(pack.clone(), ep.clone());
            let (score, macs) = run_episode(learner, &mut session, hyper)?;
            Ok((score.accuracy, score.atm.atm, macs.total()))
        })
        .collect::<Result<Vec<_>, LearnerError>>()?;
    Ok(SuiteSummary::from_episodes(&per_episode).expect("suite is nonempty and accuracies in range"))
}

/// (dataset, learner, task kind, nss, cci, overwrite)
pub type SeedGroup = (String, String, TaskKind, u32, u32, bool);

/// Cross-seed accuracy mean and std per dataset, learner and cell.
pub fn cross_seed(report: &BenchReport) -> BTreeMap<SeedGroup, (f64, f64)> {
    let mut groups: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        if let Ok(s) = &r.outcome {
            groups
                .entry((r.dataset.clone(), r.learner.clone(), r.task_kind, r.nss, r.cci, r.overwrite))
                .or_default()
                .push(s.accuracy_mean);
        }
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| mean_std(&v).map(|ms| (k, ms)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{cluster_pack, ClusterSpec};

    fn small_plan(cells: Vec<CellSpec>, learners: Vec<LearnerKind>, seeds: Vec<u64>, episodes: usize) -> BenchPlan {
        BenchPlan {
            datasets: vec![DatasetSpec {
                name: "synthetic".into(),
                train: None,
                val: None,
                test: PathBuf::from("unused"),
            }],
            cells,
            learners,
            episodes,
            seeds,
            episode_seed: 0,
            hyper: Hyperparams::default(),
        }
    }

    fn pack() -> Vec<(String, Arc<DatasetPack>)> {
        vec![("synthetic".into(), Arc::new(cluster_pack(&ClusterSpec::default())))]
    }

    #[test]
    fn default_grid_matches_table_columns() {
        let kinds: Vec<&str> = DEFAULT_GRID.iter().map(|c| c.config(0).task_kind().short_name()).collect();
        assert_eq!(kinds, ["FSL", "B", "C", "A", "D", "B", "C", "A", "D", "B", "C", "A"]);
        let nss: Vec<u32> = DEFAULT_GRID.iter().map(|c| c.nss).collect();
        assert_eq!(nss, [1, 3, 3, 3, 4, 5, 5, 5, 8, 10, 10, 10]);
        assert!(DEFAULT_GRID.iter().all(|c| c.config(0).validate().is_empty()));
    }

    #[test]
    fn single_cell_single_row() {
        let plan = small_plan(vec![CellSpec::new(3, 1, false)], vec![LearnerKind::Prototype], vec![0], 10);
        let report = run_benchmark_on(&plan, &pack()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].outcome.as_ref().unwrap().n_episodes, 10);
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let plan = small_plan(
            vec![CellSpec::new(3, 1, false), CellSpec::new(3, 1, true)],
            vec![LearnerKind::Random, LearnerKind::Prototype],
            vec![0, 1],
            8,
        );
        let a = run_benchmark_on(&plan, &pack()).unwrap();
        let b = run_benchmark_on(&plan, &pack()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows.len(), 2 * 2 * 2);
        let parsed = BenchReport::from_csv(&a.to_csv()).unwrap();
        assert_eq!(parsed, a);
    }

    #[test]
    fn infeasible_cells_render_as_dash() {
        // 60 classes cannot host 5-way x 20 blocks
        let plan = small_plan(
            vec![CellSpec::new(3, 1, false), CellSpec::new(20, 1, false)],
            vec![LearnerKind::Random, LearnerKind::Prototype],
            vec![0],
            4,
        );
        let report = run_benchmark_on(&plan, &pack()).unwrap();
        assert!(report.has_errors());
        let md = render_report(&report, ReportFormat::Markdown).unwrap();
        let data_rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| random") || l.starts_with("| prototype")).collect();
        assert_eq!(data_rows.len(), 2);
        assert!(data_rows.iter().all(|l| l.trim_end().ends_with("— |")));
        let csv = render_report(&report, ReportFormat::Csv).unwrap();
        assert!(csv.contains("infeasible"));
        assert_eq!(csv.lines().count(), 1 + 4);
    }

    #[test]
    fn markdown_shape_for_full_grid() {
        let rows = DEFAULT_GRID
            .iter()
            .flat_map(|cell| {
                ["random", "prototype"].into_iter().map(move |learner| BenchRow {
                    dataset: "omniglot".into(),
                    task_kind: cell.config(0).task_kind(),
                    nss: cell.nss,
                    cci: cell.cci,
                    overwrite: cell.overwrite,
                    learner: learner.into(),
                    seed: 0,
                    outcome: Ok(SuiteSummary {
                        n_episodes: 1,
                        accuracy_mean: 0.5,
                        accuracy_std: 0.0,
                        atm_mean: 0.0,
                        mac_mean: 0.0,
                    }),
                })
            })
            .collect();
        let md = BenchReport { rows }.to_markdown().unwrap();
        let table: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).collect();
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].matches(" / ").count(), 36);
        assert_eq!(table[2].matches("50.00 ± 0.00").count(), 12);
        assert!(table[0].contains("FSL / 1 / 1 / -"));
        assert!(table[0].contains("D / 8 / 2 / False"));
        assert!(matches!(BenchReport::default().to_markdown(), Err(BenchError::EmptyReport)));
    }

    #[test]
    fn plan_defaults_from_toml() {
        let plan: BenchPlan = toml::from_str("[[datasets]]\nname = \"x\"\ntest = \"x.test\"\n").unwrap();
        assert_eq!(plan.cells, DEFAULT_GRID.to_vec());
        assert_eq!(plan.episodes, 600);
        assert_eq!(plan.seeds, vec![0, 1, 2]);
        assert_eq!(plan.hyper.steps, 5);
        plan.validate().unwrap();
    }
}
