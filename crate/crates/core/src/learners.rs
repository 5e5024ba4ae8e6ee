//! Desk-scale learners driven entirely through an [`EpisodeSession`].
//!
//! Features are the raw pixels scaled to `[0, 1]`, optionally area-pooled to
//! a `grid x grid` channel-averaged map and optionally standardized per
//! image. Nothing is learned across episodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::downsample::{area_sums, PixelImage};
use crate::metrics::{MacCounter, Phase, Primitive};
use crate::rng::SplitMix64;
use crate::session::{EpisodeScore, EpisodeSession, GuardError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model has not been fitted")]
    ModelNotFitted,
    #[error("input has {got} bytes, model expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("pooling grid {grid} exceeds image size {height}x{width}")]
    BadGrid { grid: u32, height: u32, width: u32 },
    #[error("unknown learner `{0}`")]
    UnknownLearner(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Random,
    Prototype,
    LinearFineTune,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Random => "random",
            LearnerKind::Prototype => "prototype",
            LearnerKind::LinearFineTune => "linear_fine_tune",
        }
    }

    pub fn parse(name: &str) -> Result<Self, LearnerError> {
        match name {
            "random" => Ok(LearnerKind::Random),
            "prototype" => Ok(LearnerKind::Prototype),
            "linear_fine_tune" => Ok(LearnerKind::LinearFineTune),
            other => Err(LearnerError::UnknownLearner(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Gradient steps per support set (fine-tune only).
    pub steps: u32,
    pub lr: f32,
    pub standardize: bool,
    /// Pool images to a `grid x grid` map before use.
    pub embed_grid: Option<u32>,
    /// Base seed for learner-side randomness.
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            steps: 5,
            lr: 0.01,
            standardize: false,
            embed_grid: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTransform {
    height: u32,
    width: u32,
    channels: u32,
    grid: Option<u32>,
    standardize: bool,
}

impl FeatureTransform {
    pub fn new(geometry: (u32, u32, u32), hyper: &Hyperparams) -> Result<Self, LearnerError> {
        let (height, width, channels) = geometry;
        if let Some(grid) = hyper.embed_grid {
            if grid == 0 || grid > height || grid > width {
                return Err(LearnerError::BadGrid { grid, height, width });
            }
        }
        Ok(FeatureTransform {
            height,
            width,
            channels,
            grid: hyper.embed_grid,
            standardize: hyper.standardize,
        })
    }

    pub fn input_bytes(&self) -> usize {
        (self.height * self.width * self.channels) as usize
    }

    pub fn dim(&self) -> usize {
        match self.grid {
            Some(g) => (g * g) as usize,
            None => self.input_bytes(),
        }
    }

    pub fn apply(&self, pixels: &[u8], macs: &mut MacCounter, phase: Phase) -> Result<Vec<f32>, LearnerError> {
        if pixels.len() != self.input_bytes() {
            return Err(LearnerError::InputShape {
                expected: self.input_bytes(),
                got: pixels.len(),
            });
        }
        let mut features: Vec<f32> = match self.grid {
            None => pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            Some(g) => {
                let image = PixelImage {
                    height: self.height as usize,
                    width: self.width as usize,
                    channels: self.channels as usize,
                    pixels: pixels.to_vec(),
                };
                let sums = area_sums(&image, g as usize, g as usize);
                let c = self.channels as usize;
                let denom = (self.height * self.width * self.channels) as f64 * 255.0;
                macs.record(phase, Primitive::Fma(pixels.len() as u64));
                sums.chunks(c)
                    .map(|cell| (cell.iter().sum::<u64>() as f64 / denom) as f32)
                    .collect()
            }
        };
        if self.standardize {
            let n = features.len() as f32;
            let mean = features.iter().sum::<f32>() / n;
            let var = features.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
            let std = var.sqrt();
            macs.record(phase, Primitive::Fma(2 * features.len() as u64));
            for v in &mut features {
                *v -= mean;
                if std > 0.0 {
                    *v /= std;
                }
            }
        }
        Ok(features)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    Unfitted,
    Random { seed: u64 },
    Prototype { table: BTreeMap<u32, (Vec<f32>, u32)> },
    Linear { weights: Vec<f32>, bias: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerModel {
    kind: LearnerKind,
    hyper: Hyperparams,
    features: FeatureTransform,
    output_labels: u32,
    params: Params,
    macs: MacCounter,
}

fn proto_tag(label: u32) -> String {
    format!("proto/{label}")
}

fn count_tag(label: u32) -> String {
    format!("count/{label}")
}

fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl LearnerModel {
    pub fn new(
        kind: LearnerKind,
        hyper: Hyperparams,
        geometry: (u32, u32, u32),
        output_labels: u32,
    ) -> Result<Self, LearnerError> {
        Ok(LearnerModel {
            kind,
            hyper,
            features: FeatureTransform::new(geometry, &hyper)?,
            output_labels,
            params: Params::Unfitted,
            macs: MacCounter::default(),
        })
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn macs(&self) -> MacCounter {
        self.macs
    }

    pub fn output_labels(&self) -> u32 {
        self.output_labels
    }

    /// Weight-matrix rows of a fine-tuned model.
    pub fn weight_rows(&self) -> Option<usize> {
        match &self.params {
            Params::Linear { bias, .. } => Some(bias.len()),
            _ => None,
        }
    }

    /// Prototype table: label to (centroid, contributing sample count).
    pub fn prototypes(&self) -> Option<&BTreeMap<u32, (Vec<f32>, u32)>> {
        match &self.params {
            Params::Prototype { table } => Some(table),
            _ => None,
        }
    }

    /// Consumes every support set of `session`, in order.
    pub fn fit_stream(&mut self, session: &mut EpisodeSession) -> Result<(), LearnerError> {
        self.output_labels = session.config().output_label_count()?;
        self.params = match self.kind {
            LearnerKind::Random => {
                while session.cursor() < session.nss() {
                    session.next_support()?;
                }
                Params::Random {
                    seed: session.seed(self.hyper.seed),
                }
            }
            LearnerKind::Prototype => self.fit_prototypes(session)?,
            LearnerKind::LinearFineTune => self.fit_linear(session)?,
        };
        Ok(())
    }

    fn fit_prototypes(&mut self, session: &mut EpisodeSession) -> Result<Params, LearnerError> {
        let dim = self.features.dim();
        while session.cursor() < session.nss() {
            let mut sums: BTreeMap<u32, (Vec<f32>, u32)> = BTreeMap::new();
            {
                let view = session.next_support()?;
                for (input, &label) in view.inputs.iter().zip(&view.labels) {
                    let f = self.features.apply(input, &mut self.macs, Phase::Learning)?;
                    let entry = sums.entry(label).or_insert_with(|| (vec![0.0; dim], 0));
                    for (s, v) in entry.0.iter_mut().zip(&f) {
                        *s += v;
                    }
                    entry.1 += 1;
                }
            }
            for (label, (sum, k)) in sums {
                self.macs.record(Phase::Learning, Primitive::Mean { k: k as u64, d: dim as u64 });
                let previous = session.bank().latest(&proto_tag(label)).map(|e| bytes_to_f32s(&e.payload));
                let prev_count = session
                    .bank()
                    .latest(&count_tag(label))
                    .map(|e| u32::from_le_bytes(e.payload[..4].try_into().unwrap()))
                    .unwrap_or(0);
                let total = prev_count + k;
                let centroid: Vec<f32> = match previous {
                    Some(prev) => {
                        self.macs.record(Phase::Learning, Primitive::Fma(dim as u64));
                        prev.iter()
                            .zip(&sum)
                            .map(|(p, s)| (p * prev_count as f32 + s) / total as f32)
                            .collect()
                    }
                    None => sum.iter().map(|s| s / k as f32).collect(),
                };
                session.store(proto_tag(label), f32s_to_bytes(&centroid), 4)?;
                session.store_label(count_tag(label), total.to_le_bytes().to_vec())?;
            }
        }
        let mut table = BTreeMap::new();
        for entry in session.bank().entries() {
            if let Some(label) = entry.tag.strip_prefix("proto/") {
                let label: u32 = label.parse().expect("tag written above");
                let count = session
                    .bank()
                    .latest(&count_tag(label))
                    .map(|e| u32::from_le_bytes(e.payload[..4].try_into().unwrap()))
                    .unwrap_or(0);
                table.insert(label, (bytes_to_f32s(&entry.payload), count));
            }
        }
        Ok(Params::Prototype { table })
    }

    fn fit_linear(&mut self, session: &mut EpisodeSession) -> Result<Params, LearnerError> {
        let dim = self.features.dim();
        let rows = self.output_labels as usize;
        let mut weights = vec![0f32; rows * dim];
        let mut bias = vec![0f32; rows];
        while session.cursor() < session.nss() {
            let (xs, ys) = {
                let view = session.next_support()?;
                let xs = view
                    .inputs
                    .iter()
                    .map(|input| self.features.apply(input, &mut self.macs, Phase::Learning))
                    .collect::<Result<Vec<_>, _>>()?;
                (xs, view.labels.clone())
            };
            let n = xs.len() as f32;
            for _ in 0..self.hyper.steps {
                let mut grad_w = vec![0f32; rows * dim];
                let mut grad_b = vec![0f32; rows];
                for (x, &y) in xs.iter().zip(&ys) {
                    let probs = softmax(&logits(&weights, &bias, x));
                    for (r, p) in probs.iter().enumerate() {
                        let g = p - if r as u32 == y { 1.0 } else { 0.0 };
                        grad_b[r] += g;
                        for (gw, xv) in grad_w[r * dim..(r + 1) * dim].iter_mut().zip(x) {
                            *gw += g * xv;
                        }
                    }
                    self.macs.record(Phase::Learning, Primitive::MatVec { rows: rows as u64, cols: dim as u64 });
                    self.macs.record(Phase::Learning, Primitive::Outer { rows: rows as u64, cols: dim as u64 });
                }
                let step = self.hyper.lr / n;
                for (w, g) in weights.iter_mut().zip(&grad_w) {
                    *w -= step * g;
                }
                for (b, g) in bias.iter_mut().zip(&grad_b) {
                    *b -= step * g;
                }
                self.macs.record(Phase::Learning, Primitive::Fma((rows * dim + rows) as u64));
            }
        }
        Ok(Params::Linear { weights, bias })
    }

    /// Predicts a label for each input. Ties go to the lowest label.
    pub fn predict(&mut self, inputs: &[&[u8]]) -> Result<Vec<u32>, LearnerError> {
        let features = &self.features;
        let macs = &mut self.macs;
        match &self.params {
            Params::Unfitted => Err(LearnerError::ModelNotFitted),
            Params::Random { seed } => {
                let mut rng = SplitMix64::new(*seed);
                inputs
                    .iter()
                    .map(|input| {
                        if input.len() != features.input_bytes() {
                            return Err(LearnerError::InputShape {
                                expected: features.input_bytes(),
                                got: input.len(),
                            });
                        }
                        Ok(rng.below(self.output_labels as u64) as u32)
                    })
                    .collect()
            }
            Params::Prototype { table } => inputs
                .iter()
                .map(|input| {
                    let f = features.apply(input, macs, Phase::Inference)?;
                    let mut best: Option<(f32, u32)> = None;
                    for (&label, (centroid, _)) in table {
                        macs.record(Phase::Inference, Primitive::SquaredDistance(centroid.len() as u64));
                        let d = sq_dist(&f, centroid);
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, label));
                        }
                    }
                    Ok(best.map_or(0, |(_, l)| l))
                })
                .collect(),
            Params::Linear { weights, bias } => inputs
                .iter()
                .map(|input| {
                    let f = features.apply(input, macs, Phase::Inference)?;
                    macs.record(
                        Phase::Inference,
                        Primitive::MatVec { rows: bias.len() as u64, cols: f.len() as u64 },
                    );
                    Ok(argmax(&logits(weights, bias, &f)))
                })
                .collect(),
        }
    }
}

fn logits(weights: &[f32], bias: &[f32], x: &[f32]) -> Vec<f32> {
    let dim = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + weights[r * dim..(r + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f32>())
        .collect()
}

fn softmax(z: &[f32]) -> Vec<f32> {
    let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exp: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one wins ties.
fn argmax(values: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Builds a fresh model for `session` and streams the episode through it.
pub fn fit_stream(
    kind: LearnerKind,
    session: &mut EpisodeSession,
    hyper: Hyperparams,
) -> Result<LearnerModel, LearnerError> {
    let output_labels = session.config().output_label_count()?;
    let mut model = LearnerModel::new(kind, hyper, session.pack().geometry(), output_labels)?;
    model.fit_stream(session)?;
    Ok(model)
}

/// Full protocol for one episode: fit, fetch targets, predict, score.
pub fn run_episode(
    kind: LearnerKind,
    session: &mut EpisodeSession,
    hyper: Hyperparams,
) -> Result<(EpisodeScore, MacCounter), LearnerError> {
    let mut model = fit_stream(kind, session, hyper)?;
    let inputs: Vec<Vec<u8>> = session
        .request_target()?
        .inputs
        .iter()
        .map(|i| i.to_vec())
        .collect();
    let refs: Vec<&[u8]> = inputs.iter().map(Vec::as_slice).collect();
    let predictions = model.predict(&refs)?;
    let score = session.submit_predictions(&predictions)?;
    Ok((score, model.macs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskConfig;
    use crate::pack::PackBuilder;
    use crate::sampler::sample_episode;
    use crate::synth::{cluster_pack, ClusterSpec};
    use std::sync::Arc;

    fn session_for(pack: &Arc<crate::pack::DatasetPack>, config: TaskConfig, index: u64) -> EpisodeSession {
        let ep = sample_episode(pack, &config, index).unwrap();
        EpisodeSession::new(pack.clone(), ep)
    }

    #[test]
    fn prototype_separates_two_gaussian_classes_under_task_a() {
        let pack = Arc::new(cluster_pack(&ClusterSpec {
            num_classes: 2,
            per_class: 40,
            noise: 10.0,
            ..ClusterSpec::default()
        }));
        let config = TaskConfig { n_way: 2, ..TaskConfig::five_way_one_shot(5, 5, true) };
        let mut total = 0.0;
        for i in 0..100 {
            let mut s = session_for(&pack, config, i);
            let (score, _) = run_episode(LearnerKind::Prototype, &mut s, Hyperparams::default()).unwrap();
            total += score.accuracy;
        }
        assert!(total / 100.0 >= 0.95, "accuracy {}", total / 100.0);
    }

    #[test]
    fn prototype_zero_distance() {
        // four 1x1 classes with values 0, 100, 200, 50
        let mut b = PackBuilder::new("tiny", 1, 1, 1);
        for v in [0u8, 100, 200, 50] {
            let id = b.add_class(format!("v{v}"));
            for _ in 0..3 {
                b.push_sample(id, &[v]).unwrap();
            }
        }
        let pack = Arc::new(b.finish());
        let config = TaskConfig { n_way: 4, k_target: 2, ..TaskConfig::five_way_one_shot(1, 1, false) };
        let mut s = session_for(&pack, config, 0);
        let mut model = fit_stream(LearnerKind::Prototype, &mut s, Hyperparams::default()).unwrap();
        let table = model.prototypes().unwrap().clone();
        let (label_of_100, _) = table.iter().find(|(_, (c, _))| c[0] == 100.0 / 255.0).unwrap();
        assert_eq!(model.predict(&[&[100u8][..]]).unwrap(), vec![*label_of_100]);

    }

    #[test]
    fn tie_rule_on_exact_table() {
        let features = FeatureTransform::new((1, 1, 1), &Hyperparams::default()).unwrap();
        let mut table = BTreeMap::new();
        // equidistant from labels 3 and 7
        table.insert(3, (vec![0.0f32], 1));
        table.insert(7, (vec![1.0f32], 1));
        let mut model = LearnerModel {
            kind: LearnerKind::Prototype,
            hyper: Hyperparams::default(),
            features,
            output_labels: 8,
            params: Params::Prototype { table },
            macs: MacCounter::default(),
        };
        // query x = 128/255 sits exactly between 0 and 2x
        if let Params::Prototype { table } = &mut model.params {
            table.get_mut(&7).unwrap().0[0] = 2.0 * (128.0 / 255.0);
        }
        assert_eq!(model.predict(&[&[128u8][..]]).unwrap(), vec![3]);
        assert_eq!(argmax(&[0.5, 2.0, 2.0]), 1);
    }

    #[test]
    fn random_is_uniform() {
        let mut model = LearnerModel::new(LearnerKind::Random, Hyperparams::default(), (1, 1, 1), 5).unwrap();
        assert_eq!(model.predict(&[&[0u8][..]]).unwrap_err(), LearnerError::ModelNotFitted);
        model.params = Params::Random { seed: 99 };
        let input = [0u8];
        let inputs: Vec<&[u8]> = (0..1000).map(|_| &input[..]).collect();
        let preds = model.predict(&inputs).unwrap();
        let bound = 3.0 * (1000.0f64 * 0.2 * 0.8).sqrt();
        for label in 0..5 {
            let n = preds.iter().filter(|&&p| p == label).count() as f64;
            assert!((n - 200.0).abs() <= bound, "label {label}: {n}");
        }
    }

    #[test]
    fn fine_tune_rows_track_output_units() {
        let pack = Arc::new(cluster_pack(&ClusterSpec { num_classes: 60, per_class: 8, ..ClusterSpec::default() }));
        for (overwrite, rows) in [(false, 50), (true, 5)] {
            let mut s = session_for(&pack, TaskConfig::five_way_one_shot(10, 1, overwrite), 0);
            let model = fit_stream(LearnerKind::LinearFineTune, &mut s, Hyperparams::default()).unwrap();
            assert_eq!(model.weight_rows(), Some(rows));
            assert_eq!(s.cursor(), 10);
            assert_eq!(s.bank().total_bytes(), 0);
        }
    }

    #[test]
    fn prototype_order_invariance_under_task_a() {
        let pack = Arc::new(cluster_pack(&ClusterSpec::default()));
        let config = TaskConfig::five_way_one_shot(4, 4, true);
        let ep = sample_episode(&pack, &config, 1).unwrap();
        let mut reversed = ep.clone();
        reversed.support_sets.reverse();
        let mut a = EpisodeSession::new(pack.clone(), ep);
        let mut b = EpisodeSession::new(pack.clone(), reversed);
        let ma = fit_stream(LearnerKind::Prototype, &mut a, Hyperparams::default()).unwrap();
        let mb = fit_stream(LearnerKind::Prototype, &mut b, Hyperparams::default()).unwrap();
        let (ta, tb) = (ma.prototypes().unwrap(), mb.prototypes().unwrap());
        assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
        for (label, (ca, na)) in ta {
            let (cb, nb) = &tb[label];
            assert_eq!(na, nb);
            assert_eq!(*na, 4);
            for (x, y) in ca.iter().zip(cb) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pooled_prototype_bank_footprint() {
        let pack = Arc::new(cluster_pack(&ClusterSpec {
            num_classes: 15,
            per_class: 6,
            side: 64,
            channels: 3,
            grid: 8,
            ..ClusterSpec::default()
        }));
        let mut s = session_for(&pack, TaskConfig::five_way_one_shot(3, 1, false), 0);
        let hyper = Hyperparams { embed_grid: Some(8), ..Hyperparams::default() };
        let (score, macs) = run_episode(LearnerKind::Prototype, &mut s, hyper).unwrap();
        assert_eq!(score.atm.memory_bytes, 3840);
        assert_eq!(score.atm.episode_input_bytes, 184_320);
        assert!(macs.inference > 0 && macs.learning > 0);
    }
}
