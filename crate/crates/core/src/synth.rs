//! Synthetic packs for tests, demos and benchmark dry runs.

use serde::{Deserialize, Serialize};

use crate::pack::{DatasetPack, PackBuilder};
use crate::rng::SplitMix64;

/// Grayscale `side x side` pack where every pixel of a sample carries a
/// value derived from its (class, instance) pair. No class structure.
pub fn uniform_pack(num_classes: u32, per_class: u32, side: u32) -> DatasetPack {
    let mut b = PackBuilder::new("uniform", side, side, 1);
    let bytes = (side * side) as usize;
    for c in 0..num_classes {
        let id = b.add_class(format!("class{c:05}"));
        for i in 0..per_class {
            let mut rng = SplitMix64::for_stream(c as u64, i as u64);
            let pixels: Vec<u8> = (0..bytes).map(|_| rng.below(256) as u8).collect();
            b.push_sample(id, &pixels).expect("geometry matches");
        }
    }
    b.finish()
}

/// Class-conditional Gaussian images.
///
/// Each class owns a mean image that is constant over the cells of a
/// `grid x grid` partition, with cell levels uniform in `[32, 224)`. Samples
/// add independent Gaussian noise of standard deviation `noise` per pixel and
/// are clamped to `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub num_classes: u32,
    pub per_class: u32,
    pub side: u32,
    pub channels: u32,
    pub grid: u32,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            name: "clusters".into(),
            num_classes: 60,
            per_class: 20,
            side: 8,
            channels: 1,
            grid: 4,
            noise: 12.0,
            seed: 0,
        }
    }
}

pub fn cluster_pack(spec: &ClusterSpec) -> DatasetPack {
    let side = spec.side as usize;
    let channels = spec.channels as usize;
    let grid = spec.grid.clamp(1, spec.side) as usize;
    let mut b = PackBuilder::new(spec.name.clone(), spec.side, spec.side, spec.channels);
    for c in 0..spec.num_classes {
        let id = b.add_class(format!("class{c:05}"));
        let mut class_rng = SplitMix64::for_stream(spec.seed, c as u64);
        let levels: Vec<f64> = (0..grid * grid * channels)
            .map(|_| 32.0 + class_rng.below(192) as f64)
            .collect();
        for i in 0..spec.per_class {
            let mut rng =
                SplitMix64::for_stream(spec.seed ^ 0x0005_EED0_F5A4_D1E5, ((c as u64) << 32) | i as u64);
            let mut pixels = Vec::with_capacity(side * side * channels);
            for y in 0..side {
                for x in 0..side {
                    let cell = (y * grid / side) * grid + x * grid / side;
                    for ch in 0..channels {
                        let v = levels[cell * channels + ch] + spec.noise * rng.next_gaussian();
                        pixels.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            b.push_sample(id, &pixels).expect("geometry matches");
        }
    }
    b.finish()
}
