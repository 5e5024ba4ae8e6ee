//! Packed datasets: a JSON manifest plus one raw pixel blob.
//!
//! On disk a pack is a directory holding `manifest.json` and `pixels.bin`.
//! Pixels are unsigned 8-bit, row-major, channel-interleaved; each sample
//! occupies exactly `height * width * channels` bytes at the byte offset the
//! manifest records for it.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::downsample::{box_downsample, DownsampleError, PixelImage};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "pixels.bin";

/// In-memory budget a dataset must fit to be considered practical (16 GiB).
pub const SIZE_LIMIT_BYTES: u64 = 16 << 30;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("inconsistent pack: {0}")]
    Inconsistent(String),
    #[error("source {0} contains no classes")]
    EmptySource(PathBuf),
    #[error("cannot ingest {path}: {message}")]
    Ingest { path: PathBuf, message: String },
    #[error("split {train}+{val}+{test} does not cover {num_classes} classes")]
    Split {
        train: usize,
        val: usize,
        test: usize,
        num_classes: usize,
    },
    #[error(transparent)]
    Downsample(#[from] DownsampleError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PackError + '_ {
    move |source| PackError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub id: u32,
    pub name: String,
    pub count: u32,
    pub offsets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub classes: Vec<ClassRecord>,
}

impl Manifest {
    pub fn sample_bytes(&self) -> usize {
        (self.height * self.width * self.channels) as usize
    }

    pub fn total_samples(&self) -> u64 {
        self.classes.iter().map(|c| c.count as u64).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest always serializes")
    }

    /// Checks the manifest against a blob of `blob_len` bytes: dense ids,
    /// counts matching offsets, and offsets tiling the blob exactly once.
    pub fn check(&self, blob_len: usize) -> Result<(), PackError> {
        let sample = self.sample_bytes();
        if sample == 0 {
            return Err(PackError::Inconsistent("zero-sized samples".into()));
        }
        let mut all = Vec::with_capacity(self.total_samples() as usize);
        for (i, class) in self.classes.iter().enumerate() {
            if class.id as usize != i {
                return Err(PackError::Inconsistent(format!(
                    "class at position {i} has id {}",
                    class.id
                )));
            }
            if class.count as usize != class.offsets.len() {
                return Err(PackError::Inconsistent(format!(
                    "class {i} declares {} samples but lists {} offsets",
                    class.count,
                    class.offsets.len()
                )));
            }
            all.extend_from_slice(&class.offsets);
        }
        if all.len() * sample != blob_len {
            return Err(PackError::Inconsistent(format!(
                "blob holds {blob_len} bytes, manifest implies {}",
                all.len() * sample
            )));
        }
        all.sort_unstable();
        for (i, &off) in all.iter().enumerate() {
            if off != (i * sample) as u64 {
                return Err(PackError::Inconsistent(format!(
                    "offsets do not tile the blob (found {off} at rank {i})"
                )));
            }
        }
        Ok(())
    }
}

/// A class-indexed image store. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPack {
    manifest: Manifest,
    blob: Vec<u8>,
}

/// Accumulates classes and samples into a pack in insertion order.
#[derive(Debug)]
pub struct PackBuilder {
    manifest: Manifest,
    blob: Vec<u8>,
}

impl PackBuilder {
    pub fn new(name: impl Into<String>, height: u32, width: u32, channels: u32) -> Self {
        PackBuilder {
            manifest: Manifest {
                name: name.into(),
                height,
                width,
                channels,
                classes: Vec::new(),
            },
            blob: Vec::new(),
        }
    }

    /// Starts a new class and returns its id.
    pub fn add_class(&mut self, name: impl Into<String>) -> u32 {
        let id = self.manifest.classes.len() as u32;
        self.manifest.classes.push(ClassRecord {
            id,
            name: name.into(),
            count: 0,
            offsets: Vec::new(),
        });
        id
    }

    pub fn push_sample(&mut self, class: u32, pixels: &[u8]) -> Result<(), PackError> {
        let expected = self.manifest.sample_bytes();
        if pixels.len() != expected {
            return Err(PackError::Inconsistent(format!(
                "sample has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        let offset = self.blob.len() as u64;
        let record = self
            .manifest
            .classes
            .get_mut(class as usize)
            .ok_or_else(|| PackError::Inconsistent(format!("unknown class {class}")))?;
        record.offsets.push(offset);
        record.count += 1;
        self.blob.extend_from_slice(pixels);
        Ok(())
    }

    pub fn finish(self) -> DatasetPack {
        DatasetPack {
            manifest: self.manifest,
            blob: self.blob,
        }
    }
}

/// Class counts for a contiguous train/val/test split in manifest order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuitabilityReport {
    pub num_classes: usize,
    pub samples_per_class_min: u32,
    pub samples_per_class_max: u32,
    pub total_images: u64,
    pub resolution: (u32, u32, u32),
    /// Blob bytes plus serialized manifest bytes.
    pub estimated_in_memory_bytes: u64,
    /// Size of the same images held as 32-bit floats, the usual layout once
    /// a dataset is loaded for training.
    pub float32_bytes: u64,
    pub passes_size_criterion: bool,
}

impl SuitabilityReport {
    pub fn from_manifest(manifest: &Manifest) -> Self {
        let total_images = manifest.total_samples();
        let blob = total_images * manifest.sample_bytes() as u64;
        let estimated = blob + manifest.to_json().len() as u64;
        SuitabilityReport {
            num_classes: manifest.classes.len(),
            samples_per_class_min: manifest.classes.iter().map(|c| c.count).min().unwrap_or(0),
            samples_per_class_max: manifest.classes.iter().map(|c| c.count).max().unwrap_or(0),
            total_images,
            resolution: (manifest.height, manifest.width, manifest.channels),
            estimated_in_memory_bytes: estimated,
            float32_bytes: blob * 4,
            passes_size_criterion: estimated <= SIZE_LIMIT_BYTES,
        }
    }
}

impl DatasetPack {
    pub fn from_parts(manifest: Manifest, blob: Vec<u8>) -> Result<Self, PackError> {
        manifest.check(blob.len())?;
        Ok(DatasetPack { manifest, blob })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn class_count(&self, class: u32) -> u32 {
        self.manifest.classes[class as usize].count
    }

    pub fn geometry(&self) -> (u32, u32, u32) {
        (self.manifest.height, self.manifest.width, self.manifest.channels)
    }

    pub fn sample_bytes(&self) -> usize {
        self.manifest.sample_bytes()
    }

    /// Pixels of the `instance`-th sample of `class`.
    pub fn sample(&self, class: u32, instance: u32) -> &[u8] {
        let offset = self.manifest.classes[class as usize].offsets[instance as usize] as usize;
        &self.blob[offset..offset + self.sample_bytes()]
    }

    pub fn read(dir: &Path) -> Result<Self, PackError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| PackError::Manifest {
                path: manifest_path.clone(),
                message: e.to_string(),
            })?;
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        Self::from_parts(manifest, blob)
    }

    pub fn write(&self, dir: &Path) -> Result<(), PackError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, self.manifest.to_json()).map_err(io_err(&manifest_path))?;
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &self.blob).map_err(io_err(&blob_path))?;
        Ok(())
    }

    /// Keeps the first `max_per_class` samples of every class, in manifest
    /// order. The blob is rewritten compactly.
    pub fn slim(&self, max_per_class: usize) -> DatasetPack {
        self.rebuild(&self.manifest.name, 0..self.num_classes(), |count| {
            count.min(max_per_class)
        })
    }

    fn rebuild(
        &self,
        name: &str,
        classes: std::ops::Range<usize>,
        keep: impl Fn(usize) -> usize,
    ) -> DatasetPack {
        let (h, w, c) = self.geometry();
        let mut builder = PackBuilder::new(name, h, w, c);
        for class in &self.manifest.classes[classes] {
            let id = builder.add_class(class.name.clone());
            for instance in 0..keep(class.count as usize) {
                builder
                    .push_sample(id, self.sample(class.id, instance as u32))
                    .expect("sample size matches geometry");
            }
        }
        builder.finish()
    }

    /// Splits classes contiguously: the first `train` classes, then `val`,
    /// then `test`. Class ids are re-densified within each part.
    pub fn split_by_class(
        &self,
        spec: SplitSpec,
    ) -> Result<(DatasetPack, DatasetPack, DatasetPack), PackError> {
        let n = self.num_classes();
        if spec.train + spec.val + spec.test != n {
            return Err(PackError::Split {
                train: spec.train,
                val: spec.val,
                test: spec.test,
                num_classes: n,
            });
        }
        let name = &self.manifest.name;
        let all = |count: usize| count;
        let train = self.rebuild(&format!("{name}.train"), 0..spec.train, all);
        let val = self.rebuild(&format!("{name}.val"), spec.train..spec.train + spec.val, all);
        let test = self.rebuild(&format!("{name}.test"), spec.train + spec.val..n, all);
        Ok((train, val, test))
    }

    pub fn stats(&self) -> SuitabilityReport {
        SuitabilityReport::from_manifest(&self.manifest)
    }

    /// Builds a pack from a directory of class subdirectories.
    ///
    /// Classes are ordered by subdirectory name, samples by file name.
    /// Every image is converted to `channels` (1 = grayscale, 3 = RGB) and
    /// box-downsampled to `resolution x resolution`. Hidden entries are
    /// skipped.
    pub fn ingest(source: &Path, resolution: u32, channels: u32) -> Result<Self, PackError> {
        if channels != 1 && channels != 3 {
            return Err(PackError::Ingest {
                path: source.to_path_buf(),
                message: format!("unsupported channel count {channels}"),
            });
        }
        let class_dirs: Vec<PathBuf> = sorted_entries(source)?
            .into_iter()
            .filter(|p| p.is_dir())
            .collect();
        if class_dirs.is_empty() {
            return Err(PackError::EmptySource(source.to_path_buf()));
        }
        let name = source
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let mut builder = PackBuilder::new(name, resolution, resolution, channels);
        for dir in class_dirs {
            let files: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.is_file())
                .collect();
            if files.is_empty() {
                return Err(PackError::Ingest {
                    path: dir,
                    message: "class directory holds no images".into(),
                });
            }
            let id = builder.add_class(dir.file_name().unwrap().to_string_lossy().into_owned());
            for file in files {
                let image = load_image(&file, channels)?;
                let small = box_downsample(&image, resolution as usize).map_err(|e| {
                    PackError::Ingest {
                        path: file.clone(),
                        message: e.to_string(),
                    }
                })?;
                builder.push_sample(id, &small.pixels)?;
            }
        }
        Ok(builder.finish())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, PackError> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        entries.push(entry.path());
    }
    entries.sort();
    Ok(entries)
}

fn load_image(path: &Path, channels: u32) -> Result<PixelImage, PackError> {
    let ingest_err = |message: String| PackError::Ingest {
        path: path.to_path_buf(),
        message,
    };
    let decoded = image::ImageReader::open(path)
        .map_err(|e| ingest_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingest_err(e.to_string()))?
        .decode()
        .map_err(|e| ingest_err(e.to_string()))?;
    let (width, height, pixels) = if channels == 1 {
        let img = decoded.into_luma8();
        (img.width(), img.height(), img.into_raw())
    } else {
        let img = decoded.into_rgb8();
        (img.width(), img.height(), img.into_raw())
    };
    PixelImage::new(height as usize, width as usize, channels as usize, pixels)
        .map_err(|e| ingest_err(e.to_string()))
}
