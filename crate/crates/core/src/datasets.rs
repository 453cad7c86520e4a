//! Balanced source datasets: the CIFAR binary releases and a seeded synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::longtail::{ImageShape, LabeledDataset};

/// Environment variable consulted when a CIFAR source has no explicit root.
pub const DATA_ROOT_ENV: &str = "GLMC_DATA_ROOT";

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR10_STD: [f32; 3] = [0.2023, 0.1994, 0.2010];
const CIFAR100_MEAN: [f32; 3] = [0.5071, 0.4865, 0.4409];
const CIFAR100_STD: [f32; 3] = [0.2673, 0.2564, 0.2762];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceDescriptor {
    /// `data_batch_{1..5}.bin` and `test_batch.bin` of the CIFAR-10 binary release.
    Cifar10 { root: PathBuf },
    /// `train.bin` and `test.bin` of the CIFAR-100 binary release (fine labels).
    Cifar100 { root: PathBuf },
    Synthetic(SyntheticSpec),
}

impl SourceDescriptor {
    pub fn load(&self, split: Split) -> Result<LabeledDataset> {
        match self {
            SourceDescriptor::Cifar10 { root } => load_cifar10(root, split),
            SourceDescriptor::Cifar100 { root } => load_cifar100(root, split),
            SourceDescriptor::Synthetic(spec) => spec.generate(split),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SourceDescriptor::Cifar10 { .. } => 10,
            SourceDescriptor::Cifar100 { .. } => 100,
            SourceDescriptor::Synthetic(spec) => spec.num_classes,
        }
    }
}

/// Class-prototype images plus Gaussian noise. Deterministic under `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-pixel noise; prototypes have unit scale.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            channels: 3,
            height: 8,
            width: 8,
            noise: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.channels, self.height, self.width)
    }

    fn prototypes(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shape = self.shape();
        (0..self.num_classes)
            .map(|_| {
                // a few random plane waves per channel give smooth, class-specific structure
                let waves: Vec<(f32, f32, f32)> = (0..3 * shape.channels)
                    .map(|_| {
                        (
                            rng.random_range(-1.5f32..1.5),
                            rng.random_range(-1.5f32..1.5),
                            rng.random_range(0.0f32..std::f32::consts::TAU),
                        )
                    })
                    .collect();
                let mut img = vec![0f32; shape.numel()];
                for c in 0..shape.channels {
                    for y in 0..shape.height {
                        for x in 0..shape.width {
                            let v: f32 = waves[3 * c..3 * c + 3]
                                .iter()
                                .map(|&(fx, fy, phase)| (fx * x as f32 + fy * y as f32 + phase).sin())
                                .sum();
                            img[(c * shape.height + y) * shape.width + x] = v / 3f32.sqrt();
                        }
                    }
                }
                img
            })
            .collect()
    }

    pub fn generate(&self, split: Split) -> Result<LabeledDataset> {
        if self.num_classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(GlmcError::InvalidArgument("synthetic spec has a zero dimension".into()));
        }
        let prototypes = self.prototypes();
        let (per_class, stream, id_offset) = match split {
            Split::Train => (self.train_per_class, 1u64, 0u64),
            Split::Test => (self.test_per_class, 2u64, 1u64 << 40),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let shape = self.shape();
        let n = per_class * self.num_classes;
        let mut pixels = Vec::with_capacity(n * shape.numel());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.num_classes;
            labels.push(y);
            for &p in &prototypes[y] {
                let z: f32 = StandardNormal.sample(&mut rng);
                pixels.push(p + self.noise * z);
            }
        }
        let ids = (0..n as u64).map(|i| i + id_offset).collect();
        LabeledDataset::new(shape, self.num_classes, pixels, labels, ids)
    }
}

/// Resolve a dataset root: explicit path first, then `$GLMC_DATA_ROOT`.
pub fn resolve_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| GlmcError::config("data.root", format!("not set and ${DATA_ROOT_ENV} is unset")))
}

fn read_cifar_file(
    path: &Path,
    label_bytes: usize,
    mean: [f32; 3],
    std: [f32; 3],
    id_offset: u64,
    out: &mut (Vec<f32>, Vec<usize>, Vec<u64>),
) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| GlmcError::io(path, e))?;
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        return Err(GlmcError::format(
            path,
            format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
        ));
    }
    for (k, rec) in bytes.chunks_exact(record).enumerate() {
        // CIFAR-100 records are <coarse><fine><pixels>; CIFAR-10 is <label><pixels>.
        out.1.push(rec[label_bytes - 1] as usize);
        out.2.push(id_offset + k as u64);
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        for c in 0..3 {
            out.0.extend(
                rec[label_bytes + c * plane..label_bytes + (c + 1) * plane]
                    .iter()
                    .map(|&b| (b as f32 / 255.0 - mean[c]) / std[c]),
            );
        }
    }
    Ok(())
}

fn load_cifar10(root: &Path, split: Split) -> Result<LabeledDataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let id_base = if split == Split::Test { 1u64 << 40 } else { 0 };
    let mut acc = (Vec::new(), Vec::new(), Vec::new());
    for (k, name) in files.iter().enumerate() {
        read_cifar_file(&root.join(name), 1, CIFAR10_MEAN, CIFAR10_STD, id_base + 10_000 * k as u64, &mut acc)?;
    }
    LabeledDataset::new(ImageShape::new(3, CIFAR_SIDE, CIFAR_SIDE), 10, acc.0, acc.1, acc.2)
}

fn load_cifar100(root: &Path, split: Split) -> Result<LabeledDataset> {
    let (name, id_base) = match split {
        Split::Train => ("train.bin", 0u64),
        Split::Test => ("test.bin", 1u64 << 40),
    };
    let mut acc = (Vec::new(), Vec::new(), Vec::new());
    read_cifar_file(&root.join(name), 2, CIFAR100_MEAN, CIFAR100_STD, id_base, &mut acc)?;
    LabeledDataset::new(ImageShape::new(3, CIFAR_SIDE, CIFAR_SIDE), 100, acc.0, acc.1, acc.2)
}

/// Write a release in the CIFAR-10 binary layout: `train_per_class` records per class
/// spread over the five training files and `test_per_class` per class in the test file.
/// Pixels are seeded noise around a class-specific grey level.
pub fn write_cifar10_like(dir: &Path, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GlmcError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0usize;
    let mut records = |n: usize| -> Vec<u8> {
        let mut out = Vec::with_capacity(n * (CIFAR_PIXELS + 1));
        for _ in 0..n {
            let label = (next % 10) as u8;
            next += 1;
            out.push(label);
            let base = 20 + 22 * label as i32;
            out.extend((0..CIFAR_PIXELS).map(|_| (base + rng.random_range(-16..=16)).clamp(0, 255) as u8));
        }
        out
    };
    let total = train_per_class * 10;
    for k in 0..5 {
        let n = total / 5 + usize::from(k < total % 5);
        let path = dir.join(format!("data_batch_{}.bin", k + 1));
        fs::write(&path, records(n)).map_err(|e| GlmcError::io(&path, e))?;
    }
    let path = dir.join("test_batch.bin");
    fs::write(&path, records(test_per_class * 10)).map_err(|e| GlmcError::io(&path, e))?;
    Ok(())
}
