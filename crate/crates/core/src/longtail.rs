//! Long-tailed subsets of balanced datasets.
//!
//! Class `i` keeps `round(n_0 * mu^i)` samples where `mu = IF^(-1/(C-1))`, so the
//! head class keeps `n_0` and the tail class keeps about `n_0 / IF`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::SourceDescriptor;
use crate::error::{GlmcError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub num_classes: usize,
    pub max_count: usize,
    pub imbalance_factor: f64,
    pub seed: u64,
}

impl ImbalanceSpec {
    pub fn new(num_classes: usize, max_count: usize, imbalance_factor: f64, seed: u64) -> Result<Self> {
        let spec = ImbalanceSpec {
            num_classes,
            max_count,
            imbalance_factor,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(GlmcError::InvalidSpec("num_classes must be positive".into()));
        }
        if self.max_count == 0 {
            return Err(GlmcError::InvalidSpec("max_count must be positive".into()));
        }
        if !self.imbalance_factor.is_finite() || self.imbalance_factor < 1.0 {
            return Err(GlmcError::InvalidSpec(format!(
                "imbalance factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if (self.max_count as f64) / self.imbalance_factor < 1.0 {
            return Err(GlmcError::InvalidSpec(format!(
                "max_count {} / imbalance factor {} leaves an empty tail class",
                self.max_count, self.imbalance_factor
            )));
        }
        Ok(())
    }

    /// Geometric decay ratio `IF^(-1/(C-1))`; 1 for a single class or IF = 1.
    pub fn decay_mu(&self) -> f64 {
        if self.num_classes <= 1 || self.imbalance_factor == 1.0 {
            return 1.0;
        }
        self.imbalance_factor.powf(-1.0 / (self.num_classes as f64 - 1.0))
    }
}

/// Per-class counts, strictly positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    counts: Vec<usize>,
}

impl ClassFrequencyTable {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(GlmcError::InvalidArgument("class table needs at least one class".into()));
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(GlmcError::InvalidArgument(format!("class {class} has no samples")));
        }
        Ok(ClassFrequencyTable { counts })
    }

    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            if y >= num_classes {
                return Err(GlmcError::InvalidArgument(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            counts[y] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `r_i = n_i / sum_j n_j`.
    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Number of samples each class keeps under `spec`.
pub fn compute_class_counts(spec: &ImbalanceSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let mu = spec.decay_mu();
    let n0 = spec.max_count as f64;
    Ok((0..spec.num_classes)
        .map(|i| {
            // round half up, floor at one
            let exact = n0 * mu.powi(i as i32);
            ((exact + 0.5).floor() as usize).max(1)
        })
        .collect())
}

/// `max(counts) / min(counts)`.
pub fn imbalance_factor(table: &ClassFrequencyTable) -> f64 {
    let max = *table.counts().iter().max().expect("non-empty table");
    let min = *table.counts().iter().min().expect("non-empty table");
    max as f64 / min as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Images stored contiguously in CHW order, one label, identifier and weight slot per sample.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    shape: ImageShape,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    weights: Vec<f32>,
}

impl LabeledDataset {
    pub fn new(
        shape: ImageShape,
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * shape.numel() {
            return Err(GlmcError::ShapeMismatch(format!(
                "{} pixels for {} samples of {:?}",
                pixels.len(),
                labels.len(),
                shape
            )));
        }
        if ids.len() != labels.len() {
            return Err(GlmcError::ShapeMismatch(format!(
                "{} ids for {} samples",
                ids.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(GlmcError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let weights = vec![1.0; labels.len()];
        Ok(LabeledDataset {
            shape,
            num_classes,
            pixels,
            labels,
            ids,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn weight(&self, i: usize) -> f32 {
        self.weights[i]
    }

    /// Fill each sample's weight slot with the weight of its class.
    pub fn assign_class_weights(&mut self, class_weights: &[f64]) -> Result<()> {
        if class_weights.len() != self.num_classes {
            return Err(GlmcError::ShapeMismatch(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                self.num_classes
            )));
        }
        for (w, &y) in self.weights.iter_mut().zip(&self.labels) {
            *w = class_weights[y] as f32;
        }
        Ok(())
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    pub fn class_table(&self) -> Result<ClassFrequencyTable> {
        ClassFrequencyTable::from_labels(&self.labels, self.num_classes)
    }

    /// New dataset holding the given samples in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let n = self.shape.numel();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        LabeledDataset {
            shape: self.shape,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Select samples by identifier. Fails if an identifier is missing.
    pub fn select_ids(&self, ids: &[u64]) -> Result<LabeledDataset> {
        let lookup: std::collections::HashMap<u64, usize> =
            self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let indices = ids
            .iter()
            .map(|id| {
                lookup
                    .get(id)
                    .copied()
                    .ok_or_else(|| GlmcError::InvalidArgument(format!("sample id {id} not in source")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select(&indices))
    }

    /// SHA-256 over labels, identifiers and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.shape.channels as u64).to_le_bytes());
        hasher.update((self.shape.height as u64).to_le_bytes());
        hasher.update((self.shape.width as u64).to_le_bytes());
        for (&y, &id) in self.labels.iter().zip(&self.ids) {
            hasher.update((y as u64).to_le_bytes());
            hasher.update(id.to_le_bytes());
        }
        for p in &self.pixels {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Subsample `balanced` so class `i` keeps `compute_class_counts(spec)[i]` samples,
/// chosen uniformly without replacement under `spec.seed`.
pub fn build_longtail_subset(balanced: &LabeledDataset, spec: &ImbalanceSpec) -> Result<LabeledDataset> {
    let counts = compute_class_counts(spec)?;
    if spec.num_classes != balanced.num_classes() {
        return Err(GlmcError::InvalidSpec(format!(
            "spec has {} classes, dataset has {}",
            spec.num_classes,
            balanced.num_classes()
        )));
    }
    let members = balanced.class_members();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::with_capacity(counts.iter().sum());
    for (class, (&needed, pool)) in counts.iter().zip(&members).enumerate() {
        if pool.len() < needed {
            return Err(GlmcError::InsufficientSamples {
                class,
                needed,
                available: pool.len(),
            });
        }
        let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), needed)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    Ok(balanced.select(&keep))
}

/// Provenance of a built subset: written as `manifest.json` next to `index.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub source: SourceDescriptor,
    pub source_hash: String,
    pub spec: ImbalanceSpec,
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

impl SubsetManifest {
    pub fn describe(source: SourceDescriptor, source_hash: String, spec: ImbalanceSpec, subset: &LabeledDataset) -> Result<Self> {
        let table = subset.class_table()?;
        Ok(SubsetManifest {
            source,
            source_hash,
            spec,
            counts: table.counts().to_vec(),
            frequencies: table.frequencies(),
        })
    }

    pub fn table(&self) -> Result<ClassFrequencyTable> {
        ClassFrequencyTable::new(self.counts.clone())
    }

    /// Write `manifest.json` and `index.txt` (one retained sample id per line) into `dir`.
    pub fn write(&self, dir: &Path, ids: &[u64]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GlmcError::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&manifest_path, json + "\n").map_err(|e| GlmcError::io(&manifest_path, e))?;

        let index_path = dir.join(INDEX_FILE);
        let mut out = std::io::BufWriter::new(
            fs::File::create(&index_path).map_err(|e| GlmcError::io(&index_path, e))?,
        );
        for id in ids {
            writeln!(out, "{id}").map_err(|e| GlmcError::io(&index_path, e))?;
        }
        out.flush().map_err(|e| GlmcError::io(&index_path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<(SubsetManifest, Vec<u64>)> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| GlmcError::io(&manifest_path, e))?;
        let manifest: SubsetManifest =
            serde_json::from_str(&text).map_err(|e| GlmcError::format(&manifest_path, e.to_string()))?;

        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| GlmcError::io(&index_path, e))?;
        let ids = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<u64>()
                    .map_err(|e| GlmcError::format(&index_path, format!("bad id `{l}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() != manifest.counts.iter().sum::<usize>() {
            return Err(GlmcError::format(
                &index_path,
                format!(
                    "{} ids listed but manifest counts sum to {}",
                    ids.len(),
                    manifest.counts.iter().sum::<usize>()
                ),
            ));
        }
        Ok((manifest, ids))
    }
}
