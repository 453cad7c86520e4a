//! Uniform and reversed (inverse-frequency) batch samplers.
//!
//! Training pairs element `i` of a uniform batch with element `i` of a reversed batch of
//! the same size to form head-tail mixtures.

use ndarray::Array4;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::longtail::{ClassFrequencyTable, LabeledDataset};

/// Above this the reversed sampler tends to overfit tail classes.
pub const RESAMPLE_K_WARN: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Every sample equally likely; epochs are reshuffled permutations.
    Uniform,
    /// Class drawn with probability `(1/r_i)^k / sum_j (1/r_j)^k`, then a member uniformly.
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub resample_k: f64,
    pub seed: u64,
}

/// Class probabilities `p_i ∝ (1/r_i)^k`.
pub fn class_sampling_probs(table: &ClassFrequencyTable, resample_k: f64) -> Result<Vec<f64>> {
    if resample_k < 0.0 || resample_k.is_nan() {
        return Err(GlmcError::NegativeExponent(resample_k));
    }
    let freqs = table.frequencies();
    // scale by the smallest frequency first so large k does not overflow
    let r_min = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = freqs.iter().map(|&r| (r_min / r).powf(resample_k)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// A batch gathered from a dataset: images `(N, C, H, W)`, labels and per-sample weights.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub weights: Vec<f32>,
}

impl Batch {
    pub fn gather(dataset: &LabeledDataset, indices: &[usize]) -> Batch {
        let shape = dataset.shape();
        let mut pixels = Vec::with_capacity(indices.len() * shape.numel());
        for &i in indices {
            pixels.extend_from_slice(dataset.image(i));
        }
        let images = Array4::from_shape_vec((indices.len(), shape.channels, shape.height, shape.width), pixels)
            .expect("dataset images have a consistent shape");
        Batch {
            images,
            labels: indices.iter().map(|&i| dataset.label(i)).collect(),
            weights: indices.iter().map(|&i| dataset.weight(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A stateful sampler owning its RNG stream. Single consumer.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    len: usize,
    // uniform mode
    order: Vec<usize>,
    cursor: usize,
    // reversed mode
    members: Vec<Vec<usize>>,
    class_dist: Option<WeightedIndex<f64>>,
}

impl BatchSampler {
    pub fn new(dataset: &LabeledDataset, config: SamplerConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(GlmcError::EmptyDataset);
        }
        if config.resample_k < 0.0 || config.resample_k.is_nan() {
            return Err(GlmcError::NegativeExponent(config.resample_k));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (members, class_dist) = match config.mode {
            SamplerMode::Uniform => (Vec::new(), None),
            SamplerMode::Reversed => {
                let table = dataset.class_table()?;
                let probs = class_sampling_probs(&table, config.resample_k)?;
                let dist = WeightedIndex::new(&probs)
                    .map_err(|e| GlmcError::InvalidArgument(format!("class probabilities: {e}")))?;
                (dataset.class_members(), Some(dist))
            }
        };
        Ok(BatchSampler {
            config,
            rng,
            len: dataset.len(),
            order: Vec::new(),
            cursor: 0,
            members,
            class_dist,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Draw `batch_size` dataset indices.
    pub fn draw_indices(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(GlmcError::InvalidArgument("batch_size must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(batch_size);
        match &self.class_dist {
            None => {
                while out.len() < batch_size {
                    if self.cursor == self.order.len() {
                        self.order = (0..self.len).collect();
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    out.push(self.order[self.cursor]);
                    self.cursor += 1;
                }
            }
            Some(dist) => {
                for _ in 0..batch_size {
                    let class = dist.sample(&mut self.rng);
                    let pool = &self.members[class];
                    out.push(pool[self.rng.random_range(0..pool.len())]);
                }
            }
        }
        Ok(out)
    }
}

pub fn draw_batch(dataset: &LabeledDataset, sampler: &mut BatchSampler, batch_size: usize) -> Result<Batch> {
    let indices = sampler.draw_indices(batch_size)?;
    Ok(Batch::gather(dataset, &indices))
}
