//! Stage-2 classifier finetuning with per-class max-norm projected gradient descent.
//!
//! After each step every class row `θ_k` of the head is mapped to `min(1, δ/‖θ_k‖)·θ_k`.

use candle_core::{DType, Tensor, Var};
use ndarray::Array2;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::longtail::LabeledDataset;
use crate::losses::{rebalanced_cross_entropy, scalar};
use crate::mixing::one_hot;
use crate::model::{HeadMode, Linear, Network, Param, ParamGroup};
use crate::optim::SgdMomentum;
use crate::rebalance::{class_weights, RebalanceConfig};

/// Radius of the norm ball: a fixed value or the median head row norm at stage-2 entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DeltaRepr", into = "DeltaRepr")]
pub enum Delta {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DeltaRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<DeltaRepr> for Delta {
    type Error = String;

    fn try_from(r: DeltaRepr) -> std::result::Result<Self, String> {
        match r {
            DeltaRepr::Number(v) => Ok(Delta::Fixed(v)),
            DeltaRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Delta> for DeltaRepr {
    fn from(d: Delta) -> Self {
        match d {
            Delta::Auto => DeltaRepr::Text("auto".into()),
            Delta::Fixed(v) => DeltaRepr::Number(v),
        }
    }
}

impl std::str::FromStr for Delta {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Delta::Auto);
        }
        s.parse::<f64>()
            .map(Delta::Fixed)
            .map_err(|_| format!("expected \"auto\" or a number, got `{s}`"))
    }
}

/// When the projection is applied during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionCadence {
    Iteration,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxNormConfig {
    /// Run stage 2 automatically after training.
    pub enabled: bool,
    pub delta: Delta,
    pub epochs: usize,
    /// Step size; `None` means the stage-1 initial rate divided by 100.
    pub lr: Option<f64>,
    pub freeze_encoder: bool,
    pub cadence: ProjectionCadence,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MaxNormConfig {
    fn default() -> Self {
        MaxNormConfig {
            enabled: false,
            delta: Delta::Auto,
            epochs: 10,
            lr: None,
            freeze_encoder: true,
            cadence: ProjectionCadence::Iteration,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl MaxNormConfig {
    pub fn resolved_lr(&self, stage1_lr: f64) -> f64 {
        self.lr.unwrap_or(stage1_lr / 100.0)
    }
}

fn row_norm<T: Float>(row: &[T]) -> f64 {
    row.iter()
        .map(|v| {
            let x = v.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Project one row in place. Rows inside the ball are left untouched.
pub fn project_row<T: Float>(row: &mut [T], delta: f64) {
    let norm = row_norm(row);
    if norm <= delta {
        return;
    }
    let scale = T::from(delta / norm).unwrap_or_else(T::zero);
    row.iter_mut().for_each(|v| *v = *v * scale);
    // rounding can leave the norm a hair above δ; shrink until it is not, so a
    // second projection is a no-op
    let shrink = T::one() - T::epsilon();
    while row_norm(row) > delta {
        row.iter_mut().for_each(|v| *v = *v * shrink);
    }
}

/// Project each row of a row-major `(rows, cols)` buffer.
pub fn project_rows_in_place<T: Float>(data: &mut [T], cols: usize, delta: f64) -> Result<()> {
    check_delta(delta)?;
    if cols == 0 || !data.len().is_multiple_of(cols) {
        return Err(GlmcError::ShapeMismatch(format!("{} values in rows of {cols}", data.len())));
    }
    data.chunks_mut(cols).for_each(|row| project_row(row, delta));
    Ok(())
}

/// `θ_k ← min(1, δ/‖θ_k‖)·θ_k` for every row of `weights`.
pub fn project_weights(weights: &Array2<f64>, delta: f64) -> Result<Array2<f64>> {
    check_delta(delta)?;
    let mut out = weights.clone();
    for mut row in out.rows_mut() {
        let mut buf = row.to_vec();
        project_row(&mut buf, delta);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    Ok(out)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_nan() || delta <= 0.0 || !delta.is_finite() {
        return Err(GlmcError::config("finetune.delta", format!("must be positive, got {delta}")));
    }
    Ok(())
}

pub fn row_norms(weight: &Var) -> Result<Vec<f64>> {
    let (rows, cols) = weight.dims2()?;
    let host = weight.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..rows).map(|r| row_norm(&host[r * cols..(r + 1) * cols])).collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Project the rows of a weight variable in its own dtype.
pub fn project_var(weight: &Var, delta: f64) -> Result<()> {
    let (rows, cols) = weight.dims2()?;
    let device = weight.device().clone();
    let t = match weight.dtype() {
        DType::F64 => {
            let mut host = weight.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            project_rows_in_place(&mut host, cols, delta)?;
            Tensor::from_vec(host, (rows, cols), &device)?
        }
        _ => {
            let mut host = weight.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            project_rows_in_place(&mut host, cols, delta)?;
            Tensor::from_vec(host, (rows, cols), &device)?.to_dtype(weight.dtype())?
        }
    };
    weight.set(&t)?;
    Ok(())
}

/// Step-level settings after `auto` values are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    pub delta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub cadence: ProjectionCadence,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub delta: f64,
    pub steps: usize,
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Largest head row norm after each projection pass, the initial pass first.
    pub max_norms: Vec<f64>,
}

fn max_norm(weight: &Var) -> Result<f64> {
    Ok(row_norms(weight)?.into_iter().fold(0.0, f64::max))
}

/// The PGD loop: minibatch rebalanced cross-entropy, one SGD step, projection.
fn run_pgd<F>(
    head: &Linear,
    params: Vec<Param>,
    labels: &[usize],
    sample_weights: &[f64],
    num_classes: usize,
    settings: &FinetuneSettings,
    mut logits_for: F,
) -> Result<FinetuneReport>
where
    F: FnMut(&[usize]) -> Result<Tensor>,
{
    check_delta(settings.delta)?;
    if settings.batch_size == 0 {
        return Err(GlmcError::config("finetune.batch_size", "must be at least 1"));
    }
    let weight = head.weight();
    let mut report = FinetuneReport {
        delta: settings.delta,
        steps: 0,
        epoch_loss: Vec::new(),
        max_norms: Vec::new(),
    };
    project_var(weight, settings.delta)?;
    report.max_norms.push(max_norm(weight)?);

    let mut opt = SgdMomentum::new(params, settings.momentum, settings.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let logits = logits_for(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let p = Tensor::from_vec(
                one_hot(&batch_labels, num_classes).into_raw_vec_and_offset().0,
                (chunk.len(), num_classes),
                logits.device(),
            )?;
            let w: Vec<f64> = chunk.iter().map(|&i| sample_weights[i]).collect();
            let w = Tensor::from_vec(w, chunk.len(), logits.device())?;
            let loss = rebalanced_cross_entropy(&logits, &logits, &p, &w)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(GlmcError::Diverged {
                    epoch: report.epoch_loss.len(),
                    step: report.steps,
                });
            }
            let grads = loss.backward()?;
            opt.step(&grads, settings.lr)?;
            report.steps += 1;
            total += value;
            batches += 1;
            if settings.cadence == ProjectionCadence::Iteration {
                project_var(weight, settings.delta)?;
                report.max_norms.push(max_norm(weight)?);
            }
        }
        if settings.cadence == ProjectionCadence::Epoch {
            project_var(weight, settings.delta)?;
            report.max_norms.push(max_norm(weight)?);
        }
        report.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok(report)
}

/// Finetune a linear head on fixed features `(N, d)`.
pub fn finetune_linear_head(
    head: &Linear,
    features: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
    settings: &FinetuneSettings,
) -> Result<FinetuneReport> {
    let num_classes = head.out_dim();
    if features.dim(0)? != labels.len() {
        return Err(GlmcError::ShapeMismatch(format!("{} features for {} labels", features.dim(0)?, labels.len())));
    }
    if labels.is_empty() {
        return Err(GlmcError::EmptyDataset);
    }
    let sample_weights: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
    let params = vec![Param {
        name: "head.weight".into(),
        var: head.weight().clone(),
        group: ParamGroup::RebalancedClassifier,
        trainable: true,
    }];
    let features = features.detach();
    run_pgd(head, params, labels, &sample_weights, num_classes, settings, |idx| {
        let idx_t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), features.device())?;
        head.forward(&features.index_select(&idx_t, 0)?)
    })
}

/// Features of the whole dataset in evaluation mode, computed in chunks.
pub fn extract_features(network: &Network, dataset: &LabeledDataset, chunk: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let batch = crate::sampler::Batch::gather(dataset, idx);
        let x = network.images_to_tensor(&batch.images)?;
        parts.push(network.encode(&x, false)?.detach());
    }
    if parts.is_empty() {
        return Err(GlmcError::EmptyDataset);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Stage 2: finetune the inference head of `network` under the max-norm constraint.
///
/// The loss is the rebalanced cross-entropy with the stage-1 `reweight_k` (α fixed to 0).
pub fn finetune_classifier(
    network: &mut Network,
    dataset: &LabeledDataset,
    config: &MaxNormConfig,
    rebalance: &RebalanceConfig,
    head_mode: HeadMode,
    stage1_lr: f64,
) -> Result<FinetuneReport> {
    if network.trained_epochs() == 0 {
        return Err(GlmcError::UntrainedNetwork);
    }
    if dataset.is_empty() {
        return Err(GlmcError::EmptyDataset);
    }
    let head = network.inference_head(head_mode).clone();
    let delta = match config.delta {
        Delta::Fixed(d) => d,
        Delta::Auto => median(&row_norms(head.weight())?),
    };
    let settings = FinetuneSettings {
        delta,
        epochs: config.epochs,
        lr: config.resolved_lr(stage1_lr),
        cadence: config.cadence,
        batch_size: config.batch_size,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        seed: config.seed,
    };
    let weights = class_weights(&dataset.class_table()?, rebalance.reweight_k)?;
    if config.freeze_encoder {
        let features = extract_features(network, dataset, 256)?;
        return finetune_linear_head(&head, &features, dataset.labels(), weights.as_slice(), &settings);
    }
    let mut params = network.store().trainable(&[ParamGroup::Encoder]);
    params.push(Param {
        name: "head.weight".into(),
        var: head.weight().clone(),
        group: ParamGroup::RebalancedClassifier,
        trainable: true,
    });
    let sample_weights: Vec<f64> = dataset.labels().iter().map(|&y| weights[y]).collect();
    let net: &Network = network;
    run_pgd(
        &head,
        params,
        dataset.labels(),
        &sample_weights,
        dataset.num_classes(),
        &settings,
        |idx| {
            let batch = crate::sampler::Batch::gather(dataset, idx);
            let x = net.images_to_tensor(&batch.images)?;
            head.forward(&net.encode(&x, true)?)
        },
    )
}
