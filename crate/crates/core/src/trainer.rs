//! The training loop and run directories.
//!
//! A producer thread samples, augments and mixes batches ahead of the optimizer through
//! a bounded channel; a writer thread appends metrics rows in order. The loop itself
//! owns the network.
//!
//! Run directory layout: `config.toml`, `manifest.json`, `index.txt`, `steps.csv`,
//! `metrics.csv`, `last.safetensors`, `best.safetensors`, `report.json`, `confusion.png`
//! (plus `finetune.json` and `finetuned.safetensors` when stage 2 runs).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use candle_core::Tensor;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::SimpleAugment;
use crate::config::{derive_seed, ExperimentConfig, Method, Partner};
use crate::error::{GlmcError, Result};
use crate::eval::{evaluate, write_confusion_png, EvalReport};
use crate::longtail::{build_longtail_subset, imbalance_factor, ImbalanceSpec, LabeledDataset, SubsetManifest};
use crate::losses::{
    compose_total, consistency_loss, cross_entropy, mixed_cross_entropy, rebalanced_cross_entropy, scalar, total_loss,
    LossBreakdown,
};
use crate::maxnorm::{finetune_classifier, FinetuneReport};
use crate::mixing::{MixedBatch, Mixer, MixingConfig};
use crate::model::checkpoint::{self, CheckpointInfo};
use crate::model::{HeadMode, Network, ParamGroup};
use crate::optim::{cosine_lr, SgdMomentum};
use crate::rebalance::{class_weights, CumulativeSchedule};
use crate::sampler::{draw_batch, Batch, BatchSampler, SamplerConfig, SamplerMode};

pub const CONFIG_FILE: &str = "config.toml";
pub const STEPS_FILE: &str = "steps.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const FINETUNED_CHECKPOINT: &str = "finetuned.safetensors";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.png";
pub const FINETUNE_FILE: &str = "finetune.json";

/// Training subset (with class weights assigned) and the balanced test split.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
}

impl TrainData {
    pub fn new(mut train: LabeledDataset, test: Option<LabeledDataset>, reweight_k: f64) -> Result<Self> {
        let weights = class_weights(&train.class_table()?, reweight_k)?;
        train.assign_class_weights(weights.as_slice())?;
        Ok(TrainData { train, test })
    }

    pub fn is_balanced(&self) -> Result<bool> {
        Ok(imbalance_factor(&self.train.class_table()?) <= 1.0)
    }
}

/// Build (or read back) the long-tailed subset described by `config.data`.
pub fn load_data(config: &ExperimentConfig) -> Result<(TrainData, SubsetManifest)> {
    let (manifest, train) = match &config.data.subset {
        Some(dir) => {
            let (manifest, ids) = SubsetManifest::read(dir)?;
            let balanced = manifest.source.load(crate::datasets::Split::Train)?;
            if balanced.content_hash() != manifest.source_hash {
                return Err(GlmcError::format(
                    dir.join(crate::longtail::MANIFEST_FILE),
                    "source data does not match the recorded hash",
                ));
            }
            let train = balanced.select_ids(&ids)?;
            (manifest, train)
        }
        None => {
            let source = config.data.source_descriptor()?;
            let balanced = source.load(crate::datasets::Split::Train)?;
            let max_count = match config.data.max_count {
                Some(m) => m,
                None => balanced.class_table()?.counts().iter().copied().min().unwrap_or(0),
            };
            let spec = ImbalanceSpec::new(balanced.num_classes(), max_count, config.data.imbalance_factor, config.data.seed)?;
            let train = build_longtail_subset(&balanced, &spec)?;
            let manifest = SubsetManifest::describe(source, balanced.content_hash(), spec, &train)?;
            (manifest, train)
        }
    };
    let test = manifest.source.load(crate::datasets::Split::Test)?;
    Ok((TrainData::new(train, Some(test), config.rebalance.reweight_k)?, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_cb: f64,
    pub l_sim: f64,
    pub alpha: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub l_c: f64,
    pub l_cb: f64,
    pub l_sim: f64,
    pub total: f64,
    pub eval_top1: Option<f64>,
    pub many: Option<f64>,
    pub med: Option<f64>,
    pub few: Option<f64>,
}

/// Loop position and running values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    /// Steps taken so far over all epochs.
    pub step: usize,
    pub alpha: f64,
    pub lr: f64,
    /// Means over the steps of the current epoch.
    pub running: LossBreakdown,
    pub best_top1: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub info: CheckpointInfo,
    pub head_mode: HeadMode,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochMetrics>,
    pub state: TrainState,
    pub final_eval: Option<EvalReport>,
}

impl TrainOutcome {
    pub fn param_hash(&self) -> Result<String> {
        self.network.param_hash()
    }
}

enum StepInput {
    Mixed(Box<MixedBatch>),
    Plain(Batch),
}

enum MetricsRow {
    Step(StepRecord),
    Epoch(EpochMetrics),
}

fn method_name(method: Method) -> &'static str {
    match method {
        Method::Glmc => "glmc",
        Method::Ce => "ce",
    }
}

/// Train with the configured method.
pub fn run_training(config: &ExperimentConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    fit(config, data, out_dir, config.train.method)
}

/// Mixture consistency with cumulative class-balanced learning.
pub fn train(config: &ExperimentConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    fit(config, data, out_dir, Method::Glmc)
}

/// The same harness with plain cross-entropy on uniform batches only.
pub fn train_baseline_ce(config: &ExperimentConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    fit(config, data, out_dir, Method::Ce)
}

pub fn steps_per_epoch(config: &ExperimentConfig, train_len: usize) -> usize {
    config
        .train
        .steps_per_epoch
        .unwrap_or_else(|| train_len.div_ceil(config.train.batch_size).max(1))
}

/// Samples, augments and (for GLMC) mixes every batch of the run, in order.
fn produce(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    method: Method,
    total_steps: usize,
    tx: mpsc::SyncSender<Result<StepInput>>,
) {
    let prepare = || -> Result<()> {
        let t = &config.train;
        let s = &config.sampler;
        let uniform_seed = derive_seed(t.seed, s.seed, "sampler.uniform");
        let mut uniform = BatchSampler::new(
            train,
            SamplerConfig {
                mode: SamplerMode::Uniform,
                resample_k: s.resample_k,
                seed: uniform_seed,
            },
        )?;
        let partner_cfg = match s.partner {
            Partner::Reversed => SamplerConfig {
                mode: SamplerMode::Reversed,
                resample_k: s.resample_k,
                seed: derive_seed(t.seed, s.seed, "sampler.reversed"),
            },
            Partner::Uniform => SamplerConfig {
                mode: SamplerMode::Uniform,
                resample_k: s.resample_k,
                seed: uniform_seed,
            },
        };
        let mut partner = BatchSampler::new(train, partner_cfg)?;
        let augment = if t.augment { SimpleAugment::default() } else { SimpleAugment::disabled() };
        let mut aug_uniform = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 0, "augment.uniform"));
        let mut aug_partner = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 0, "augment.partner"));
        let mut mixer = Mixer::new(MixingConfig {
            seed: derive_seed(t.seed, config.mix.seed, "mix"),
            ..config.mix.clone()
        })?;
        for _ in 0..total_steps {
            let mut u = draw_batch(train, &mut uniform, t.batch_size)?;
            augment.apply_batch(&mut u.images, &mut aug_uniform);
            let item = match method {
                Method::Ce => StepInput::Plain(u),
                Method::Glmc => {
                    let mut p = draw_batch(train, &mut partner, t.batch_size)?;
                    augment.apply_batch(&mut p.images, &mut aug_partner);
                    StepInput::Mixed(Box::new(mixer.make_mixed_batch(&u, &p, train.num_classes())?))
                }
            };
            if tx.send(Ok(item)).is_err() {
                // the training loop stopped early
                return Ok(());
            }
        }
        Ok(())
    };
    if let Err(e) = prepare() {
        let _ = tx.send(Err(e));
    }
}

fn write_metrics(dir: PathBuf, rx: mpsc::Receiver<MetricsRow>) -> Result<()> {
    let mut steps = csv::Writer::from_path(dir.join(STEPS_FILE))?;
    let mut epochs = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    for row in rx {
        match row {
            MetricsRow::Step(r) => steps.serialize(r)?,
            MetricsRow::Epoch(r) => {
                epochs.serialize(r)?;
                epochs.flush().map_err(|e| GlmcError::io(dir.join(METRICS_FILE), e))?;
            }
        }
    }
    steps.flush().map_err(|e| GlmcError::io(dir.join(STEPS_FILE), e))?;
    epochs.flush().map_err(|e| GlmcError::io(dir.join(METRICS_FILE), e))?;
    Ok(())
}

fn to_tensor2(a: &Array2<f32>, network: &Network) -> Result<Tensor> {
    Ok(Tensor::from_vec(a.iter().copied().collect::<Vec<f32>>(), a.dim(), network.device())?.to_dtype(network.dtype())?)
}

fn to_tensor1(a: &Array1<f32>, network: &Network) -> Result<Tensor> {
    Ok(Tensor::from_vec(a.to_vec(), a.len(), network.device())?.to_dtype(network.dtype())?)
}

/// Forward one prepared batch; returns the differentiable total and its breakdown.
fn step_loss(network: &Network, input: &StepInput, alpha: f64, gamma: f64) -> Result<(Tensor, LossBreakdown)> {
    match input {
        StepInput::Mixed(mb) => {
            let xg = network.images_to_tensor(&mb.x_global)?;
            let xl = network.images_to_tensor(&mb.x_local)?;
            let out = network.forward_views(&xg, &xl, true)?;
            let p = to_tensor2(&mb.p_mixed, network)?;
            let w = to_tensor1(&mb.w_mixed, network)?;
            let l_c = mixed_cross_entropy(&out.logits_c_g, &out.logits_c_l, &p)?;
            let l_cb = rebalanced_cross_entropy(&out.logits_cb_g, &out.logits_cb_l, &p, &w)?;
            let l_sim = consistency_loss(&out.bundle)?;
            let total = compose_total(&l_c, &l_cb, &l_sim, alpha, gamma)?;
            let breakdown = total_loss(scalar(&l_c)?, scalar(&l_cb)?, scalar(&l_sim)?, alpha, gamma);
            Ok((total, breakdown))
        }
        StepInput::Plain(b) => {
            let x = network.images_to_tensor(&b.images)?;
            let loss = cross_entropy(&network.forward_classifier(&x, true)?, &b.labels)?;
            let breakdown = total_loss(scalar(&loss)?, 0.0, 0.0, 1.0, 0.0);
            Ok((loss, breakdown))
        }
    }
}

fn mean_breakdown(records: &[StepRecord], alpha: f64, gamma: f64) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let avg = |f: fn(&StepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mut b = total_loss(avg(|r| r.l_c), avg(|r| r.l_cb), avg(|r| r.l_sim), alpha, gamma);
    b.total = avg(|r| r.total);
    b
}

fn fit(config: &ExperimentConfig, data: &TrainData, out_dir: Option<&Path>, method: Method) -> Result<TrainOutcome> {
    config.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(GlmcError::EmptyDataset);
    }
    let t = &config.train;
    let table = train.class_table()?;
    let init_seed = derive_seed(t.seed, 0, "init");
    let mut network = Network::build(
        &config.model.encoder,
        train.shape(),
        train.num_classes(),
        config.model.proj_dim,
        t.precision.dtype(),
        init_seed,
    )?;
    let head_mode = match method {
        Method::Glmc => config.head_mode(data.is_balanced()?),
        Method::Ce => HeadMode::Balanced,
    };
    let info = CheckpointInfo {
        train_counts: table.counts().to_vec(),
        method: method_name(method).into(),
        inference_head: head_mode,
        init_seed,
    };
    let gamma = match method {
        Method::Glmc => config.rebalance.gamma,
        Method::Ce => 0.0,
    };
    let schedule = CumulativeSchedule::new(t.epochs)?;
    let steps = steps_per_epoch(config, train.len());
    let mut optimizer = SgdMomentum::new(network.store().trainable(&ParamGroup::ALL), t.momentum, t.weight_decay);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| GlmcError::io(dir, e))?;
    }

    let mut state = TrainState {
        epoch: 0,
        step: 0,
        alpha: 1.0,
        lr: t.lr,
        running: total_loss(0.0, 0.0, 0.0, 1.0, gamma),
        best_top1: None,
        best_epoch: None,
    };
    let mut step_log = Vec::with_capacity(t.epochs * steps);
    let mut epoch_log = Vec::with_capacity(t.epochs);
    let mut final_eval = None;

    std::thread::scope(|scope| -> Result<()> {
        let (batch_tx, batch_rx) = mpsc::sync_channel(t.prefetch);
        scope.spawn(move || produce(config, train, method, t.epochs * steps, batch_tx));
        let (metrics_tx, writer) = match out_dir {
            Some(dir) => {
                let (tx, rx) = mpsc::channel();
                let dir = dir.to_path_buf();
                (Some(tx), Some(scope.spawn(move || write_metrics(dir, rx))))
            }
            None => (None, None),
        };
        let emit = |row: MetricsRow| {
            if let Some(tx) = &metrics_tx {
                let _ = tx.send(row);
            }
        };

        let run = (|| -> Result<()> {
            for epoch in 0..t.epochs {
                let alpha = match method {
                    Method::Glmc => schedule.alpha(epoch)?,
                    Method::Ce => 1.0,
                };
                let lr = cosine_lr(t.lr, epoch, t.epochs);
                state.epoch = epoch;
                state.alpha = alpha;
                state.lr = lr;
                let first = step_log.len();
                for step in 0..steps {
                    let input = batch_rx
                        .recv()
                        .map_err(|_| GlmcError::InvalidArgument("batch producer stopped".into()))??;
                    let (loss, breakdown) = match step_loss(&network, &input, alpha, gamma) {
                        Err(GlmcError::NanLogits) => return Err(GlmcError::Diverged { epoch, step }),
                        other => other?,
                    };
                    if !breakdown.total.is_finite() {
                        return Err(GlmcError::Diverged { epoch, step });
                    }
                    let grads = loss.backward()?;
                    optimizer.step(&grads, lr)?;
                    state.step += 1;
                    let record = StepRecord {
                        epoch,
                        step,
                        l_c: breakdown.l_c,
                        l_cb: breakdown.l_cb,
                        l_sim: breakdown.l_sim,
                        alpha,
                        total: breakdown.total,
                    };
                    step_log.push(record);
                    emit(MetricsRow::Step(record));
                }
                state.running = mean_breakdown(&step_log[first..], alpha, gamma);
                network.set_trained_epochs(epoch + 1);

                let last_epoch = epoch + 1 == t.epochs;
                let due = (t.eval_every > 0 && (epoch + 1) % t.eval_every == 0) || last_epoch;
                let report = match (&data.test, due) {
                    (Some(test), true) => Some(evaluate(&network, test, &table, head_mode)?),
                    _ => None,
                };
                let metrics = EpochMetrics {
                    epoch,
                    alpha,
                    lr,
                    l_c: state.running.l_c,
                    l_cb: state.running.l_cb,
                    l_sim: state.running.l_sim,
                    total: state.running.total,
                    eval_top1: report.as_ref().map(|r| r.top1_overall),
                    many: report.as_ref().and_then(|r| r.top1_many),
                    med: report.as_ref().and_then(|r| r.top1_medium),
                    few: report.as_ref().and_then(|r| r.top1_few),
                };
                epoch_log.push(metrics);
                emit(MetricsRow::Epoch(metrics));

                let improved = match (&report, state.best_top1) {
                    (Some(r), Some(best)) => r.top1_overall > best,
                    (Some(_), None) => true,
                    (None, _) => false,
                };
                if improved {
                    state.best_top1 = report.as_ref().map(|r| r.top1_overall);
                    state.best_epoch = Some(epoch);
                }
                if let Some(dir) = out_dir {
                    checkpoint::save(&network, &info, &dir.join(LAST_CHECKPOINT))?;
                    if improved || (data.test.is_none() && last_epoch) {
                        checkpoint::save(&network, &info, &dir.join(BEST_CHECKPOINT))?;
                    }
                }
                if last_epoch {
                    final_eval = report;
                }
            }
            Ok(())
        })();
        // unblock the producer before joining it
        drop(batch_rx);
        drop(metrics_tx);
        let written = match writer {
            Some(handle) => handle.join().unwrap_or_else(|_| Err(GlmcError::InvalidArgument("metrics writer panicked".into()))),
            None => Ok(()),
        };
        run.and(written)
    })?;

    Ok(TrainOutcome {
        network,
        info,
        head_mode,
        steps: step_log,
        epochs: epoch_log,
        state,
        final_eval,
    })
}

/// What `run_experiment` produced.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outcome: TrainOutcome,
    pub report: Option<EvalReport>,
    pub finetune: Option<FinetuneReport>,
}

/// Resolve data, train, optionally finetune, evaluate, and write the full run directory.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| GlmcError::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml_string()?).map_err(|e| GlmcError::io(&config_path, e))?;
    let (data, manifest) = load_data(config)?;
    manifest.write(out_dir, data.train.ids())?;

    let mut outcome = run_training(config, &data, Some(out_dir))?;
    let mut report = outcome.final_eval.clone();
    let mut finetune = None;
    if config.finetune.enabled {
        let ft = finetune_classifier(
            &mut outcome.network,
            &data.train,
            &config.finetune,
            &config.rebalance,
            outcome.head_mode,
            config.train.lr,
        )?;
        let path = out_dir.join(FINETUNE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&ft)?).map_err(|e| GlmcError::io(&path, e))?;
        checkpoint::save(&outcome.network, &outcome.info, &out_dir.join(FINETUNED_CHECKPOINT))?;
        if let Some(test) = &data.test {
            report = Some(evaluate(&outcome.network, test, &data.train.class_table()?, outcome.head_mode)?);
        }
        finetune = Some(ft);
    }
    if let Some(r) = &report {
        r.write_json(&out_dir.join(REPORT_FILE))?;
        write_confusion_png(&r.confusion, &out_dir.join(CONFUSION_FILE))?;
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        outcome,
        report,
        finetune,
    })
}
