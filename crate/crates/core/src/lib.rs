//! Long-tailed image recognition with global/local mixture consistency and
//! cumulative class-balanced learning.
//!
//! The crate covers the full pipeline: long-tailed subset construction, uniform and
//! reversed samplers, MixUp/CutMix view generation, the dual-head network, the loss
//! terms and their cumulative composition, optional MaxNorm finetuning of the
//! classifier, grouped evaluation, and a config-driven trainer.

pub mod augment;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod longtail;
pub mod losses;
pub mod maxnorm;
pub mod mixing;
pub mod model;
pub mod optim;
pub mod rebalance;
pub mod report;
pub mod sampler;
pub mod trainer;

pub use config::{ExperimentConfig, Method, Partner, Precision};
pub use datasets::{SourceDescriptor, Split, SyntheticSpec};
pub use error::{GlmcError, Result};
pub use eval::{assign_groups, evaluate, report_from_predictions, EvalReport, Group};
pub use longtail::{
    build_longtail_subset, compute_class_counts, ClassFrequencyTable, ImageShape, ImbalanceSpec, LabeledDataset,
    SubsetManifest,
};
pub use losses::{consistency_loss, mixed_cross_entropy, negative_cosine, rebalanced_cross_entropy, total_loss, LossBreakdown};
pub use maxnorm::{finetune_classifier, project_weights, Delta, MaxNormConfig};
pub use mixing::{cutmix, mixup, sample_cutbox, CutBox, MixedBatch, Mixer, MixingConfig};
pub use model::{HeadMode, Network, NetworkSpec, RepresentationBundle};
pub use rebalance::{alpha, class_weights, CumulativeSchedule, RebalanceConfig, WeightVector};
pub use sampler::{class_sampling_probs, draw_batch, Batch, BatchSampler, SamplerConfig, SamplerMode};
pub use trainer::{load_data, run_experiment, train, train_baseline_ce, TrainData, TrainOutcome};
