//! Experiment configuration: TOML sections layered as defaults, then a file, then
//! `section.key=value` overrides. Unknown keys are rejected with their dotted path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{resolve_root, SourceDescriptor, SyntheticSpec};
use crate::error::{GlmcError, Result};
use crate::maxnorm::MaxNormConfig;
use crate::mixing::MixingConfig;
use crate::model::{HeadMode, DEFAULT_ENCODER};
use crate::rebalance::RebalanceConfig;
use crate::sampler::RESAMPLE_K_WARN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { name: "glmc".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: SourceKind,
    /// Directory of the CIFAR binary release; falls back to `$GLMC_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// A directory written by `build-data`; when set the subset is read from it.
    pub subset: Option<PathBuf>,
    pub imbalance_factor: f64,
    /// Head-class count; defaults to the per-class count of the balanced source.
    pub max_count: Option<usize>,
    pub seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: SourceKind::Cifar10,
            root: None,
            subset: None,
            imbalance_factor: 100.0,
            max_count: None,
            seed: 0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DataSection {
    pub fn source_descriptor(&self) -> Result<SourceDescriptor> {
        Ok(match self.source {
            SourceKind::Cifar10 => SourceDescriptor::Cifar10 {
                root: resolve_root(self.root.as_deref())?,
            },
            SourceKind::Cifar100 => SourceDescriptor::Cifar100 {
                root: resolve_root(self.root.as_deref())?,
            },
            SourceKind::Synthetic => SourceDescriptor::Synthetic(self.synthetic.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: String,
    /// Defaults to half the encoder feature width.
    pub proj_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder: DEFAULT_ENCODER.into(),
            proj_dim: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Mixture consistency with cumulative class-balanced learning.
    Glmc,
    /// Plain cross-entropy on uniform batches.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Master seed; every other stream is derived from it and its section seed.
    pub seed: u64,
    pub precision: Precision,
    /// Random crop (padding 4) and horizontal flip before mixing.
    pub augment: bool,
    /// Evaluate on the test split every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Defaults to one pass of the uniform sampler over the training set.
    pub steps_per_epoch: Option<usize>,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: Method::Glmc,
            epochs: 200,
            batch_size: 128,
            lr: 0.01,
            weight_decay: 5e-3,
            momentum: 0.9,
            seed: 0,
            precision: Precision::F32,
            augment: true,
            eval_every: 1,
            steps_per_epoch: None,
            prefetch: 2,
        }
    }
}

/// Where the mixture partner of each uniform sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partner {
    Reversed,
    /// A second uniform stream drawn with the same seed as the primary one.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub resample_k: f64,
    pub seed: u64,
    pub partner: Partner,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            resample_k: 0.2,
            seed: 0,
            partner: Partner::Reversed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalHead {
    /// Rebalanced head for GLMC on imbalanced data, conventional head otherwise.
    Auto,
    LongTail,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: EvalHead,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mode: EvalHead::Auto,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub mix: MixingConfig,
    pub rebalance: RebalanceConfig,
    pub finetune: MaxNormConfig,
    pub eval: EvalSection,
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| GlmcError::config(origin, e.to_string().trim().to_string()))
}

/// Parse the value of an override: a TOML literal if it parses as one, a bare string otherwise.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GlmcError::config(assignment, "override must look like `section.key=value`"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(GlmcError::config(path, "empty key segment"));
    }
    let mut cursor = table;
    for (depth, key) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| GlmcError::config(keys[..=depth].join("."), "is not a table"))?;
    }
    cursor.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            GlmcError::config(if key == "." { "<root>".into() } else { key }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text, "<config>")?)
    }

    /// Defaults, then the optional file, then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| GlmcError::io(p, e))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(&self.to_toml_string()?, "<config>")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GlmcError::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let check = |ok: bool, key: &str, msg: String| if ok { Ok(()) } else { Err(GlmcError::config(key, msg)) };
        check(t.epochs >= 1, "train.epochs", format!("must be at least 1, got {}", t.epochs))?;
        check(t.batch_size >= 2, "train.batch_size", format!("mixing needs pairs; got {}", t.batch_size))?;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", format!("must be positive, got {}", t.lr))?;
        check((0.0..1.0).contains(&t.momentum), "train.momentum", format!("must lie in [0, 1), got {}", t.momentum))?;
        check(t.weight_decay >= 0.0, "train.weight_decay", format!("must be non-negative, got {}", t.weight_decay))?;
        check(t.steps_per_epoch != Some(0), "train.steps_per_epoch", "must be at least 1".into())?;
        check(t.prefetch >= 1, "train.prefetch", "must be at least 1".into())?;
        check(self.sampler.resample_k >= 0.0, "sampler.resample_k", format!("must be non-negative, got {}", self.sampler.resample_k))?;
        check(self.rebalance.reweight_k >= 0.0, "rebalance.reweight_k", format!("must be non-negative, got {}", self.rebalance.reweight_k))?;
        check(self.rebalance.gamma >= 0.0, "rebalance.gamma", format!("must be non-negative, got {}", self.rebalance.gamma))?;
        check(self.mix.beta > 0.0 && self.mix.beta.is_finite(), "mix.beta", format!("must be positive, got {}", self.mix.beta))?;
        if let Some(l) = self.mix.lambda_override {
            check((0.0..=1.0).contains(&l), "mix.lambda_override", format!("must lie in [0, 1], got {l}"))?;
        }
        check(self.data.imbalance_factor >= 1.0, "data.imbalance_factor", format!("must be at least 1, got {}", self.data.imbalance_factor))?;
        check(self.eval.batch_size >= 1, "eval.batch_size", "must be at least 1".into())?;
        if let crate::maxnorm::Delta::Fixed(d) = self.finetune.delta {
            check(d > 0.0, "finetune.delta", format!("must be positive, got {d}"))?;
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sampler.resample_k > RESAMPLE_K_WARN {
            out.push(format!(
                "sampler.resample_k = {} exceeds {RESAMPLE_K_WARN}; tail classes tend to overfit",
                self.sampler.resample_k
            ));
        }
        out
    }

    pub fn head_mode(&self, train_is_balanced: bool) -> HeadMode {
        match (self.eval.mode, self.train.method) {
            (EvalHead::LongTail, _) => HeadMode::LongTail,
            (EvalHead::Balanced, _) => HeadMode::Balanced,
            (EvalHead::Auto, Method::Ce) => HeadMode::Balanced,
            (EvalHead::Auto, Method::Glmc) if train_is_balanced => HeadMode::Balanced,
            (EvalHead::Auto, Method::Glmc) => HeadMode::LongTail,
        }
    }
}

/// Derive an independent stream seed from the master seed, a section seed and a tag.
pub fn derive_seed(master: u64, section: u64, tag: &str) -> u64 {
    // splitmix64 finaliser over an FNV-1a hash of the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    let mut z = master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(section.rotate_left(29))
        ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
