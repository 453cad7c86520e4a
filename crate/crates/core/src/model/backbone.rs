//! Encoder backbones, looked up by identifier.
//!
//! * `resnet{6n+2}` (e.g. `resnet32`): the CIFAR residual family, widths 16/32/64,
//!   identity shortcuts that subsample and zero-pad channels. Feature width 64.
//! * `mlp{w}` (e.g. `mlp64`, plain `mlp` = `mlp64`): flatten, two hidden layers of width `w`.

use std::collections::BTreeMap;

use candle_core::Tensor;

use super::layers::{global_avg_pool, BatchNorm, Conv2d, Linear};
use super::params::{ParamGroup, ParamStore};
use crate::error::{GlmcError, Result};
use crate::longtail::ImageShape;

pub trait Encoder: Send + Sync + std::fmt::Debug {
    /// `(N, C, H, W)` images to `(N, feature_dim)` features.
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor>;
    fn feature_dim(&self) -> usize;
}

pub type EncoderBuilder = fn(&str, ImageShape, &mut ParamStore) -> Result<Box<dyn Encoder>>;

/// Maps identifier prefixes to encoder constructors.
#[derive(Clone)]
pub struct BackboneRegistry {
    builders: BTreeMap<String, EncoderBuilder>,
}

impl std::fmt::Debug for BackboneRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.builders.keys()).finish()
    }
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut r = BackboneRegistry {
            builders: BTreeMap::new(),
        };
        r.register("resnet", build_resnet);
        r.register("mlp", build_mlp);
        r
    }
}

impl BackboneRegistry {
    /// Register a family; `id`s starting with `prefix` are routed to `builder`.
    pub fn register(&mut self, prefix: &str, builder: EncoderBuilder) {
        self.builders.insert(prefix.to_string(), builder);
    }

    pub fn build(&self, id: &str, input: ImageShape, store: &mut ParamStore) -> Result<Box<dyn Encoder>> {
        // longest matching prefix wins
        let builder = self
            .builders
            .iter()
            .filter(|(prefix, _)| id.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map(|(_, b)| *b)
            .ok_or_else(|| GlmcError::UnknownEncoder(id.to_string()))?;
        builder(id, input, store)
    }
}

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    stride: usize,
    pad_channels: usize,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let g = ParamGroup::Encoder;
        Ok(BasicBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), g, c_in, c_out, 3, stride, 1)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), g, c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), g, c_out, c_out, 3, 1, 1)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), g, c_out)?,
            stride,
            pad_channels: c_out - c_in,
        })
    }

    fn shortcut(&self, x: &Tensor) -> Result<Tensor> {
        if self.stride == 1 && self.pad_channels == 0 {
            return Ok(x.clone());
        }
        let (n, c, h, w) = x.dims4()?;
        // keep every other row and column
        let sub = if self.stride == 2 {
            x.reshape((n, c, h / 2, 2, w / 2, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, h / 2, w / 2))?
        } else {
            x.clone()
        };
        let half = self.pad_channels / 2;
        Ok(sub.pad_with_zeros(1, half, self.pad_channels - half)?)
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        Ok((y + self.shortcut(x)?)?.relu()?)
    }
}

#[derive(Debug)]
struct CifarResNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    feature_dim: usize,
}

impl Encoder for CifarResNet {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.stem_bn.forward(&self.stem.forward(x)?, train)?.relu()?;
        for block in &self.blocks {
            y = block.forward(&y, train)?;
        }
        global_avg_pool(&y)
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

fn build_resnet(id: &str, input: ImageShape, store: &mut ParamStore) -> Result<Box<dyn Encoder>> {
    let depth: usize = id
        .strip_prefix("resnet")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| GlmcError::UnknownEncoder(id.to_string()))?;
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(GlmcError::UnknownEncoder(format!("{id} (depth must be 6n+2)")));
    }
    if !input.height.is_multiple_of(4) || !input.width.is_multiple_of(4) {
        return Err(GlmcError::ShapeMismatch(format!(
            "{id} needs image sides divisible by 4, got {}x{}",
            input.height, input.width
        )));
    }
    let per_stage = (depth - 2) / 6;
    let g = ParamGroup::Encoder;
    let stem = Conv2d::new(store, "encoder.stem", g, input.channels, 16, 3, 1, 1)?;
    let stem_bn = BatchNorm::new(store, "encoder.stem_bn", g, 16)?;
    let mut blocks = Vec::new();
    let mut c_in = 16;
    for (stage, &width) in [16usize, 32, 64].iter().enumerate() {
        for b in 0..per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            blocks.push(BasicBlock::new(store, &format!("encoder.layer{}.{b}", stage + 1), c_in, width, stride)?);
            c_in = width;
        }
    }
    Ok(Box::new(CifarResNet {
        stem,
        stem_bn,
        blocks,
        feature_dim: 64,
    }))
}

#[derive(Debug)]
struct Mlp {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    width: usize,
}

impl Encoder for Mlp {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = x.flatten_from(1)?;
        let y = self.bn1.forward(&self.fc1.forward(&x)?, train)?.relu()?;
        Ok(self.fc2.forward(&y)?.relu()?)
    }

    fn feature_dim(&self) -> usize {
        self.width
    }
}

fn build_mlp(id: &str, input: ImageShape, store: &mut ParamStore) -> Result<Box<dyn Encoder>> {
    let width = match id.strip_prefix("mlp") {
        Some("") => 64,
        Some(w) => w.parse().map_err(|_| GlmcError::UnknownEncoder(id.to_string()))?,
        None => return Err(GlmcError::UnknownEncoder(id.to_string())),
    };
    if width < 2 {
        return Err(GlmcError::UnknownEncoder(format!("{id} (width must be at least 2)")));
    }
    let g = ParamGroup::Encoder;
    Ok(Box::new(Mlp {
        fc1: Linear::new(store, "encoder.fc1", g, input.numel(), width, true)?,
        bn1: BatchNorm::new(store, "encoder.bn1", g, width)?,
        fc2: Linear::new(store, "encoder.fc2", g, width, width, true)?,
        width,
    }))
}
