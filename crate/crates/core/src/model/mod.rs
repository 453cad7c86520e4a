//! Encoder, projection, predictor and the two classifier heads.

mod backbone;
pub mod checkpoint;
mod layers;
mod params;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneRegistry, Encoder, EncoderBuilder};
pub use layers::{BatchNorm, Conv2d, Linear};
pub use params::{tensor_bytes, Param, ParamGroup, ParamStore};

use crate::error::{GlmcError, Result};
use crate::longtail::ImageShape;

pub const DEFAULT_ENCODER: &str = "resnet32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub encoder_id: String,
    pub input: ImageShape,
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 || self.proj_dim >= self.feature_dim {
            return Err(GlmcError::config(
                "model.proj_dim",
                format!("must lie in 1..{} (below the feature width), got {}", self.feature_dim, self.proj_dim),
            ));
        }
        if self.num_classes == 0 {
            return Err(GlmcError::InvalidArgument("network needs at least one class".into()));
        }
        Ok(())
    }
}

/// Which classifier produces inference logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Long-tailed training keeps only the rebalanced head.
    LongTail,
    /// Balanced data (and the plain cross-entropy baseline) use the conventional head.
    Balanced,
}

/// Encoder features, projections and predictions of the global and local views.
#[derive(Debug, Clone)]
pub struct RepresentationBundle {
    pub r_g: Tensor,
    pub r_l: Tensor,
    pub h_g: Tensor,
    pub h_l: Tensor,
    pub u_g: Tensor,
    pub u_l: Tensor,
}

#[derive(Debug, Clone)]
pub struct ViewOutputs {
    pub bundle: RepresentationBundle,
    pub logits_c_g: Tensor,
    pub logits_c_l: Tensor,
    pub logits_cb_g: Tensor,
    pub logits_cb_l: Tensor,
}

/// Structural description of one layer, for introspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: &'static str,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub activation: Option<&'static str>,
}

#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    store: ParamStore,
    encoder: Box<dyn Encoder>,
    projection: Linear,
    predictor: Linear,
    classifier: Linear,
    rebalanced: Linear,
    trained_epochs: usize,
}

impl Network {
    /// Build with the default registry. `proj_dim` defaults to half the feature width.
    pub fn build(
        encoder_id: &str,
        input: ImageShape,
        num_classes: usize,
        proj_dim: Option<usize>,
        dtype: DType,
        seed: u64,
    ) -> Result<Network> {
        Self::build_with(&BackboneRegistry::default(), encoder_id, input, num_classes, proj_dim, dtype, seed)
    }

    pub fn build_with(
        registry: &BackboneRegistry,
        encoder_id: &str,
        input: ImageShape,
        num_classes: usize,
        proj_dim: Option<usize>,
        dtype: DType,
        seed: u64,
    ) -> Result<Network> {
        let mut store = ParamStore::new(dtype, Device::Cpu, seed);
        let encoder = registry.build(encoder_id, input, &mut store)?;
        let feature_dim = encoder.feature_dim();
        let spec = NetworkSpec {
            encoder_id: encoder_id.to_string(),
            input,
            feature_dim,
            proj_dim: proj_dim.unwrap_or(feature_dim / 2),
            num_classes,
        };
        spec.validate()?;
        let projection = Linear::new(&mut store, "projection", ParamGroup::Projection, feature_dim, spec.proj_dim, true)?;
        let predictor = Linear::new(&mut store, "predictor", ParamGroup::Predictor, spec.proj_dim, spec.proj_dim, true)?;
        let classifier = Linear::new(&mut store, "classifier", ParamGroup::Classifier, feature_dim, num_classes, false)?;
        let rebalanced = Linear::new(
            &mut store,
            "rebalanced_classifier",
            ParamGroup::RebalancedClassifier,
            feature_dim,
            num_classes,
            false,
        )?;
        Ok(Network {
            spec,
            store,
            encoder,
            projection,
            predictor,
            classifier,
            rebalanced,
            trained_epochs: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn set_trained_epochs(&mut self, epochs: usize) {
        self.trained_epochs = epochs;
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn rebalanced_classifier(&self) -> &Linear {
        &self.rebalanced
    }

    /// The head used at inference time under `mode`.
    pub fn inference_head(&self, mode: HeadMode) -> &Linear {
        match mode {
            HeadMode::LongTail => &self.rebalanced,
            HeadMode::Balanced => &self.classifier,
        }
    }

    /// Host images `(N, C, H, W)` as a tensor in the network dtype.
    pub fn images_to_tensor(&self, images: &ndarray::Array4<f32>) -> Result<Tensor> {
        let (n, c, h, w) = images.dim();
        let expect = self.spec.input;
        if (c, h, w) != (expect.channels, expect.height, expect.width) {
            return Err(GlmcError::ShapeMismatch(format!(
                "network expects {:?}, got ({c}, {h}, {w})",
                expect
            )));
        }
        let data: Vec<f32> = images.iter().copied().collect();
        Ok(Tensor::from_vec(data, (n, c, h, w), self.device())?.to_dtype(self.dtype())?)
    }

    pub fn encode(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.encoder.forward(x, train)
    }

    /// Run both views through the shared encoder in one `2N` batch, then split.
    pub fn forward_views(&self, x_global: &Tensor, x_local: &Tensor, train: bool) -> Result<ViewOutputs> {
        let n = x_global.dim(0)?;
        if x_local.dims() != x_global.dims() {
            return Err(GlmcError::ShapeMismatch(format!(
                "global view {:?} vs local view {:?}",
                x_global.dims(),
                x_local.dims()
            )));
        }
        let x = Tensor::cat(&[x_global, x_local], 0)?;
        let r = self.encode(&x, train)?;
        let h = self.projection.forward(&r)?;
        let u = self.predictor.forward(&h)?;
        let z_c = self.classifier.forward(&r)?;
        let z_cb = self.rebalanced.forward(&r)?;
        let split = |t: &Tensor| -> Result<(Tensor, Tensor)> { Ok((t.narrow(0, 0, n)?, t.narrow(0, n, n)?)) };
        let (r_g, r_l) = split(&r)?;
        let (h_g, h_l) = split(&h)?;
        let (u_g, u_l) = split(&u)?;
        let (logits_c_g, logits_c_l) = split(&z_c)?;
        let (logits_cb_g, logits_cb_l) = split(&z_cb)?;
        Ok(ViewOutputs {
            bundle: RepresentationBundle {
                r_g,
                r_l,
                h_g,
                h_l,
                u_g,
                u_l,
            },
            logits_c_g,
            logits_c_l,
            logits_cb_g,
            logits_cb_l,
        })
    }

    /// Conventional-head logits on a single view; the cross-entropy baseline path.
    pub fn forward_classifier(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.classifier.forward(&self.encode(x, train)?)
    }

    /// Evaluation-mode logits from the head selected by `mode`.
    pub fn inference_logits(&self, x: &Tensor, mode: HeadMode) -> Result<Tensor> {
        let r = self.encode(x, false)?;
        self.inference_head(mode).forward(&r)
    }

    /// Projection and predictor layers: each a single affine map without activation.
    pub fn contrastive_head_layers(&self) -> Vec<LayerDesc> {
        vec![
            LayerDesc {
                name: "projection",
                in_dim: self.projection.in_dim(),
                out_dim: self.projection.out_dim(),
                bias: self.projection.has_bias(),
                activation: None,
            },
            LayerDesc {
                name: "predictor",
                in_dim: self.predictor.in_dim(),
                out_dim: self.predictor.out_dim(),
                bias: self.predictor.has_bias(),
                activation: None,
            },
        ]
    }

    pub fn param_hash(&self) -> Result<String> {
        self.store.hash(&ParamGroup::ALL)
    }

    pub fn encoder_hash(&self) -> Result<String> {
        self.store.hash(&[ParamGroup::Encoder])
    }
}
