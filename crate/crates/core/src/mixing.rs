//! Global (MixUp) and local (CutMix) mixed-label augmentation.
//!
//! Both views of a batch share one `λ ~ Beta(β, β)`. Labels and weights mix as
//! `λ·a + (1-λ)·b`; CutMix keeps the first image outside the box, so the first image
//! contributes a pixel fraction of `λ` whenever the box is not clipped.

use ndarray::{s, Array1, Array2, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::sampler::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    /// Shape of the symmetric Beta distribution.
    pub beta: f64,
    /// Replace λ by the retained pixel fraction after the box is clipped.
    pub area_correct_lambda: bool,
    /// Pin λ to a constant instead of sampling (diagnostics and reduction checks).
    pub lambda_override: Option<f64>,
    pub seed: u64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            beta: 1.0,
            area_correct_lambda: false,
            lambda_override: None,
            seed: 0,
        }
    }
}

/// Draw `λ ~ Beta(β, β)`.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, beta: f64) -> Result<f64> {
    let dist = Beta::new(beta, beta)
        .map_err(|e| GlmcError::InvalidArgument(format!("mix beta {beta}: {e}")))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

/// Cut region anchored at its top-left corner. `width`/`height` are the unclipped
/// real extents `W·sqrt(1-λ)`, `H·sqrt(1-λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutBox {
    pub x: usize,
    pub y: usize,
    pub width: f64,
    pub height: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl CutBox {
    pub fn new(x: usize, y: usize, lambda: f64, image_width: usize, image_height: usize) -> CutBox {
        let side = (1.0 - lambda).max(0.0).sqrt();
        CutBox {
            x: x.min(image_width),
            y: y.min(image_height),
            width: image_width as f64 * side,
            height: image_height as f64 * side,
            image_width,
            image_height,
        }
    }

    pub fn unclipped_area(&self) -> f64 {
        self.width * self.height
    }

    /// Pixel ranges `(x0, x1, y0, y1)`, half open, clipped to the image.
    pub fn pixel_bounds(&self) -> (usize, usize, usize, usize) {
        let w = self.width.round() as usize;
        let h = self.height.round() as usize;
        (
            self.x,
            (self.x + w).min(self.image_width),
            self.y,
            (self.y + h).min(self.image_height),
        )
    }

    pub fn clipped_area(&self) -> usize {
        let (x0, x1, y0, y1) = self.pixel_bounds();
        (x1 - x0) * (y1 - y0)
    }

    pub fn is_clipped(&self) -> bool {
        let (x0, x1, y0, y1) = self.pixel_bounds();
        let w = self.width.round() as usize;
        let h = self.height.round() as usize;
        x1 - x0 != w || y1 - y0 != h
    }

    /// Fraction of pixels left to the first image.
    pub fn retained_fraction(&self) -> f64 {
        1.0 - self.clipped_area() as f64 / (self.image_width * self.image_height) as f64
    }
}

/// Mixed images, label probabilities and per-sample weights.
pub type MixedArrays = (Array4<f32>, Array2<f32>, Array1<f32>);

/// `r_x ~ U(0, W)`, `r_y ~ U(0, H)`, extents `W·sqrt(1-λ)` by `H·sqrt(1-λ)`.
pub fn sample_cutbox<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, lambda: f64) -> CutBox {
    let x = (rng.random::<f64>() * width as f64).floor() as usize;
    let y = (rng.random::<f64>() * height as f64).floor() as usize;
    CutBox::new(x.min(width.saturating_sub(1)), y.min(height.saturating_sub(1)), lambda, width, height)
}

fn check_pair_shapes(
    x_i: &Array4<f32>,
    x_j: &Array4<f32>,
    p_i: &Array2<f32>,
    p_j: &Array2<f32>,
    w_i: &Array1<f32>,
    w_j: &Array1<f32>,
) -> Result<()> {
    if x_i.dim() != x_j.dim() {
        return Err(GlmcError::ShapeMismatch(format!("images {:?} vs {:?}", x_i.dim(), x_j.dim())));
    }
    if p_i.dim() != p_j.dim() || p_i.nrows() != x_i.dim().0 {
        return Err(GlmcError::ShapeMismatch(format!("labels {:?} vs {:?}", p_i.dim(), p_j.dim())));
    }
    if w_i.len() != w_j.len() || w_i.len() != x_i.dim().0 {
        return Err(GlmcError::ShapeMismatch(format!("weights {} vs {}", w_i.len(), w_j.len())));
    }
    Ok(())
}

fn mix_targets(
    p_i: &Array2<f32>,
    p_j: &Array2<f32>,
    w_i: &Array1<f32>,
    w_j: &Array1<f32>,
    lambda: f64,
) -> (Array2<f32>, Array1<f32>) {
    let a = lambda as f32;
    let b = (1.0 - lambda) as f32;
    let p = Zip::from(p_i).and(p_j).map_collect(|&u, &v| a * u + b * v);
    let w = Zip::from(w_i).and(w_j).map_collect(|&u, &v| a * u + b * v);
    (p, w)
}

/// `x̃ = λ·x_i + (1-λ)·x_j` with labels and weights mixed by the same λ.
pub fn mixup(
    x_i: &Array4<f32>,
    x_j: &Array4<f32>,
    p_i: &Array2<f32>,
    p_j: &Array2<f32>,
    w_i: &Array1<f32>,
    w_j: &Array1<f32>,
    lambda: f64,
) -> Result<MixedArrays> {
    check_pair_shapes(x_i, x_j, p_i, p_j, w_i, w_j)?;
    let a = lambda as f32;
    let b = (1.0 - lambda) as f32;
    let x = Zip::from(x_i).and(x_j).map_collect(|&u, &v| a * u + b * v);
    let (p, w) = mix_targets(p_i, p_j, w_i, w_j, lambda);
    Ok((x, p, w))
}

/// Paste the `cut` region of `x_j` onto `x_i`. Labels and weights mix with `label_lambda`.
#[allow(clippy::too_many_arguments)]
pub fn cutmix_with_box(
    x_i: &Array4<f32>,
    x_j: &Array4<f32>,
    p_i: &Array2<f32>,
    p_j: &Array2<f32>,
    w_i: &Array1<f32>,
    w_j: &Array1<f32>,
    cut: &CutBox,
    label_lambda: f64,
) -> Result<MixedArrays> {
    check_pair_shapes(x_i, x_j, p_i, p_j, w_i, w_j)?;
    let (_, _, h, w) = x_i.dim();
    if cut.image_width != w || cut.image_height != h {
        return Err(GlmcError::ShapeMismatch(format!(
            "box for {}x{} image applied to {}x{}",
            cut.image_width, cut.image_height, w, h
        )));
    }
    let mut x = x_i.clone();
    let (x0, x1, y0, y1) = cut.pixel_bounds();
    if x0 < x1 && y0 < y1 {
        x.slice_mut(s![.., .., y0..y1, x0..x1])
            .assign(&x_j.slice(s![.., .., y0..y1, x0..x1]));
    }
    let (p, wm) = mix_targets(p_i, p_j, w_i, w_j, label_lambda);
    Ok((x, p, wm))
}

/// CutMix with a freshly sampled box; returns the box alongside the mixed batch.
#[allow(clippy::too_many_arguments)]
pub fn cutmix<R: Rng + ?Sized>(
    rng: &mut R,
    x_i: &Array4<f32>,
    x_j: &Array4<f32>,
    p_i: &Array2<f32>,
    p_j: &Array2<f32>,
    w_i: &Array1<f32>,
    w_j: &Array1<f32>,
    lambda: f64,
) -> Result<(MixedArrays, CutBox)> {
    let (_, _, h, w) = x_i.dim();
    let cut = sample_cutbox(rng, w, h, lambda);
    Ok((cutmix_with_box(x_i, x_j, p_i, p_j, w_i, w_j, &cut, lambda)?, cut))
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f32> {
    let mut p = Array2::zeros((labels.len(), num_classes));
    for (row, &y) in labels.iter().enumerate() {
        p[[row, y]] = 1.0;
    }
    p
}

/// Both augmented views of one uniform/reversed batch pair.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub x_global: Array4<f32>,
    pub x_local: Array4<f32>,
    /// Mixed label probabilities, shared by both views.
    pub p_mixed: Array2<f32>,
    /// Mixed per-sample weights, shared by both views.
    pub w_mixed: Array1<f32>,
    pub lambda: f64,
    pub cut: CutBox,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.p_mixed.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p_mixed.nrows() == 0
    }
}

/// Owns the mixing RNG stream.
#[derive(Debug, Clone)]
pub struct Mixer {
    config: MixingConfig,
    rng: ChaCha8Rng,
}

impl Mixer {
    pub fn new(config: MixingConfig) -> Result<Self> {
        if config.beta.is_nan() || config.beta <= 0.0 || !config.beta.is_finite() {
            return Err(GlmcError::config("mix.beta", format!("must be positive, got {}", config.beta)));
        }
        if let Some(l) = config.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(GlmcError::config("mix.lambda_override", format!("must lie in [0, 1], got {l}")));
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Mixer { config, rng })
    }

    pub fn config(&self) -> &MixingConfig {
        &self.config
    }

    pub fn sample_lambda(&mut self) -> Result<f64> {
        match self.config.lambda_override {
            Some(l) => Ok(l),
            None => sample_lambda(&mut self.rng, self.config.beta),
        }
    }

    /// One λ and one box for the whole batch; row `i` mixes `uniform[i]` with `reversed[i]`.
    pub fn make_mixed_batch(&mut self, uniform: &Batch, reversed: &Batch, num_classes: usize) -> Result<MixedBatch> {
        if uniform.len() != reversed.len() {
            return Err(GlmcError::ShapeMismatch(format!(
                "uniform batch has {} rows, reversed batch has {}",
                uniform.len(),
                reversed.len()
            )));
        }
        let lambda = self.sample_lambda()?;
        let p_i = one_hot(&uniform.labels, num_classes);
        let p_j = one_hot(&reversed.labels, num_classes);
        let w_i = Array1::from(uniform.weights.clone());
        let w_j = Array1::from(reversed.weights.clone());

        let (_, _, h, w) = uniform.images.dim();
        let cut = sample_cutbox(&mut self.rng, w, h, lambda);
        let label_lambda = if self.config.area_correct_lambda {
            cut.retained_fraction()
        } else {
            lambda
        };
        let (x_global, _, _) = mixup(&uniform.images, &reversed.images, &p_i, &p_j, &w_i, &w_j, label_lambda)?;
        let (x_local, p_mixed, w_mixed) = cutmix_with_box(
            &uniform.images,
            &reversed.images,
            &p_i,
            &p_j,
            &w_i,
            &w_j,
            &cut,
            label_lambda,
        )?;
        Ok(MixedBatch {
            x_global,
            x_local,
            p_mixed,
            w_mixed,
            lambda: label_lambda,
            cut,
        })
    }
}
