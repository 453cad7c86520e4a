use candle_core::{Tensor, Var, D};

use super::params::{ParamGroup, ParamStore};
use crate::error::Result;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Bias-free convolution with Kaiming-normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), group)?;
        Ok(Conv2d { weight, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?)
    }
}

/// Batch normalisation over every axis but the channel axis (axis 1).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0, group, true)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0, group, true)?,
            running_mean: store.constant(&format!("{name}.running_mean"), &[channels], 0.0, group, false)?,
            running_var: store.constant(&format!("{name}.running_var"), &[channels], 1.0, group, false)?,
        })
    }

    fn broadcast_shape(x: &Tensor) -> Vec<usize> {
        let mut shape = vec![1; x.rank()];
        shape[1] = x.dim(1).unwrap_or(1);
        shape
    }

    /// Batch statistics in training mode (and running-statistic update), running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = Self::broadcast_shape(x);
        let reduce: Vec<usize> = (0..x.rank()).filter(|&d| d != 1).collect();
        let (mean, var) = if train {
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce.as_slice())?;
            let n = x.elem_count() / x.dim(1)?;
            let unbiased = (n as f64 / (n.max(2) - 1) as f64).max(1.0);
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape.as_slice())?,
                self.running_var.as_tensor().reshape(shape.as_slice())?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape.as_slice())?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape.as_slice())?)?)
    }
}

/// Fully connected map `x·Wᵀ (+ b)`; `W` has shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[d_out, d_in], bound, group)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[d_out], bound, group)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

/// Mean over the spatial axes of an `(N, C, H, W)` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
