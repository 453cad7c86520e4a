//! Loss terms: mixture consistency with stop-gradient, mixed-label cross-entropy,
//! its reweighted variant, and their cumulative composition.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::model::RepresentationBundle;

/// Per-step loss values. `total = alpha·l_c + (1-alpha)·l_cb + gamma·l_sim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_cb: f64,
    pub l_sim: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The supervised part, `alpha·l_c + (1-alpha)·l_cb`.
    pub fn classification(&self) -> f64 {
        self.alpha * self.l_c + (1.0 - self.alpha) * self.l_cb
    }
}

pub fn total_loss(l_c: f64, l_cb: f64, l_sim: f64, alpha: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        l_c,
        l_cb,
        l_sim,
        alpha,
        gamma,
        total: alpha * l_c + (1.0 - alpha) * l_cb + gamma * l_sim,
    }
}

/// Differentiable counterpart of [`total_loss`].
pub fn compose_total(l_c: &Tensor, l_cb: &Tensor, l_sim: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    Ok(((l_c * alpha)? + (l_cb * (1.0 - alpha))?)?.add(&(l_sim * gamma)?)?)
}

/// `-(u/‖u‖)·(h/‖h‖)` for plain vectors.
pub fn negative_cosine(u: &[f64], h: &[f64]) -> Result<f64> {
    if u.len() != h.len() {
        return Err(GlmcError::ShapeMismatch(format!("{} vs {}", u.len(), h.len())));
    }
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nh = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nu == 0.0 || nh == 0.0 {
        return Err(GlmcError::DegenerateVector { row: 0 });
    }
    let dot: f64 = u.iter().zip(h).map(|(a, b)| a * b).sum();
    Ok(-dot / (nu * nh))
}

fn row_norms(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum(D::Minus1)?.sqrt()?)
}

fn ensure_nonzero_rows(norms: &Tensor) -> Result<()> {
    let host = norms.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    match host.iter().position(|&n| n == 0.0) {
        Some(row) => Err(GlmcError::DegenerateVector { row }),
        None => Ok(()),
    }
}

/// Row-wise negative cosine similarity of two `(N, d)` tensors, shape `(N,)`.
pub fn negative_cosine_rows(u: &Tensor, h: &Tensor) -> Result<Tensor> {
    if u.dims() != h.dims() {
        return Err(GlmcError::ShapeMismatch(format!("{:?} vs {:?}", u.dims(), h.dims())));
    }
    let nu = row_norms(u)?;
    let nh = row_norms(h)?;
    ensure_nonzero_rows(&nu)?;
    ensure_nonzero_rows(&nh)?;
    let dot = (u * h)?.sum(D::Minus1)?;
    Ok((dot / (nu * nh)?)?.neg()?)
}

/// Batch mean of `sim(u_g, sg(h_l)) + sim(u_l, sg(h_g))`; lies in `[-2, 2]`.
pub fn consistency_loss(bundle: &RepresentationBundle) -> Result<Tensor> {
    let a = negative_cosine_rows(&bundle.u_g, &bundle.h_l.detach())?;
    let b = negative_cosine_rows(&bundle.u_l, &bundle.h_g.detach())?;
    Ok((a + b)?.mean_all()?)
}

/// Numerically stable `log softmax` along the last axis.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    // the shift cancels analytically, so it carries no gradient
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn ensure_no_nan(t: &Tensor) -> Result<()> {
    let host = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if host.iter().any(|v| v.is_nan()) {
        return Err(GlmcError::NanLogits);
    }
    Ok(())
}

/// Per-row `-Σ_c p·log softmax(z)` over both views stacked, shape `(2N,)`.
fn stacked_cross_entropy(logits_g: &Tensor, logits_l: &Tensor, p_mixed: &Tensor) -> Result<Tensor> {
    if logits_g.dims() != logits_l.dims() || logits_g.dims() != p_mixed.dims() {
        return Err(GlmcError::ShapeMismatch(format!(
            "logits {:?}/{:?} vs targets {:?}",
            logits_g.dims(),
            logits_l.dims(),
            p_mixed.dims()
        )));
    }
    ensure_no_nan(logits_g)?;
    ensure_no_nan(logits_l)?;
    let logits = Tensor::cat(&[logits_g, logits_l], 0)?;
    let p = Tensor::cat(&[p_mixed, p_mixed], 0)?.to_dtype(logits.dtype())?;
    Ok((p * log_softmax(&logits)?)?.sum(D::Minus1)?.neg()?)
}

/// Mean over the `2N` rows of both views of the soft-target cross-entropy.
pub fn mixed_cross_entropy(logits_g: &Tensor, logits_l: &Tensor, p_mixed: &Tensor) -> Result<Tensor> {
    Ok(stacked_cross_entropy(logits_g, logits_l, p_mixed)?.mean_all()?)
}

/// As [`mixed_cross_entropy`] with each row scaled by its mixed weight; both views share `w_mixed`.
pub fn rebalanced_cross_entropy(logits_g: &Tensor, logits_l: &Tensor, p_mixed: &Tensor, w_mixed: &Tensor) -> Result<Tensor> {
    let n = logits_g.dim(0)?;
    if w_mixed.dims() != [n] {
        return Err(GlmcError::ShapeMismatch(format!("weights {:?} for {n} rows", w_mixed.dims())));
    }
    let host = w_mixed.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if host.iter().any(|&w| w.is_nan() || w < 0.0) {
        return Err(GlmcError::NegativeWeight);
    }
    let per_row = stacked_cross_entropy(logits_g, logits_l, p_mixed)?;
    let w = Tensor::cat(&[w_mixed, w_mixed], 0)?.to_dtype(per_row.dtype())?;
    Ok((per_row * w)?.mean_all()?)
}

/// Plain single-view cross-entropy against integer labels (baseline harness).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(GlmcError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    ensure_no_nan(logits)?;
    let mut onehot = vec![0f64; n * c];
    for (row, &y) in labels.iter().enumerate() {
        onehot[row * c + y] = 1.0;
    }
    let p = Tensor::from_vec(onehot, (n, c), logits.device())?.to_dtype(logits.dtype())?;
    Ok((p * log_softmax(logits)?)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), c), &Device::Cpu).unwrap()
    }

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((negative_cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(negative_cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((negative_cosine(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(negative_cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(GlmcError::DegenerateVector { .. })));
    }

    #[test]
    fn cosine_rows_flags_zero_row() {
        let u = t2(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let h = t2(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(negative_cosine_rows(&u, &h), Err(GlmcError::DegenerateVector { row: 1 })));
    }

    fn bundle(u_g: Tensor, h_l: Tensor, u_l: Tensor, h_g: Tensor) -> RepresentationBundle {
        RepresentationBundle {
            r_g: u_g.clone(),
            r_l: u_l.clone(),
            h_g,
            h_l,
            u_g,
            u_l,
        }
    }

    #[test]
    fn consistency_extremes() {
        let a = t2(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.3, 2.0]]);
        let b = t2(&[vec![0.2, -1.0, 4.0], vec![3.0, 1.0, 1.0]]);
        let l = consistency_loss(&bundle(a.clone(), a.clone(), b.clone(), b.clone())).unwrap();
        assert!((scalar(&l).unwrap() + 2.0).abs() < 1e-12);
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            t2(&[v])
        };
        let l = consistency_loss(&bundle(e(0), e(1), e(2), e(3))).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let z = t2(&[vec![0.3; 5], vec![-2.0; 5]]);
        let p = t2(&[vec![0.2, 0.8, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 1.0]]);
        let l = scalar(&mixed_cross_entropy(&z, &z, &p).unwrap()).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let z = t2(&[vec![1e4, 0.0, 0.0]]);
        let p = t2(&[vec![1.0, 0.0, 0.0]]);
        assert!(scalar(&mixed_cross_entropy(&z, &z, &p).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn soft_target_is_average_of_hard_targets() {
        // oracle: CE is linear in the target, so CE(½e_a + ½e_b) = ½CE(e_a) + ½CE(e_b)
        let zg = [0.4, -1.2, 2.0];
        let zl = [1.5, 0.1, -0.3];
        let ce = |z: &[f64], k: usize| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[k]
        };
        let expected = 0.5 * (0.5 * ce(&zg, 0) + 0.5 * ce(&zg, 2)) + 0.5 * (0.5 * ce(&zl, 0) + 0.5 * ce(&zl, 2));
        let got = mixed_cross_entropy(&t2(&[zg.to_vec()]), &t2(&[zl.to_vec()]), &t2(&[vec![0.5, 0.0, 0.5]])).unwrap();
        assert!((scalar(&got).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn nan_logits_rejected() {
        let z = t2(&[vec![f64::NAN, 0.0]]);
        let p = t2(&[vec![1.0, 0.0]]);
        assert!(matches!(mixed_cross_entropy(&z, &z, &p), Err(GlmcError::NanLogits)));
    }

    #[test]
    fn rebalanced_reductions() {
        let zg = t2(&[vec![0.1, 0.9, -0.5], vec![2.0, 0.0, 1.0]]);
        let zl = t2(&[vec![-0.3, 0.2, 0.4], vec![0.5, 0.5, -1.0]]);
        let p = t2(&[vec![0.7, 0.3, 0.0], vec![0.0, 0.4, 0.6]]);
        let plain = scalar(&mixed_cross_entropy(&zg, &zl, &p).unwrap()).unwrap();
        let ones = scalar(&rebalanced_cross_entropy(&zg, &zl, &p, &t1(&[1.0, 1.0])).unwrap()).unwrap();
        assert_eq!(plain, ones);

        // hand-computed weighted mean over 4 rows, second sample weighted 0
        let ce_row = |z: &[f64], p: &[f64]| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            z.iter().zip(p).map(|(zi, pi)| pi * (lse - zi)).sum::<f64>()
        };
        let p0 = [0.7, 0.3, 0.0];
        let expected = (2.0 * ce_row(&[0.1, 0.9, -0.5], &p0) + 2.0 * ce_row(&[-0.3, 0.2, 0.4], &p0)) / 4.0;
        let weighted = scalar(&rebalanced_cross_entropy(&zg, &zl, &p, &t1(&[2.0, 0.0])).unwrap()).unwrap();
        assert!((weighted - expected).abs() < 1e-12);

        assert!(matches!(
            rebalanced_cross_entropy(&zg, &zl, &p, &t1(&[1.0, -0.1])),
            Err(GlmcError::NegativeWeight)
        ));
    }

    #[test]
    fn total_composition() {
        assert_eq!(total_loss(2.0, 3.0, -1.5, 1.0, 0.0).total, 2.0);
        assert_eq!(total_loss(2.0, 3.0, -1.5, 0.0, 0.0).total, 3.0);
        assert_eq!(total_loss(2.0, 3.0, -1.5, 0.75, 10.0).total, -12.75);
        let t = compose_total(&t1(&[2.0]).sum_all().unwrap(), &t1(&[3.0]).sum_all().unwrap(), &t1(&[-1.5]).sum_all().unwrap(), 0.75, 10.0).unwrap();
        assert_eq!(scalar(&t).unwrap(), -12.75);
    }

    #[test]
    fn cosine_gradient_matches_central_differences() {
        let u = [0.3, -1.1, 0.8, 2.0];
        let h = [1.0, 0.4, -0.7, 0.2];
        let var = Var::from_tensor(&t2(&[u.to_vec()])).unwrap();
        let loss = negative_cosine_rows(var.as_tensor(), &t2(&[h.to_vec()])).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..u.len() {
            let mut plus = u;
            let mut minus = u;
            plus[i] += eps;
            minus[i] -= eps;
            let fd = (negative_cosine(&plus, &h).unwrap() - negative_cosine(&minus, &h).unwrap()) / (2.0 * eps);
            assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "coord {i}: {} vs {fd}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn total_is_linear(l_c in -5.0f64..5.0, l_cb in -5.0f64..5.0, l_sim in -2.0f64..2.0, a in 0.0f64..1.0, g in 0.0f64..20.0, d in -3.0f64..3.0) {
            let base = total_loss(l_c, l_cb, l_sim, a, g).total;
            prop_assert!((total_loss(l_c + d, l_cb, l_sim, a, g).total - base - a * d).abs() < 1e-9);
            prop_assert!((total_loss(l_c, l_cb + d, l_sim, a, g).total - base - (1.0 - a) * d).abs() < 1e-9);
            prop_assert!((total_loss(l_c, l_cb, l_sim + d, a, g).total - base - g * d).abs() < 1e-9);
        }
    }
}
