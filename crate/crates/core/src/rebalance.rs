//! Inverse-frequency class weights and the cumulative α schedule.

use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::longtail::ClassFrequencyTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RebalanceConfig {
    /// Exponent `k` on inverse class frequency; 0 disables reweighting.
    pub reweight_k: f64,
    /// Weight `γ` of the mixture-consistency loss.
    pub gamma: f64,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        RebalanceConfig {
            reweight_k: 1.0,
            gamma: 10.0,
        }
    }
}

/// Per-class weights summing to the number of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `w_i = C·(1/r_i)^k / Σ_j (1/r_j)^k`.
pub fn class_weights(table: &ClassFrequencyTable, k: f64) -> Result<WeightVector> {
    if k < 0.0 || k.is_nan() {
        return Err(GlmcError::NegativeExponent(k));
    }
    let freqs = table.frequencies();
    let c = freqs.len() as f64;
    // (r_min / r_i)^k is (1/r_i)^k up to a common factor that cancels in the ratio
    let r_min = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = freqs.iter().map(|&r| (r_min / r).powf(k)).collect();
    let total: f64 = raw.iter().sum();
    Ok(WeightVector(raw.into_iter().map(|v| c * v / total).collect()))
}

/// `α = 1 - (T / T_max)²`.
pub fn alpha(epoch: usize, t_max: usize) -> Result<f64> {
    if t_max == 0 || epoch > t_max {
        return Err(GlmcError::EpochOutOfRange { epoch, t_max });
    }
    let ratio = epoch as f64 / t_max as f64;
    Ok(1.0 - ratio * ratio)
}

/// α evaluated at the start of each epoch `0..t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CumulativeSchedule {
    t_max: usize,
}

impl CumulativeSchedule {
    pub fn new(t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(GlmcError::config("train.epochs", "must be at least 1"));
        }
        Ok(CumulativeSchedule { t_max })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, epoch: usize) -> Result<f64> {
        alpha(epoch, self.t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_zero_is_unweighted() {
        let t = ClassFrequencyTable::new(vec![900, 50, 3]).unwrap();
        assert!(class_weights(&t, 0.0).unwrap().as_slice().iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_class_k_one() {
        let t = ClassFrequencyTable::new(vec![90, 10]).unwrap();
        let w = class_weights(&t, 1.0).unwrap();
        // 2·(1/0.9) / (1/0.9 + 1/0.1) = 0.2, 2·10 / (1/0.9 + 10) = 1.8
        assert!((w[0] - 0.2).abs() < 1e-12);
        assert!((w[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn balanced_table_gives_unit_weights() {
        let t = ClassFrequencyTable::new(vec![13; 6]).unwrap();
        for k in [0.5, 1.0, 2.5] {
            assert!(class_weights(&t, k).unwrap().as_slice().iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn negative_k_rejected() {
        let t = ClassFrequencyTable::new(vec![2, 1]).unwrap();
        assert!(class_weights(&t, -1.0).is_err());
    }

    #[test]
    fn alpha_endpoints() {
        assert_eq!(alpha(0, 200).unwrap(), 1.0);
        assert_eq!(alpha(200, 200).unwrap(), 0.0);
        assert_eq!(alpha(100, 200).unwrap(), 0.75);
        assert!(matches!(alpha(201, 200), Err(GlmcError::EpochOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn weights_sum_to_class_count(counts in prop::collection::vec(1usize..5000, 1..40), k in 0.0f64..3.0) {
            let t = ClassFrequencyTable::new(counts.clone()).unwrap();
            let w = class_weights(&t, k).unwrap();
            prop_assert!((w.as_slice().iter().sum::<f64>() - counts.len() as f64).abs() < 1e-6);
            prop_assert!(w.as_slice().iter().all(|&v| v > 0.0));
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] < counts[j] {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }

        #[test]
        fn alpha_decreasing_and_convex(t_max in 2usize..500) {
            let a: Vec<f64> = (0..=t_max).map(|t| alpha(t, t_max).unwrap()).collect();
            for t in 0..t_max {
                prop_assert!(a[t + 1] < a[t]);
            }
            for t in 0..t_max - 1 {
                prop_assert!(a[t + 1] - a[t + 2] > a[t] - a[t + 1]);
            }
        }
    }
}
