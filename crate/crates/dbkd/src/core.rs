//! Shared domain types and label-space conventions.
//!
//! Labels are 0-based indices `0..L-1` everywhere in the public API.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The categorical label space: `L >= 2` classes indexed `0..L-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    size: usize,
}

impl LabelSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Contract(format!(
                "label space needs at least 2 categories, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.size
    }
}

/// A vector of `L` real logits for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsVector {
    values: Vec<f64>,
}

impl LogitsVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Contract(format!(
                "logits vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite logit {bad}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace { size: self.values.len() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The empirical or theoretical decision distribution over `L` labels.
///
/// When `sample_count = N` is present every entry is a multiple of `1/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionDistribution {
    probs: Vec<f64>,
    sample_count: Option<usize>,
}

impl DecisionDistribution {
    pub fn new(probs: Vec<f64>, sample_count: Option<usize>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Contract(format!(
                "distribution needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        for &p in &probs {
            if !p.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&p) {
                return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
        }
        if let Some(n) = sample_count {
            if n == 0 {
                return Err(Error::Contract("sample_count must be positive".into()));
            }
            for &p in &probs {
                let scaled = p * n as f64;
                if (scaled - scaled.round()).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "probability {p} is not a multiple of 1/{n}"
                    )));
                }
            }
        }
        Ok(Self { probs, sample_count })
    }

    /// Builds the frequency vector `counts / N` with `N = sum(counts)`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::Contract("counts must not all be zero".into()));
        }
        let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Self::new(probs, Some(n))
    }

    pub fn uniform(space: LabelSpace) -> Self {
        let l = space.size();
        Self { probs: vec![1.0 / l as f64; l], sample_count: None }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample_count(&self) -> Option<usize> {
        self.sample_count
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace { size: self.probs.len() }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Integer counts `probs * N`; only defined when `sample_count` is set.
    pub fn counts(&self) -> Option<Vec<usize>> {
        let n = self.sample_count?;
        Some(self.probs.iter().map(|p| (p * n as f64).round() as usize).collect())
    }
}

/// Standard deviation of the per-coordinate Gaussian logit noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    sigma: f64,
}

impl NoiseScale {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Contract(format!("sigma must be positive and finite, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl Default for NoiseScale {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

/// Top-1 decision: the smallest index attaining the maximum logit.
pub fn argmax_decision(z: &LogitsVector) -> usize {
    let mut best = 0;
    for (i, &v) in z.values().iter().enumerate().skip(1) {
        if v > z.values()[best] {
            best = i;
        }
    }
    best
}

/// One-hot decision distribution for label `d`, with `sample_count = 1`.
pub fn one_hot(d: usize, space: LabelSpace) -> Result<DecisionDistribution> {
    if !space.contains(d) {
        return Err(Error::Contract(format!(
            "label {d} out of range for {} categories",
            space.size()
        )));
    }
    let mut probs = vec![0.0; space.size()];
    probs[d] = 1.0;
    Ok(DecisionDistribution { probs, sample_count: Some(1) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_basic() {
        let z = LogitsVector::new(vec![0.6, 0.3]).unwrap();
        assert_eq!(argmax_decision(&z), 0);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let z = LogitsVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(argmax_decision(&z), 0);
        let z = LogitsVector::new(vec![-2.0, 5.0, 3.0, 5.0]).unwrap();
        assert_eq!(argmax_decision(&z), 1);
    }

    #[test]
    fn one_hot_basic() {
        let d = one_hot(2, LabelSpace::new(4).unwrap()).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.sample_count(), Some(1));
        let d = one_hot(0, LabelSpace::new(2).unwrap()).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn one_hot_out_of_range() {
        assert!(one_hot(3, LabelSpace::new(3).unwrap()).is_err());
    }

    #[test]
    fn one_hot_round_trips_through_argmax() {
        for l in 2..6 {
            let space = LabelSpace::new(l).unwrap();
            for d in 0..l {
                let dist = one_hot(d, space).unwrap();
                let z = LogitsVector::new(dist.probs().to_vec()).unwrap();
                assert_eq!(argmax_decision(&z), d);
            }
        }
    }

    #[test]
    fn distribution_rejects_bad_inputs() {
        assert!(DecisionDistribution::new(vec![0.5, 0.6], None).is_err());
        assert!(DecisionDistribution::new(vec![1.2, -0.2], None).is_err());
        // 0.3 is not a multiple of 1/7
        assert!(DecisionDistribution::new(vec![0.3, 0.7], Some(7)).is_err());
        assert!(DecisionDistribution::new(vec![0.3, 0.7], Some(10)).is_ok());
    }

    #[test]
    fn from_counts() {
        let d = DecisionDistribution::from_counts(&[8, 1, 1]).unwrap();
        assert_eq!(d.probs(), &[0.8, 0.1, 0.1]);
        assert_eq!(d.sample_count(), Some(10));
        assert_eq!(d.counts().unwrap(), vec![8, 1, 1]);
    }

    #[test]
    fn logits_reject_non_finite() {
        assert!(LogitsVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitsVector::new(vec![1.0, f64::INFINITY]).is_err());
    }
}
