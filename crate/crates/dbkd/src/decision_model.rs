//! Theoretical decision distribution `Q(Y|x; z_hat)` under the Gaussian logit
//! model `Z ~ N(z_hat, sigma^2 I)`: for each label the probability that it
//! attains the maximum, expressed as a non-centred orthant probability of the
//! pairwise differences.

use serde::{Deserialize, Serialize};

use crate::core::{DecisionDistribution, LogitsVector, NoiseScale};
use crate::error::Result;
use crate::orthant::{orthant_probability, OrthantProblem, QuadratureConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DecisionModelConfig {
    pub sigma: NoiseScale,
    pub quadrature: QuadratureConfig,
}

/// The `(L-1)`-dimensional difference problem for label `i`: the `j`-th
/// coordinate of `U` is `Z_i - Z_j` (skipping `j = i`), so
/// `mu_j = z_i - z_j`, `Var(U_j) = 2 sigma^2` and `Cov(U_j, U_k) = sigma^2`.
pub fn build_difference_problem(
    z_hat: &LogitsVector,
    i: usize,
    sigma: NoiseScale,
) -> Result<OrthantProblem> {
    let l = z_hat.len();
    if i >= l {
        return Err(crate::error::Error::Contract(format!(
            "label {i} out of range for {l} categories"
        )));
    }
    let z = z_hat.values();
    let mu: Vec<f64> =
        (0..l).filter(|&j| j != i).map(|j| z[i] - z[j]).collect();
    let s2 = sigma.sigma() * sigma.sigma();
    let k = l - 1;
    let cov: Vec<Vec<f64>> = (0..k)
        .map(|r| (0..k).map(|c| if r == c { 2.0 * s2 } else { s2 }).collect())
        .collect();
    OrthantProblem::new(mu, cov)
}

/// `Q(Y|x; z_hat)`: one orthant probability per label, renormalized to sum
/// exactly to one (each label carries independent quadrature error).
pub fn theoretical_distribution(
    z_hat: &LogitsVector,
    cfg: &DecisionModelConfig,
) -> Result<DecisionDistribution> {
    let l = z_hat.len();
    let mut raw = Vec::with_capacity(l);
    for i in 0..l {
        let problem = build_difference_problem(z_hat, i, cfg.sigma)?;
        raw.push(orthant_probability(&problem, &cfg.quadrature)?);
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(crate::error::Error::Contract(
            "orthant probabilities summed to zero".into(),
        ));
    }
    let probs = raw.iter().map(|p| p / sum).collect();
    DecisionDistribution::new(probs, None)
}
