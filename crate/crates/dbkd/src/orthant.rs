//! Non-centred Gaussian orthant probabilities `P(U_j >= 0, 1 <= j <= K)` for
//! `U ~ N(mu, R)`, computed by Cholesky decomposition and nested recursive
//! integration, with a Monte Carlo oracle for validation.
//!
//! The nested integrals run over `M ~ N(0, I)` with `U = B M + mu`:
//! at level `j` the integrand is `phi(t) * f_{j+1}(...)` integrated from
//! `(-mu_j - sum_{k<j} b_jk s_k) / b_jj` upward, truncated at `upper_cut`
//! standard deviations. The innermost level is the standard normal CDF in
//! closed form.

use std::collections::HashMap;
use std::sync::Mutex;

use once_cell::sync::Lazy;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Mean vector and covariance of the difference variable `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthantProblem {
    mu: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl OrthantProblem {
    pub fn new(mu: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let k = mu.len();
        if k == 0 {
            return Err(Error::Contract("orthant problem needs dimension >= 1".into()));
        }
        if cov.len() != k || cov.iter().any(|row| row.len() != k) {
            return Err(Error::DimensionMismatch { expected: k, actual: cov.len() });
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Contract("non-finite mean entry".into()));
        }
        for i in 0..k {
            for j in 0..k {
                if !cov[i][j].is_finite() {
                    return Err(Error::Contract("non-finite covariance entry".into()));
                }
                let tol = 1e-12 * cov[i][j].abs().max(1.0);
                if (cov[i][j] - cov[j][i]).abs() > tol {
                    return Err(Error::Contract(format!(
                        "covariance not symmetric at ({i},{j}): {} vs {}",
                        cov[i][j], cov[j][i]
                    )));
                }
            }
        }
        Ok(Self { mu, cov })
    }

    pub fn dimension(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn cov(&self) -> &[Vec<f64>] {
        &self.cov
    }
}

/// Lower-triangular `B` with `B * B^T = cov` and positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    b: Vec<Vec<f64>>,
}

impl CholeskyFactor {
    pub fn b(&self) -> &[Vec<f64>] {
        &self.b
    }

    pub fn dimension(&self) -> usize {
        self.b.len()
    }
}

/// Cholesky decomposition of a symmetric matrix. Fails with the index of the
/// first non-positive pivot when the matrix is not positive definite.
pub fn cholesky(cov: &[Vec<f64>]) -> Result<CholeskyFactor> {
    let k = cov.len();
    let mut b = vec![vec![0.0; k]; k];
    for j in 0..k {
        let mut diag = cov[j][j];
        for l in 0..j {
            diag -= b[j][l] * b[j][l];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        b[j][j] = diag.sqrt();
        for i in (j + 1)..k {
            let mut s = cov[i][j];
            for l in 0..j {
                s -= b[i][l] * b[j][l];
            }
            b[i][j] = s / b[j][j];
        }
    }
    Ok(CholeskyFactor { b })
}

/// Discretization knobs for the nested integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Gauss-Legendre node count per nesting level.
    pub nodes_per_level: usize,
    /// Integration truncation, in standard deviations of the level variable.
    pub upper_cut: f64,
    pub tolerance: f64,
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_level < 8 {
            return Err(Error::Contract(format!(
                "nodes_per_level must be >= 8, got {}",
                self.nodes_per_level
            )));
        }
        if !(self.upper_cut >= 6.0) {
            return Err(Error::Contract(format!("upper_cut must be >= 6, got {}", self.upper_cut)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Contract("tolerance must be positive".into()));
        }
        Ok(())
    }
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { nodes_per_level: 64, upper_cut: 8.0, tolerance: 1e-6 }
    }
}

static GL_CACHE: Lazy<Mutex<HashMap<usize, Vec<(f64, f64)>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Gauss-Legendre nodes and weights on `[-1, 1]`, Newton-refined from the
/// Chebyshev initial guess.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    if let Some(rule) = GL_CACHE.lock().unwrap().get(&n) {
        return rule.clone();
    }
    let mut rule = Vec::with_capacity(n);
    for i in 0..n {
        let mut x =
            (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P'_n(x).
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((x, w));
    }
    rule.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    GL_CACHE.lock().unwrap().insert(n, rule.clone());
    rule
}

/// `P(U >= 0 componentwise)` by nested recursive integration.
pub fn orthant_probability(p: &OrthantProblem, q: &QuadratureConfig) -> Result<f64> {
    q.validate()?;
    let factor = cholesky(p.cov())?;
    let b = factor.b();
    let k = p.dimension();
    let mu = p.mu();

    if k == 1 {
        return Ok(normal_cdf(mu[0] / b[0][0]));
    }

    let prob = match constant_columns(b) {
        // Exchangeable-style factors (constant below-diagonal columns) admit a
        // scalar-state tabulation, bounding cost at O(K * nodes^2) instead of
        // nodes^(K-1). The decision-model covariance always lands here.
        Some(cols) if k >= 4 => tabulated_recursion(mu, b, &cols, q),
        _ => {
            let mut chosen = vec![0.0; k];
            nested_recursion(0, mu, b, q, &mut chosen)
        }
    };
    Ok(prob.clamp(0.0, 1.0))
}

/// Below-diagonal column constants `c_k = b[j][k]` when every column of `B` is
/// constant under the diagonal; `None` otherwise.
fn constant_columns(b: &[Vec<f64>]) -> Option<Vec<f64>> {
    let k = b.len();
    let mut cols = Vec::with_capacity(k - 1);
    for col in 0..k - 1 {
        let c = b[col + 1][col];
        for row in (col + 1)..k {
            if (b[row][col] - c).abs() > 1e-9 * (1.0 + c.abs()) {
                return None;
            }
        }
        cols.push(c);
    }
    Some(cols)
}

/// Plain nested quadrature over the levels; cost `nodes^(K-1)`.
fn nested_recursion(
    level: usize,
    mu: &[f64],
    b: &[Vec<f64>],
    q: &QuadratureConfig,
    chosen: &mut Vec<f64>,
) -> f64 {
    let k = mu.len();
    let mut shift = mu[level];
    for l in 0..level {
        shift += b[level][l] * chosen[l];
    }
    let lower = -shift / b[level][level];
    if level == k - 1 {
        // Innermost level: the integral of phi from the limit upward.
        return normal_cdf(-lower);
    }
    let a = lower.max(-q.upper_cut);
    let hi = q.upper_cut;
    if a >= hi {
        return 0.0;
    }
    let half = 0.5 * (hi - a);
    let mid = 0.5 * (hi + a);
    let mut sum = 0.0;
    for &(x, w) in &gauss_legendre(q.nodes_per_level) {
        let t = mid + half * x;
        chosen[level] = t;
        sum += w * normal_pdf(t) * nested_recursion(level + 1, mu, b, q, chosen);
    }
    sum * half
}

/// Scalar-state tabulation: level `j`'s inner function depends on the running
/// sum `w = sum_{k<j} c_k s_k` only, so it is tabulated on a grid of `w` and
/// cubically interpolated when the next level integrates over it.
fn tabulated_recursion(mu: &[f64], b: &[Vec<f64>], cols: &[f64], q: &QuadratureConfig) -> f64 {
    let k = mu.len();
    let cut = q.upper_cut;
    let reach: f64 = cols.iter().map(|c| c.abs()).sum::<f64>() * cut;
    let scale = (0..k).map(|j| b[j][j]).fold(f64::INFINITY, f64::min);
    let h = (scale / 20.0).min(reach.max(scale) / 64.0);
    let n_pts = ((2.0 * reach / h).ceil() as usize + 4).clamp(129, 8001);
    let w0 = -reach - h;
    let h = (2.0 * (reach + h)) / (n_pts - 1) as f64;

    let rule = gauss_legendre(q.nodes_per_level);

    // Innermost level as a closed form on the grid.
    let mut table: Vec<f64> = (0..n_pts)
        .map(|i| {
            let w = w0 + h * i as f64;
            normal_cdf((mu[k - 1] + w) / b[k - 1][k - 1])
        })
        .collect();

    // Middle levels j = K-2 .. 1 (0-based), each integrating the previous table.
    for j in (1..k - 1).rev() {
        let c = cols[j];
        let next: Vec<f64> = (0..n_pts)
            .map(|i| {
                let w = w0 + h * i as f64;
                level_integral(mu[j], b[j][j], c, w, cut, &rule, &table, w0, h)
            })
            .collect();
        table = next;
    }

    // Outermost level, evaluated at w = 0 only.
    level_integral(mu[0], b[0][0], cols[0], 0.0, cut, &rule, &table, w0, h)
}

fn level_integral(
    mu_j: f64,
    b_jj: f64,
    c_j: f64,
    w: f64,
    cut: f64,
    rule: &[(f64, f64)],
    table: &[f64],
    w0: f64,
    h: f64,
) -> f64 {
    let lower = (-mu_j - w) / b_jj;
    let a = lower.max(-cut);
    if a >= cut {
        return 0.0;
    }
    let half = 0.5 * (cut - a);
    let mid = 0.5 * (cut + a);
    let mut sum = 0.0;
    for &(x, wt) in rule {
        let t = mid + half * x;
        sum += wt * normal_pdf(t) * interp_cubic(table, w0, h, w + c_j * t);
    }
    sum * half
}

/// Four-point Lagrange interpolation on a uniform grid, clamped at the ends.
fn interp_cubic(table: &[f64], w0: f64, h: f64, x: f64) -> f64 {
    let n = table.len();
    let u = (x - w0) / h;
    let i = (u.floor() as isize).clamp(1, n as isize - 3) as usize;
    let d = u - i as f64;
    let lm1 = -d * (d - 1.0) * (d - 2.0) / 6.0;
    let l0 = (d * d - 1.0) * (d - 2.0) / 2.0;
    let l1 = -d * (d + 1.0) * (d - 2.0) / 2.0;
    let l2 = d * (d * d - 1.0) / 6.0;
    table[i - 1] * lm1 + table[i] * l0 + table[i + 1] * l1 + table[i + 2] * l2
}

/// Monte Carlo estimate of the orthant probability: draws from `N(mu, R)` via
/// the Cholesky factor and counts all-nonnegative vectors. Returns the
/// fraction and its binomial standard error. Deterministic for a fixed seed.
pub fn monte_carlo_orthant(
    p: &OrthantProblem,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 1000 {
        return Err(Error::Contract(format!("need at least 1000 samples, got {samples}")));
    }
    let factor = cholesky(p.cov())?;
    let b = factor.b();
    let k = p.dimension();
    let mu = p.mu();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut m = vec![0.0f64; k];
    for _ in 0..samples {
        for v in m.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut inside = true;
        for j in 0..k {
            let mut u = mu[j];
            for l in 0..=j {
                u += b[j][l] * m[l];
            }
            if u < 0.0 {
                inside = false;
                break;
            }
        }
        if inside {
            hits += 1;
        }
    }
    let est = hits as f64 / samples as f64;
    let se = (est * (1.0 - est) / samples as f64).sqrt();
    Ok((est, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_2x2_closed_form() {
        let f = cholesky(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let b = f.b();
        assert!((b[0][0] - 2.0f64.sqrt()).abs() < 1e-14);
        assert!((b[1][0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-14);
        assert!((b[1][1] - 1.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_identity() {
        let eye = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let f = cholesky(&eye).unwrap();
        assert_eq!(f.b(), eye.as_slice());
    }

    #[test]
    fn cholesky_indefinite_reports_pivot() {
        let err = cholesky(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap_err();
        match err {
            Error::NotPositiveDefinite { pivot } => assert_eq!(pivot, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstructs_cov() {
        let cov = vec![
            vec![2.0, 1.0, 1.0],
            vec![1.0, 2.0, 1.0],
            vec![1.0, 1.0, 2.0],
        ];
        let f = cholesky(&cov).unwrap();
        let b = f.b();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for l in 0..3 {
                    s += b[i][l] * b[j][l];
                }
                assert!((s - cov[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        // Degree-15 polynomial is exact for an 8-node rule.
        let rule = gauss_legendre(8);
        let integral: f64 = rule.iter().map(|&(x, w)| w * x.powi(14)).sum();
        assert!((integral - 2.0 / 15.0).abs() < 1e-13, "{integral}");
        let total: f64 = rule.iter().map(|&(_, w)| w).sum();
        assert!((total - 2.0).abs() < 1e-13);
    }

    #[test]
    fn one_dim_symmetry() {
        let p = OrthantProblem::new(vec![0.0], vec![vec![2.0]]).unwrap();
        let q = QuadratureConfig::default();
        assert!((orthant_probability(&p, &q).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_dim_closed_form() {
        let p = OrthantProblem::new(vec![1.0], vec![vec![2.0]]).unwrap();
        let q = QuadratureConfig::default();
        let got = orthant_probability(&p, &q).unwrap();
        let want = normal_cdf(1.0 / 2.0f64.sqrt());
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.7602499).abs() < 1e-6);
    }

    fn exchangeable_cov(k: usize, sigma: f64) -> Vec<Vec<f64>> {
        let s2 = sigma * sigma;
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { 2.0 * s2 } else { s2 }).collect())
            .collect()
    }

    #[test]
    fn k2_matches_monte_carlo() {
        let p = OrthantProblem::new(vec![0.5, -0.2], exchangeable_cov(2, 1.0)).unwrap();
        let q = QuadratureConfig::default();
        let got = orthant_probability(&p, &q).unwrap();
        let (mc, se) = monte_carlo_orthant(&p, 1_000_000, 7).unwrap();
        assert!((got - mc).abs() < 3.0 * se, "got {got}, mc {mc} +- {se}");
    }

    #[test]
    fn k3_pinned_by_oracle() {
        // Frozen from an independent Monte Carlo run with 10^7 samples:
        // 0.2903602 +- 0.0001435.
        let p =
            OrthantProblem::new(vec![0.5, -0.2, 0.3], exchangeable_cov(3, 1.0)).unwrap();
        let q = QuadratureConfig::default();
        let got = orthant_probability(&p, &q).unwrap();
        assert!((got - 0.2903602).abs() < 3.0 * 0.0001435, "got {got}");
    }

    #[test]
    fn tabulated_path_matches_nested() {
        let q = QuadratureConfig::default();
        let mu = vec![0.7, -0.3, 0.2, 1.1];
        let p = OrthantProblem::new(mu.clone(), exchangeable_cov(4, 1.0)).unwrap();
        let fast = orthant_probability(&p, &q).unwrap();
        // Force the plain nested path by perturbing symmetry-preservingly:
        // recompute through the internal recursion directly.
        let factor = cholesky(p.cov()).unwrap();
        let mut chosen = vec![0.0; 4];
        let slow = nested_recursion(0, &mu, factor.b(), &q, &mut chosen);
        assert!((fast - slow).abs() < 1e-7, "fast {fast}, slow {slow}");
    }

    #[test]
    fn monte_carlo_extremes() {
        let p = OrthantProblem::new(vec![10.0, 10.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        let (est, _) = monte_carlo_orthant(&p, 10_000, 1).unwrap();
        assert!(est > 0.999);
        let p = OrthantProblem::new(vec![-10.0], vec![vec![1.0]]).unwrap();
        let (est, _) = monte_carlo_orthant(&p, 10_000, 1).unwrap();
        assert!(est < 0.001);
        let p = OrthantProblem::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let (est, se) = monte_carlo_orthant(&p, 1_000_000, 2).unwrap();
        assert!((est - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn doubling_nodes_is_converged() {
        let p =
            OrthantProblem::new(vec![0.5, -0.2, 0.3], exchangeable_cov(3, 1.0)).unwrap();
        let q1 = QuadratureConfig::default();
        let q2 = QuadratureConfig { nodes_per_level: 128, ..q1 };
        let a = orthant_probability(&p, &q1).unwrap();
        let b = orthant_probability(&p, &q2).unwrap();
        assert!((a - b).abs() < q1.tolerance);
    }

    #[test]
    fn rejects_asymmetric_cov() {
        assert!(OrthantProblem::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.3, 1.0]])
            .is_err());
    }
}
