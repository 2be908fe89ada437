//! Fixed-point solver for `P_tilde(Y|x) - Q(Y|x; z_hat) = 0` and the
//! precomputed lookup table from discrete decision distributions to logits.
//!
//! Starting from `z_hat = 0`, each step adds `damping * (P_tilde - p)` where
//! `p` is the theoretical distribution at the current iterate; iteration
//! stops when the max-norm residual drops below the error bound or the
//! iteration cap is hit. Solves run in canonical (probability-descending)
//! label order so permuted inputs share one solve bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{DecisionDistribution, LabelSpace, LogitsVector, NoiseScale};
use crate::decision_model::{theoretical_distribution, DecisionModelConfig};
use crate::error::{Error, Result};
use crate::orthant::QuadratureConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Error bound on the max-norm residual.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Step multiplier in (0, 1]; 1.0 is the plain additive update.
    pub damping: f64,
    pub sigma: NoiseScale,
    pub quadrature: QuadratureConfig,
    /// Add `1/(2N)` pseudo-counts before solving. Off by default; one-hot
    /// inputs then terminate at the iteration cap instead.
    pub smoothing: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iterations: 100,
            damping: 1.0,
            sigma: NoiseScale::default(),
            quadrature: QuadratureConfig::default(),
            smoothing: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Contract("epsilon must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Contract("max_iterations must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Contract(format!(
                "damping must be in (0, 1], got {}",
                self.damping
            )));
        }
        self.quadrature.validate()
    }

    fn model(&self) -> DecisionModelConfig {
        DecisionModelConfig { sigma: self.sigma, quadrature: self.quadrature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub z_hat: LogitsVector,
    pub converged: bool,
    pub iterations: usize,
    /// Final `||p - P_tilde||_inf`.
    pub residual_linf: f64,
}

/// Solve outcome in canonical (sorted) label order; shared between permuted
/// inputs of the same multiset.
#[derive(Debug, Clone)]
struct CanonicalSolve {
    z_sorted: Vec<f64>,
    converged: bool,
    iterations: usize,
    residual_linf: f64,
}

/// Stable permutation sorting probabilities in descending order.
/// `perm[r]` is the original index placed at canonical rank `r`.
fn canonical_order(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idx
}

fn solve_sorted(sorted_probs: &[f64], cfg: &SolverConfig) -> Result<CanonicalSolve> {
    let l = sorted_probs.len();
    let mut z = vec![0.0f64; l];
    let mut iterations = 0;
    let (residual, converged) = loop {
        let zv = LogitsVector::new(z.clone())?;
        let p = theoretical_distribution(&zv, &cfg.model())?;
        let residual = sorted_probs
            .iter()
            .zip(p.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // The residual is checked before updating, so a loose epsilon keeps
        // the zero initialization and the cap bounds the update count.
        if residual <= cfg.epsilon {
            break (residual, true);
        }
        if iterations == cfg.max_iterations {
            break (residual, false);
        }
        iterations += 1;
        for (zi, (pt, pi)) in z.iter_mut().zip(sorted_probs.iter().zip(p.probs())) {
            *zi += cfg.damping * (pt - pi);
        }
    };
    Ok(CanonicalSolve { z_sorted: z, converged, iterations, residual_linf: residual })
}

fn assemble(perm: &[usize], core: &CanonicalSolve) -> Result<SolveResult> {
    let mut z = vec![0.0; perm.len()];
    for (rank, &orig) in perm.iter().enumerate() {
        z[orig] = core.z_sorted[rank];
    }
    Ok(SolveResult {
        z_hat: LogitsVector::new(z)?,
        converged: core.converged,
        iterations: core.iterations,
        residual_linf: core.residual_linf,
    })
}

/// Pseudo-count smoothing with `delta = 1/(2N)`: order-preserving, so the
/// canonical label order is unchanged.
fn smooth_probs(probs: &[f64], n: usize) -> Vec<f64> {
    let l = probs.len() as f64;
    let delta = 1.0 / (2.0 * n as f64);
    let denom = n as f64 + l * delta;
    probs.iter().map(|&p| (p * n as f64 + delta) / denom).collect()
}

fn effective_probs(p_tilde: &DecisionDistribution, cfg: &SolverConfig) -> Vec<f64> {
    match (cfg.smoothing, p_tilde.sample_count()) {
        (true, Some(n)) => smooth_probs(p_tilde.probs(), n),
        _ => p_tilde.probs().to_vec(),
    }
}

/// Estimate the logits behind an observed decision distribution.
///
/// Never fails on non-convergence; the capped iterate is returned with
/// `converged = false`.
pub fn solve_logits(p_tilde: &DecisionDistribution, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let probs = effective_probs(p_tilde, cfg);
    let perm = canonical_order(&probs);
    let sorted: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
    let core = solve_sorted(&sorted, cfg)?;
    assemble(&perm, &core)
}

/// Number of compositions of `n` into `l` nonnegative parts: C(n+l-1, l-1).
pub fn composition_count(n: usize, l: usize) -> usize {
    let mut num = 1usize;
    let mut den = 1usize;
    for i in 0..(l - 1) {
        num *= n + l - 1 - i;
        den *= i + 1;
    }
    num / den
}

/// All count vectors of length `l` summing to `n`, lexicographic.
pub fn compositions(n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(composition_count(n, l));
    let mut current = vec![0usize; l];
    fn rec(rest: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == current.len() - 1 {
            current[pos] = rest;
            out.push(current.clone());
            return;
        }
        for c in 0..=rest {
            current[pos] = c;
            rec(rest - c, pos + 1, current, out);
        }
    }
    rec(n, 0, &mut current, &mut out);
    out
}

/// Precomputed map from every achievable count vector to its solved logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitsLookupTable {
    pub version: u32,
    pub label_count: usize,
    pub sample_count: usize,
    pub sigma: NoiseScale,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub damping: f64,
    pub quadrature: QuadratureConfig,
    entries: Vec<TableEntry>,
    #[serde(skip)]
    index: HashMap<Vec<usize>, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableEntry {
    counts: Vec<usize>,
    result: SolveResult,
}

pub const TABLE_FORMAT_VERSION: u32 = 1;

impl LogitsLookupTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn build_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.counts.clone(), i))
            .collect();
    }

    pub fn get(&self, counts: &[usize]) -> Option<&SolveResult> {
        self.index.get(counts).map(|&i| &self.entries[i].result)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut table: Self = serde_json::from_reader(BufReader::new(file))?;
        if table.version != TABLE_FORMAT_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported table version {}",
                table.version
            )));
        }
        table.build_index();
        Ok(table)
    }
}

/// Solve every composition of `n` decisions over `l` labels. Compositions
/// sharing a sorted multiset share one canonical solve; assembly matches
/// `solve_logits` bit for bit.
pub fn build_lookup_table(
    space: LabelSpace,
    n: usize,
    cfg: &SolverConfig,
) -> Result<LogitsLookupTable> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Contract("sample count must be >= 1".into()));
    }
    let l = space.size();
    let all = compositions(n, l);

    // One canonical solve per sorted multiset, in parallel.
    let mut canon_keys: Vec<Vec<usize>> = all
        .iter()
        .map(|c| {
            let mut s = c.clone();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s
        })
        .collect();
    canon_keys.sort_unstable();
    canon_keys.dedup();
    let solved: HashMap<Vec<usize>, Arc<CanonicalSolve>> = canon_keys
        .par_iter()
        .map(|key| {
            let mut sorted_probs: Vec<f64> =
                key.iter().map(|&c| c as f64 / n as f64).collect();
            if cfg.smoothing {
                sorted_probs = smooth_probs(&sorted_probs, n);
            }
            solve_sorted(&sorted_probs, cfg).map(|s| (key.clone(), Arc::new(s)))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(all.len());
    for counts in all {
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let perm = canonical_order(&probs);
        let key: Vec<usize> = perm.iter().map(|&i| counts[i]).collect();
        let core = &solved[&key];
        entries.push(TableEntry { counts, result: assemble(&perm, core)? });
    }

    let mut table = LogitsLookupTable {
        version: TABLE_FORMAT_VERSION,
        label_count: l,
        sample_count: n,
        sigma: cfg.sigma,
        epsilon: cfg.epsilon,
        max_iterations: cfg.max_iterations,
        damping: cfg.damping,
        quadrature: cfg.quadrature,
        entries,
        index: HashMap::new(),
    };
    table.build_index();
    Ok(table)
}

/// Exact-match retrieval of a precomputed solve.
pub fn lookup(table: &LogitsLookupTable, p_tilde: &DecisionDistribution) -> Result<SolveResult> {
    let n = p_tilde.sample_count().ok_or_else(|| {
        Error::LookupMiss("distribution has no sample count".into())
    })?;
    if n != table.sample_count {
        return Err(Error::LookupMiss(format!(
            "sample count {n} does not match table count {}",
            table.sample_count
        )));
    }
    if p_tilde.len() != table.label_count {
        return Err(Error::LookupMiss(format!(
            "label count {} does not match table count {}",
            p_tilde.len(),
            table.label_count
        )));
    }
    let counts = p_tilde.counts().ok_or_else(|| {
        Error::LookupMiss("distribution is not on the count grid".into())
    })?;
    table
        .get(&counts)
        .cloned()
        .ok_or_else(|| Error::LookupMiss(format!("counts {counts:?} not in table")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::one_hot;

    fn dist(probs: &[f64], n: Option<usize>) -> DecisionDistribution {
        DecisionDistribution::new(probs.to_vec(), n).unwrap()
    }

    #[test]
    fn uniform_fixed_point() {
        let r = solve_logits(&dist(&[0.25; 4], None), &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 1);
        for &z in r.z_hat.values() {
            assert!(z.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_recovery() {
        let z_star = LogitsVector::new(vec![1.2, -0.4, -0.8]).unwrap();
        let cfg = SolverConfig { epsilon: 1e-4, ..SolverConfig::default() };
        let q = theoretical_distribution(&z_star, &cfg.model()).unwrap();
        let r = solve_logits(&q, &cfg).unwrap();
        assert!(r.converged, "residual {}", r.residual_linf);
        // Compare after removing the mean: only differences are identified.
        let mean_star: f64 = z_star.values().iter().sum::<f64>() / 3.0;
        let mean_hat: f64 = r.z_hat.values().iter().sum::<f64>() / 3.0;
        for (a, b) in z_star.values().iter().zip(r.z_hat.values()) {
            assert!(((a - mean_star) - (b - mean_hat)).abs() < 1e-2);
        }
    }

    #[test]
    fn one_hot_hits_iteration_cap() {
        let cfg = SolverConfig { max_iterations: 50, ..SolverConfig::default() };
        let p = one_hot(0, LabelSpace::new(4).unwrap()).unwrap();
        let r = solve_logits(&p, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 50);
        assert!(r.z_hat.values().iter().all(|z| z.is_finite()));
        assert_eq!(crate::core::argmax_decision(&r.z_hat), 0);
    }

    #[test]
    fn smoothing_makes_one_hot_tractable() {
        let cfg = SolverConfig { smoothing: true, ..SolverConfig::default() };
        let p = dist(&[1.0, 0.0, 0.0], Some(10));
        let r = solve_logits(&p, &cfg).unwrap();
        assert!(r.converged, "residual {}", r.residual_linf);
        assert_eq!(crate::core::argmax_decision(&r.z_hat), 0);
    }

    #[test]
    fn zero_sum_invariant() {
        let cfg = SolverConfig::default();
        let r = solve_logits(&dist(&[0.6, 0.3, 0.1], Some(10)), &cfg).unwrap();
        let sum: f64 = r.z_hat.values().iter().sum();
        assert!(sum.abs() < 1e-9, "sum {sum}");
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = SolverConfig::default();
        let a = solve_logits(&dist(&[0.6, 0.3, 0.1], Some(10)), &cfg).unwrap();
        let b = solve_logits(&dist(&[0.1, 0.6, 0.3], Some(10)), &cfg).unwrap();
        assert_eq!(a.z_hat.values()[0], b.z_hat.values()[1]);
        assert_eq!(a.z_hat.values()[1], b.z_hat.values()[2]);
        assert_eq!(a.z_hat.values()[2], b.z_hat.values()[0]);
    }

    #[test]
    fn composition_counts() {
        assert_eq!(composition_count(10, 4), 286);
        assert_eq!(composition_count(1, 2), 2);
        assert_eq!(compositions(10, 4).len(), 286);
        assert_eq!(compositions(1, 2), vec![vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn small_table_and_lookup() {
        let cfg = SolverConfig::default();
        let table = build_lookup_table(LabelSpace::new(2).unwrap(), 1, &cfg).unwrap();
        assert_eq!(table.len(), 2);
        let p = one_hot(1, LabelSpace::new(2).unwrap()).unwrap();
        let r = lookup(&table, &p).unwrap();
        assert_eq!(crate::core::argmax_decision(&r.z_hat), 1);
    }

    #[test]
    fn tied_counts_give_tied_logits() {
        let cfg = SolverConfig::default();
        let table = build_lookup_table(LabelSpace::new(3).unwrap(), 10, &cfg).unwrap();
        let r = table.get(&[8, 1, 1]).unwrap();
        let z = r.z_hat.values();
        assert!(z[0] > z[1]);
        assert!((z[1] - z[2]).abs() < 1e-6);
    }

    #[test]
    fn lookup_rejects_wrong_sample_count() {
        let cfg = SolverConfig::default();
        let table = build_lookup_table(LabelSpace::new(2).unwrap(), 10, &cfg).unwrap();
        let p = dist(&[1.0 / 7.0, 6.0 / 7.0], Some(7));
        assert!(matches!(lookup(&table, &p), Err(Error::LookupMiss(_))));
    }

    #[test]
    fn uniform_counts_give_zero_logits() {
        let cfg = SolverConfig::default();
        let table = build_lookup_table(LabelSpace::new(2).unwrap(), 10, &cfg).unwrap();
        let p = dist(&[0.5, 0.5], Some(10));
        let r = lookup(&table, &p).unwrap();
        for &z in r.z_hat.values() {
            assert!(z.abs() < 1e-12);
        }
    }

    #[test]
    fn table_round_trips_through_json() {
        let cfg = SolverConfig::default();
        let table = build_lookup_table(LabelSpace::new(3).unwrap(), 3, &cfg).unwrap();
        let dir = std::env::temp_dir().join("dbkd-table-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.json");
        table.save(&path).unwrap();
        let loaded = LogitsLookupTable::load(&path).unwrap();
        assert_eq!(loaded.len(), table.len());
        for c in compositions(3, 3) {
            assert_eq!(loaded.get(&c).unwrap().z_hat, table.get(&c).unwrap().z_hat);
        }
    }
}
