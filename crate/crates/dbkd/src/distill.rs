//! Soft labels, the distillation objective, and a desk-scale end-to-end
//! harness: a rank-limited linear student distilled from a black-box linear
//! teacher on synthetic Gaussian blobs, with the soft-label MSE analysis.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}
use serde::{Deserialize, Serialize};

use crate::core::{argmax_decision, DecisionDistribution, LogitsVector, NoiseScale};
use crate::error::{Error, Result};
use crate::solver::{solve_logits, SolverConfig};

/// Temperature-scaled softmax with max-subtraction.
pub fn soft_label(z_hat: &LogitsVector, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(softmax(&z_hat.values().iter().map(|z| z / tau).collect::<Vec<_>>()))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Which distribution sits first in the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlDirection {
    /// `KL(student || teacher)` — the objective as written.
    StudentFirst,
    /// `KL(teacher || student)` — the conventional distillation direction.
    TeacherFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLossConfig {
    pub tau: f64,
    /// Scaling factor balancing the CE and KD terms.
    pub lambda: f64,
    pub direction: KlDirection,
    /// Multiply the KD term by `tau^2` (classic gradient-scale correction).
    pub tau_squared: bool,
}

impl Default for KdLossConfig {
    fn default() -> Self {
        Self { tau: 1.0, lambda: 0.5, direction: KlDirection::StudentFirst, tau_squared: false }
    }
}

impl KdLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Contract("temperature must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Contract("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// KL divergence between the tempered student and teacher distributions.
pub fn kd_loss(
    student_logits: &LogitsVector,
    teacher_logits: &LogitsVector,
    cfg: &KdLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher_logits.len(),
            actual: student_logits.len(),
        });
    }
    let s = soft_label(student_logits, cfg.tau)?;
    let t = soft_label(teacher_logits, cfg.tau)?;
    let (p, q) = match cfg.direction {
        KlDirection::StudentFirst => (&s, &t),
        KlDirection::TeacherFirst => (&t, &s),
    };
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            kl += pi * (pi / qi).ln();
        }
    }
    let scale = if cfg.tau_squared { cfg.tau * cfg.tau } else { 1.0 };
    Ok((kl * scale).max(0.0))
}

/// Analytic gradient of `kd_loss` with respect to the student logits.
pub fn kd_loss_grad(
    student_logits: &LogitsVector,
    teacher_logits: &LogitsVector,
    cfg: &KdLossConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let s = soft_label(student_logits, cfg.tau)?;
    let t = soft_label(teacher_logits, cfg.tau)?;
    let scale = if cfg.tau_squared { cfg.tau * cfg.tau } else { 1.0 };
    let grad = match cfg.direction {
        KlDirection::StudentFirst => {
            let kl: f64 = s
                .iter()
                .zip(&t)
                .map(|(si, ti)| if *si > 0.0 { si * (si / ti).ln() } else { 0.0 })
                .sum();
            s.iter()
                .zip(&t)
                .map(|(si, ti)| scale / cfg.tau * si * ((si / ti).ln() - kl))
                .collect()
        }
        KlDirection::TeacherFirst => s
            .iter()
            .zip(&t)
            .map(|(si, ti)| scale / cfg.tau * (si - ti))
            .collect(),
    };
    Ok(grad)
}

/// `L = L_CE + lambda * L_KD`.
pub fn total_loss(ce: f64, kd: f64, lambda: f64) -> f64 {
    ce + lambda * kd
}

/// One estimated-logits record, the hand-off point to external training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftLabelRecord {
    pub input_id: String,
    pub z_hat: LogitsVector,
    pub tau: f64,
    pub probabilities: Vec<f64>,
    pub converged: bool,
    pub residual: f64,
}

impl SoftLabelRecord {
    pub fn new(
        input_id: String,
        z_hat: LogitsVector,
        tau: f64,
        converged: bool,
        residual: f64,
    ) -> Result<Self> {
        let probabilities = soft_label(&z_hat, tau)?;
        Ok(Self { input_id, z_hat, tau, probabilities, converged, residual })
    }
}

/// How the student's distillation targets are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Teacher decisions as ground-truth labels (one-hot targets).
    Hard,
    /// Label-smoothed teacher decisions, smoothing factor 0.1.
    Smooth,
    /// Randomly sampled soft labels.
    Noisy,
    /// Decision-based estimation: augmentation queries, solve for logits.
    Dbkd,
    /// White-box targets from the true teacher logits.
    Standard,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Hard, Method::Smooth, Method::Noisy, Method::Dbkd, Method::Standard];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Method::Hard),
            "smooth" => Ok(Method::Smooth),
            "noisy" => Ok(Method::Noisy),
            "dbkd" => Ok(Method::Dbkd),
            "standard" => Ok(Method::Standard),
            other => Err(Error::Contract(format!("unknown method {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Hard => "hard",
            Method::Smooth => "smooth",
            Method::Noisy => "noisy",
            Method::Dbkd => "dbkd",
            Method::Standard => "standard",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub classes: usize,
    pub dims: usize,
    pub train: usize,
    pub test: usize,
    pub blob_radius: f64,
    pub blob_std: f64,
    pub seed: u64,
    /// Augmentation draws per training sample for the dbkd method.
    pub n_augment: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub tau: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub student_rank: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dims: 2,
            train: 120,
            test: 2000,
            blob_radius: 2.0,
            blob_std: 1.6,
            seed: 0,
            n_augment: 10,
            sigma: 1.0,
            epsilon: 1e-3,
            max_iterations: 100,
            tau: 1.0,
            lambda: 10.0,
            learning_rate: 0.1,
            epochs: 400,
            student_rank: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyReport {
    pub method: Method,
    pub test_accuracy: f64,
    /// Mean squared error between the method's soft labels and the true
    /// teacher softmax on the training set.
    pub soft_label_mse: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

struct Dataset {
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
}

struct Scenario {
    train: Dataset,
    test: Dataset,
    teacher_w: Vec<Vec<f64>>,
    teacher_b: Vec<f64>,
}

fn class_means(cfg: &ScenarioConfig) -> Vec<Vec<f64>> {
    let l = cfg.classes;
    (0..l)
        .map(|c| {
            let theta = 2.0 * std::f64::consts::PI * c as f64 / l as f64;
            let mut m = vec![0.0; cfg.dims];
            m[0] = cfg.blob_radius * theta.cos();
            if cfg.dims > 1 {
                m[1] = cfg.blob_radius * theta.sin();
            }
            m
        })
        .collect()
}

fn sample_dataset(cfg: &ScenarioConfig, n: usize, rng: &mut ChaCha12Rng) -> Dataset {
    let means = class_means(cfg);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.gen_range(0..cfg.classes);
        let x: Vec<f64> = means[y]
            .iter()
            .map(|&m| {
                let g: f64 = StandardNormal.sample(rng);
                m + cfg.blob_std * g
            })
            .collect();
        xs.push(x);
        ys.push(y);
    }
    Dataset { xs, ys }
}

fn build_scenario(cfg: &ScenarioConfig) -> Scenario {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let train = sample_dataset(cfg, cfg.train, &mut rng);
    let test = sample_dataset(cfg, cfg.test, &mut rng);
    // Bayes-optimal linear teacher for spherical blobs.
    let means = class_means(cfg);
    let s2 = cfg.blob_std * cfg.blob_std;
    let teacher_w: Vec<Vec<f64>> =
        means.iter().map(|m| m.iter().map(|v| v / s2).collect()).collect();
    let teacher_b: Vec<f64> = means
        .iter()
        .map(|m| -m.iter().map(|v| v * v).sum::<f64>() / (2.0 * s2))
        .collect();
    Scenario { train, test, teacher_w, teacher_b }
}

fn linear_logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bi)| row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + bi)
        .collect()
}

/// Label-smoothing mass spread across classes by the `smooth` baseline.
const SMOOTHING: f64 = 0.2;
/// Noise scale on the teacher logits for the `noisy` baseline.
const NOISY_SCALE: f64 = 1.25;

/// Distillation targets for every training sample under the given method.
fn method_soft_labels(
    method: Method,
    scenario: &Scenario,
    cfg: &ScenarioConfig,
) -> Result<Vec<Vec<f64>>> {
    let l = cfg.classes;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_50f7));
    let solver = SolverConfig {
        epsilon: cfg.epsilon,
        max_iterations: cfg.max_iterations,
        sigma: NoiseScale::new(cfg.sigma)?,
        ..SolverConfig::default()
    };
    let mut solve_cache: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(scenario.train.xs.len());
    for x in &scenario.train.xs {
        let z = linear_logits(&scenario.teacher_w, &scenario.teacher_b, x);
        let zv = LogitsVector::new(z.clone())?;
        let target = match method {
            Method::Hard => {
                let mut p = vec![0.0; l];
                p[argmax_decision(&zv)] = 1.0;
                p
            }
            Method::Smooth => {
                let mut p = vec![SMOOTHING / l as f64; l];
                p[argmax_decision(&zv)] += 1.0 - SMOOTHING;
                p
            }
            Method::Noisy => {
                // Perturbed-teacher baseline: soft labels from the true
                // logits corrupted by additive Gaussian noise.
                let noisy: Vec<f64> =
                    z.iter().map(|&zi| zi + NOISY_SCALE * randn(&mut rng)).collect();
                soft_label(&LogitsVector::new(noisy)?, cfg.tau)?
            }
            Method::Standard => soft_label(&zv, cfg.tau)?,
            Method::Dbkd => {
                let mut counts = vec![0usize; l];
                for _ in 0..cfg.n_augment {
                    let noisy: Vec<f64> = z
                        .iter()
                        .map(|&zi| zi + cfg.sigma * randn(&mut rng))
                        .collect();
                    counts[argmax_decision(&LogitsVector::new(noisy)?)] += 1;
                }
                let z_hat = solve_cache.entry(counts.clone()).or_insert_with(|| {
                    let p = DecisionDistribution::from_counts(&counts)
                        .expect("counts sum to N");
                    solve_logits(&p, &solver)
                        .expect("solver never fails on valid input")
                        .z_hat
                        .values()
                        .to_vec()
                });
                soft_label(&LogitsVector::new(z_hat.clone())?, cfg.tau)?
            }
        };
        out.push(target);
    }
    Ok(out)
}

struct Student {
    // logits = a * (b_mat * x) + c, rank-limited through b_mat.
    a: Vec<Vec<f64>>,
    b_mat: Vec<Vec<f64>>,
    c: Vec<f64>,
}

impl Student {
    fn init(cfg: &ScenarioConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x1217));
        let r = cfg.student_rank;
        let scale = 0.1;
        let a = (0..cfg.classes)
            .map(|_| (0..r).map(|_| scale * randn(&mut rng)).collect())
            .collect();
        let b_mat = (0..r)
            .map(|_| {
                (0..cfg.dims).map(|_| scale * randn(&mut rng)).collect()
            })
            .collect();
        let c = vec![0.0; cfg.classes];
        Self { a, b_mat, c }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .b_mat
            .iter()
            .map(|row| row.iter().zip(x).map(|(w, xi)| w * xi).sum())
            .collect();
        self.a
            .iter()
            .zip(&self.c)
            .map(|(row, ci)| row.iter().zip(&h).map(|(w, hi)| w * hi).sum::<f64>() + ci)
            .collect()
    }
}

/// Trains the rank-limited student with full-batch gradient descent on
/// `CE(true labels) + lambda * KD(targets)` and reports held-out accuracy
/// plus the soft-label MSE against the true teacher softmax.
pub fn toy_distillation_run(cfg: &ScenarioConfig, method: Method) -> Result<ToyReport> {
    let scenario = build_scenario(cfg);
    let targets = method_soft_labels(method, &scenario, cfg)?;
    let l = cfg.classes;
    let n = scenario.train.xs.len() as f64;
    let mut student = Student::init(cfg);
    let r = cfg.student_rank;

    for _epoch in 0..cfg.epochs {
        let mut da = vec![vec![0.0; r]; l];
        let mut db = vec![vec![0.0; cfg.dims]; r];
        let mut dc = vec![0.0; l];
        for (i, x) in scenario.train.xs.iter().enumerate() {
            let h: Vec<f64> = student
                .b_mat
                .iter()
                .map(|row| row.iter().zip(x).map(|(w, xi)| w * xi).sum())
                .collect();
            let v: Vec<f64> = student
                .a
                .iter()
                .zip(&student.c)
                .map(|(row, ci)| row.iter().zip(&h).map(|(w, hi)| w * hi).sum::<f64>() + ci)
                .collect();
            let s = softmax(&v);
            let s_tau = softmax(&v.iter().map(|vi| vi / cfg.tau).collect::<Vec<_>>());
            // dL/dv: CE against the true label plus the conventional KD pull
            // toward the method targets.
            let y = scenario.train.ys[i];
            let mut dv = vec![0.0; l];
            for j in 0..l {
                let ce = s[j] - if j == y { 1.0 } else { 0.0 };
                let kd = (s_tau[j] - targets[i][j]) / cfg.tau;
                dv[j] = (ce + cfg.lambda * kd) / n;
                if !dv[j].is_finite() {
                    return Err(Error::Divergence("non-finite gradient".into()));
                }
            }
            for j in 0..l {
                for k in 0..r {
                    da[j][k] += dv[j] * h[k];
                }
                dc[j] += dv[j];
            }
            for k in 0..r {
                let back: f64 = (0..l).map(|j| dv[j] * student.a[j][k]).sum();
                for d in 0..cfg.dims {
                    db[k][d] += back * x[d];
                }
            }
        }
        for j in 0..l {
            for k in 0..r {
                student.a[j][k] -= cfg.learning_rate * da[j][k];
            }
            student.c[j] -= cfg.learning_rate * dc[j];
        }
        for k in 0..r {
            for d in 0..cfg.dims {
                student.b_mat[k][d] -= cfg.learning_rate * db[k][d];
            }
        }
    }

    // Held-out accuracy.
    let mut correct = 0usize;
    for (x, &y) in scenario.test.xs.iter().zip(&scenario.test.ys) {
        let v = student.logits(x);
        if argmax_decision(&LogitsVector::new(v)?) == y {
            correct += 1;
        }
    }

    // Soft-label MSE against the true teacher softmax.
    let mut mse = 0.0;
    for (x, target) in scenario.train.xs.iter().zip(&targets) {
        let z = linear_logits(&scenario.teacher_w, &scenario.teacher_b, x);
        let q = softmax(&z);
        mse += target
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / l as f64;
    }
    mse /= n;

    Ok(ToyReport {
        method,
        test_accuracy: correct as f64 / scenario.test.xs.len() as f64,
        soft_label_mse: mse,
        train_samples: scenario.train.xs.len(),
        test_samples: scenario.test.xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> LogitsVector {
        LogitsVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn soft_label_uniform_for_zero_logits() {
        let p = soft_label(&logits(&[0.0, 0.0, 0.0, 0.0]), 3.0).unwrap();
        for &x in &p {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_label_two_class_closed_form() {
        // softmax([1, 0]) = [e/(e+1), 1/(e+1)].
        let p = soft_label(&logits(&[5.0, 0.0]), 5.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn soft_label_large_tau_approaches_uniform() {
        let p = soft_label(&logits(&[3.0, -2.0, 1.0]), 1e6).unwrap();
        for &x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn soft_label_scale_covariance() {
        let a = soft_label(&logits(&[2.0, 1.0, -1.0]), 2.0).unwrap();
        let b = soft_label(&logits(&[6.0, 3.0, -3.0]), 6.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_loss_zero_for_equal_logits() {
        let cfg = KdLossConfig::default();
        let z = logits(&[1.0, 0.5, -0.2]);
        assert!(kd_loss(&z, &z, &cfg).unwrap() < 1e-15);
        let shifted = logits(&[2.0, 1.5, 0.8]);
        assert!(kd_loss(&shifted, &z, &cfg).unwrap() < 1e-15);
    }

    #[test]
    fn kd_loss_pinned_value() {
        // KL([0.73106, 0.26894] || [0.26894, 0.73106])
        //   = (p - q) * ln(p/q) with p = e/(1+e): frozen independent value.
        let cfg = KdLossConfig::default();
        let got = kd_loss(&logits(&[1.0, 0.0]), &logits(&[0.0, 1.0]), &cfg).unwrap();
        let e = std::f64::consts::E;
        let p = e / (1.0 + e);
        let expected = (2.0 * p - 1.0) * (p / (1.0 - p)).ln();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.462117).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn kd_loss_nonnegative() {
        let cfg = KdLossConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            assert!(kd_loss(&logits(&a), &logits(&b), &cfg).unwrap() >= 0.0);
        }
    }

    #[test]
    fn grad_matches_finite_differences_both_directions() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for direction in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
            let cfg = KdLossConfig { tau: 2.0, direction, ..KdLossConfig::default() };
            for _ in 0..20 {
                let v: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
                let t: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
                let grad = kd_loss_grad(&logits(&v), &logits(&t), &cfg).unwrap();
                let h = 1e-6;
                for j in 0..4 {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[j] += h;
                    vm[j] -= h;
                    let fd = (kd_loss(&logits(&vp), &logits(&t), &cfg).unwrap()
                        - kd_loss(&logits(&vm), &logits(&t), &cfg).unwrap())
                        / (2.0 * h);
                    let denom = fd.abs().max(grad[j].abs()).max(1e-8);
                    assert!(
                        (grad[j] - fd).abs() / denom < 1e-4,
                        "dir {direction:?} analytic {} fd {fd}",
                        grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(total_loss(1.5, 2.0, 0.0), 1.5);
        assert_eq!(total_loss(1.5, 0.0, 3.0), 1.5);
    }

    #[test]
    fn lambda_zero_makes_methods_identical() {
        let cfg = ScenarioConfig {
            lambda: 0.0,
            train: 300,
            test: 100,
            epochs: 60,
            ..ScenarioConfig::default()
        };
        let a = toy_distillation_run(&cfg, Method::Hard).unwrap();
        let b = toy_distillation_run(&cfg, Method::Standard).unwrap();
        assert_eq!(a.test_accuracy, b.test_accuracy);
    }

    #[test]
    fn standard_beats_hard_in_mse() {
        let cfg = ScenarioConfig { train: 400, test: 100, epochs: 30, ..Default::default() };
        let standard = toy_distillation_run(&cfg, Method::Standard).unwrap();
        let hard = toy_distillation_run(&cfg, Method::Hard).unwrap();
        assert!(standard.soft_label_mse <= hard.soft_label_mse);
    }

    #[test]
    fn dbkd_beats_noisy_in_mse() {
        let cfg = ScenarioConfig { train: 400, test: 100, epochs: 30, ..Default::default() };
        let dbkd = toy_distillation_run(&cfg, Method::Dbkd).unwrap();
        let noisy = toy_distillation_run(&cfg, Method::Noisy).unwrap();
        assert!(dbkd.soft_label_mse < noisy.soft_label_mse);
    }
}
