//! Black-box decision oracles and the empirical decision-distribution
//! estimator: augment the input N times, collect one top-1 decision per
//! draw, return the frequency vector. Queries can be cached through an
//! append-only decision log so re-runs never re-bill the teacher.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig, TokenSequence};
use crate::core::{argmax_decision, DecisionDistribution, LabelSpace, LogitsVector, NoiseScale};
use crate::error::{Error, Result};

/// The black-box teacher: one top-1 label per query, nothing else.
pub trait DecisionOracle: Sync {
    fn label_space(&self) -> LabelSpace;

    /// Returns a label in `[0, L)`.
    fn query(&self, input: &TokenSequence) -> Result<usize>;

    /// Total number of queries issued so far.
    fn query_count(&self) -> u64;

    /// Stable identifier mixed into cache keys, so logs from different
    /// teachers never alias.
    fn identity(&self) -> String;
}

/// Realizes the Gaussian logit model exactly: every query perturbs the hidden
/// logits with fresh iid `N(0, sigma^2)` noise and returns the argmax. The
/// input text is ignored.
pub struct GaussianSimTeacher {
    true_logits: LogitsVector,
    sigma: NoiseScale,
    seed: u64,
    rng: Mutex<ChaCha12Rng>,
    queries: AtomicU64,
}

impl GaussianSimTeacher {
    pub fn new(true_logits: LogitsVector, sigma: NoiseScale, seed: u64) -> Self {
        Self {
            true_logits,
            sigma,
            seed,
            rng: Mutex::new(ChaCha12Rng::seed_from_u64(seed)),
            queries: AtomicU64::new(0),
        }
    }

    pub fn true_logits(&self) -> &LogitsVector {
        &self.true_logits
    }
}

impl DecisionOracle for GaussianSimTeacher {
    fn label_space(&self) -> LabelSpace {
        self.true_logits.label_space()
    }

    fn query(&self, _input: &TokenSequence) -> Result<usize> {
        let mut rng = self.rng.lock().unwrap();
        let noisy: Vec<f64> = self
            .true_logits
            .values()
            .iter()
            .map(|&z| {
                let g: f64 = StandardNormal.sample(&mut *rng);
                z + self.sigma.sigma() * g
            })
            .collect();
        drop(rng);
        self.queries.fetch_add(1, Ordering::Relaxed);
        Ok(argmax_decision(&LogitsVector::new(noisy)?))
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn identity(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"sim");
        h.update(self.seed.to_le_bytes());
        h.update(self.sigma.sigma().to_le_bytes());
        for v in self.true_logits.values() {
            h.update(v.to_le_bytes());
        }
        format!("sim:{:x}", h.finalize())
    }
}

/// On-disk form of a bag-of-words linear teacher.
#[derive(Debug, Serialize, Deserialize)]
pub struct BowModelFile {
    pub vocab: HashMap<String, usize>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Deterministic text-domain black box: argmax of
/// `weights * bag_of_words(x) + bias`.
pub struct BowTextTeacher {
    vocab: HashMap<String, usize>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    space: LabelSpace,
    queries: AtomicU64,
    fingerprint: String,
}

impl BowTextTeacher {
    pub fn new(
        vocab: HashMap<String, usize>,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let l = weights.len();
        let space = LabelSpace::new(l)?;
        if bias.len() != l {
            return Err(Error::DimensionMismatch { expected: l, actual: bias.len() });
        }
        let v = vocab.len();
        if weights.iter().any(|row| row.len() != v) {
            return Err(Error::Contract("weight rows must match vocabulary size".into()));
        }
        let mut h = Sha256::new();
        let mut sorted: Vec<_> = vocab.iter().collect();
        sorted.sort();
        for (w, &i) in sorted {
            h.update(w.as_bytes());
            h.update((i as u64).to_le_bytes());
        }
        for row in &weights {
            for x in row {
                h.update(x.to_le_bytes());
            }
        }
        for b in &bias {
            h.update(b.to_le_bytes());
        }
        let fingerprint = format!("bow:{:x}", h.finalize());
        Ok(Self { vocab, weights, bias, space, queries: AtomicU64::new(0), fingerprint })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let model: BowModelFile = serde_json::from_reader(BufReader::new(file))?;
        Self::new(model.vocab, model.weights, model.bias)
    }

    fn logits(&self, input: &TokenSequence) -> Vec<f64> {
        let mut counts = vec![0.0f64; self.vocab.len()];
        for t in input.tokens() {
            if let Some(&i) = self.vocab.get(&t.text.to_lowercase()) {
                counts[i] += 1.0;
            }
        }
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(&counts).map(|(w, c)| w * c).sum::<f64>() + b)
            .collect()
    }
}

impl DecisionOracle for BowTextTeacher {
    fn label_space(&self) -> LabelSpace {
        self.space
    }

    fn query(&self, input: &TokenSequence) -> Result<usize> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        Ok(argmax_decision(&LogitsVector::new(self.logits(input))?))
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn identity(&self) -> String {
        self.fingerprint.clone()
    }
}

/// HTTP client for a remote decision API: `POST {endpoint}/decide` with
/// `{"text": ...}`, response `{"label": n}`. Only top-1 labels ever cross
/// this boundary.
pub struct RemoteDecisionClient {
    endpoint: String,
    space: LabelSpace,
    timeout: std::time::Duration,
    retry_budget: usize,
    backoff_base: std::time::Duration,
    auth_token: Option<String>,
    queries: AtomicU64,
}

/// Environment variable holding the bearer token for the remote API.
pub const AUTH_TOKEN_ENV: &str = "DBKD_AUTH_TOKEN";

#[derive(Serialize)]
struct DecideRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct DecideResponse {
    label: usize,
}

impl RemoteDecisionClient {
    pub fn new(endpoint: impl Into<String>, space: LabelSpace) -> Self {
        Self {
            endpoint: endpoint.into(),
            space,
            timeout: std::time::Duration::from_secs(30),
            retry_budget: 3,
            backoff_base: std::time::Duration::from_millis(250),
            auth_token: std::env::var(AUTH_TOKEN_ENV).ok(),
            queries: AtomicU64::new(0),
        }
    }

    pub fn with_timeout(mut self, timeout: std::time::Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry_budget(mut self, retries: usize) -> Self {
        self.retry_budget = retries;
        self
    }

    pub fn with_backoff_base(mut self, base: std::time::Duration) -> Self {
        self.backoff_base = base;
        self
    }
}

/// POSTs the text and parses a top-1 label, retrying transient failures with
/// exponential backoff up to the budget.
pub fn query_remote(client: &RemoteDecisionClient, text: &str) -> Result<usize> {
    let url = format!("{}/decide", client.endpoint.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new()
        .timeout(client.timeout)
        .build();
    let body = serde_json::to_string(&DecideRequest { text })?;
    let mut last_err = String::new();
    for attempt in 0..=client.retry_budget {
        if attempt > 0 {
            std::thread::sleep(client.backoff_base * (1 << (attempt - 1)) as u32);
        }
        let mut req = agent.post(&url).set("content-type", "application/json");
        if let Some(token) = &client.auth_token {
            req = req.set("authorization", &format!("Bearer {token}"));
        }
        match req.send_string(&body) {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| Error::Transport(format!("reading response: {e}")))?;
                let parsed: DecideResponse = serde_json::from_str(&text)
                    .map_err(|e| Error::Protocol(format!("malformed response: {e}")))?;
                client.queries.fetch_add(1, Ordering::Relaxed);
                if !client.space.contains(parsed.label) {
                    return Err(Error::LabelOutOfRange {
                        label: parsed.label,
                        label_count: client.space.size(),
                    });
                }
                return Ok(parsed.label);
            }
            Err(ureq::Error::Status(code, _)) if (500..600).contains(&code) => {
                last_err = format!("server returned {code}");
            }
            Err(ureq::Error::Status(code, _)) => {
                return Err(Error::Transport(format!("server returned {code}")));
            }
            Err(e) => {
                last_err = e.to_string();
            }
        }
    }
    Err(Error::Transport(format!(
        "retries exhausted after {} attempts: {last_err}",
        client.retry_budget + 1
    )))
}

impl DecisionOracle for RemoteDecisionClient {
    fn label_space(&self) -> LabelSpace {
        self.space
    }

    fn query(&self, input: &TokenSequence) -> Result<usize> {
        query_remote(self, &input.text())
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn identity(&self) -> String {
        format!("remote:{}", self.endpoint)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub input_id: String,
    pub draw: usize,
    pub text_hash: String,
    pub label: usize,
    pub timestamp: u64,
}

/// Append-only cache of teacher decisions, keyed by `(input_id, draw)` so
/// every one of the N draws stays a distinct sample even when augmentation
/// leaves the text unchanged. Each record carries an oracle-salted content
/// hash; a key that reappears with a different hash is a corrupted or
/// mismatched log and is rejected. Optionally persisted as JSON-lines so
/// experiments are resumable.
pub struct DecisionLog {
    inner: Mutex<LogInner>,
}

struct LogInner {
    entries: HashMap<(String, usize), (String, usize)>,
    file: Option<File>,
}

fn content_hash(oracle_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(oracle_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

impl DecisionLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(LogInner { entries: HashMap::new(), file: None }),
        }
    }

    /// Opens (or creates) a JSON-lines log, replaying existing records into
    /// the in-memory index.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: DecisionRecord = serde_json::from_str(&line)?;
                entries.insert((rec.input_id, rec.draw), (rec.text_hash, rec.label));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(LogInner { entries, file: Some(file) }),
        })
    }

    /// Returns the logged label for `(input_id, draw)` when the stored content
    /// hash matches the current oracle and text; a mismatch means the log was
    /// written under different conditions and the draw must be re-queried.
    pub fn cached(
        &self,
        oracle_id: &str,
        input_id: &str,
        draw: usize,
        text: &str,
    ) -> Option<usize> {
        let hash = content_hash(oracle_id, text);
        let inner = self.inner.lock().unwrap();
        match inner.entries.get(&(input_id.to_string(), draw)) {
            Some((stored, label)) if *stored == hash => Some(*label),
            _ => None,
        }
    }

    pub fn record(
        &self,
        oracle_id: &str,
        input_id: &str,
        draw: usize,
        text: &str,
        label: usize,
    ) -> Result<()> {
        let hash = content_hash(oracle_id, text);
        let mut inner = self.inner.lock().unwrap();
        let key = (input_id.to_string(), draw);
        if let Some((existing, _)) = inner.entries.get(&key) {
            if *existing != hash {
                return Err(Error::Contract(format!(
                    "conflicting record for input {input_id} draw {draw}"
                )));
            }
            return Ok(());
        }
        let rec = DecisionRecord {
            input_id: input_id.to_string(),
            draw,
            text_hash: hash.clone(),
            label,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_secs(),
        };
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
        }
        inner.entries.insert(key, (hash, label));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Empirical decision distribution: augment `x` for draws `1..=N`, query the
/// oracle once per uncached draw, return the frequency vector with
/// `sample_count = N`.
pub fn estimate_empirical(
    input_id: &str,
    x: &TokenSequence,
    oracle: &dyn DecisionOracle,
    n: usize,
    cfg: &AugmentConfig,
    log: Option<&DecisionLog>,
) -> Result<DecisionDistribution> {
    if n == 0 {
        return Err(Error::Contract("sample count must be >= 1".into()));
    }
    let space = oracle.label_space();
    let oracle_id = oracle.identity();
    let mut counts = vec![0usize; space.size()];
    for draw in 1..=n {
        let augmented = augment(x, draw, cfg);
        let text = augmented.text();
        let label = match log.and_then(|l| l.cached(&oracle_id, input_id, draw, &text)) {
            Some(label) => label,
            None => {
                let label = oracle.query(&augmented).map_err(|e| Error::Estimation {
                    draw,
                    message: e.to_string(),
                })?;
                if !space.contains(label) {
                    return Err(Error::LabelOutOfRange { label, label_count: space.size() });
                }
                label
            }
        };
        if let Some(l) = log {
            l.record(&oracle_id, input_id, draw, &text, label)?;
        }
        counts[label] += 1;
    }
    DecisionDistribution::from_counts(&counts)
}
