//! Test-time data augmentation `F(x, n)` over token sequences: synonym
//! replacement, random insertion, random swap, random deletion, with the
//! per-draw strength `alpha` sampled from a half-normal distribution.
//!
//! Determinism contract: each draw seeds a ChaCha12 generator from the
//! little-endian bytes of `(seed, draw index)`, so `F(x, n)` is a pure
//! function of `(x, n, config)` across runs and platforms.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A small default stopword list; callers can load a fuller one from a file.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "if", "in",
    "into", "is", "it", "no", "not", "of", "on", "or", "such", "that", "the",
    "their", "then", "there", "these", "they", "this", "to", "was", "will",
    "with",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub is_stopword: bool,
}

/// An ordered list of whitespace tokens, punctuation kept attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("token sequence must be non-empty".into()));
        }
        Ok(Self { tokens })
    }

    /// Whitespace tokenization with stopwords flagged case-insensitively.
    pub fn tokenize(text: &str, stopwords: &HashSet<String>) -> Result<Self> {
        let tokens: Vec<Token> = text
            .split_whitespace()
            .map(|w| Token {
                text: w.to_string(),
                is_stopword: stopwords.contains(&w.to_lowercase()),
            })
            .collect();
        Self::new(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Map from lowercase word to its synonyms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymLexicon {
    map: HashMap<String, Vec<String>>,
}

impl SynonymLexicon {
    /// Builds the lexicon, dropping self-synonyms and words left without any.
    pub fn new(entries: HashMap<String, Vec<String>>) -> Self {
        let map = entries
            .into_iter()
            .filter_map(|(word, syns)| {
                let word = word.to_lowercase();
                let kept: Vec<String> =
                    syns.into_iter().filter(|s| s.to_lowercase() != word).collect();
                (!kept.is_empty()).then_some((word, kept))
            })
            .collect();
        Self { map }
    }

    /// Loads the `word<TAB>syn1,syn2,...` format, one record per line.
    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut entries = HashMap::new();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Contract(format!("lexicon line {} has no tab separator", lineno + 1))
            })?;
            let syns: Vec<String> = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            entries.insert(word.trim().to_string(), syns);
        }
        Ok(Self::new(entries))
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.map.get(&word.to_lowercase()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Loads a one-word-per-line stopword file.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let content = fs::read_to_string(path)?;
    Ok(content
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn default_stopwords() -> HashSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Target mean of the half-normal alpha draw, in (0, 0.5].
    pub alpha_expectation: f64,
    pub seed: u64,
    pub lexicon: SynonymLexicon,
    pub stopwords: HashSet<String>,
}

impl AugmentConfig {
    pub fn new(
        alpha_expectation: f64,
        seed: u64,
        lexicon: SynonymLexicon,
        stopwords: HashSet<String>,
    ) -> Result<Self> {
        if !(alpha_expectation > 0.0 && alpha_expectation <= 0.5) {
            return Err(Error::Contract(format!(
                "alpha expectation must be in (0, 0.5], got {alpha_expectation}"
            )));
        }
        Ok(Self { alpha_expectation, seed, lexicon, stopwords })
    }
}

/// Half-normal alpha: `|g| * expectation * sqrt(pi/2)` capped at 1, so the
/// mean of the uncapped draw equals the configured expectation.
pub fn sample_alpha<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> f64 {
    let g: f64 = StandardNormal.sample(rng);
    (g.abs() * cfg.alpha_expectation * (std::f64::consts::PI / 2.0).sqrt()).min(1.0)
}

/// Round-half-up edit count with a floor of one when `alpha > 0`.
fn edit_count(alpha: f64, len: usize) -> usize {
    if alpha <= 0.0 {
        return 0;
    }
    ((alpha * len as f64 + 0.5).floor() as usize).max(1)
}

fn retag(word: String, cfg: &AugmentConfig) -> Token {
    let is_stopword = cfg.stopwords.contains(&word.to_lowercase());
    Token { text: word, is_stopword }
}

/// Replace `round(alpha * len)` non-stopword tokens that have lexicon entries
/// with a uniformly chosen synonym each.
pub fn synonym_replacement<R: Rng>(
    x: &TokenSequence,
    alpha: f64,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> TokenSequence {
    let n = edit_count(alpha, x.len());
    if n == 0 {
        return x.clone();
    }
    let mut candidates: Vec<usize> = x
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_stopword && cfg.lexicon.synonyms(&t.text).is_some())
        .map(|(i, _)| i)
        .collect();
    candidates.shuffle(rng);
    candidates.truncate(n);
    let mut tokens = x.tokens().to_vec();
    for i in candidates {
        let syns = cfg.lexicon.synonyms(&tokens[i].text).unwrap();
        let pick = syns[rng.gen_range(0..syns.len())].clone();
        tokens[i] = retag(pick, cfg);
    }
    TokenSequence { tokens }
}

/// Insert a synonym of a random non-stopword token at a random position,
/// `round(alpha * len)` times. Insertions are skipped when no candidate has
/// synonyms.
pub fn random_insertion<R: Rng>(
    x: &TokenSequence,
    alpha: f64,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> TokenSequence {
    let n = edit_count(alpha, x.len());
    let mut tokens = x.tokens().to_vec();
    for _ in 0..n {
        let candidates: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_stopword && cfg.lexicon.synonyms(&t.text).is_some())
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            break;
        }
        let src = candidates[rng.gen_range(0..candidates.len())];
        let syns = cfg.lexicon.synonyms(&tokens[src].text).unwrap();
        let word = syns[rng.gen_range(0..syns.len())].clone();
        let pos = rng.gen_range(0..=tokens.len());
        tokens.insert(pos, retag(word, cfg));
    }
    TokenSequence { tokens }
}

/// Swap two random positions, `round(alpha * len)` times.
pub fn random_swap<R: Rng>(
    x: &TokenSequence,
    alpha: f64,
    _cfg: &AugmentConfig,
    rng: &mut R,
) -> TokenSequence {
    let mut tokens = x.tokens().to_vec();
    if tokens.len() < 2 {
        return x.clone();
    }
    let n = edit_count(alpha, tokens.len());
    for _ in 0..n {
        let i = rng.gen_range(0..tokens.len());
        let j = rng.gen_range(0..tokens.len());
        tokens.swap(i, j);
    }
    TokenSequence { tokens }
}

/// Remove each token independently with probability `alpha`; if everything
/// would be removed, one uniformly chosen token survives.
pub fn random_deletion<R: Rng>(
    x: &TokenSequence,
    alpha: f64,
    _cfg: &AugmentConfig,
    rng: &mut R,
) -> TokenSequence {
    if alpha <= 0.0 {
        return x.clone();
    }
    let kept: Vec<Token> = x
        .tokens()
        .iter()
        .filter(|_| rng.gen::<f64>() >= alpha)
        .cloned()
        .collect();
    if kept.is_empty() {
        let survivor = x.tokens()[rng.gen_range(0..x.len())].clone();
        return TokenSequence { tokens: vec![survivor] };
    }
    TokenSequence { tokens: kept }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    SynonymReplacement,
    RandomInsertion,
    RandomSwap,
    RandomDeletion,
}

fn draw_rng(seed: u64, n: usize) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(n as u64).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// The augmentation function `F(x, n)`: seeds a generator from
/// `(cfg.seed, n)`, samples alpha, picks one of the four operations
/// uniformly and applies it.
pub fn augment(x: &TokenSequence, n: usize, cfg: &AugmentConfig) -> TokenSequence {
    let mut rng = draw_rng(cfg.seed, n);
    let alpha = sample_alpha(cfg, &mut rng);
    let op = match rng.gen_range(0..4u8) {
        0 => Operation::SynonymReplacement,
        1 => Operation::RandomInsertion,
        2 => Operation::RandomSwap,
        _ => Operation::RandomDeletion,
    };
    apply(x, op, alpha, cfg, &mut rng)
}

pub fn apply<R: Rng>(
    x: &TokenSequence,
    op: Operation,
    alpha: f64,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> TokenSequence {
    match op {
        Operation::SynonymReplacement => synonym_replacement(x, alpha, cfg, rng),
        Operation::RandomInsertion => random_insertion(x, alpha, cfg, rng),
        Operation::RandomSwap => random_swap(x, alpha, cfg, rng),
        Operation::RandomDeletion => random_deletion(x, alpha, cfg, rng),
    }
}
