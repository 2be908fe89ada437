//! Command-line frontend for batch workflows: logits estimation from a
//! black-box oracle, lookup-table building, ablation sweeps, augmentation
//! inspection and the toy distillation harness.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dbkd::augment::{
    augment, default_stopwords, load_stopwords, AugmentConfig, SynonymLexicon, TokenSequence,
};
use dbkd::core::{LabelSpace, LogitsVector, NoiseScale};
use dbkd::distill::{toy_distillation_run, Method, ScenarioConfig, SoftLabelRecord};
use dbkd::error::Error;
use dbkd::solver::{build_lookup_table, solve_logits, SolverConfig};
use dbkd::teacher::{
    estimate_empirical, BowTextTeacher, DecisionLog, DecisionOracle, GaussianSimTeacher,
    RemoteDecisionClient,
};

#[derive(Parser)]
#[command(name = "dbkd", version, about = "Teacher logits estimation from top-1 decisions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Base seed for all randomized stages.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel stages.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Logit noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Solver error bound.
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// Solver iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate teacher logits for every input and emit soft-label records.
    Estimate {
        #[command(flatten)]
        common: CommonFlags,
        /// Input file: plain text lines or JSON-lines of {"id", "text"}.
        #[arg(long)]
        input: PathBuf,
        /// Oracle spec: sim:<file> | bow:<file> | remote:<url>.
        #[arg(long)]
        oracle: String,
        /// Augmented queries per input.
        #[arg(long, default_value_t = 10)]
        n_augment: usize,
        /// Soft-label temperature.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Label count, required for remote oracles.
        #[arg(long)]
        labels: Option<usize>,
        /// Synonym lexicon file (word<TAB>syn1,syn2,...).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Stopword file, one word per line.
        #[arg(long)]
        stopwords: Option<PathBuf>,
        /// JSON-lines decision cache, reused across runs.
        #[arg(long)]
        decision_log: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pre-build the lookup table from count vectors to logits.
    Table {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        labels: usize,
        /// Decision sample count N.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Ablation sweep over N, epsilon or sigma on the toy scenario.
    Sweep {
        #[command(flatten)]
        common: CommonFlags,
        /// One of: N, epsilon, sigma.
        #[arg(long)]
        parameter: String,
        /// Comma-separated grid values.
        #[arg(long)]
        grid: String,
        /// Averaging runs per grid value.
        #[arg(long, default_value_t = 5)]
        replicates: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write N augmented variants per input line.
    Augment {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the toy distillation scenario for one method.
    Distill {
        #[command(flatten)]
        common: CommonFlags,
        /// One of: hard, smooth, noisy, dbkd, standard.
        #[arg(long, default_value = "dbkd")]
        method: String,
        #[arg(long, default_value_t = 10)]
        n_augment: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Optional JSON report path; stdout otherwise.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_ORACLE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Json(_) => EXIT_IO,
        Error::Transport(_)
        | Error::Protocol(_)
        | Error::Estimation { .. }
        | Error::LabelOutOfRange { .. } => EXIT_ORACLE,
        Error::NotPositiveDefinite { .. } | Error::Divergence(_) | Error::LookupMiss(_) => {
            EXIT_NUMERIC
        }
        Error::Contract(_) | Error::DimensionMismatch { .. } => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> dbkd::Result<()> {
    match cli.command {
        Command::Estimate {
            common,
            input,
            oracle,
            n_augment,
            tau,
            labels,
            lexicon,
            stopwords,
            decision_log,
            output,
        } => cmd_estimate(
            &common,
            &input,
            &oracle,
            n_augment,
            tau,
            labels,
            lexicon.as_deref(),
            stopwords.as_deref(),
            decision_log.as_deref(),
            &output,
        ),
        Command::Table { common, labels, n, output } => cmd_table(&common, labels, n, &output),
        Command::Sweep { common, parameter, grid, replicates, output } => {
            cmd_sweep(&common, &parameter, &grid, replicates, &output)
        }
        Command::Augment { common, input, n, lexicon, stopwords, output } => {
            cmd_augment(&common, &input, n, lexicon.as_deref(), stopwords.as_deref(), &output)
        }
        Command::Distill { common, method, n_augment, tau, lambda, output } => {
            cmd_distill(&common, &method, n_augment, tau, lambda, output.as_deref())
        }
    }
}

/// Config snapshot written atomically alongside every command's output.
#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    config: serde_json::Value,
    input: Option<String>,
    output: String,
    seed: u64,
    started_unix: u64,
    wall_ms: u128,
    partial: bool,
}

fn write_manifest(output: &Path, manifest: &RunManifest) -> dbkd::Result<()> {
    let path = manifest_path(output);
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default()
        .as_secs()
}

fn solver_config(common: &CommonFlags) -> dbkd::Result<SolverConfig> {
    Ok(SolverConfig {
        epsilon: common.epsilon,
        max_iterations: common.max_iter,
        sigma: NoiseScale::new(common.sigma)?,
        ..SolverConfig::default()
    })
}

fn augment_config(
    seed: u64,
    lexicon: Option<&Path>,
    stopwords: Option<&Path>,
) -> dbkd::Result<AugmentConfig> {
    let lex = match lexicon {
        Some(path) => SynonymLexicon::load(path)?,
        None => SynonymLexicon::default(),
    };
    let stop: HashSet<String> = match stopwords {
        Some(path) => load_stopwords(path)?,
        None => default_stopwords(),
    };
    AugmentConfig::new(0.1, seed, lex, stop)
}

#[derive(Deserialize)]
struct InputRecord {
    id: String,
    text: String,
}

fn read_inputs(path: &Path) -> dbkd::Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let rec: InputRecord = serde_json::from_str(line)?;
            out.push((rec.id, rec.text));
        } else {
            out.push((format!("line-{}", i + 1), line.to_string()));
        }
    }
    if out.is_empty() {
        return Err(Error::Contract(format!("no inputs found in {}", path.display())));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SimSpec {
    logits: Vec<f64>,
    #[serde(default = "default_sigma")]
    sigma: f64,
    #[serde(default)]
    seed: u64,
}

fn default_sigma() -> f64 {
    1.0
}

fn build_oracle(
    spec: &str,
    labels: Option<usize>,
) -> dbkd::Result<Box<dyn DecisionOracle>> {
    if let Some(path) = spec.strip_prefix("sim:") {
        let spec: SimSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        let logits = LogitsVector::new(spec.logits)?;
        let sigma = NoiseScale::new(spec.sigma)?;
        Ok(Box::new(GaussianSimTeacher::new(logits, sigma, spec.seed)))
    } else if let Some(path) = spec.strip_prefix("bow:") {
        Ok(Box::new(BowTextTeacher::load(Path::new(path))?))
    } else if let Some(url) = spec.strip_prefix("remote:") {
        let labels = labels.ok_or_else(|| {
            Error::Contract("--labels is required with a remote oracle".into())
        })?;
        Ok(Box::new(RemoteDecisionClient::new(url, LabelSpace::new(labels)?)))
    } else {
        Err(Error::Contract(format!(
            "unknown oracle spec {spec}; expected sim:<file>, bow:<file> or remote:<url>"
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    common: &CommonFlags,
    input: &Path,
    oracle_spec: &str,
    n_augment: usize,
    tau: f64,
    labels: Option<usize>,
    lexicon: Option<&Path>,
    stopwords: Option<&Path>,
    decision_log: Option<&Path>,
    output: &Path,
) -> dbkd::Result<()> {
    if n_augment == 0 {
        return Err(Error::Contract("--n-augment must be >= 1".into()));
    }
    let started = Instant::now();
    let inputs = read_inputs(input)?;
    let oracle = build_oracle(oracle_spec, labels)?;
    let aug_cfg = augment_config(common.seed, lexicon, stopwords)?;
    let solver = solver_config(common)?;
    let log = match decision_log {
        Some(path) => Some(DecisionLog::open(path)?),
        None => None,
    };

    let mut lines = Vec::with_capacity(inputs.len());
    for (id, text) in &inputs {
        let seq = TokenSequence::tokenize(text, &aug_cfg.stopwords)?;
        let p_tilde =
            estimate_empirical(id, &seq, oracle.as_ref(), n_augment, &aug_cfg, log.as_ref())?;
        let solved = solve_logits(&p_tilde, &solver)?;
        let record = SoftLabelRecord::new(
            id.clone(),
            solved.z_hat,
            tau,
            solved.converged,
            solved.residual_linf,
        )?;
        lines.push(serde_json::to_string(&record)?);
    }

    let mut file = fs::File::create(output)?;
    for line in &lines {
        writeln!(file, "{line}")?;
    }
    write_manifest(
        output,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "estimate".into(),
            config: json!({
                "oracle": oracle_spec,
                "n_augment": n_augment,
                "tau": tau,
                "sigma": common.sigma,
                "epsilon": common.epsilon,
                "max_iter": common.max_iter,
                "records": inputs.len(),
            }),
            input: Some(input.display().to_string()),
            output: output.display().to_string(),
            seed: common.seed,
            started_unix: now_unix(),
            wall_ms: started.elapsed().as_millis(),
            partial: false,
        },
    )
}

fn cmd_table(common: &CommonFlags, labels: usize, n: usize, output: &Path) -> dbkd::Result<()> {
    let started = Instant::now();
    if common.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.jobs)
            .build_global()
            .ok();
    }
    let space = LabelSpace::new(labels)?;
    let cfg = solver_config(common)?;
    let table = build_lookup_table(space, n, &cfg)?;
    table.save(output)?;
    println!("{} entries written in {:.2?}", table.len(), started.elapsed());
    write_manifest(
        output,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "table".into(),
            config: json!({
                "labels": labels,
                "n": n,
                "sigma": common.sigma,
                "epsilon": common.epsilon,
                "max_iter": common.max_iter,
                "entries": table.len(),
            }),
            input: None,
            output: output.display().to_string(),
            seed: common.seed,
            started_unix: now_unix(),
            wall_ms: started.elapsed().as_millis(),
            partial: false,
        },
    )
}

fn cmd_sweep(
    common: &CommonFlags,
    parameter: &str,
    grid: &str,
    replicates: usize,
    output: &Path,
) -> dbkd::Result<()> {
    let started = Instant::now();
    let values: Vec<f64> = grid
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Contract(format!("bad grid value {s}")))
        })
        .collect::<dbkd::Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Contract("grid must be non-empty".into()));
    }
    if !["N", "epsilon", "sigma"].contains(&parameter) {
        return Err(Error::Contract(format!(
            "unknown parameter {parameter}; expected N, epsilon or sigma"
        )));
    }
    if replicates == 0 {
        return Err(Error::Contract("--replicates must be >= 1".into()));
    }

    let mut tsv = String::from("value\taccuracy\tmse\n");
    for &value in &values {
        let mut acc = 0.0;
        let mut mse = 0.0;
        for rep in 0..replicates {
            let mut scenario = ScenarioConfig {
                seed: common.seed.wrapping_add(rep as u64),
                sigma: common.sigma,
                epsilon: common.epsilon,
                max_iterations: common.max_iter,
                ..ScenarioConfig::default()
            };
            match parameter {
                "N" => scenario.n_augment = value as usize,
                "epsilon" => scenario.epsilon = value,
                _ => scenario.sigma = value,
            }
            let report = toy_distillation_run(&scenario, Method::Dbkd)?;
            acc += report.test_accuracy;
            mse += report.soft_label_mse;
        }
        let r = replicates as f64;
        tsv.push_str(&format!("{}\t{:.6}\t{:.8}\n", value, acc / r, mse / r));
    }
    fs::write(output, &tsv)?;
    write_manifest(
        output,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "sweep".into(),
            config: json!({
                "parameter": parameter,
                "grid": values,
                "replicates": replicates,
                "sigma": common.sigma,
                "epsilon": common.epsilon,
            }),
            input: None,
            output: output.display().to_string(),
            seed: common.seed,
            started_unix: now_unix(),
            wall_ms: started.elapsed().as_millis(),
            partial: false,
        },
    )
}

fn cmd_augment(
    common: &CommonFlags,
    input: &Path,
    n: usize,
    lexicon: Option<&Path>,
    stopwords: Option<&Path>,
    output: &Path,
) -> dbkd::Result<()> {
    if n == 0 {
        return Err(Error::Contract("--n must be >= 1".into()));
    }
    let started = Instant::now();
    let inputs = read_inputs(input)?;
    let cfg = augment_config(common.seed, lexicon, stopwords)?;
    let mut out = String::new();
    for (id, text) in &inputs {
        let seq = TokenSequence::tokenize(text, &cfg.stopwords)?;
        for draw in 1..=n {
            let variant = augment(&seq, draw, &cfg);
            out.push_str(&format!("{id}\t{draw}\t{}\n", variant.text()));
        }
    }
    fs::write(output, &out)?;
    write_manifest(
        output,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "augment".into(),
            config: json!({ "n": n, "inputs": inputs.len() }),
            input: Some(input.display().to_string()),
            output: output.display().to_string(),
            seed: common.seed,
            started_unix: now_unix(),
            wall_ms: started.elapsed().as_millis(),
            partial: false,
        },
    )
}

fn cmd_distill(
    common: &CommonFlags,
    method: &str,
    n_augment: usize,
    tau: f64,
    lambda: f64,
    output: Option<&Path>,
) -> dbkd::Result<()> {
    let started = Instant::now();
    let method = Method::parse(method)?;
    let scenario = ScenarioConfig {
        seed: common.seed,
        sigma: common.sigma,
        epsilon: common.epsilon,
        max_iterations: common.max_iter,
        n_augment,
        tau,
        lambda,
        ..ScenarioConfig::default()
    };
    let report = toy_distillation_run(&scenario, method)?;
    let rendered = serde_json::to_string_pretty(&report)?;
    match output {
        Some(path) => {
            fs::write(path, format!("{rendered}\n"))?;
            write_manifest(
                path,
                &RunManifest {
                    tool_version: env!("CARGO_PKG_VERSION"),
                    command: "distill".into(),
                    config: serde_json::to_value(&scenario)?,
                    input: None,
                    output: path.display().to_string(),
                    seed: common.seed,
                    started_unix: now_unix(),
                    wall_ms: started.elapsed().as_millis(),
                    partial: false,
                },
            )?;
        }
        None => println!("{rendered}"),
    }
    Ok(())
}
