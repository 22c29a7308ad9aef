//! `barl`: tree gap reports, token-repeat training runs, trace advantages and
//! invariant suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barl::advantage::step_advantages;
use barl::bayes::ConsistencyParams;
use barl::token_repeat::CandidateKind;
use barl::trace_format::{parse_documents, reports_csv, reports_json, TraceReport};
use barl::trainer::{aggregate, results_csv, results_json, run_experiment, summary_csv, Algorithm, ExperimentConfig};
use barl::tree::{gap_report, GapRow, HorizonSemantics, MAX_DEPTH};
use barl::verify::{run_suite, Suite, VerifyOptions};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<barl::Error> for CliError {
    fn from(e: barl::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Comma-separated rows with a header.
    Csv,
    /// A single JSON document.
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "barl", version, about = "Bayes-adaptive policy-gradient laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Markovian optimum against hypothesis elimination on binary trees.
    TreeGap {
        /// Smallest tree depth (1..=20).
        #[arg(long, default_value_t = 1)]
        depth_min: usize,
        /// Largest tree depth (1..=20).
        #[arg(long, default_value_t = 10)]
        depth_max: usize,
        /// Horizon given to Markovian policies: single-pass or multi-pass.
        #[arg(long, default_value = "single-pass")]
        semantics: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Train policies on the token-repeat task and record accuracy curves.
    Synthetic {
        /// markovian or barl.
        #[arg(long, default_value = "barl")]
        algo: String,
        /// Candidate set for BARL: repeats or all-triplets.
        #[arg(long, default_value = "repeats")]
        candidates: String,
        /// Policy updates per seed.
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        /// Episodes per update.
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Updates between evaluations.
        #[arg(long, default_value_t = 50)]
        eval_every: usize,
        /// Sampled completions per prompt at each evaluation.
        #[arg(long, default_value_t = 50)]
        completions: usize,
        /// Number of seeds; seeds run as seed-value, seed-value + 1, ...
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed_value: u64,
        /// Adam learning rate.
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Per-seed results file; stdout when omitted. CSV output also writes
        /// a `.summary.csv` sibling with seed means and standard deviations.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Posterior-weighted step advantages for a trace fixture file.
    Advantages {
        /// JSON Lines trace file.
        trace: PathBuf,
        /// Consistency sharpness: a non-negative number or `inf`.
        #[arg(long, default_value = "1")]
        beta: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run invariant suites; all of them when none are named.
    Verify {
        /// Suites: flow-conservation, tree-gap, telescoping, posterior-oracle,
        /// gradient-check, elimination-monotonicity, de-bruijn,
        /// known-mdp-optimality.
        suites: Vec<String>,
        /// Seed for the randomized cases.
        #[arg(long, default_value_t = 0)]
        seed_value: u64,
        /// Check only this many coordinates per parameter group in
        /// gradient-check.
        #[arg(long)]
        gradient_coords: Option<usize>,
        /// Scale analytic gradients by 1 + x before checking.
        #[arg(long, hide = true)]
        perturb_gradient: Option<f64>,
    },
}

fn write_output(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn parse_arg<T: std::str::FromStr<Err = barl::Error>>(flag: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|e: barl::Error| CliError::Usage(format!("--{flag}: {e}")))
}

fn cmd_tree_gap(
    depth_min: usize,
    depth_max: usize,
    semantics: &str,
    out: Option<&Path>,
    format: Format,
) -> Result<(), CliError> {
    if depth_min > depth_max {
        return Err(CliError::Usage(format!(
            "empty depth range {depth_min}..={depth_max}"
        )));
    }
    if depth_min < 1 || depth_max > MAX_DEPTH {
        return Err(CliError::Usage(format!("depths must lie in 1..={MAX_DEPTH}")));
    }
    let semantics: HorizonSemantics = parse_arg("semantics", semantics)?;
    let rows = gap_report(depth_min..=depth_max, semantics)?;
    let content = match format {
        Format::Csv => {
            let mut s = format!("{}\n", GapRow::CSV_HEADER);
            for row in &rows {
                s.push_str(&row.to_csv());
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    write_output(out, &content)?;
    if out.is_some() {
        for row in &rows {
            println!("depth {:>2}  ratio {}", row.depth, row.ratio);
        }
    }
    let bad: Vec<usize> = rows.iter().filter(|r| !r.matches_closed_form()).map(|r| r.depth).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("rows off the closed form at depths {bad:?}")))
    }
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.summary.csv"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synthetic(
    algo: &str,
    candidates: &str,
    iters: usize,
    batch: usize,
    eval_every: usize,
    completions: usize,
    seeds: usize,
    seed_value: u64,
    lr: f64,
    out: Option<&Path>,
    format: Format,
) -> Result<(), CliError> {
    let algorithm: Algorithm = parse_arg("algo", algo)?;
    let candidates: CandidateKind = parse_arg("candidates", candidates)?;
    let mut config = ExperimentConfig {
        algorithm,
        candidates,
        iterations: iters,
        batch_size: batch,
        eval_every,
        eval_completions: completions,
        seeds: (0..seeds as u64).map(|k| seed_value + k).collect(),
        ..Default::default()
    };
    config.optimizer.learning_rate = lr;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let runs = run_experiment(&config)?;
    let complete: Vec<_> = runs.iter().filter(|r| r.aborted.is_none()).cloned().collect();
    let summary = if complete.is_empty() { Vec::new() } else { aggregate(&complete)? };
    let content = match format {
        Format::Csv => results_csv(&config, &runs),
        Format::Json => results_json(&config, &runs, &summary)?,
    };
    write_output(out, &content)?;
    if let (Some(path), Format::Csv) = (out, format) {
        write_output(Some(&summary_path(path)), &summary_csv(&config, &summary))?;
    }
    if let Some(last) = summary.last() {
        let line = format!(
            "{} {}: iteration {} train {:.3} ± {:.3}  test {:.3} ± {:.3}",
            config.algorithm,
            config.candidates_label(),
            last.iteration,
            last.train_mean,
            last.train_std,
            last.test_mean,
            last.test_std
        );
        // keep stdout clean for the results stream
        if out.is_some() {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    let aborted: Vec<String> = runs
        .iter()
        .filter_map(|r| r.aborted.as_ref().map(|m| format!("seed {}: {m}", r.seed)))
        .collect();
    if aborted.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("aborted runs: {}", aborted.join("; "))))
    }
}

fn cmd_advantages(trace: &Path, beta: &str, out: Option<&Path>, format: Format) -> Result<(), CliError> {
    let params: ConsistencyParams = parse_arg("beta", beta)?;
    let text = std::fs::read_to_string(trace)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", trace.display())))?;
    let docs = parse_documents(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", trace.display())))?;
    let reports = docs
        .iter()
        .map(|doc| {
            let advantages = step_advantages(&doc.to_trace()?, &doc.hypotheses()?, params)?;
            Ok(TraceReport {
                prompt: doc.prompt.clone(),
                answers: doc.answers(),
                advantages,
            })
        })
        .collect::<barl::Result<Vec<_>>>()?;
    let content = match format {
        Format::Csv => reports_csv(&reports),
        Format::Json => reports_json(&reports)?,
    };
    write_output(out, &content)
}

fn cmd_verify(
    suites: &[String],
    seed: u64,
    gradient_coords: Option<usize>,
    perturb_gradient: Option<f64>,
) -> Result<(), CliError> {
    let selected: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites
            .iter()
            .map(|s| s.parse().map_err(|e: barl::Error| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let options = VerifyOptions {
        seed,
        gradient_coords,
        perturb_gradient,
    };
    let mut failed = Vec::new();
    for suite in selected {
        let report = run_suite(suite, &options)?;
        println!("{report}");
        if !report.ok() {
            failed.push(suite.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed suites: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TreeGap {
            depth_min,
            depth_max,
            semantics,
            out,
            format,
        } => cmd_tree_gap(depth_min, depth_max, &semantics, out.as_deref(), format),
        Command::Synthetic {
            algo,
            candidates,
            iters,
            batch,
            eval_every,
            completions,
            seeds,
            seed_value,
            lr,
            out,
            format,
        } => cmd_synthetic(
            &algo,
            &candidates,
            iters,
            batch,
            eval_every,
            completions,
            seeds,
            seed_value,
            lr,
            out.as_deref(),
            format,
        ),
        Command::Advantages {
            trace,
            beta,
            out,
            format,
        } => cmd_advantages(&trace, &beta, out.as_deref(), format),
        Command::Verify {
            suites,
            seed_value,
            gradient_coords,
            perturb_gradient,
        } => cmd_verify(&suites, seed_value, gradient_coords, perturb_gradient),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
