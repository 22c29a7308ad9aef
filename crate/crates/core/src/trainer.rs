//! Seeded training runs on the token-repeat task.
//!
//! Each update samples `batch_size` episodes (train prompts alternating 0, 1,
//! 0, 1, ...), assigns every step a value, and takes one Adam step along the
//! batch mean of `sum_t Q_t grad log pi(a_t | s_t)`:
//!
//! - Markovian: `Q_t` is the episode's 0/1 outcome at every step.
//! - BARL: `Q_t` is the candidate indicator for the window the step completes.
//!
//! Training and evaluation draw from separate ChaCha streams of the same seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::policy::{
    policy_gradient_update, sample_index, Adam, AdamConfig, EpisodeSample, ForwardCache,
    PolicyConfig, PolicyParams,
};
use crate::token_repeat::{
    barl_step_values, candidate_sets, markov_trajectory_value, CandidateKind, CandidateTriplets,
    Token, TEST_PROMPT, TRAIN_PROMPTS,
};

const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Markovian,
    Barl,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Markovian => "markovian",
            Algorithm::Barl => "barl",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markovian" => Ok(Algorithm::Markovian),
            "barl" => Ok(Algorithm::Barl),
            other => Err(invalid(format!("unknown algorithm {other:?} (expected markovian or barl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Only read by BARL.
    pub candidates: CandidateKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_completions: usize,
    pub seeds: Vec<u64>,
    pub optimizer: AdamConfig,
    pub policy: PolicyConfig,
    pub init_std: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Barl,
            candidates: CandidateKind::Repeats,
            iterations: 2000,
            batch_size: 32,
            eval_every: 50,
            eval_completions: 50,
            seeds: vec![0, 1, 2],
            optimizer: AdamConfig::default(),
            policy: PolicyConfig::default(),
            init_std: 0.02,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_completions == 0 {
            return Err(invalid("eval_completions must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be at least 1"));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(invalid(format!("learning rate {lr} must be positive")));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(invalid("init_std must be finite and non-negative"));
        }
        if self.policy.max_len != crate::token_repeat::SEQUENCE_LENGTH {
            return Err(invalid("policy context must cover the full 29-token sequence"));
        }
        self.policy.validate()
    }

    /// Label for the candidates column; Markovian runs have none.
    pub fn candidates_label(&self) -> &'static str {
        match self.algorithm {
            Algorithm::Markovian => "none",
            Algorithm::Barl => self.candidates.as_str(),
        }
    }

    /// Iterations at which the policy is evaluated: 0, every `eval_every`
    /// updates, and the final iteration.
    pub fn eval_grid(&self) -> Vec<usize> {
        let mut grid: Vec<usize> = (0..=self.iterations).step_by(self.eval_every).collect();
        if grid.last() != Some(&self.iterations) {
            grid.push(self.iterations);
        }
        grid
    }
}

/// Source of full episodes for evaluation.
pub trait EpisodeSampler {
    /// Returns `[prompt, a_0, ..., a_{T-1}]`, stopping at the first reward.
    fn sample_tokens(&self, prompt: Token, rng: &mut ChaCha8Rng) -> Result<Vec<Token>>;
}

/// Whether the newest token closes the first window equal to `prompt^3`.
fn just_succeeded(tokens: &[Token], prompt: Token) -> bool {
    tokens.len() >= 3 && tokens[tokens.len() - 3..].iter().all(|t| *t == prompt)
}

/// Samples one episode at temperature 1 and keeps the activations for the
/// gradient.
pub fn sample_episode(
    params: &PolicyParams,
    prompt: Token,
    rng: &mut impl Rng,
) -> Result<(Vec<Token>, ForwardCache)> {
    let max_len = params.config().max_len;
    let mut tokens = vec![prompt];
    let mut cache = ForwardCache::new();
    while tokens.len() < max_len {
        let probs = params.step(&mut cache, *tokens.last().expect("non-empty") as usize)?;
        let a = sample_index(probs, rng) as Token;
        tokens.push(a);
        if just_succeeded(&tokens, prompt) {
            break;
        }
    }
    Ok((tokens, cache))
}

impl EpisodeSampler for PolicyParams {
    fn sample_tokens(&self, prompt: Token, rng: &mut ChaCha8Rng) -> Result<Vec<Token>> {
        sample_episode(self, prompt, rng).map(|(t, _)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Mean number of generated tokens.
    pub mean_length: f64,
}

/// Fraction of `n` sampled episodes on `prompt` that earn the reward.
pub fn evaluate(
    sampler: &impl EpisodeSampler,
    prompt: Token,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalOutcome> {
    if n == 0 {
        return Err(invalid("evaluation needs at least one completion"));
    }
    let mut hits = 0usize;
    let mut length = 0usize;
    for _ in 0..n {
        let tokens = sampler.sample_tokens(prompt, rng)?;
        if markov_trajectory_value(&tokens, prompt)? == 1.0 {
            hits += 1;
        }
        length += tokens.len() - 1;
    }
    Ok(EvalOutcome {
        accuracy: hits as f64 / n as f64,
        mean_length: length as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub mean_episode_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
    #[serde(skip)]
    pub final_params: Option<PolicyParams>,
}

fn evaluate_point(
    params: &PolicyParams,
    iteration: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalRecord> {
    let mut train = 0.0;
    let mut length = 0.0;
    for p in TRAIN_PROMPTS {
        let out = evaluate(params, p, n, rng)?;
        train += out.accuracy;
        length += out.mean_length;
    }
    let test = evaluate(params, TEST_PROMPT, n, rng)?;
    let prompts = (TRAIN_PROMPTS.len() + 1) as f64;
    Ok(EvalRecord {
        iteration,
        train_accuracy: train / TRAIN_PROMPTS.len() as f64,
        test_accuracy: test.accuracy,
        mean_episode_length: (length + test.mean_length) / prompts,
    })
}

/// Per-step values for one finished episode.
pub fn step_values(
    algorithm: Algorithm,
    tokens: &[Token],
    prompt: Token,
    candidates: &CandidateTriplets,
) -> Result<Vec<f64>> {
    let steps = tokens.len() - 1;
    Ok(match algorithm {
        Algorithm::Markovian => vec![markov_trajectory_value(tokens, prompt)?; steps],
        Algorithm::Barl => barl_step_values(tokens, candidates),
    })
}

/// Trains one seed to completion.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(EVAL_STREAM);
    let candidates = candidate_sets(config.candidates);

    let mut params = PolicyParams::init(config.policy, config.init_std, &mut rng)?;
    let mut optimizer = Adam::new(config.optimizer, params.num_params());
    let grid = config.eval_grid();
    let mut next_eval = grid.iter().peekable();
    let mut records = Vec::with_capacity(grid.len());
    let mut aborted = None;

    for iteration in 0..=config.iterations {
        if next_eval.peek() == Some(&&iteration) {
            next_eval.next();
            records.push(evaluate_point(&params, iteration, config.eval_completions, &mut eval_rng)?);
        }
        if iteration == config.iterations {
            break;
        }
        let mut batch = Vec::with_capacity(config.batch_size);
        for b in 0..config.batch_size {
            let prompt = TRAIN_PROMPTS[b % TRAIN_PROMPTS.len()];
            let (tokens, cache) = sample_episode(&params, prompt, &mut rng)?;
            let q = step_values(config.algorithm, &tokens, prompt, &candidates)?;
            let actions = tokens[1..].iter().map(|t| *t as usize).collect();
            batch.push(EpisodeSample { cache, actions, q });
        }
        if !policy_gradient_update(&mut params, &mut optimizer, &batch)? {
            let msg = format!("non-finite gradient at iteration {iteration}");
            log::error!("seed {seed}: {msg}");
            aborted = Some(msg);
            break;
        }
        if !params.is_finite() {
            let msg = format!("non-finite parameters after iteration {iteration}");
            log::error!("seed {seed}: {msg}");
            aborted = Some(msg);
            break;
        }
    }
    if let Some(last) = records.last() {
        log::info!(
            "seed {seed} {} {}: iteration {} train {:.3} test {:.3}",
            config.algorithm,
            config.candidates_label(),
            last.iteration,
            last.train_accuracy,
            last.test_accuracy
        );
    }
    Ok(RunMetrics {
        seed,
        records,
        aborted,
        final_params: Some(params),
    })
}

/// Runs every seed of `config` on its own thread.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunMetrics>> {
    config.validate()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|seed| scope.spawn(move || run_seed(config, *seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(invalid("training thread panicked"))))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregatePoint {
    pub iteration: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub len_mean: f64,
    pub len_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Element-wise mean and population standard deviation across seeds.
pub fn aggregate(runs: &[RunMetrics]) -> Result<Vec<AggregatePoint>> {
    let first = runs.first().ok_or_else(|| invalid("aggregate needs at least one run"))?;
    let grid: Vec<usize> = first.records.iter().map(|r| r.iteration).collect();
    for run in runs {
        if run.records.iter().map(|r| r.iteration).ne(grid.iter().copied()) {
            return Err(Error::MismatchedEvalGrid);
        }
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, iteration)| {
            let col = |f: fn(&EvalRecord) -> f64| runs.iter().map(|r| f(&r.records[k])).collect::<Vec<_>>();
            let (train_mean, train_std) = mean_std(&col(|r| r.train_accuracy));
            let (test_mean, test_std) = mean_std(&col(|r| r.test_accuracy));
            let (len_mean, len_std) = mean_std(&col(|r| r.mean_episode_length));
            AggregatePoint {
                iteration: *iteration,
                train_mean,
                train_std,
                test_mean,
                test_std,
                len_mean,
                len_std,
            }
        })
        .collect())
}

/// First iteration at which the seed-averaged test accuracy reaches
/// `threshold`.
pub fn iterations_to_test_accuracy(points: &[AggregatePoint], threshold: f64) -> Option<usize> {
    points.iter().find(|p| p.test_mean >= threshold).map(|p| p.iteration)
}

pub const RESULTS_HEADER: &str = "iteration,seed,algorithm,candidates,train_acc,test_acc,mean_len";
pub const SUMMARY_HEADER: &str =
    "iteration,algorithm,candidates,train_mean,train_std,test_mean,test_std,len_mean,len_std";

pub fn results_csv(config: &ExperimentConfig, runs: &[RunMetrics]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for run in runs {
        for r in &run.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration,
                run.seed,
                config.algorithm,
                config.candidates_label(),
                r.train_accuracy,
                r.test_accuracy,
                r.mean_episode_length
            ));
        }
    }
    out
}

pub fn summary_csv(config: &ExperimentConfig, points: &[AggregatePoint]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.iteration,
            config.algorithm,
            config.candidates_label(),
            p.train_mean,
            p.train_std,
            p.test_mean,
            p.test_std,
            p.len_mean,
            p.len_std
        ));
    }
    out
}

#[derive(Serialize)]
struct ResultsDocument<'a> {
    algorithm: Algorithm,
    candidates: &'static str,
    runs: &'a [RunMetrics],
    summary: &'a [AggregatePoint],
}

pub fn results_json(config: &ExperimentConfig, runs: &[RunMetrics], summary: &[AggregatePoint]) -> Result<String> {
    let doc = ResultsDocument {
        algorithm: config.algorithm,
        candidates: config.candidates_label(),
        runs,
        summary,
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}
