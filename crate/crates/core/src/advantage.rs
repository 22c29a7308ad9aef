//! Posterior-weighted step advantages computed from recorded answer
//! probabilities.
//!
//! A [`CotTrace`] holds, for every hypothesis `i` and context `s_t`, the
//! probability `p[i][t]` that the model answers with hypothesis `i`'s answer
//! right after `s_t` once thinking is closed. Everything here works from that
//! matrix:
//!
//! ```text
//! progress reward      r_t      = p[0][t+1] - p[0][t]        (ground truth, row 0)
//! hypothesis value     Q_i(t)   = p[i][T] - p[i][t] + verifier
//! weight               w_i(t)   ∝ p[i][t] * prod_{t'<t} exp(-beta |r_t' - (p[i][t'+1] - p[i][t'])|)
//! advantage            A_t      = sum_i Q_i(t) w_i(t)
//! ```

use serde::Serialize;

use crate::bayes::{consistency_weight, posterior, posterior_weighted_q, ConsistencyParams};
use crate::error::{invalid, Error, Result};
use crate::hypothesis::{normalize, HypothesisSet};

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::ProbabilityOutOfRange(p))
    }
}

/// Increase in answer probability from appending one step.
pub fn progress_reward(p_after: f64, p_before: f64) -> Result<f64> {
    check_probability(p_after)?;
    check_probability(p_before)?;
    Ok(p_after - p_before)
}

/// Context handed to a sequence model: the prompt and the reasoning steps so
/// far, with thinking closed right after the last step.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a str,
    pub steps: &'a [String],
}

/// Anything that can score how likely an answer is after a context.
pub trait SequenceModel {
    fn answer_probability(&self, context: Context<'_>, candidate: &str) -> f64;
}

/// A recorded rollout scored against every hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct CotTrace {
    pub prompt: String,
    /// `[hypothesis][step]`, `T + 1` columns per row.
    pub candidate_probs: Vec<Vec<f64>>,
    pub verifier: bool,
    /// Observed rewards `r_0..r_{T-1}`.
    pub observed_rewards: Vec<f64>,
}

impl CotTrace {
    /// Builds a trace whose observed rewards are the progress under row 0.
    pub fn from_probs(prompt: impl Into<String>, candidate_probs: Vec<Vec<f64>>, verifier: bool) -> Result<Self> {
        let truth = candidate_probs
            .first()
            .ok_or_else(|| invalid("trace needs at least one hypothesis row"))?;
        let observed_rewards = truth
            .windows(2)
            .map(|w| progress_reward(w[1], w[0]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompt, candidate_probs, verifier, observed_rewards)
    }

    pub fn new(
        prompt: impl Into<String>,
        candidate_probs: Vec<Vec<f64>>,
        verifier: bool,
        observed_rewards: Vec<f64>,
    ) -> Result<Self> {
        let trace = Self {
            prompt: prompt.into(),
            candidate_probs,
            verifier,
            observed_rewards,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self
            .candidate_probs
            .first()
            .map(Vec::len)
            .ok_or_else(|| invalid("trace needs at least one hypothesis row"))?;
        if cols < 2 {
            return Err(invalid("trace needs at least one step (two contexts)"));
        }
        for row in &self.candidate_probs {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    what: "probability row",
                    expected: cols,
                    got: row.len(),
                });
            }
            row.iter().try_for_each(|p| check_probability(*p))?;
        }
        if self.observed_rewards.len() != cols - 1 {
            return Err(Error::LengthMismatch {
                what: "observed rewards",
                expected: cols - 1,
                got: self.observed_rewards.len(),
            });
        }
        if self.observed_rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("observed rewards"));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.candidate_probs[0].len() - 1
    }

    pub fn num_hypotheses(&self) -> usize {
        self.candidate_probs.len()
    }

    pub fn verifier_bit(&self) -> f64 {
        if self.verifier {
            1.0
        } else {
            0.0
        }
    }

    /// Reward hypothesis `i` predicts for step `t`.
    pub fn predicted_reward(&self, i: usize, t: usize) -> f64 {
        self.candidate_probs[i][t + 1] - self.candidate_probs[i][t]
    }

    fn check_index(&self, i: usize, t: usize) -> Result<()> {
        if i >= self.num_hypotheses() {
            return Err(Error::IndexOutOfRange {
                what: "hypothesis",
                index: i,
                len: self.num_hypotheses(),
            });
        }
        if t >= self.num_steps() {
            return Err(Error::IndexOutOfRange {
                what: "step",
                index: t,
                len: self.num_steps(),
            });
        }
        Ok(())
    }
}

/// Single-rollout value of step `t` under hypothesis `i`.
pub fn hypothesis_q(trace: &CotTrace, i: usize, t: usize) -> Result<f64> {
    trace.check_index(i, t)?;
    let row = &trace.candidate_probs[i];
    Ok(row[trace.num_steps()] - row[t] + trace.verifier_bit())
}

/// Per-hypothesis factors behind one step's advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisTerm {
    pub q: f64,
    pub belief: f64,
    pub consistency: f64,
    /// Normalized `belief * consistency`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepAdvantages {
    pub values: Vec<f64>,
    /// `[step][hypothesis]`
    pub breakdown: Vec<Vec<HypothesisTerm>>,
}

impl StepAdvantages {
    pub const CSV_HEADER: &'static str =
        "trace,step,advantage,hypothesis,answer,q,belief,consistency,weight";

    /// One row per (step, hypothesis).
    pub fn csv_rows<L: std::fmt::Display>(&self, trace_index: usize, answers: &[L]) -> Vec<String> {
        let mut rows = Vec::new();
        for (t, terms) in self.breakdown.iter().enumerate() {
            for (i, term) in terms.iter().enumerate() {
                let answer = answers.get(i).map(|a| a.to_string()).unwrap_or_default();
                rows.push(format!(
                    "{},{},{},{},{},{},{},{},{}",
                    trace_index,
                    t,
                    self.values[t],
                    i,
                    csv_field(&answer),
                    term.q,
                    term.belief,
                    term.consistency,
                    term.weight
                ));
            }
        }
        rows
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Posterior-weighted advantage for every step of `trace`.
///
/// The state-conditional belief `p[i][t]` acts as the prior and the reward
/// history as evidence; the two are normalized jointly across hypotheses. A
/// step whose weights all vanish gets advantage 0.
pub fn step_advantages<L>(
    trace: &CotTrace,
    hypotheses: &HypothesisSet<L>,
    params: ConsistencyParams,
) -> Result<StepAdvantages> {
    trace.validate()?;
    let n = trace.num_hypotheses();
    if hypotheses.len() != n {
        return Err(Error::LengthMismatch {
            what: "trace hypothesis rows",
            expected: hypotheses.len(),
            got: n,
        });
    }
    let steps = trace.num_steps();
    let predictions: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..steps).map(|t| trace.predicted_reward(i, t)).collect())
        .collect();

    let mut values = Vec::with_capacity(steps);
    let mut breakdown = Vec::with_capacity(steps);
    for t in 0..steps {
        let beliefs: Vec<f64> = trace.candidate_probs.iter().map(|row| row[t]).collect();
        let history: Vec<Vec<f64>> = predictions.iter().map(|p| p[..t].to_vec()).collect();
        // likelihood alone, for the breakdown
        let consistency: Vec<f64> = (0..n)
            .map(|i| {
                trace.observed_rewards[..t]
                    .iter()
                    .zip(&history[i])
                    .fold(1.0, |acc, (r, p)| acc * consistency_weight(*r, *p, params))
            })
            .collect();
        let prior = normalize(&beliefs)?;
        let post = posterior(&prior, &trace.observed_rewards[..t], &history, params)?;
        let qs: Vec<f64> = (0..n)
            .map(|i| hypothesis_q(trace, i, t))
            .collect::<Result<_>>()?;
        let value = posterior_weighted_q(&qs, &post)?;
        values.push(value);
        breakdown.push(
            (0..n)
                .map(|i| HypothesisTerm {
                    q: qs[i],
                    belief: beliefs[i],
                    consistency: consistency[i],
                    weight: post.weight(i),
                })
                .collect(),
        );
    }
    Ok(StepAdvantages { values, breakdown })
}

/// Hypothesis set with the ground truth first and one hypothesis per sampled
/// answer in rollout order. Repeated answers stay as separate hypotheses.
pub fn extract_candidates<L: Clone>(cot_answers: &[L], ground_truth: L) -> Result<HypothesisSet<L>> {
    if cot_answers.is_empty() {
        return Err(invalid("no candidate answers to extract"));
    }
    let mut answers = Vec::with_capacity(cot_answers.len() + 1);
    answers.push(ground_truth);
    answers.extend(cot_answers.iter().cloned());
    HypothesisSet::from_answers(answers, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<String>,
    pub answer: String,
}

/// Result of one pass over a prompt's rollouts.
#[derive(Debug, Clone)]
pub struct RolloutAdvantages {
    pub hypotheses: HypothesisSet<String>,
    pub traces: Vec<CotTrace>,
    pub advantages: Vec<StepAdvantages>,
}

/// Scores every rollout against every candidate answer and computes its step
/// advantages; the advantages weight each rollout's log-probability gradient.
pub fn algorithm1_pass(
    prompt: &str,
    model: &impl SequenceModel,
    rollouts: &[Rollout],
    ground_truth: &str,
    params: ConsistencyParams,
) -> Result<RolloutAdvantages> {
    let answers: Vec<String> = rollouts.iter().map(|r| r.answer.clone()).collect();
    let hypotheses = extract_candidates(&answers, ground_truth.to_string())?;
    let mut traces = Vec::with_capacity(rollouts.len());
    let mut advantages = Vec::with_capacity(rollouts.len());
    for rollout in rollouts {
        let probs = hypotheses
            .iter()
            .map(|h| {
                (0..=rollout.steps.len())
                    .map(|t| {
                        let context = Context {
                            prompt,
                            steps: &rollout.steps[..t],
                        };
                        let p = model.answer_probability(context, &h.answer);
                        check_probability(p).map(|_| p)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = CotTrace::from_probs(prompt, probs, rollout.answer == ground_truth)?;
        advantages.push(step_advantages(&trace, &hypotheses, params)?);
        traces.push(trace);
    }
    Ok(RolloutAdvantages {
        hypotheses,
        traces,
        advantages,
    })
}

/// Deterministic stub model: a pseudo-random probability per
/// `(context, candidate)` derived from a hash.
#[derive(Debug, Clone, Copy)]
pub struct HashStubModel {
    pub salt: u64,
}

impl SequenceModel for HashStubModel {
    fn answer_probability(&self, context: Context<'_>, candidate: &str) -> f64 {
        // FNV-1a over the salt, prompt, steps and candidate
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.salt;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        feed(context.prompt.as_bytes());
        for step in context.steps {
            feed(step.as_bytes());
        }
        feed(candidate.as_bytes());
        // top 53 bits as a dyadic rational in [0, 1)
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Stub whose probability for `target` rises linearly with the number of
/// steps and is `floor` for every other answer.
#[derive(Debug, Clone)]
pub struct RampStubModel {
    pub target: String,
    pub start: f64,
    pub slope: f64,
    pub floor: f64,
}

impl SequenceModel for RampStubModel {
    fn answer_probability(&self, context: Context<'_>, candidate: &str) -> f64 {
        if candidate == self.target {
            (self.start + self.slope * context.steps.len() as f64).clamp(0.0, 1.0)
        } else {
            self.floor
        }
    }
}

/// Stub that answers every query with the same probability.
#[derive(Debug, Clone, Copy)]
pub struct ConstantStubModel(pub f64);

impl SequenceModel for ConstantStubModel {
    fn answer_probability(&self, _context: Context<'_>, _candidate: &str) -> f64 {
        self.0
    }
}
