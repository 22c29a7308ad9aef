//! Randomized invariant suites. Each suite checks the library against an
//! oracle written independently here and reports how many cases passed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advantage::{
    algorithm1_pass, progress_reward, step_advantages, CotTrace, HashStubModel, RampStubModel, Rollout,
};
use crate::bayes::{
    evaluate_deterministic, evaluate_markov_policy, posterior, solve_known_mdp, ConsistencyParams,
    FiniteMdp,
};
use crate::error::{invalid, Error, Result};
use crate::hypothesis::{uniform_prior, HypothesisSet};
use crate::policy::{finite_difference_errors, ParamGroup, PolicyConfig, PolicyParams, FD_FLOOR};
use crate::token_repeat::{linear_de_bruijn, RepeatKnownMdp, DE_BRUIJN_29};
use crate::tree::{
    adaptive_return, left_to_right, markovian_expected_return, multi_pass_horizon, reach_probabilities,
    LeafId, MarkovTreePolicy, TreeEnv,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    FlowConservation,
    TreeGap,
    Telescoping,
    PosteriorOracle,
    GradientCheck,
    EliminationMonotonicity,
    DeBruijn,
    KnownMdpOptimality,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::FlowConservation,
        Suite::TreeGap,
        Suite::Telescoping,
        Suite::PosteriorOracle,
        Suite::GradientCheck,
        Suite::EliminationMonotonicity,
        Suite::DeBruijn,
        Suite::KnownMdpOptimality,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::FlowConservation => "flow-conservation",
            Suite::TreeGap => "tree-gap",
            Suite::Telescoping => "telescoping",
            Suite::PosteriorOracle => "posterior-oracle",
            Suite::GradientCheck => "gradient-check",
            Suite::EliminationMonotonicity => "elimination-monotonicity",
            Suite::DeBruijn => "de-bruijn",
            Suite::KnownMdpOptimality => "known-mdp-optimality",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .iter()
            .find(|suite| suite.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(Suite::as_str).collect();
                invalid(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: usize,
    pub total: usize,
    /// Largest error seen against the suite's tolerance.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} passed (worst {:.3e}, tolerance {:.0e})",
            self.suite, self.passed, self.total, self.worst, self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Coordinates checked per parameter group; `None` checks all of them.
    pub gradient_coords: Option<usize>,
    /// Multiplies the analytic gradient by `1 + x` before comparison. Used to
    /// confirm the gradient check can fail.
    pub perturb_gradient: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_coords: None,
            perturb_gradient: None,
        }
    }
}

struct Tally {
    suite: Suite,
    passed: usize,
    total: usize,
    worst: f64,
    tolerance: f64,
}

impl Tally {
    fn new(suite: Suite, tolerance: f64) -> Self {
        Self {
            suite,
            passed: 0,
            total: 0,
            worst: 0.0,
            tolerance,
        }
    }

    /// Records one case whose largest error is `err`.
    fn case(&mut self, err: f64) {
        self.total += 1;
        // NaN compares false and counts as a failure
        if err <= self.tolerance {
            self.passed += 1;
        }
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn exact(&mut self, ok: bool) {
        self.case(if ok { 0.0 } else { f64::INFINITY });
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            suite: self.suite,
            passed: self.passed,
            total: self.total,
            worst: self.worst,
            tolerance: self.tolerance,
        }
    }
}

pub fn run_suite(suite: Suite, options: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    match suite {
        Suite::FlowConservation => flow_conservation(&mut rng, 100, 10),
        Suite::TreeGap => tree_gap(&mut rng, 1000, 10),
        Suite::Telescoping => telescoping(&mut rng, 500),
        Suite::PosteriorOracle => posterior_oracle(&mut rng, 200),
        Suite::GradientCheck => gradient_check(&mut rng, 20, options),
        Suite::EliminationMonotonicity => elimination_monotonicity(&mut rng, 10_000),
        Suite::DeBruijn => de_bruijn(),
        Suite::KnownMdpOptimality => known_mdp_optimality(&mut rng, 100),
    }
}

/// Per-level reach mass of random single-descent policies sums to one.
pub fn flow_conservation(rng: &mut ChaCha8Rng, policies: usize, max_depth: usize) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::FlowConservation, 1e-12);
    for _ in 0..policies {
        let depth = rng.random_range(1..=max_depth);
        let env = TreeEnv::new(depth)?;
        let policy = MarkovTreePolicy::random(&env, rng);
        let f = reach_probabilities(&env, &policy)?;
        let worst = (0..=depth)
            .map(|level| {
                // heap level `level` spans nodes 2^level - 1 .. 2^(level+1) - 1
                let lo = (1usize << level) - 1;
                let hi = (1usize << (level + 1)) - 1;
                (f[lo..hi].iter().sum::<f64>() - 1.0).abs()
            })
            .fold(0.0, f64::max);
        tally.case(worst);
    }
    Ok(tally.finish())
}

/// Random Markovian policies earn `2^-depth`; elimination earns exactly 1.
pub fn tree_gap(rng: &mut ChaCha8Rng, per_depth: usize, max_depth: usize) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::TreeGap, 1e-12);
    for depth in 1..=max_depth {
        let env = TreeEnv::new(depth)?;
        let expected = 0.5f64.powi(depth as i32);
        for _ in 0..per_depth {
            let policy = MarkovTreePolicy::random(&env, rng);
            tally.case((markovian_expected_return(&env, &policy)? - expected).abs());
        }
        tally.exact(adaptive_return(&env, &left_to_right(&env))?.expected_return == 1.0);
    }
    Ok(tally.finish())
}

fn random_rollouts(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<Rollout> {
    (0..n)
        .map(|k| Rollout {
            steps: (0..steps).map(|s| format!("r{k}s{s}-{}", rng.random::<u32>())).collect(),
            answer: format!("a{}", rng.random_range(0..3)),
        })
        .collect()
}

/// Progress rewards along every hypothesis row sum to final minus initial.
pub fn telescoping(rng: &mut ChaCha8Rng, traces: usize) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::Telescoping, 1e-12);
    let mut done = 0;
    while done < traces {
        let n = rng.random_range(1..=5);
        let steps = rng.random_range(1..=28);
        let rollouts = random_rollouts(rng, n, steps);
        let beta = ConsistencyParams::finite(1.0)?;
        // hash probabilities are dyadic and subtract exactly; ramps are not
        let out = if done % 2 == 0 {
            algorithm1_pass("p", &HashStubModel { salt: rng.random() }, &rollouts, "a0", beta)?
        } else {
            let model = RampStubModel {
                target: "a0".into(),
                start: rng.random::<f64>() / 3.0,
                slope: rng.random::<f64>() / (7.0 * steps as f64),
                floor: rng.random::<f64>() / 11.0,
            };
            algorithm1_pass("p", &model, &rollouts, "a0", beta)?
        };
        for trace in out.traces.iter().take(traces - done) {
            let mut worst: f64 = 0.0;
            for row in &trace.candidate_probs {
                let total = row
                    .windows(2)
                    .map(|w| progress_reward(w[1], w[0]))
                    .sum::<Result<f64>>()?;
                worst = worst.max((total - (row[row.len() - 1] - row[0])).abs());
            }
            tally.case(worst);
            done += 1;
        }
    }
    Ok(tally.finish())
}

#[derive(Debug, Clone, Copy)]
enum OracleBeta {
    Finite(f64),
    Infinite,
}

/// Advantages built term by term from the probability matrix.
fn brute_force_advantages(trace: &CotTrace, beta: OracleBeta) -> Vec<(f64, f64)> {
    let p = &trace.candidate_probs;
    let steps = p[0].len() - 1;
    (0..steps)
        .map(|t| {
            let terms: Vec<f64> = p
                .iter()
                .map(|row| {
                    let mut w = row[t];
                    for s in 0..t {
                        let predicted = row[s + 1] - row[s];
                        let gap = (trace.observed_rewards[s] - predicted).abs();
                        w *= match beta {
                            OracleBeta::Finite(b) => (-b * gap).exp(),
                            OracleBeta::Infinite => f64::from(u8::from(gap == 0.0)),
                        };
                    }
                    w
                })
                .collect();
            let z: f64 = terms.iter().sum();
            if z == 0.0 {
                return (0.0, 0.0);
            }
            let verifier = f64::from(u8::from(trace.verifier));
            let (mut value, mut scale) = (0.0, 0.0);
            for (row, w) in p.iter().zip(&terms) {
                let q = row[steps] - row[t] + verifier;
                value += q * w / z;
                scale += (q * w / z).abs();
            }
            (value, scale)
        })
        .collect()
}

/// `step_advantages` against the brute-force composition, relative to the
/// magnitude of the weighted terms.
pub fn posterior_oracle(rng: &mut ChaCha8Rng, instances: usize) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::PosteriorOracle, 1e-10);
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let steps = rng.random_range(1..=8);
        let mut probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..=steps).map(|_| rng.random::<f64>()).collect())
            .collect();
        // duplicate some rows so exact-equality elimination keeps survivors
        for i in 1..n {
            if rng.random_bool(0.3) {
                probs[i] = probs[rng.random_range(0..i)].clone();
            }
        }
        let verifier = rng.random_bool(0.5);
        let trace = if rng.random_bool(0.5) {
            CotTrace::from_probs("p", probs, verifier)?
        } else {
            let rewards = (0..steps).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            CotTrace::new("p", probs, verifier, rewards)?
        };
        let (params, beta) = match rng.random_range(0..4) {
            0 => (ConsistencyParams::finite(0.0)?, OracleBeta::Finite(0.0)),
            1 => (ConsistencyParams::finite(1.0)?, OracleBeta::Finite(1.0)),
            2 => (ConsistencyParams::infinite(), OracleBeta::Infinite),
            _ => {
                let b = rng.random::<f64>() * 5.0;
                (ConsistencyParams::finite(b)?, OracleBeta::Finite(b))
            }
        };
        let set = HypothesisSet::from_answers((0..n).collect(), true)?;
        let got = step_advantages(&trace, &set, params)?;
        let want = brute_force_advantages(&trace, beta);
        let worst = got
            .values
            .iter()
            .zip(&want)
            .map(|(a, (o, scale))| {
                let diff = (a - o).abs();
                if diff == 0.0 {
                    0.0
                } else {
                    diff / scale.max(f64::MIN_POSITIVE)
                }
            })
            .fold(0.0, f64::max);
        tally.case(worst);
    }
    Ok(tally.finish())
}

fn random_policy_params(rng: &mut ChaCha8Rng) -> Result<PolicyParams> {
    let mut p = PolicyParams::init(PolicyConfig::default(), 0.4, rng)?;
    for v in p.values.iter_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
    Ok(p)
}

/// Reverse-mode gradients of `log pi(a | prefix)` against central differences.
pub fn gradient_check(rng: &mut ChaCha8Rng, instances: usize, options: &VerifyOptions) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::GradientCheck, 1e-4);
    let per_group = options.gradient_coords;
    let pick = move |g: &ParamGroup| -> Vec<usize> {
        match per_group {
            Some(k) if k < g.len() => {
                let stride = g.len() / k;
                (0..k).map(|i| i * stride).collect()
            }
            _ => (0..g.len()).collect(),
        }
    };
    for _ in 0..instances {
        let params = random_policy_params(rng)?;
        let len = rng.random_range(1..=params.config().max_len);
        let prefix: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        let action = rng.random_range(0..3);
        let mut analytic = params.log_prob_grad(&prefix, action)?;
        if let Some(x) = options.perturb_gradient {
            analytic.iter_mut().for_each(|g| *g *= 1.0 + x);
        }
        let errs = finite_difference_errors(&params, &analytic, 1e-5, FD_FLOOR, Some(&pick), &|q| {
            q.log_prob(&prefix, action)
        })?;
        let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        for (name, e) in &errs {
            if !(*e <= 1e-4) {
                log::warn!("gradient check: group {name} relative error {e:.3e}");
            }
        }
        tally.case(worst);
    }
    Ok(tally.finish())
}

/// Under hard elimination a zero weight never recovers.
pub fn elimination_monotonicity(rng: &mut ChaCha8Rng, sequences: usize) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::EliminationMonotonicity, 0.0);
    let params = ConsistencyParams::infinite();
    for _ in 0..sequences {
        let n = rng.random_range(2..=8);
        let len = rng.random_range(1..=12);
        let mut belief = uniform_prior(n)?;
        let mut dead = vec![false; n];
        let mut ok = true;
        for _ in 0..len {
            // rewards over a small alphabet so hypotheses both survive and die
            let observed = f64::from(rng.random_range(0..3u8)) / 2.0;
            let preds: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![f64::from(rng.random_range(0..3u8)) / 2.0])
                .collect();
            belief = posterior(&belief, &[observed], &preds, params)?;
            for (i, w) in belief.weights().iter().enumerate() {
                if dead[i] && *w != 0.0 {
                    ok = false;
                }
                dead[i] |= *w == 0.0;
            }
        }
        tally.exact(ok);
    }
    Ok(tally.finish())
}

/// The shipped sequence has length 29 and covers all 27 ternary triplets.
pub fn de_bruijn() -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::DeBruijn, 0.0);
    let mut seen = [false; 27];
    for w in DE_BRUIJN_29.windows(3) {
        seen[usize::from(w[0]) * 9 + usize::from(w[1]) * 3 + usize::from(w[2])] = true;
    }
    tally.exact(DE_BRUIJN_29.len() == 29);
    tally.exact(seen.iter().all(|s| *s));
    tally.exact(linear_de_bruijn(3, 3) == DE_BRUIJN_29);
    Ok(tally.finish())
}

fn random_stochastic_table(mdp: &impl FiniteMdp, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    (0..horizon)
        .map(|_| {
            (0..mdp.num_states())
                .map(|s| {
                    let raw: Vec<f64> = (0..mdp.num_actions(s)).map(|_| rng.random::<f64>()).collect();
                    let z: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| if z > 0.0 { x / z } else { x }).collect()
                })
                .collect()
        })
        .collect()
}

fn check_optimality(
    tally: &mut Tally,
    mdp: &impl FiniteMdp,
    horizon: usize,
    policies: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let solution = solve_known_mdp(mdp, horizon);
    let best = evaluate_deterministic(mdp, &solution)?;
    for _ in 0..policies {
        let table = random_stochastic_table(mdp, horizon, rng);
        let value = evaluate_markov_policy(mdp, horizon, |t, s| table[t][s].clone())?;
        tally.case((value - best).max(0.0));
    }
    Ok(())
}

/// The backward-induction policy is at least as good as random stochastic
/// policies on a known tree and on the known token-repeat MDP.
pub fn known_mdp_optimality(rng: &mut ChaCha8Rng, policies: usize) -> Result<SuiteReport> {
    let mut tally = Tally::new(Suite::KnownMdpOptimality, 1e-12);
    let env = TreeEnv::new(3)?;
    let truth = LeafId(rng.random_range(0..env.num_leaves()));
    let tree = env.known(truth)?;
    check_optimality(&mut tally, &tree, multi_pass_horizon(&env), policies, rng)?;
    let repeat = RepeatKnownMdp::new(2)?;
    check_optimality(&mut tally, &repeat, repeat.horizon(), policies, rng)?;
    Ok(tally.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            gradient_coords: Some(8),
            ..Default::default()
        }
    }

    #[test]
    fn cheap_suites_pass() {
        for suite in Suite::ALL {
            let report = run_suite(suite, &quick()).unwrap();
            assert!(report.ok(), "{report}");
            assert!(report.total > 0);
        }
    }

    #[test]
    fn perturbed_gradient_fails() {
        let opts = VerifyOptions {
            perturb_gradient: Some(1e-2),
            ..quick()
        };
        let report = run_suite(Suite::GradientCheck, &opts).unwrap();
        assert_eq!(report.passed, 0);
    }

    #[test]
    fn suite_names_round_trip() {
        for suite in Suite::ALL {
            assert_eq!(suite.as_str().parse::<Suite>().unwrap(), suite);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn oracle_flags_a_wrong_answer() {
        let trace = CotTrace::from_probs("p", vec![vec![0.2, 0.6], vec![0.4, 0.1]], true).unwrap();
        let want = brute_force_advantages(&trace, OracleBeta::Finite(1.0));
        let set = HypothesisSet::from_answers(vec![0, 1], true).unwrap();
        let got = step_advantages(&trace, &set, ConsistencyParams::finite(1.0).unwrap()).unwrap();
        assert!((got.values[0] - want[0].0).abs() < 1e-15);
        assert!((got.values[0] + 1e-3 - want[0].0).abs() > 1e-10 * want[0].1);
    }
}
