//! Posterior updates over hypothesis MDPs, posterior-weighted values, the
//! Bayesian Q-value recursion, and exact backward induction for known MDPs.

use crate::error::{invalid, Error, Result};
use crate::hypothesis::{normalize, Belief};

/// Sharpness of the reward-consistency likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    /// Hard elimination: any reward mismatch zeroes the likelihood.
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParams {
    beta: Beta,
}

impl ConsistencyParams {
    pub fn finite(beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(invalid(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Self {
            beta: Beta::Finite(beta),
        })
    }

    pub fn infinite() -> Self {
        Self {
            beta: Beta::Infinite,
        }
    }

    pub fn beta(&self) -> Beta {
        self.beta
    }
}

impl std::str::FromStr for ConsistencyParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(Self::infinite()),
            other => {
                let beta: f64 = other
                    .parse()
                    .map_err(|_| invalid(format!("cannot parse beta `{s}`")))?;
                Self::finite(beta)
            }
        }
    }
}

/// `exp(-beta * |observed - predicted|)`; with infinite beta, 1 on an exact
/// match and 0 otherwise.
pub fn consistency_weight(observed: f64, predicted: f64, params: ConsistencyParams) -> f64 {
    let gap = (observed - predicted).abs();
    match params.beta {
        Beta::Infinite => {
            if gap == 0.0 {
                1.0
            } else {
                0.0
            }
        }
        // beta = 0 must give exactly 1 even when a term is degenerate
        Beta::Finite(b) if b == 0.0 => 1.0,
        Beta::Finite(b) => (-b * gap).exp(),
    }
}

/// Posterior over hypotheses after observing `rewards`, where
/// `predictions[i][t]` is hypothesis `i`'s predicted reward at step `t`.
pub fn posterior(
    prior: &Belief,
    rewards: &[f64],
    predictions: &[Vec<f64>],
    params: ConsistencyParams,
) -> Result<Belief> {
    if predictions.len() != prior.len() {
        return Err(Error::LengthMismatch {
            what: "predictions per hypothesis",
            expected: prior.len(),
            got: predictions.len(),
        });
    }
    if let Some(bad) = predictions.iter().find(|p| p.len() != rewards.len()) {
        return Err(Error::LengthMismatch {
            what: "prediction history",
            expected: rewards.len(),
            got: bad.len(),
        });
    }
    if rewards.iter().chain(predictions.iter().flatten()).any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward history"));
    }
    let unnormalized: Vec<f64> = prior
        .weights()
        .iter()
        .zip(predictions)
        .map(|(w, preds)| {
            rewards
                .iter()
                .zip(preds)
                .fold(*w, |acc, (r, p)| acc * consistency_weight(*r, *p, params))
        })
        .collect();
    normalize(&unnormalized)
}

/// `sum_i q_i * posterior_i`; zero for a degenerate posterior.
pub fn posterior_weighted_q(q_values: &[f64], posterior: &Belief) -> Result<f64> {
    if q_values.len() != posterior.len() {
        return Err(Error::LengthMismatch {
            what: "q values",
            expected: posterior.len(),
            got: q_values.len(),
        });
    }
    if posterior.is_degenerate() {
        return Ok(0.0);
    }
    Ok(q_values
        .iter()
        .zip(posterior.weights())
        .map(|(q, w)| q * w)
        .sum())
}

/// A finite set of candidate MDPs sharing deterministic dynamics and differing
/// only in reward.
pub trait HypothesisEnv {
    type State: Clone;

    fn num_hypotheses(&self) -> usize;
    fn num_actions(&self, state: &Self::State) -> usize;
    fn transition(&self, state: &Self::State, action: usize) -> Self::State;
    fn reward(&self, hypothesis: usize, state: &Self::State, action: usize) -> f64;

    /// Whether observing `reward` ends the episode.
    fn terminates_on(&self, _reward: f64) -> bool {
        false
    }
}

/// One realized step of history as seen by a history-dependent policy.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStep<S> {
    pub state: S,
    pub action: usize,
    pub reward: f64,
}

/// Action distribution as a function of the full history. The current belief
/// is passed alongside since it is a function of the history.
pub trait HistoryPolicy<S> {
    fn action_probs(&self, state: &S, belief: &Belief, history: &[HistoryStep<S>]) -> Vec<f64>;
}

impl<S, F> HistoryPolicy<S> for F
where
    F: Fn(&S, &Belief, &[HistoryStep<S>]) -> Vec<f64>,
{
    fn action_probs(&self, state: &S, belief: &Belief, history: &[HistoryStep<S>]) -> Vec<f64> {
        self(state, belief, history)
    }
}

pub const BAYES_Q_MAX_ACTIONS: usize = 3;
pub const BAYES_Q_MAX_HORIZON: usize = 32;

/// Bayesian Q-value `Q(b, s, a)` with exact enumeration over hypotheses and
/// the policy's action distribution.
///
/// The observed reward follows the hypothesis drawn from the belief, so the
/// expectation is split by distinct reward outcome before the belief update.
pub fn bayesian_q<E, P>(
    env: &E,
    policy: &P,
    belief: &Belief,
    state: &E::State,
    action: usize,
    steps_left: usize,
    params: ConsistencyParams,
) -> Result<f64>
where
    E: HypothesisEnv,
    P: HistoryPolicy<E::State>,
{
    if steps_left == 0 {
        return Err(invalid("bayesian_q needs steps_left >= 1"));
    }
    if steps_left > BAYES_Q_MAX_HORIZON {
        return Err(invalid(format!(
            "bayesian_q enumerates exactly; horizon {steps_left} exceeds {BAYES_Q_MAX_HORIZON}"
        )));
    }
    if belief.len() != env.num_hypotheses() {
        return Err(Error::LengthMismatch {
            what: "belief",
            expected: env.num_hypotheses(),
            got: belief.len(),
        });
    }
    let mut history = Vec::new();
    bayesian_q_rec(env, policy, belief, state, action, steps_left, params, &mut history)
}

#[allow(clippy::too_many_arguments)]
fn bayesian_q_rec<E, P>(
    env: &E,
    policy: &P,
    belief: &Belief,
    state: &E::State,
    action: usize,
    steps_left: usize,
    params: ConsistencyParams,
    history: &mut Vec<HistoryStep<E::State>>,
) -> Result<f64>
where
    E: HypothesisEnv,
    P: HistoryPolicy<E::State>,
{
    let n_actions = env.num_actions(state);
    if action >= n_actions {
        return Err(Error::IndexOutOfRange {
            what: "action",
            index: action,
            len: n_actions,
        });
    }
    if steps_left == 0 || belief.is_degenerate() {
        return Ok(0.0);
    }
    let predicted: Vec<f64> = (0..env.num_hypotheses())
        .map(|h| env.reward(h, state, action))
        .collect();

    // distinct reward outcomes with their belief mass
    let mut outcomes: Vec<(f64, f64)> = Vec::new();
    for (w, r) in belief.weights().iter().zip(&predicted) {
        if *w == 0.0 {
            continue;
        }
        match outcomes.iter_mut().find(|(seen, _)| seen == r) {
            Some((_, mass)) => *mass += w,
            None => outcomes.push((*r, *w)),
        }
    }

    let next_state = env.transition(state, action);
    let mut value = 0.0;
    for (reward, mass) in outcomes {
        value += mass * reward;
        if steps_left == 1 || env.terminates_on(reward) {
            continue;
        }
        let preds: Vec<Vec<f64>> = predicted.iter().map(|p| vec![*p]).collect();
        let updated = posterior(belief, &[reward], &preds, params)?;
        if updated.is_degenerate() {
            continue;
        }
        history.push(HistoryStep {
            state: state.clone(),
            action,
            reward,
        });
        let probs = policy.action_probs(&next_state, &updated, history);
        if probs.len() != env.num_actions(&next_state) || probs.len() > BAYES_Q_MAX_ACTIONS {
            history.pop();
            return Err(invalid(format!(
                "policy returned {} action probabilities",
                probs.len()
            )));
        }
        let mut cont = 0.0;
        for (next_action, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            cont += p * bayesian_q_rec(
                env,
                policy,
                &updated,
                &next_state,
                next_action,
                steps_left - 1,
                params,
                history,
            )?;
        }
        history.pop();
        value += mass * cont;
    }
    Ok(value)
}

/// A single known finite MDP with deterministic transitions over states
/// `0..num_states`.
pub trait FiniteMdp {
    fn num_states(&self) -> usize;
    fn initial_state(&self) -> usize;
    fn num_actions(&self, state: usize) -> usize;
    fn transition(&self, state: usize, action: usize) -> usize;
    fn reward(&self, state: usize, action: usize) -> f64;
    /// Absorbing states collect no further reward.
    fn is_terminal(&self, state: usize) -> bool;
}

/// Backward-induction solution: `values[t][s]` is the optimal value with
/// `horizon - t` steps remaining (so `values[horizon]` is all zeros) and
/// `policy[t][s]` a greedy action.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownMdpSolution {
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<usize>>,
}

impl KnownMdpSolution {
    pub fn initial_value(&self, mdp: &impl FiniteMdp) -> f64 {
        self.values[0][mdp.initial_state()]
    }
}

/// Exact finite-horizon backward induction. Ties go to the lowest action.
pub fn solve_known_mdp(mdp: &impl FiniteMdp, horizon: usize) -> KnownMdpSolution {
    let n = mdp.num_states();
    let mut values: Vec<Vec<f64>> = vec![vec![0.0; n]; horizon + 1];
    let mut policy = vec![vec![0usize; n]; horizon];
    for t in (0..horizon).rev() {
        for s in 0..n {
            if mdp.is_terminal(s) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_action = 0;
            for a in 0..mdp.num_actions(s) {
                let q = mdp.reward(s, a) + values[t + 1][mdp.transition(s, a)];
                if q > best {
                    best = q;
                    best_action = a;
                }
            }
            if best.is_finite() {
                values[t][s] = best;
                policy[t][s] = best_action;
            }
        }
    }
    KnownMdpSolution { values, policy }
}

/// Exact expected return from the initial state of a time-dependent
/// stochastic Markov policy, `policy(t, s)` giving action probabilities.
pub fn evaluate_markov_policy(
    mdp: &impl FiniteMdp,
    horizon: usize,
    policy: impl Fn(usize, usize) -> Vec<f64>,
) -> Result<f64> {
    let n = mdp.num_states();
    let mut next = vec![0.0; n];
    for t in (0..horizon).rev() {
        let mut current = vec![0.0; n];
        for (s, v) in current.iter_mut().enumerate() {
            if mdp.is_terminal(s) {
                continue;
            }
            let probs = policy(t, s);
            if probs.len() != mdp.num_actions(s) {
                return Err(Error::LengthMismatch {
                    what: "policy action probabilities",
                    expected: mdp.num_actions(s),
                    got: probs.len(),
                });
            }
            *v = probs
                .iter()
                .enumerate()
                .map(|(a, p)| p * (mdp.reward(s, a) + next[mdp.transition(s, a)]))
                .sum();
        }
        next = current;
    }
    Ok(next[mdp.initial_state()])
}

/// Return of following a deterministic solution policy, evaluated exactly.
pub fn evaluate_deterministic(mdp: &impl FiniteMdp, solution: &KnownMdpSolution) -> Result<f64> {
    let horizon = solution.policy.len();
    evaluate_markov_policy(mdp, horizon, |t, s| {
        let mut probs = vec![0.0; mdp.num_actions(s)];
        if !probs.is_empty() {
            probs[solution.policy[t][s]] = 1.0;
        }
        probs
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::uniform_prior;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E_INV: f64 = 0.36787944117144233;

    #[test]
    fn consistency_examples() {
        let one = ConsistencyParams::finite(1.0).unwrap();
        assert_eq!(consistency_weight(0.2, 0.2, one), 1.0);
        assert_eq!(consistency_weight(0.0, 1.0, ConsistencyParams::infinite()), 0.0);
        assert!((consistency_weight(0.1, 0.6, one) - 0.60653).abs() < 1e-5);
        assert!((consistency_weight(0.1, 0.6, one) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn beta_parsing() {
        assert_eq!("inf".parse::<ConsistencyParams>().unwrap().beta(), Beta::Infinite);
        assert_eq!("1".parse::<ConsistencyParams>().unwrap().beta(), Beta::Finite(1.0));
        assert!("-1".parse::<ConsistencyParams>().is_err());
        assert!("nan".parse::<ConsistencyParams>().is_err());
        assert!(ConsistencyParams::finite(f64::INFINITY).is_err());
    }

    #[test]
    fn posterior_forced_elimination() {
        let prior = uniform_prior(2).unwrap();
        let preds = vec![vec![0.0], vec![1.0]];
        let b = posterior(&prior, &[0.0], &preds, ConsistencyParams::infinite()).unwrap();
        assert_eq!(b.weights(), &[1.0, 0.0]);
    }

    #[test]
    fn posterior_soft_update() {
        let prior = uniform_prior(2).unwrap();
        let preds = vec![vec![0.0], vec![1.0]];
        let b = posterior(&prior, &[0.0], &preds, ConsistencyParams::finite(1.0).unwrap()).unwrap();
        assert!((b.weight(0) - 1.0 / (1.0 + E_INV)).abs() < 1e-15);
        assert!((b.weight(1) - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn posterior_length_mismatch() {
        let prior = uniform_prior(2).unwrap();
        let err = posterior(&prior, &[0.0, 1.0], &[vec![0.0], vec![1.0, 0.0]], ConsistencyParams::infinite());
        assert!(matches!(err, Err(Error::LengthMismatch { .. })));
        let err = posterior(&prior, &[0.0], &[vec![0.0]], ConsistencyParams::infinite());
        assert!(matches!(err, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn posterior_matches_explicit_products() {
        // Unnormalized terms multiplied out by hand, normalized once.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ConsistencyParams::finite(1.7).unwrap();
        for _ in 0..50 {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
            let prior = normalize(&raw).unwrap();
            let rewards: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
            let preds: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect();
            let got = posterior(&prior, &rewards, &preds, params).unwrap();
            let mut terms = [0.0f64; 3];
            for i in 0..3 {
                let mut log_lik = 0.0;
                for t in 0..4 {
                    log_lik -= 1.7 * (rewards[t] - preds[i][t]).abs();
                }
                terms[i] = raw[i] * log_lik.exp();
            }
            let z: f64 = terms.iter().sum();
            for i in 0..3 {
                assert!((got.weight(i) - terms[i] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_weighted_q_examples() {
        let one_hot = Belief::one_hot(2, 0).unwrap();
        assert_eq!(posterior_weighted_q(&[0.3, 7.0], &one_hot).unwrap(), 0.3);
        let half = uniform_prior(2).unwrap();
        assert_eq!(posterior_weighted_q(&[0.0, 1.0], &half).unwrap(), 0.5);
        let degenerate = normalize(&[0.0, 0.0]).unwrap();
        assert_eq!(posterior_weighted_q(&[3.0, 4.0], &degenerate).unwrap(), 0.0);
        assert!(posterior_weighted_q(&[1.0], &half).is_err());
    }

    #[test]
    fn posterior_weighted_q_matches_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let b = normalize(&raw).unwrap();
            // Kahan summation as a higher-precision reference
            let (mut sum, mut c) = (0.0f64, 0.0f64);
            for (qi, wi) in q.iter().zip(b.weights()) {
                let y = qi * wi - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            let got = posterior_weighted_q(&q, &b).unwrap();
            assert!((got - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
        }
    }

    #[test]
    fn empty_history_recovers_prior() {
        let prior = normalize(&[0.2, 0.5, 0.3]).unwrap();
        let got = posterior(&prior, &[], &[vec![], vec![], vec![]], ConsistencyParams::infinite()).unwrap();
        assert_eq!(got, normalize(prior.weights()).unwrap());
    }

    proptest! {
        #[test]
        fn elimination_is_permanent(
            raw in prop::collection::vec(0.0f64..1.0, 2..6),
            steps in prop::collection::vec(prop::collection::vec(0u8..2, 6), 1..10),
            observed in prop::collection::vec(0u8..2, 10),
        ) {
            let n = raw.len();
            let mut belief = normalize(&raw).unwrap();
            let mut dead = vec![false; n];
            for (t, preds) in steps.iter().enumerate() {
                let preds: Vec<Vec<f64>> = (0..n).map(|i| vec![preds[i] as f64]).collect();
                belief = posterior(&belief, &[observed[t] as f64], &preds, ConsistencyParams::infinite()).unwrap();
                for i in 0..n {
                    if dead[i] {
                        prop_assert_eq!(belief.weight(i), 0.0);
                    }
                    dead[i] |= belief.weight(i) == 0.0;
                }
            }
        }

        #[test]
        fn appending_observations_never_grows_weights(
            raw in prop::collection::vec(0.01f64..1.0, 2..6),
            beta in 0.0f64..5.0,
            r in -1.0f64..1.0,
            preds in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let params = ConsistencyParams::finite(beta).unwrap();
            for (w, p) in raw.iter().zip(&preds) {
                let c = consistency_weight(r, *p, params);
                prop_assert!((0.0..=1.0).contains(&c));
                prop_assert!(w * c <= *w);
            }
        }
    }
}
