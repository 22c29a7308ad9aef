//! Shared domain types: candidate MDPs, beliefs over them, and trajectories.
//!
//! A hypothesis is identified by its answer label. The label type differs per
//! environment (a leaf index, a token triple, an answer string) and is compared
//! by equality only.

use crate::error::{invalid, Error, Result};

/// One candidate MDP, identified by the answer its reward is defined against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypothesisMdp<L> {
    pub id: usize,
    pub answer: L,
}

/// Reward a hypothesis predicts for taking `action` in `state`.
///
/// Implementations must be deterministic.
pub trait RewardPredictor<S: ?Sized, A: ?Sized> {
    fn predicted_reward(&self, state: &S, action: &A) -> f64;
}

/// Ordered, non-empty collection of hypotheses with ids `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet<L> {
    hypotheses: Vec<HypothesisMdp<L>>,
    includes_ground_truth: bool,
}

impl<L> HypothesisSet<L> {
    /// Builds a set from answer labels in order. When `includes_ground_truth`
    /// is set, the first label is the ground-truth answer.
    pub fn from_answers(answers: Vec<L>, includes_ground_truth: bool) -> Result<Self> {
        if answers.is_empty() {
            return Err(invalid("hypothesis set must be non-empty"));
        }
        let hypotheses = answers
            .into_iter()
            .enumerate()
            .map(|(id, answer)| HypothesisMdp { id, answer })
            .collect();
        Ok(Self {
            hypotheses,
            includes_ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn includes_ground_truth(&self) -> bool {
        self.includes_ground_truth
    }

    pub fn ground_truth(&self) -> Option<&HypothesisMdp<L>> {
        if self.includes_ground_truth {
            self.hypotheses.first()
        } else {
            None
        }
    }

    pub fn get(&self, id: usize) -> Option<&HypothesisMdp<L>> {
        self.hypotheses.get(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, HypothesisMdp<L>> {
        self.hypotheses.iter()
    }

    pub fn answers(&self) -> impl Iterator<Item = &L> {
        self.hypotheses.iter().map(|h| &h.answer)
    }
}

impl<'a, L> IntoIterator for &'a HypothesisSet<L> {
    type Item = &'a HypothesisMdp<L>;
    type IntoIter = std::slice::Iter<'a, HypothesisMdp<L>>;

    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}

/// Normalized non-negative weights over a hypothesis set.
///
/// A belief is either normalized (sums to one) or degenerate (every weight is
/// zero). No other state can be constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    weights: Vec<f64>,
    degenerate: bool,
}

impl Belief {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// All mass on hypothesis `index`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::IndexOutOfRange {
                what: "hypothesis",
                index,
                len: n,
            });
        }
        let mut weights = vec![0.0; n];
        weights[index] = 1.0;
        Ok(Self {
            weights,
            degenerate: false,
        })
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }
}

/// Scales non-negative weights to sum to one. An all-zero input yields a
/// degenerate belief with the weights left as given.
pub fn normalize(raw: &[f64]) -> Result<Belief> {
    if raw.is_empty() {
        return Err(invalid("cannot normalize an empty weight vector"));
    }
    if let Some(w) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(invalid(format!("weight {w} is negative or non-finite")));
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Ok(Belief {
            weights: raw.to_vec(),
            degenerate: true,
        });
    }
    if !total.is_finite() {
        // Rescale by the largest entry first so the sum fits.
        let max = raw.iter().cloned().fold(0.0, f64::max);
        let scaled: Vec<f64> = raw.iter().map(|w| w / max).collect();
        return normalize(&scaled);
    }
    Ok(Belief {
        weights: raw.iter().map(|w| w / total).collect(),
        degenerate: false,
    })
}

pub fn uniform_prior(n: usize) -> Result<Belief> {
    if n == 0 {
        return Err(invalid("uniform prior needs at least one hypothesis"));
    }
    Ok(Belief {
        weights: vec![1.0 / n as f64; n],
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<S, A> {
    pub action: A,
    pub next_state: S,
    pub observed_reward: f64,
}

/// Recorded interaction history `s_0, a_0, r_0, s_1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S, A> {
    pub initial_state: S,
    steps: Vec<Step<S, A>>,
    terminated: bool,
}

impl<S: Clone + PartialEq, A> Trajectory<S, A> {
    pub fn new(initial_state: S) -> Self {
        Self {
            initial_state,
            steps: Vec::new(),
            terminated: false,
        }
    }

    pub fn steps(&self) -> &[Step<S, A>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn current_state(&self) -> &S {
        self.steps
            .last()
            .map(|s| &s.next_state)
            .unwrap_or(&self.initial_state)
    }

    /// Appends a step. Fails once the trajectory has terminated.
    pub fn push(&mut self, step: Step<S, A>, terminal: bool) -> Result<()> {
        if self.terminated {
            return Err(invalid("cannot extend a terminated trajectory"));
        }
        self.steps.push(step);
        self.terminated = terminal;
        Ok(())
    }

    /// Rebuilds the state sequence from the initial state and the actions and
    /// checks every stored `next_state` against it.
    pub fn replays_with(&self, transition: impl Fn(&S, &A) -> S) -> bool {
        let mut state = self.initial_state.clone();
        for step in &self.steps {
            state = transition(&state, &step.action);
            if state != step.next_state {
                return false;
            }
        }
        true
    }

    pub fn actions(&self) -> impl Iterator<Item = &A> {
        self.steps.iter().map(|s| &s.action)
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.observed_reward)
    }
}
