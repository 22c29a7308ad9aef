//! The token-repeat task: emit the prompt token three times in a row within a
//! 29-token sequence whose first token is the prompt.
//!
//! Tokens come from `{0, 1, 2}` and the next state is the emitted token, so a
//! sequence `s_0 s_1 ... s_T` is the prompt followed by the actions. Triplet
//! windows may include the prompt.

use std::collections::HashSet;
use std::fmt;

use crate::bayes::FiniteMdp;
use crate::error::{invalid, Error, Result};
use crate::hypothesis::RewardPredictor;

pub type Token = u8;

pub const VOCAB_SIZE: usize = 3;
/// Prompt plus 28 generated tokens: the shortest length holding all 27 triplets.
pub const SEQUENCE_LENGTH: usize = 29;
pub const MAX_ACTIONS: usize = SEQUENCE_LENGTH - 1;
pub const TRAIN_PROMPTS: [Token; 2] = [0, 1];
pub const TEST_PROMPT: Token = 2;

/// Linearized de Bruijn sequence B(3, 3): every ternary triplet occurs exactly
/// once among its 27 windows.
pub const DE_BRUIJN_29: [Token; SEQUENCE_LENGTH] = [
    0, 0, 0, 1, 0, 0, 2, 0, 1, 1, 0, 1, 2, 0, 2, 1, 0, 2, 2, 1, 1, 1, 2, 1, 2, 2, 2, 0, 0,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepeatEnvConfig {
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub train_prompts: Vec<Token>,
    pub test_prompt: Token,
}

impl Default for RepeatEnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            sequence_length: SEQUENCE_LENGTH,
            train_prompts: TRAIN_PROMPTS.to_vec(),
            test_prompt: TEST_PROMPT,
        }
    }
}

impl RepeatEnvConfig {
    pub fn validate(&self) -> Result<()> {
        let windows = self.sequence_length.saturating_sub(2);
        if windows != self.vocab_size.pow(3) {
            return Err(invalid(format!(
                "sequence length {} does not give exactly {} triplet windows",
                self.sequence_length,
                self.vocab_size.pow(3)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple(pub [Token; 3]);

impl Triple {
    pub fn repeated(token: Token) -> Self {
        Triple([token; 3])
    }

    fn from_slice(w: &[Token]) -> Self {
        Triple([w[0], w[1], w[2]])
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateKind {
    AllTriplets,
    Repeats,
}

impl CandidateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CandidateKind::AllTriplets => "all-triplets",
            CandidateKind::Repeats => "repeats",
        }
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CandidateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-triplets" | "all" => Ok(Self::AllTriplets),
            "repeats" => Ok(Self::Repeats),
            other => Err(invalid(format!("unknown candidate set `{other}`"))),
        }
    }
}

/// Hypothesis rewarding triplets: each member is one candidate MDP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateTriplets {
    triples: Vec<Triple>,
}

impl CandidateTriplets {
    pub fn new(mut triples: Vec<Triple>) -> Result<Self> {
        if triples.is_empty() {
            return Err(invalid("candidate triplet set must be non-empty"));
        }
        if let Some(t) = triples.iter().find(|t| t.0.iter().any(|x| *x as usize >= VOCAB_SIZE)) {
            return Err(Error::TokenOutOfVocab(*t.0.iter().max().unwrap()));
        }
        triples.sort();
        triples.dedup();
        Ok(Self { triples })
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.triples.binary_search(triple).is_ok()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }
}

pub fn candidate_sets(kind: CandidateKind) -> CandidateTriplets {
    let triples = match kind {
        CandidateKind::AllTriplets => {
            let v = VOCAB_SIZE as Token;
            (0..v)
                .flat_map(|a| (0..v).flat_map(move |b| (0..v).map(move |c| Triple([a, b, c]))))
                .collect()
        }
        CandidateKind::Repeats => (0..VOCAB_SIZE as Token).map(Triple::repeated).collect(),
    };
    CandidateTriplets::new(triples).expect("static candidate sets are valid")
}

/// A triplet hypothesis predicts reward 1 exactly when the action completes
/// its triplet. The state is the prefix `s_0..s_t`.
impl RewardPredictor<[Token], Token> for Triple {
    fn predicted_reward(&self, prefix: &[Token], action: &Token) -> f64 {
        match prefix {
            [.., a, b] if Triple([*a, *b, *action]) == *self => 1.0,
            _ => 0.0,
        }
    }
}

fn check_tokens(seq: &[Token]) -> Result<()> {
    match seq.iter().find(|t| **t as usize >= VOCAB_SIZE) {
        Some(t) => Err(Error::TokenOutOfVocab(*t)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub reward: f64,
    /// Start index of the first window equal to the prompt repeated.
    pub window_start: Option<usize>,
}

impl EpisodeOutcome {
    /// Index `t` of the action `a_t` that completed the rewarding window.
    pub fn termination_step(&self) -> Option<usize> {
        self.window_start.map(|k| k + 1)
    }

    pub fn success(&self) -> bool {
        self.reward == 1.0
    }
}

pub fn episode_reward(sequence: &[Token], prompt: Token) -> Result<EpisodeOutcome> {
    check_tokens(sequence)?;
    if prompt as usize >= VOCAB_SIZE {
        return Err(Error::TokenOutOfVocab(prompt));
    }
    if sequence.first() != Some(&prompt) {
        return Err(invalid("sequence must start with the prompt token"));
    }
    if sequence.len() > SEQUENCE_LENGTH {
        return Err(Error::PrefixLength(sequence.len(), SEQUENCE_LENGTH));
    }
    let target = Triple::repeated(prompt);
    let window_start = sequence
        .windows(3)
        .position(|w| Triple::from_slice(w) == target);
    Ok(EpisodeOutcome {
        reward: if window_start.is_some() { 1.0 } else { 0.0 },
        window_start,
    })
}

/// Trajectory value used at every step of the Markovian gradient: 1 iff the
/// prompt's triplet occurs anywhere in the sequence.
pub fn markov_trajectory_value(sequence: &[Token], prompt: Token) -> Result<f64> {
    Ok(episode_reward(sequence, prompt)?.reward)
}

/// Posterior-weighted value with hard elimination and the alignment belief:
/// 1 iff the window `s_{t-1} s_t a_t` is a candidate that has not already
/// appeared in `s_0..s_t`.
pub fn barl_step_value(prefix: &[Token], action: Token, candidates: &CandidateTriplets) -> f64 {
    let n = prefix.len();
    if n < 2 {
        return 0.0;
    }
    let window = Triple([prefix[n - 2], prefix[n - 1], action]);
    if !candidates.contains(&window) {
        return 0.0;
    }
    let seen = prefix.windows(3).any(|w| Triple::from_slice(w) == window);
    if seen {
        0.0
    } else {
        1.0
    }
}

/// Per-step BARL values for a whole sequence `s_0..s_T` (actions `s_1..s_T`).
pub fn barl_step_values(sequence: &[Token], candidates: &CandidateTriplets) -> Vec<f64> {
    (1..sequence.len())
        .map(|t| barl_step_value(&sequence[..t], sequence[t], candidates))
        .collect()
}

/// Cyclic de Bruijn sequence over `k` symbols with window `n`
/// (Fredricksen-Kessler-Maiorana concatenation of Lyndon words).
pub fn de_bruijn(k: usize, n: usize) -> Vec<Token> {
    assert!(k >= 1 && k <= Token::MAX as usize + 1 && n >= 1);
    let mut a = vec![0usize; k * n + 1];
    let mut out = Vec::with_capacity(k.pow(n as u32));
    fn db(t: usize, p: usize, k: usize, n: usize, a: &mut [usize], out: &mut Vec<Token>) {
        if t > n {
            if n % p == 0 {
                out.extend(a[1..=p].iter().map(|x| *x as Token));
            }
        } else {
            a[t] = a[t - p];
            db(t + 1, p, k, n, a, out);
            for j in a[t - p] + 1..k {
                a[t] = j;
                db(t + 1, t, k, n, a, out);
            }
        }
    }
    db(1, 1, k, n, &mut a, &mut out);
    out
}

/// De Bruijn sequence unrolled so every window appears in a linear string of
/// length `k^n + n - 1`.
pub fn linear_de_bruijn(k: usize, n: usize) -> Vec<Token> {
    let mut seq = de_bruijn(k, n);
    let head: Vec<Token> = seq[..n - 1].to_vec();
    seq.extend(head);
    seq
}

pub fn distinct_triplets(sequence: &[Token]) -> HashSet<Triple> {
    sequence.windows(3).map(Triple::from_slice).collect()
}

pub fn covers_all_triplets(sequence: &[Token]) -> bool {
    let all = candidate_sets(CandidateKind::AllTriplets);
    let seen = distinct_triplets(sequence);
    let covered = all.iter().all(|t| seen.contains(t));
    covered
}

/// The task with a known prompt as a finite MDP over
/// `{prompt only, last two tokens, done}`.
#[derive(Debug, Clone, Copy)]
pub struct RepeatKnownMdp {
    pub prompt: Token,
}

impl RepeatKnownMdp {
    const SINGLE: usize = 0; // states 0..3: only the prompt x has been seen
    const PAIR: usize = 3; // states 3..12: last two tokens (a, b)
    pub const DONE: usize = 12;

    pub fn new(prompt: Token) -> Result<Self> {
        if prompt as usize >= VOCAB_SIZE {
            return Err(Error::TokenOutOfVocab(prompt));
        }
        Ok(Self { prompt })
    }

    pub fn horizon(&self) -> usize {
        MAX_ACTIONS
    }

    fn pair(a: usize, b: usize) -> usize {
        Self::PAIR + VOCAB_SIZE * a + b
    }
}

impl FiniteMdp for RepeatKnownMdp {
    fn num_states(&self) -> usize {
        Self::DONE + 1
    }

    fn initial_state(&self) -> usize {
        Self::SINGLE + self.prompt as usize
    }

    fn num_actions(&self, _state: usize) -> usize {
        VOCAB_SIZE
    }

    fn transition(&self, state: usize, action: usize) -> usize {
        if state == Self::DONE {
            return Self::DONE;
        }
        if self.reward(state, action) == 1.0 {
            return Self::DONE;
        }
        if state < Self::PAIR {
            Self::pair(state, action)
        } else {
            Self::pair((state - Self::PAIR) % VOCAB_SIZE, action)
        }
    }

    fn reward(&self, state: usize, action: usize) -> f64 {
        if !(Self::PAIR..Self::DONE).contains(&state) {
            return 0.0;
        }
        let p = self.prompt as usize;
        let a = (state - Self::PAIR) / VOCAB_SIZE;
        let b = (state - Self::PAIR) % VOCAB_SIZE;
        if a == p && b == p && action == p {
            1.0
        } else {
            0.0
        }
    }

    fn is_terminal(&self, state: usize) -> bool {
        state == Self::DONE
    }
}
