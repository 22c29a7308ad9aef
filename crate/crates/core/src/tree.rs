//! Full binary tree with one candidate MDP per leaf.
//!
//! Nodes are heap-indexed: the root is 0 and node `i` has children `2i + 1`
//! (left) and `2i + 2` (right). A hypothesis rewards arrival at its leaf, and
//! the episode ends on the first unit reward. Internal nodes offer `left` and
//! `right`; leaves offer only `reset`, which returns to the root.

use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::bayes::{FiniteMdp, HistoryPolicy, HistoryStep, HypothesisEnv};
use crate::error::{invalid, Error, Result};
use crate::hypothesis::{uniform_prior, Belief, HypothesisSet, RewardPredictor};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const RESET: usize = 0;
pub const MAX_DEPTH: usize = 20;

/// Leaf position counted left to right, `0..2^depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct LeafId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEnv {
    depth: usize,
}

impl TreeEnv {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(invalid(format!("tree depth must be in 1..={MAX_DEPTH}, got {depth}")));
        }
        Ok(Self { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn num_nodes(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    pub fn num_internal(&self) -> usize {
        self.num_leaves() - 1
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.num_internal()
    }

    pub fn leaf_node(&self, leaf: LeafId) -> usize {
        self.num_internal() + leaf.0
    }

    pub fn node_depth(node: usize) -> usize {
        (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
    }

    pub fn hypotheses(&self) -> HypothesisSet<LeafId> {
        HypothesisSet::from_answers((0..self.num_leaves()).map(LeafId).collect(), false)
            .expect("a tree has at least two leaves")
    }

    pub fn prior(&self) -> Belief {
        uniform_prior(self.num_leaves()).expect("non-empty")
    }

    /// Move from an internal node one step toward `target` (a leaf node).
    pub fn action_toward(&self, node: usize, target: usize) -> usize {
        debug_assert!(!self.is_leaf(node));
        // climb from the target until the parent is `node`
        let mut child = target;
        while (child - 1) / 2 != node {
            child = (child - 1) / 2;
        }
        if child == 2 * node + 1 {
            LEFT
        } else {
            RIGHT
        }
    }

    pub fn step(&self, node: usize, action: usize) -> usize {
        if self.is_leaf(node) {
            self.root()
        } else if action == LEFT {
            2 * node + 1
        } else {
            2 * node + 2
        }
    }

    /// The problem with the rewarding leaf known.
    pub fn known(&self, leaf: LeafId) -> Result<KnownTreeMdp> {
        if leaf.0 >= self.num_leaves() {
            return Err(Error::IndexOutOfRange {
                what: "leaf",
                index: leaf.0,
                len: self.num_leaves(),
            });
        }
        Ok(KnownTreeMdp {
            env: self.clone(),
            target: self.leaf_node(leaf),
        })
    }
}

/// A leaf hypothesis predicts reward 1 for the move that lands on its leaf.
/// States are tree nodes; `TreeEnv` resolves the move.
impl RewardPredictor<(TreeEnv, usize), usize> for LeafId {
    fn predicted_reward(&self, state: &(TreeEnv, usize), action: &usize) -> f64 {
        let (env, node) = state;
        if env.step(*node, *action) == env.leaf_node(*self) && !env.is_leaf(*node) {
            1.0
        } else {
            0.0
        }
    }
}

impl HypothesisEnv for TreeEnv {
    type State = usize;

    fn num_hypotheses(&self) -> usize {
        self.num_leaves()
    }

    fn num_actions(&self, state: &usize) -> usize {
        if self.is_leaf(*state) {
            1
        } else {
            2
        }
    }

    fn transition(&self, state: &usize, action: usize) -> usize {
        self.step(*state, action)
    }

    fn reward(&self, hypothesis: usize, state: &usize, action: usize) -> f64 {
        LeafId(hypothesis).predicted_reward(&(self.clone(), *state), &action)
    }

    fn terminates_on(&self, reward: f64) -> bool {
        reward == 1.0
    }
}

/// Tree with a single known rewarding leaf; state `num_nodes` is absorbing.
#[derive(Debug, Clone)]
pub struct KnownTreeMdp {
    env: TreeEnv,
    target: usize,
}

impl KnownTreeMdp {
    pub fn env(&self) -> &TreeEnv {
        &self.env
    }

    pub fn done_state(&self) -> usize {
        self.env.num_nodes()
    }
}

impl FiniteMdp for KnownTreeMdp {
    fn num_states(&self) -> usize {
        self.env.num_nodes() + 1
    }

    fn initial_state(&self) -> usize {
        self.env.root()
    }

    fn num_actions(&self, state: usize) -> usize {
        if state == self.done_state() || self.env.is_leaf(state) {
            1
        } else {
            2
        }
    }

    fn transition(&self, state: usize, action: usize) -> usize {
        if state == self.done_state() {
            return state;
        }
        let next = self.env.step(state, action);
        if next == self.target && !self.env.is_leaf(state) {
            self.done_state()
        } else {
            next
        }
    }

    fn reward(&self, state: usize, action: usize) -> f64 {
        if state == self.done_state() || self.env.is_leaf(state) {
            return 0.0;
        }
        if self.env.step(state, action) == self.target {
            1.0
        } else {
            0.0
        }
    }

    fn is_terminal(&self, state: usize) -> bool {
        state == self.done_state()
    }
}

/// Stationary Markovian descent policy: probability of going left at each
/// internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTreePolicy {
    left: Vec<f64>,
}

impl MarkovTreePolicy {
    pub fn new(left: Vec<f64>) -> Result<Self> {
        if let Some(p) = left.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::ProbabilityOutOfRange(*p));
        }
        Ok(Self { left })
    }

    pub fn uniform(env: &TreeEnv) -> Self {
        Self {
            left: vec![0.5; env.num_internal()],
        }
    }

    pub fn always_left(env: &TreeEnv) -> Self {
        Self {
            left: vec![1.0; env.num_internal()],
        }
    }

    pub fn random(env: &TreeEnv, rng: &mut impl Rng) -> Self {
        Self {
            left: (0..env.num_internal()).map(|_| rng.random::<f64>()).collect(),
        }
    }

    pub fn left_probability(&self, node: usize) -> f64 {
        self.left[node]
    }

    fn check(&self, env: &TreeEnv) -> Result<()> {
        if self.left.len() != env.num_internal() {
            return Err(Error::LengthMismatch {
                what: "policy internal nodes",
                expected: env.num_internal(),
                got: self.left.len(),
            });
        }
        Ok(())
    }
}

/// Probability `f(s)` that a single descent visits each node.
pub fn reach_probabilities(env: &TreeEnv, policy: &MarkovTreePolicy) -> Result<Vec<f64>> {
    policy.check(env)?;
    let mut f = vec![0.0; env.num_nodes()];
    f[0] = 1.0;
    for node in 0..env.num_internal() {
        let p = policy.left[node];
        f[2 * node + 1] = f[node] * p;
        f[2 * node + 2] = f[node] * (1.0 - p);
    }
    Ok(f)
}

/// Single-descent return averaged over equally likely rewarding leaves.
pub fn markovian_expected_return(env: &TreeEnv, policy: &MarkovTreePolicy) -> Result<f64> {
    let f = reach_probabilities(env, policy)?;
    let leaves: f64 = f[env.num_internal()..].iter().sum();
    Ok(leaves / env.num_leaves() as f64)
}

/// Return of the same stationary policy given `passes` independent
/// descent-and-reset passes.
pub fn markovian_multi_pass_return(
    env: &TreeEnv,
    policy: &MarkovTreePolicy,
    passes: usize,
) -> Result<f64> {
    let f = reach_probabilities(env, policy)?;
    let passes = i32::try_from(passes).map_err(|_| invalid("too many passes"))?;
    let total: f64 = f[env.num_internal()..]
        .iter()
        .map(|fl| 1.0 - (1.0 - fl).powi(passes))
        .sum();
    Ok(total / env.num_leaves() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptiveOutcome {
    pub expected_return: f64,
    pub expected_descents: f64,
}

fn check_order(env: &TreeEnv, order: &[LeafId]) -> Result<()> {
    if order.len() != env.num_leaves() {
        return Err(Error::LengthMismatch {
            what: "elimination order",
            expected: env.num_leaves(),
            got: order.len(),
        });
    }
    let mut seen = vec![false; env.num_leaves()];
    for leaf in order {
        if leaf.0 >= seen.len() || std::mem::replace(&mut seen[leaf.0], true) {
            return Err(invalid("elimination order must be a permutation of the leaves"));
        }
    }
    Ok(())
}

pub fn left_to_right(env: &TreeEnv) -> Vec<LeafId> {
    (0..env.num_leaves()).map(LeafId).collect()
}

/// Support of the hard-elimination posterior: the posterior is uniform over
/// the leaves still alive.
#[derive(Debug, Clone)]
pub struct EliminationBelief {
    alive: Vec<bool>,
    remaining: usize,
}

impl EliminationBelief {
    pub fn new(num_leaves: usize) -> Self {
        Self {
            alive: vec![true; num_leaves],
            remaining: num_leaves,
        }
    }

    pub fn eliminate(&mut self, leaf: LeafId) {
        if std::mem::replace(&mut self.alive[leaf.0], false) {
            self.remaining -= 1;
        }
    }

    pub fn is_alive(&self, leaf: LeafId) -> bool {
        self.alive[leaf.0]
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn weights(&self) -> Vec<f64> {
        let w = 1.0 / self.remaining as f64;
        self.alive.iter().map(|a| if *a { w } else { 0.0 }).collect()
    }
}

/// One descent of the eliminating policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub target: LeafId,
    pub actions: Vec<usize>,
    pub reward: f64,
}

/// Runs the eliminating policy against a fixed rewarding leaf:
/// pick the first alive leaf in `order`, walk the shortest path to it, and
/// either collect the reward or eliminate it and reset.
pub fn simulate_elimination(env: &TreeEnv, order: &[LeafId], truth: LeafId) -> Result<Vec<Descent>> {
    check_order(env, order)?;
    let mut belief = EliminationBelief::new(env.num_leaves());
    let mut descents = Vec::new();
    let mut cursor = 0;
    while belief.remaining() > 0 {
        while !belief.is_alive(order[cursor]) {
            cursor += 1;
        }
        let target = order[cursor];
        let goal = env.leaf_node(target);
        let mut node = env.root();
        let mut actions = Vec::with_capacity(env.depth());
        let mut reward = 0.0;
        while !env.is_leaf(node) {
            let a = env.action_toward(node, goal);
            reward = env.reward(truth.0, &node, a);
            actions.push(a);
            node = env.step(node, a);
        }
        debug_assert_eq!(node, goal);
        descents.push(Descent {
            target,
            actions,
            reward,
        });
        if reward == 1.0 {
            break;
        }
        belief.eliminate(target);
    }
    Ok(descents)
}

/// Expected return and number of descents of the eliminating policy over
/// uniformly drawn rewarding leaves, with up to `num_leaves` descents.
pub fn adaptive_return(env: &TreeEnv, order: &[LeafId]) -> Result<AdaptiveOutcome> {
    check_order(env, order)?;
    // Until it is rewarded the policy behaves identically for every truth, so
    // one unrewarded run fixes the descent at which each leaf is visited.
    let mut belief = EliminationBelief::new(env.num_leaves());
    let mut visit_index = vec![0usize; env.num_leaves()];
    let mut cursor = 0;
    let mut descent = 0;
    while belief.remaining() > 0 {
        while !belief.is_alive(order[cursor]) {
            cursor += 1;
        }
        let target = order[cursor];
        descent += 1;
        visit_index[target.0] = descent;
        belief.eliminate(target);
    }
    let budget = env.num_leaves();
    let n = env.num_leaves() as f64;
    let hits = visit_index.iter().filter(|k| **k <= budget).count() as f64;
    let descents: f64 = visit_index.iter().map(|k| *k as f64).sum();
    Ok(AdaptiveOutcome {
        expected_return: hits / n,
        expected_descents: descents / n,
    })
}

/// The eliminating policy as a history-dependent policy for `bayesian_q`.
#[derive(Debug, Clone)]
pub struct EliminationPolicy {
    env: TreeEnv,
    order: Vec<LeafId>,
}

impl EliminationPolicy {
    pub fn new(env: &TreeEnv, order: Vec<LeafId>) -> Result<Self> {
        check_order(env, &order)?;
        Ok(Self {
            env: env.clone(),
            order,
        })
    }

    /// First leaf in the order with positive posterior weight.
    pub fn target(&self, belief: &Belief) -> Option<LeafId> {
        self.order.iter().copied().find(|l| belief.weight(l.0) > 0.0)
    }

    pub fn action(&self, node: usize, belief: &Belief) -> usize {
        if self.env.is_leaf(node) {
            return RESET;
        }
        match self.target(belief) {
            Some(leaf) => self.env.action_toward(node, self.env.leaf_node(leaf)),
            None => LEFT,
        }
    }
}

impl HistoryPolicy<usize> for EliminationPolicy {
    fn action_probs(&self, state: &usize, belief: &Belief, _history: &[HistoryStep<usize>]) -> Vec<f64> {
        let mut probs = vec![0.0; self.env.num_actions(state)];
        probs[self.action(*state, belief)] = 1.0;
        probs
    }
}

/// Steps needed for the eliminating policy to try every leaf: one descent per
/// leaf and a reset between consecutive descents.
pub fn multi_pass_horizon(env: &TreeEnv) -> usize {
    env.num_leaves() * env.depth() + env.num_leaves() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonSemantics {
    /// Markovian policies get one descent; the adaptive policy may reset.
    SinglePass,
    /// Both get `num_leaves` descents; Markovian policies are stationary.
    MultiPass,
}

impl HorizonSemantics {
    pub fn as_str(&self) -> &'static str {
        match self {
            HorizonSemantics::SinglePass => "single-pass",
            HorizonSemantics::MultiPass => "multi-pass",
        }
    }
}

impl fmt::Display for HorizonSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HorizonSemantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-pass" | "single" => Ok(Self::SinglePass),
            "multi-pass" | "multi" => Ok(Self::MultiPass),
            other => Err(invalid(format!("unknown horizon semantics `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub depth: usize,
    pub semantics: HorizonSemantics,
    pub markovian_optimum: f64,
    pub adaptive_return: f64,
    pub ratio: f64,
    pub expected_descents: f64,
}

impl GapRow {
    pub const CSV_HEADER: &'static str =
        "depth,semantics,markovian_optimum,adaptive_return,ratio,expected_descents";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.depth,
            self.semantics,
            self.markovian_optimum,
            self.adaptive_return,
            self.ratio,
            self.expected_descents
        )
    }

    /// Closed-form Markovian optimum for this row's semantics.
    pub fn closed_form_markovian(&self) -> f64 {
        let leaves = (1u64 << self.depth) as f64;
        match self.semantics {
            HorizonSemantics::SinglePass => 1.0 / leaves,
            HorizonSemantics::MultiPass => -(leaves * (-1.0 / leaves).ln_1p()).exp_m1(),
        }
    }

    pub fn matches_closed_form(&self) -> bool {
        let leaves = (1u64 << self.depth) as f64;
        let descents_ok = self.expected_descents == (leaves + 1.0) / 2.0;
        let adaptive_ok = self.adaptive_return == 1.0;
        match self.semantics {
            HorizonSemantics::SinglePass => {
                descents_ok
                    && adaptive_ok
                    && self.markovian_optimum == self.closed_form_markovian()
                    && self.ratio == leaves
            }
            HorizonSemantics::MultiPass => {
                let m = self.closed_form_markovian();
                descents_ok
                    && adaptive_ok
                    && (self.markovian_optimum - m).abs() <= 1e-12
                    && (self.ratio - 1.0 / m).abs() <= 1e-12 * self.ratio
            }
        }
    }
}

/// Markovian optimum against the eliminating policy for each depth.
///
/// Every single-descent Markovian policy earns the same return, so the uniform
/// policy attains the optimum. Under multi-pass semantics the per-leaf success
/// `1 - (1 - f)^k` is concave in `f`, so uniform reach is again optimal among
/// stationary policies.
pub fn gap_report(
    depths: impl IntoIterator<Item = usize>,
    semantics: HorizonSemantics,
) -> Result<Vec<GapRow>> {
    depths
        .into_iter()
        .map(|depth| {
            let env = TreeEnv::new(depth)?;
            let uniform = MarkovTreePolicy::uniform(&env);
            let markovian_optimum = match semantics {
                HorizonSemantics::SinglePass => markovian_expected_return(&env, &uniform)?,
                HorizonSemantics::MultiPass => {
                    markovian_multi_pass_return(&env, &uniform, env.num_leaves())?
                }
            };
            let adaptive = adaptive_return(&env, &left_to_right(&env))?;
            Ok(GapRow {
                depth,
                semantics,
                markovian_optimum,
                adaptive_return: adaptive.expected_return,
                ratio: adaptive.expected_return / markovian_optimum,
                expected_descents: adaptive.expected_descents,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{
        bayesian_q, evaluate_markov_policy, posterior, solve_known_mdp, ConsistencyParams,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_depth_two_reach() {
        let env = TreeEnv::new(2).unwrap();
        let f = reach_probabilities(&env, &MarkovTreePolicy::uniform(&env)).unwrap();
        assert_eq!(&f[3..], &[0.25; 4]);
    }

    #[test]
    fn always_left_reach() {
        let env = TreeEnv::new(3).unwrap();
        let f = reach_probabilities(&env, &MarkovTreePolicy::always_left(&env)).unwrap();
        let leaves = &f[env.num_internal()..];
        assert_eq!(leaves[0], 1.0);
        assert!(leaves[1..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn flow_is_conserved_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for depth in 1..=10 {
            let env = TreeEnv::new(depth).unwrap();
            for _ in 0..10 {
                let f = reach_probabilities(&env, &MarkovTreePolicy::random(&env, &mut rng)).unwrap();
                for d in 0..=depth {
                    let level: f64 = f[(1 << d) - 1..(1 << (d + 1)) - 1].iter().sum();
                    assert!((level - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn markovian_return_is_policy_independent() {
        let env = TreeEnv::new(1).unwrap();
        assert_eq!(markovian_expected_return(&env, &MarkovTreePolicy::uniform(&env)).unwrap(), 0.5);
        let env = TreeEnv::new(2).unwrap();
        assert_eq!(markovian_expected_return(&env, &MarkovTreePolicy::always_left(&env)).unwrap(), 0.25);

        let env = TreeEnv::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let r = markovian_expected_return(&env, &MarkovTreePolicy::random(&env, &mut rng)).unwrap();
            assert!((r - 1.0 / 16.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_search_depth_two_maximum() {
        let env = TreeEnv::new(2).unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let mut best: f64 = 0.0;
        for a in &grid {
            for b in &grid {
                for c in &grid {
                    let p = MarkovTreePolicy::new(vec![*a, *b, *c]).unwrap();
                    best = best.max(markovian_expected_return(&env, &p).unwrap());
                }
            }
        }
        assert!((best - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn adaptive_examples() {
        let env = TreeEnv::new(2).unwrap();
        let out = adaptive_return(&env, &left_to_right(&env)).unwrap();
        assert_eq!(out.expected_return, 1.0);
        assert_eq!(out.expected_descents, 2.5);

        let env = TreeEnv::new(5).unwrap();
        let out = adaptive_return(&env, &left_to_right(&env)).unwrap();
        assert_eq!(out.expected_return, 1.0);
        assert_eq!(out.expected_descents, 16.5);
    }

    #[test]
    fn adaptive_return_matches_per_truth_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for depth in 1..=5 {
            let env = TreeEnv::new(depth).unwrap();
            let mut order = left_to_right(&env);
            // Fisher-Yates with our own rng to stay reproducible
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let fast = adaptive_return(&env, &order).unwrap();
            let mut hits = 0.0;
            let mut descents = 0.0;
            for truth in 0..env.num_leaves() {
                let run = simulate_elimination(&env, &order, LeafId(truth)).unwrap();
                assert!(run.len() <= env.num_leaves());
                hits += run.last().unwrap().reward;
                descents += run.len() as f64;
                let mut targets: Vec<_> = run.iter().map(|d| d.target).collect();
                targets.sort();
                targets.dedup();
                assert_eq!(targets.len(), run.len(), "a leaf was visited twice");
            }
            let n = env.num_leaves() as f64;
            assert_eq!(fast.expected_return, hits / n);
            assert_eq!(fast.expected_descents, descents / n);
        }
    }

    #[test]
    fn elimination_posterior_matches_bayes_update() {
        let env = TreeEnv::new(3).unwrap();
        let order = left_to_right(&env);
        let truth = LeafId(6);
        let run = simulate_elimination(&env, &order, truth).unwrap();
        let mut belief = env.prior();
        let mut support = EliminationBelief::new(env.num_leaves());
        for descent in &run {
            let mut node = env.root();
            for a in &descent.actions {
                let observed = env.reward(truth.0, &node, *a);
                let preds: Vec<Vec<f64>> = (0..env.num_leaves())
                    .map(|h| vec![env.reward(h, &node, *a)])
                    .collect();
                belief = posterior(&belief, &[observed], &preds, ConsistencyParams::infinite()).unwrap();
                node = env.step(node, *a);
            }
            if descent.reward == 0.0 {
                support.eliminate(descent.target);
                for (a, b) in belief.weights().iter().zip(support.weights()) {
                    assert!((a - b).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn gap_rows() {
        let rows = gap_report(1..=10, HorizonSemantics::SinglePass).unwrap();
        for row in &rows {
            assert!(row.matches_closed_form(), "{row:?}");
            assert_eq!(row.ratio, (1u64 << row.depth) as f64);
        }
        assert_eq!(rows[1].markovian_optimum, 0.25);
        assert_eq!(rows[1].ratio, 4.0);
        assert_eq!(rows[9].markovian_optimum, 1.0 / 1024.0);

        let multi = gap_report(1..=6, HorizonSemantics::MultiPass).unwrap();
        for row in &multi {
            assert!(row.matches_closed_form(), "{row:?}");
            let k = row.depth as i32;
            let uniform_truth = 1.0 - (1.0 - 0.5f64.powi(k)).powi(1 << k);
            assert!((row.markovian_optimum - uniform_truth).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_limits() {
        assert!(TreeEnv::new(0).is_err());
        assert!(TreeEnv::new(21).is_err());
        let row = &gap_report([20], HorizonSemantics::SinglePass).unwrap()[0];
        assert!(row.matches_closed_form());
    }

    #[test]
    fn bad_orders_rejected() {
        let env = TreeEnv::new(2).unwrap();
        assert!(adaptive_return(&env, &[LeafId(0), LeafId(0), LeafId(1), LeafId(2)]).is_err());
        assert!(adaptive_return(&env, &[LeafId(0)]).is_err());
        assert!(EliminationPolicy::new(&env, vec![LeafId(4); 4]).is_err());
    }

    #[test]
    fn bayesian_value_of_elimination_is_one() {
        let env = TreeEnv::new(2).unwrap();
        let policy = EliminationPolicy::new(&env, left_to_right(&env)).unwrap();
        let prior = env.prior();
        let root = env.root();
        let first = policy.action(root, &prior);
        let q = bayesian_q(
            &env,
            &policy,
            &prior,
            &root,
            first,
            multi_pass_horizon(&env),
            ConsistencyParams::infinite(),
        )
        .unwrap();
        assert!((q - 1.0).abs() < 1e-15);

        // with a single descent it can only reach its first target
        let q1 = bayesian_q(&env, &policy, &prior, &root, first, env.depth(), ConsistencyParams::infinite()).unwrap();
        assert!((q1 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn known_tree_solution() {
        let env = TreeEnv::new(3).unwrap();
        let mdp = env.known(LeafId(5)).unwrap();
        let sol = solve_known_mdp(&mdp, env.depth());
        assert_eq!(sol.initial_value(&mdp), 1.0);
        let mut node = env.root();
        for t in 0..env.depth() {
            let a = sol.policy[t][node];
            assert_eq!(a, env.action_toward(node, env.leaf_node(LeafId(5))));
            node = env.step(node, a);
        }
        assert_eq!(node, env.leaf_node(LeafId(5)));
    }

    #[test]
    fn one_hot_bayesian_q_equals_policy_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let env = TreeEnv::new(3).unwrap();
        for _ in 0..20 {
            let truth = LeafId(rng.random_range(0..env.num_leaves()));
            let policy = MarkovTreePolicy::random(&env, &mut rng);
            let probs = |node: usize| -> Vec<f64> {
                if env.is_leaf(node) {
                    vec![1.0]
                } else {
                    let p = policy.left_probability(node);
                    vec![p, 1.0 - p]
                }
            };
            let horizon = 10;
            let mdp = env.known(truth).unwrap();
            let exact = evaluate_markov_policy(&mdp, horizon, |_, s| {
                if s == mdp.done_state() { vec![1.0] } else { probs(s) }
            })
            .unwrap();
            let belief = Belief::one_hot(env.num_leaves(), truth.0).unwrap();
            let hist_policy = |s: &usize, _: &Belief, _: &[HistoryStep<usize>]| probs(*s);
            let root = env.root();
            let v: f64 = probs(root)
                .iter()
                .enumerate()
                .map(|(a, p)| {
                    p * bayesian_q(&env, &hist_policy, &belief, &root, a, horizon, ConsistencyParams::infinite())
                        .unwrap()
                })
                .sum();
            assert!((v - exact).abs() <= 1e-10, "{v} vs {exact}");
        }
    }
}
