//! Solvability tests: does a hindsight pair `(s_t, m(s_{t+k}))` really need
//! `k` steps?
//!
//! * [`InteractionTest`] resets a scratch environment to `s_t` and rolls the
//!   frozen lower-level policy greedily for at most `k - 1` steps.
//! * [`RndTest`] scores the pair's novelty against a random network
//!   distillation pair trained on pairs accepted at lower step counts.
//! * [`OracleTest`] uses the environment's exact step oracle.

use std::collections::VecDeque;

use crate::envs::{EnvError, EnvSnapshot, GoalEnv};
use crate::nn::{mse_loss, Activation, Adam, AdamConfig, Matrix, Mlp, NnError, OutputHead};
use crate::policy::GoalPolicy;

#[derive(Debug, thiserror::Error)]
pub enum TestError {
    #[error("interaction test needs an environment snapshot of s_t")]
    MissingSnapshot,
    #[error("environment has no exact step oracle")]
    NoOracle,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One candidate pair.
#[derive(Debug, Clone, Copy)]
pub struct TestQuery<'a> {
    pub snapshot: Option<&'a EnvSnapshot>,
    pub state: &'a [f64],
    pub goal: &'a [f64],
    pub k: usize,
}

pub trait SolvabilityTest {
    /// `true` when the pair needs at least `k` steps.
    fn test(&mut self, query: &TestQuery) -> Result<bool, TestError>;

    fn test_batch(&mut self, queries: &[TestQuery]) -> Result<Vec<bool>, TestError> {
        queries.iter().map(|q| self.test(q)).collect()
    }
}

impl<F> SolvabilityTest for F
where
    F: FnMut(&TestQuery) -> Result<bool, TestError>,
{
    fn test(&mut self, query: &TestQuery) -> Result<bool, TestError> {
        self(query)
    }
}

/// Rolls `policy` greedily from `snapshot` toward `goal` for at most `k - 1`
/// steps and returns `true` iff the goal was not reached. `env` is returned
/// to its pre-test state. A goal already achieved at `s_t` gives `false`;
/// for `k = 1` any other goal gives `true`.
pub fn interaction_test<E: GoalEnv, P: GoalPolicy<E> + ?Sized>(
    env: &mut E,
    snapshot: &EnvSnapshot,
    goal: &[f64],
    k: usize,
    policy: &P,
) -> Result<bool, TestError> {
    let before = env.snapshot();
    let outcome = (|| {
        env.restore(snapshot)?;
        let mut state = env.state();
        if env.is_success(&state, goal) {
            return Ok(false);
        }
        env.set_goal(goal)?;
        for _ in 1..k {
            let action = policy.greedy_action(env, &state, goal);
            state = env.step(&action)?.next_state;
            if env.is_success(&state, goal) {
                return Ok(false);
            }
        }
        Ok(true)
    })();
    env.restore(&before)?;
    outcome
}

/// Interaction test bound to a scratch environment and a frozen policy.
/// Batches are rolled out in lockstep so each policy step is one forward pass.
pub struct InteractionTest<'p, E, P: ?Sized> {
    scratch: E,
    policy: &'p P,
}

impl<'p, E: GoalEnv, P: GoalPolicy<E> + ?Sized> InteractionTest<'p, E, P> {
    pub fn new(scratch: E, policy: &'p P) -> Self {
        Self { scratch, policy }
    }
}

impl<E: GoalEnv, P: GoalPolicy<E> + ?Sized> SolvabilityTest for InteractionTest<'_, E, P> {
    fn test(&mut self, query: &TestQuery) -> Result<bool, TestError> {
        let snapshot = query.snapshot.ok_or(TestError::MissingSnapshot)?;
        interaction_test(&mut self.scratch, snapshot, query.goal, query.k, self.policy)
    }

    fn test_batch(&mut self, queries: &[TestQuery]) -> Result<Vec<bool>, TestError> {
        let mut envs = Vec::with_capacity(queries.len());
        let mut states = Vec::with_capacity(queries.len());
        let mut verdict = vec![true; queries.len()];
        let mut active = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            let snapshot = q.snapshot.ok_or(TestError::MissingSnapshot)?;
            let mut env = self.scratch.clone();
            env.restore(snapshot)?;
            let state = env.state();
            if env.is_success(&state, q.goal) {
                verdict[i] = false;
            } else {
                env.set_goal(q.goal)?;
                if q.k > 1 {
                    active.push(i);
                }
            }
            envs.push(env);
            states.push(state);
        }
        let mut step = 1;
        while !active.is_empty() {
            let pairs: Vec<(&[f64], &[f64])> = active
                .iter()
                .map(|&i| (states[i].as_slice(), queries[i].goal))
                .collect();
            let actions = self.policy.greedy_actions(&self.scratch, &pairs);
            let mut still = Vec::with_capacity(active.len());
            for (&i, action) in active.iter().zip(&actions) {
                let next = envs[i].step(action)?.next_state;
                if envs[i].is_success(&next, queries[i].goal) {
                    verdict[i] = false;
                } else if step + 1 < queries[i].k {
                    still.push(i);
                }
                states[i] = next;
            }
            active = still;
            step += 1;
        }
        Ok(verdict)
    }
}

/// Ground truth from the environment's exact step oracle: `true` iff the
/// minimal number of steps equals `k`.
pub struct OracleTest<'e, E> {
    env: &'e E,
}

impl<'e, E: GoalEnv> OracleTest<'e, E> {
    pub fn new(env: &'e E) -> Self {
        Self { env }
    }
}

impl<E: GoalEnv> SolvabilityTest for OracleTest<'_, E> {
    fn test(&mut self, query: &TestQuery) -> Result<bool, TestError> {
        let steps = self
            .env
            .oracle_steps(query.state, query.goal)
            .ok_or(TestError::NoOracle)?;
        Ok(steps == Some(query.k))
    }
}

/// How an [`RndPair`] turns a novelty score into a verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoveltyThreshold {
    Fixed(f64),
    /// Quantile `q` of the scores of recently observed embeddings.
    Percentile { q: f64 },
}

impl Default for NoveltyThreshold {
    fn default() -> Self {
        NoveltyThreshold::Percentile { q: 0.9 }
    }
}

/// Random network distillation: a frozen random target network and a
/// predictor trained to match it on observed embeddings.
#[derive(Debug, Clone)]
pub struct RndPair {
    target: Mlp,
    predictor: Mlp,
    optimizer: Adam,
    pub threshold: NoveltyThreshold,
    recent_scores: VecDeque<f64>,
    window: usize,
}

impl RndPair {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        seed: u64,
        threshold: NoveltyThreshold,
    ) -> Result<Self, NnError> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        let target = Mlp::new(&sizes, Activation::Tanh, OutputHead::Linear, seed)?;
        let predictor = Mlp::new(
            &sizes,
            Activation::Tanh,
            OutputHead::Linear,
            seed.wrapping_add(1),
        )?;
        let optimizer = Adam::new(&predictor, AdamConfig::with_lr(1e-3));
        Ok(Self {
            target,
            predictor,
            optimizer,
            threshold,
            recent_scores: VecDeque::new(),
            window: 1000,
        })
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window.max(1);
        self
    }

    /// Per-row mean squared difference between target and predictor.
    pub fn scores(&self, embeddings: &Matrix) -> Result<Vec<f64>, NnError> {
        let t = self.target.predict(embeddings)?;
        let p = self.predictor.predict(embeddings)?;
        Ok((0..t.rows())
            .map(|r| {
                let d: f64 = t
                    .row(r)
                    .iter()
                    .zip(p.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d / t.cols() as f64
            })
            .collect())
    }

    pub fn score(&self, embedding: &[f64]) -> Result<f64, NnError> {
        let m = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
        Ok(self.scores(&m)?[0])
    }

    /// One optimizer step pulling the predictor toward the target on
    /// `embeddings`; the post-step scores join the sliding window. Returns
    /// the pre-step loss.
    pub fn observe(&mut self, embeddings: &Matrix) -> Result<f64, NnError> {
        if embeddings.rows() == 0 {
            return Ok(0.0);
        }
        let target = self.target.predict(embeddings)?;
        let (pred, cache) = self.predictor.forward(embeddings)?;
        let (loss, grad) = mse_loss(&pred, &target)?;
        let grads = self.predictor.backward(&cache, &grad)?;
        self.optimizer.step(&mut self.predictor, &grads)?;
        for s in self.scores(embeddings)? {
            if self.recent_scores.len() == self.window {
                self.recent_scores.pop_front();
            }
            self.recent_scores.push_back(s);
        }
        Ok(loss)
    }

    pub fn current_threshold(&self) -> f64 {
        match self.threshold {
            NoveltyThreshold::Fixed(t) => t,
            NoveltyThreshold::Percentile { q } => {
                if self.recent_scores.is_empty() {
                    return f64::NEG_INFINITY;
                }
                let mut sorted: Vec<f64> = self.recent_scores.iter().copied().collect();
                sorted.sort_by(f64::total_cmp);
                let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
                sorted[idx]
            }
        }
    }

    /// `true` iff the novelty score exceeds the threshold.
    pub fn is_novel(&self, embedding: &[f64]) -> Result<bool, NnError> {
        Ok(self.score(embedding)? > self.current_threshold())
    }
}

/// RND-based test. `pairs[k - 2]` judges `k`-step candidates and should have
/// been trained on pairs accepted at steps `1..k`.
pub struct RndTest<'a, E> {
    env: &'a E,
    pairs: &'a [RndPair],
}

impl<'a, E: GoalEnv> RndTest<'a, E> {
    pub fn new(env: &'a E, pairs: &'a [RndPair]) -> Self {
        Self { env, pairs }
    }
}

impl<E: GoalEnv> SolvabilityTest for RndTest<'_, E> {
    fn test(&mut self, query: &TestQuery) -> Result<bool, TestError> {
        if self.env.is_success(query.state, query.goal) {
            return Ok(false);
        }
        if query.k <= 1 {
            return Ok(true);
        }
        let pair = &self.pairs[(query.k - 2).min(self.pairs.len() - 1)];
        Ok(pair.is_novel(&self.env.encode(query.state, query.goal))?)
    }
}

/// Confusion counts of a test against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TestReport {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl TestReport {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_positive += 1,
            (true, false) => self.false_positive += 1,
            (false, false) => self.true_negative += 1,
            (false, true) => self.false_negative += 1,
        }
    }

    /// 1 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        let p = self.true_positive + self.false_positive;
        if p == 0 {
            1.0
        } else {
            self.true_positive as f64 / p as f64
        }
    }

    /// 1 when there were no actual positives.
    pub fn recall(&self) -> f64 {
        let p = self.true_positive + self.false_negative;
        if p == 0 {
            1.0
        } else {
            self.true_positive as f64 / p as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            1.0
        } else {
            (self.true_positive + self.true_negative) as f64 / n as f64
        }
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    pub const CSV_HEADER: &'static str = "threshold,tp,fp,tn,fn,precision,recall";

    pub fn csv_row(&self, threshold: f64) -> String {
        format!(
            "{threshold},{},{},{},{},{},{}",
            self.true_positive,
            self.false_positive,
            self.true_negative,
            self.false_negative,
            self.precision(),
            self.recall()
        )
    }
}

/// A candidate pair with everything a test may need.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub snapshot: EnvSnapshot,
    pub state: Vec<f64>,
    pub goal: Vec<f64>,
    pub k: usize,
}

impl Candidate {
    pub fn query(&self) -> TestQuery<'_> {
        TestQuery {
            snapshot: Some(&self.snapshot),
            state: &self.state,
            goal: &self.goal,
            k: self.k,
        }
    }
}

/// Scores `tester` against the oracle truth "minimal steps == k".
pub fn evaluate_test<E: GoalEnv, T: SolvabilityTest + ?Sized>(
    env: &E,
    tester: &mut T,
    candidates: &[Candidate],
) -> Result<TestReport, TestError> {
    let queries: Vec<TestQuery> = candidates.iter().map(Candidate::query).collect();
    let verdicts = tester.test_batch(&queries)?;
    let mut report = TestReport::default();
    for (c, predicted) in candidates.iter().zip(verdicts) {
        let steps = env.oracle_steps(&c.state, &c.goal).ok_or(TestError::NoOracle)?;
        report.record(predicted, steps == Some(c.k));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Action, GridLayout, GridWorldConfig, GridWorldEnv};
    use crate::policy::BfsPolicy;

    fn grid(text: &str) -> GridWorldEnv {
        let layout = GridLayout::parse(text).unwrap();
        let mut env = GridWorldEnv::new(GridWorldConfig {
            size: layout.map.size(),
            ..Default::default()
        });
        env.set_layout(layout.map, layout.start.unwrap(), layout.goal.unwrap())
            .unwrap();
        env
    }

    #[test]
    fn one_step_reachable_goal_fails_k2() {
        let mut env = grid(
            "....\n\
             ..G.\n\
             .S..\n\
             ....",
        );
        let snap = env.snapshot();
        assert!(!interaction_test(&mut env, &snap, &[2.0, 2.0], 2, &BfsPolicy).unwrap());
    }

    #[test]
    fn distance_two_passes_k2_with_optimal_policy() {
        let mut env = grid(
            "....\n\
             ...G\n\
             .S..\n\
             ....",
        );
        let snap = env.snapshot();
        assert!(interaction_test(&mut env, &snap, &[3.0, 2.0], 2, &BfsPolicy).unwrap());
        assert!(!interaction_test(&mut env, &snap, &[3.0, 2.0], 3, &BfsPolicy).unwrap());
    }

    #[test]
    fn k1_accepts_any_non_trivial_goal() {
        let mut env = grid(
            "....\n\
             ...G\n\
             .S..\n\
             ....",
        );
        let snap = env.snapshot();
        assert!(interaction_test(&mut env, &snap, &[3.0, 2.0], 1, &BfsPolicy).unwrap());
        assert!(!interaction_test(&mut env, &snap, &[1.0, 1.0], 1, &BfsPolicy).unwrap());
        assert!(!interaction_test(&mut env, &snap, &[1.0, 1.0], 3, &BfsPolicy).unwrap());
    }

    #[test]
    fn interaction_test_leaves_environment_untouched() {
        let mut env = grid(
            ".....\n\
             ...G.\n\
             .S...\n\
             .....\n\
             .....",
        );
        env.step(&Action::Discrete(4)).unwrap();
        let before = env.snapshot();
        let probe = {
            let mut e = env.clone();
            e.step(&Action::Discrete(0)).unwrap();
            e.snapshot()
        };
        interaction_test(&mut env, &probe, &[4.0, 4.0], 4, &BfsPolicy).unwrap();
        assert_eq!(env.snapshot(), before);
    }

    #[test]
    fn batched_and_single_interaction_agree() {
        let mut env = GridWorldEnv::new(GridWorldConfig::default());
        let mut candidates = Vec::new();
        for seed in 0..10 {
            env.reset(seed);
            let snap = env.snapshot();
            let state = env.state();
            for x in 0..8 {
                for y in 0..8 {
                    if env.map().is_free((x, y)) {
                        for k in 1..5 {
                            candidates.push(Candidate {
                                snapshot: snap.clone(),
                                state: state.clone(),
                                goal: vec![x as f64, y as f64],
                                k,
                            });
                        }
                    }
                }
            }
        }
        let queries: Vec<TestQuery> = candidates.iter().map(Candidate::query).collect();
        let mut tester = InteractionTest::new(env.clone(), &BfsPolicy);
        let batched = tester.test_batch(&queries).unwrap();
        for (q, b) in queries.iter().zip(batched) {
            assert_eq!(tester.test(q).unwrap(), b);
        }
    }

    #[test]
    fn report_metrics() {
        let mut r = TestReport::default();
        r.record(true, true);
        r.record(true, false);
        r.record(false, true);
        r.record(false, false);
        assert_eq!(r.precision(), 0.5);
        assert_eq!(r.recall(), 0.5);
        assert_eq!(r.csv_row(0.1), "0.1,1,1,1,1,0.5,0.5");
    }

    #[test]
    fn rnd_threshold_extremes() {
        let mut pair = RndPair::new(4, &[16], 4, 3, NoveltyThreshold::Fixed(f64::INFINITY)).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        assert!(!pair.is_novel(&x).unwrap());
        pair.threshold = NoveltyThreshold::Fixed(f64::NEG_INFINITY);
        assert!(pair.is_novel(&x).unwrap());
    }

    #[test]
    fn rnd_score_drops_on_observed_embedding() {
        let mut pair = RndPair::new(4, &[32], 4, 9, NoveltyThreshold::default()).unwrap();
        let x = Matrix::from_rows(&[[0.5, -0.2, 1.0, 0.0]]).unwrap();
        let before = pair.score(x.row(0)).unwrap();
        for _ in 0..300 {
            pair.observe(&x).unwrap();
        }
        let after = pair.score(x.row(0)).unwrap();
        assert!(after < before * 0.01, "{before} -> {after}");
        assert!(!pair.is_novel(x.row(0)).unwrap() || after <= pair.current_threshold() * 1.0001);
    }
}
