//! Hindsight relabeling and the per-step-count example buffers.

use std::collections::VecDeque;
use std::io::{self, Write};

use rand::Rng;

use crate::envs::{Action, EnvSnapshot, GoalEnv};
use crate::solvability::{SolvabilityTest, TestError, TestQuery};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub goal: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Goal reached on arrival in `next_state`. Horizon cut-offs are not
    /// terminal.
    pub terminal: bool,
}

/// One episode: transitions in order, plus the environment snapshot taken
/// before each transition when the rollout recorded them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub transitions: Vec<Transition>,
    pub snapshots: Vec<EnvSnapshot>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// State `s_t` for `t` in `0..=len`.
    pub fn state_at(&self, t: usize) -> &[f64] {
        if t == self.transitions.len() {
            &self.transitions[t - 1].next_state
        } else {
            &self.transitions[t].state
        }
    }

    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }

    pub fn final_success(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.terminal)
    }
}

/// Supervised example: from `state`, to reach `goal`, take `action`. The
/// goal was achieved `k` steps later in the source trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HidExample {
    pub state: Vec<f64>,
    pub goal: Vec<f64>,
    pub action: Action,
    pub k: usize,
}

/// One example per transition with the next state's goal as target.
/// Stalls, transitions whose achieved goal is exactly unchanged, are
/// skipped. The comparison is exact on purpose: with a tolerance as large
/// as one step, every continuous move would count as a stall.
pub fn relabel_one_step<E: GoalEnv>(env: &E, trace: &EpisodeTrace) -> Vec<HidExample> {
    trace
        .transitions
        .iter()
        .filter_map(|tr| {
            let goal = env.map_to_goal(&tr.next_state);
            if env.map_to_goal(&tr.state) == goal {
                return None;
            }
            Some(HidExample {
                state: tr.state.clone(),
                goal,
                action: tr.action.clone(),
                k: 1,
            })
        })
        .collect()
}

/// `k`-step hindsight pairs `(s_t, m(s_{t+k}))` labelled with `a_t`, kept
/// only when `tester` says the pair needs at least `k` steps. Pairs whose
/// goal is already achieved at `s_t` are dropped without testing.
pub fn relabel_k_step<E: GoalEnv, T: SolvabilityTest + ?Sized>(
    env: &E,
    trace: &EpisodeTrace,
    k: usize,
    tester: &mut T,
) -> Result<Vec<HidExample>, TestError> {
    assert!(k >= 2, "k-step relabeling needs k >= 2");
    if k > trace.len() {
        return Ok(Vec::new());
    }
    let mut candidates = Vec::new();
    for t in 0..=trace.len() - k {
        let state = trace.state_at(t);
        let goal = env.map_to_goal(trace.state_at(t + k));
        if env.goals_match(&env.map_to_goal(state), &goal) {
            continue;
        }
        candidates.push((t, goal));
    }
    let queries: Vec<TestQuery> = candidates
        .iter()
        .map(|(t, goal)| TestQuery {
            snapshot: trace.snapshots.get(*t),
            state: trace.state_at(*t),
            goal,
            k,
        })
        .collect();
    let verdicts = tester.test_batch(&queries)?;
    Ok(candidates
        .iter()
        .zip(verdicts)
        .filter(|(_, keep)| *keep)
        .map(|((t, goal), _)| HidExample {
            state: trace.state_at(*t).to_vec(),
            goal: goal.clone(),
            action: trace.transitions[*t].action.clone(),
            k,
        })
        .collect())
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BufferError {
    #[error("all buffers are empty")]
    Empty,
    #[error("example has k = {k}, buffers hold k in 1..={max_k}")]
    KOutOfRange { k: usize, max_k: usize },
}

/// FIFO rings of examples, one per step count `k` (or a single merged ring).
#[derive(Debug, Clone)]
pub struct KBufferSet {
    rings: Vec<VecDeque<HidExample>>,
    capacity: usize,
    max_k: usize,
    merged: bool,
}

impl KBufferSet {
    /// Separate rings `B_1..B_max_k`.
    pub fn new(max_k: usize, capacity: usize) -> Self {
        Self {
            rings: vec![VecDeque::new(); max_k],
            capacity,
            max_k,
            merged: false,
        }
    }

    /// One ring holding examples of every `k` up to `max_k`.
    pub fn merged(max_k: usize, capacity: usize) -> Self {
        Self {
            rings: vec![VecDeque::new()],
            capacity,
            max_k,
            merged: true,
        }
    }

    pub fn max_k(&self) -> usize {
        self.max_k
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_len(&self) -> usize {
        self.rings.iter().map(VecDeque::len).sum()
    }

    /// Number of stored examples with step count `k`.
    pub fn len_k(&self, k: usize) -> usize {
        if self.merged {
            self.rings[0].iter().filter(|e| e.k == k).count()
        } else {
            self.rings.get(k.wrapping_sub(1)).map_or(0, VecDeque::len)
        }
    }

    /// Sizes of `B_1..B_max_k`.
    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.max_k).map(|k| self.len_k(k)).collect()
    }

    pub fn iter_k(&self, k: usize) -> impl Iterator<Item = &HidExample> {
        let ring = if self.merged { 0 } else { k - 1 };
        self.rings[ring].iter().filter(move |e| e.k == k)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HidExample> {
        self.rings.iter().flatten()
    }

    pub fn store(&mut self, example: HidExample) -> Result<(), BufferError> {
        if example.k == 0 || example.k > self.max_k {
            return Err(BufferError::KOutOfRange {
                k: example.k,
                max_k: self.max_k,
            });
        }
        let ring = if self.merged {
            &mut self.rings[0]
        } else {
            &mut self.rings[example.k - 1]
        };
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        if self.capacity > 0 {
            ring.push_back(example);
        }
        Ok(())
    }

    pub fn store_all(
        &mut self,
        examples: impl IntoIterator<Item = HidExample>,
    ) -> Result<(), BufferError> {
        examples.into_iter().try_for_each(|e| self.store(e))
    }

    /// `total_size` examples drawn with replacement; each draw picks a ring
    /// with probability proportional to its size and an example uniformly
    /// within it.
    pub fn sample_joint_minibatch<R: Rng + ?Sized>(
        &self,
        total_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&HidExample>, BufferError> {
        let total = self.total_len();
        if total == 0 {
            return Err(BufferError::Empty);
        }
        Ok((0..total_size)
            .map(|_| {
                let mut u = rng.gen_range(0..total);
                for ring in &self.rings {
                    if u < ring.len() {
                        return &ring[u];
                    }
                    u -= ring.len();
                }
                unreachable!()
            })
            .collect())
    }

    /// Debug dump: one example per line as `k,action...,state...,goal...`.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in self.iter() {
            let mut fields = vec![e.k.to_string()];
            match &e.action {
                Action::Discrete(a) => fields.push(a.to_string()),
                Action::Continuous(v) => fields.extend(v.iter().map(|x| x.to_string())),
            }
            fields.extend(e.state.iter().map(|x| x.to_string()));
            fields.extend(e.goal.iter().map(|x| x.to_string()));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HerStrategy {
    /// Goal achieved at the end of the episode.
    Final,
    /// `k_future` goals per transition, each achieved at a uniformly drawn
    /// strictly later step.
    Future { k_future: usize },
}

/// Relabeled copies of `trace`'s transitions with rewards and terminal flags
/// recomputed under the environment's reward function.
pub fn her_relabel<E: GoalEnv, R: Rng + ?Sized>(
    env: &E,
    trace: &EpisodeTrace,
    strategy: HerStrategy,
    rng: &mut R,
) -> Vec<Transition> {
    let n = trace.len();
    if n == 0 {
        return Vec::new();
    }
    let relabel = |tr: &Transition, goal: Vec<f64>| Transition {
        state: tr.state.clone(),
        reward: env.reward(&tr.next_state, &goal),
        terminal: env.is_success(&tr.next_state, &goal),
        goal,
        action: tr.action.clone(),
        next_state: tr.next_state.clone(),
    };
    match strategy {
        HerStrategy::Final => {
            let goal = env.map_to_goal(trace.state_at(n));
            trace
                .transitions
                .iter()
                .map(|tr| relabel(tr, goal.clone()))
                .collect()
        }
        HerStrategy::Future { k_future } => {
            let mut out = Vec::with_capacity(n * k_future);
            for (t, tr) in trace.transitions.iter().enumerate() {
                for _ in 0..k_future {
                    let later = rng.gen_range(t + 1..=n);
                    out.push(relabel(tr, env.map_to_goal(trace.state_at(later))));
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BitFlipConfig, BitFlipEnv, GoalEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(k: usize, tag: f64) -> HidExample {
        HidExample {
            state: vec![tag],
            goal: vec![tag],
            action: Action::Discrete(0),
            k,
        }
    }

    fn bitflip_trace(env: &mut BitFlipEnv, actions: &[usize]) -> EpisodeTrace {
        let mut trace = EpisodeTrace::default();
        for &a in actions {
            let state = env.state();
            let snap = env.snapshot();
            let r = env.step(&Action::Discrete(a)).unwrap();
            trace.snapshots.push(snap);
            trace.transitions.push(Transition {
                state,
                goal: env.goal(),
                action: Action::Discrete(a),
                reward: r.reward,
                next_state: r.next_state,
                terminal: r.success,
            });
        }
        trace
    }

    #[test]
    fn one_step_relabel_bitflip() {
        let mut env = BitFlipEnv::new(BitFlipConfig {
            bits: 3,
            ..Default::default()
        });
        env.set_state(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        let trace = bitflip_trace(&mut env, &[2]);
        let ex = relabel_one_step(&env, &trace);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].state, vec![0.0, 0.0, 0.0]);
        assert_eq!(ex[0].goal, vec![0.0, 0.0, 1.0]);
        assert_eq!(ex[0].action, Action::Discrete(2));
        assert_eq!(ex[0].k, 1);
    }

    #[test]
    fn one_step_relabel_counts_every_non_stalling_transition() {
        let mut env = BitFlipEnv::new(BitFlipConfig {
            bits: 4,
            horizon: Some(10),
            ..Default::default()
        });
        env.reset(1);
        let trace = bitflip_trace(&mut env, &[0, 1, 2, 3, 0, 1]);
        assert!(trace.is_chained());
        assert_eq!(relabel_one_step(&env, &trace).len(), 6);
    }

    #[test]
    fn k_step_beyond_trace_is_empty() {
        let mut env = BitFlipEnv::new(BitFlipConfig {
            bits: 4,
            ..Default::default()
        });
        env.reset(1);
        let trace = bitflip_trace(&mut env, &[0, 1]);
        let mut always = |_: &TestQuery| -> Result<bool, TestError> { Ok(true) };
        assert!(relabel_k_step(&env, &trace, 3, &mut always).unwrap().is_empty());
        assert_eq!(relabel_k_step(&env, &trace, 2, &mut always).unwrap().len(), 1);
    }

    #[test]
    fn k_step_skips_zero_step_pairs() {
        let mut env = BitFlipEnv::new(BitFlipConfig {
            bits: 4,
            ..Default::default()
        });
        env.reset(1);
        // Flip and flip back: s_2 == s_0.
        let trace = bitflip_trace(&mut env, &[1, 1]);
        let mut always = |_: &TestQuery| -> Result<bool, TestError> { Ok(true) };
        assert!(relabel_k_step(&env, &trace, 2, &mut always).unwrap().is_empty());
    }

    #[test]
    fn buffer_fifo_eviction_and_routing() {
        let mut b = KBufferSet::new(3, 2);
        b.store(ex(1, 1.0)).unwrap();
        b.store(ex(1, 2.0)).unwrap();
        b.store(ex(1, 3.0)).unwrap();
        b.store(ex(2, 4.0)).unwrap();
        assert_eq!(b.sizes(), vec![2, 1, 0]);
        let tags: Vec<f64> = b.iter_k(1).map(|e| e.state[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0]);
        assert!(b.iter_k(2).all(|e| e.k == 2));
        assert_eq!(
            b.store(ex(4, 0.0)),
            Err(BufferError::KOutOfRange { k: 4, max_k: 3 })
        );
    }

    #[test]
    fn sampling_from_empty_fails_and_oversampling_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = KBufferSet::new(2, 10);
        assert_eq!(b.sample_joint_minibatch(4, &mut rng), Err(BufferError::Empty));
        b.store(ex(1, 1.0)).unwrap();
        b.store(ex(1, 2.0)).unwrap();
        let batch = b.sample_joint_minibatch(7, &mut rng).unwrap();
        assert_eq!(batch.len(), 7);
        assert!(batch.iter().all(|e| e.k == 1));
    }

    #[test]
    fn merged_buffer_reports_per_k_sizes() {
        let mut b = KBufferSet::merged(3, 3);
        for (k, tag) in [(1, 0.0), (2, 1.0), (3, 2.0), (3, 3.0)] {
            b.store(ex(k, tag)).unwrap();
        }
        assert_eq!(b.total_len(), 3);
        assert_eq!(b.sizes(), vec![0, 1, 2]);
    }

    #[test]
    fn dump_format() {
        let mut b = KBufferSet::new(2, 4);
        b.store(HidExample {
            state: vec![0.0, 1.0],
            goal: vec![1.0, 1.0],
            action: Action::Discrete(0),
            k: 1,
        })
        .unwrap();
        let mut out = Vec::new();
        b.dump_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "1,0,0,1,1,1\n");
    }

    #[test]
    fn her_final_and_future() {
        let mut env = BitFlipEnv::new(BitFlipConfig {
            bits: 4,
            horizon: Some(10),
            ..Default::default()
        });
        env.set_state(&[0.0; 4], &[1.0; 4]).unwrap();
        let trace = bitflip_trace(&mut env, &[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let last = env.map_to_goal(trace.state_at(3));
        let fin = her_relabel(&env, &trace, HerStrategy::Final, &mut rng);
        assert!(fin.iter().all(|t| t.goal == last));
        assert!(fin[2].terminal && fin[2].reward == 1.0);
        assert!(!fin[0].terminal && fin[0].reward == 0.0);

        let fut = her_relabel(&env, &trace, HerStrategy::Future { k_future: 4 }, &mut rng);
        assert_eq!(fut.len(), 12);
        for (i, tr) in fut.iter().enumerate() {
            let t = i / 4;
            let later: Vec<Vec<f64>> = (t + 1..=3).map(|j| trace.state_at(j).to_vec()).collect();
            assert!(later.contains(&tr.goal));
            assert_eq!(tr.terminal, tr.goal == tr.next_state);
        }
    }
}
