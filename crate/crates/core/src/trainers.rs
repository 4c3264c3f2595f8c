//! Curriculum (PCHID) and synchronous (PEHID) training of goal-conditioned
//! policies from hindsight inverse dynamics.
//!
//! Both trainers share one code path. They differ in three places only:
//!
//! * PCHID keeps a ring per step count and starts from `K = [1]`, appending
//!   `max(K) + 1` whenever held-out accuracy plateaus. Its solvability tester
//!   is a frozen copy of the policy taken at each growth.
//! * PEHID uses `K = [1..max_k]` from the start, one merged ring, no
//!   convergence gate, and tests against the policy as it stands at the end
//!   of each rollout.
//!
//! Updates are purely supervised and never read rewards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, EnvError, GoalEnv};
use crate::hid::{
    relabel_k_step, relabel_one_step, BufferError, EpisodeTrace, HidExample, KBufferSet,
    Transition,
};
use crate::nn::{
    argmax, cross_entropy_with_logits, mse_loss, Adam, AdamConfig, Gradients, Matrix, NnError,
};
use crate::policy::{encode_batch, ActionMode, Exploration, GoalPolicy, PolicyNet, Target};
use crate::seeding::{derive_seed, SeedStreams, Stream};
use crate::solvability::{
    InteractionTest, NoveltyThreshold, OracleTest, RndPair, RndTest, SolvabilityTest, TestError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation needs at least one episode")]
    NoEpisodes,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Test(#[from] TestError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which solvability test filters `k >= 2` examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TesterKind {
    Interaction,
    Rnd(NoveltyThreshold),
    /// Exact step oracle; only for environments that provide one.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Grow `K` one level at a time on convergence (PCHID).
    Continuation,
    /// All levels at once in a merged buffer (PEHID).
    Synchronous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PchidConfig {
    pub episodes: usize,
    pub max_k: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub updates_per_episode: usize,
    /// Per-level ring capacity. The merged ring holds `max_k` times this.
    pub buffer_capacity: usize,
    /// Fraction of incoming examples held out for validation.
    pub validation_fraction: f64,
    pub validation_capacity: usize,
    /// Episodes over which held-out accuracy must stay flat.
    pub convergence_window: usize,
    /// Maximum accuracy range within the window.
    pub convergence_threshold: f64,
    /// Minimum size of `B_max(K)` before `K` may grow.
    pub min_growth_examples: usize,
    pub exploration: Exploration,
    pub tester: TesterKind,
    /// Evaluate every this many episodes; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PchidConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            max_k: 5,
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            batch_size: 64,
            updates_per_episode: 40,
            buffer_capacity: 50_000,
            validation_fraction: 0.1,
            validation_capacity: 5_000,
            convergence_window: 20,
            convergence_threshold: 0.01,
            min_growth_examples: 500,
            exploration: Exploration::default(),
            tester: TesterKind::Interaction,
            eval_every: 0,
            eval_episodes: 100,
        }
    }
}

impl PchidConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.max_k == 0 || self.max_k > horizon {
            return fail(format!("max_k = {} must lie in 1..={horizon}", self.max_k));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)".into());
        }
        if self.convergence_window == 0 {
            return fail("convergence_window must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer sizes must be positive".into());
        }
        Ok(())
    }
}

/// Plateau detector on a rolling window of validation accuracies.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    window: usize,
    threshold: f64,
    history: Vec<f64>,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, threshold: f64) -> Self {
        Self {
            window,
            threshold,
            history: Vec::new(),
        }
    }

    pub fn push(&mut self, accuracy: f64) {
        self.history.push(accuracy);
        if self.history.len() > self.window {
            self.history.remove(0);
        }
    }

    /// Full window whose accuracies span less than the threshold.
    pub fn converged(&self) -> bool {
        if self.history.len() < self.window {
            return false;
        }
        let lo = self.history.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo < self.threshold
    }

    /// Starts a fresh window; called when `K` grows.
    pub fn reset(&mut self) {
        self.history.clear();
    }
}

/// One curriculum step.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthEvent {
    pub episode: usize,
    pub new_k: usize,
    /// Held-out accuracy on levels below `new_k` just before growth.
    pub accuracy_before: f64,
    /// Same measurement at the next growth or at the end of training.
    pub accuracy_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
    pub k_max: usize,
    /// `|B_1|..|B_max_k|`.
    pub buffer_sizes: Vec<usize>,
    pub validation_accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub eval_success: Option<f64>,
    pub intrinsic_reward: Option<f64>,
    pub mix_weight: Option<f64>,
}

impl EpisodeMetrics {
    pub fn new(episode: usize, trace: &EpisodeTrace) -> Self {
        Self {
            episode,
            success: trace.final_success(),
            steps: trace.len(),
            k_max: 0,
            buffer_sizes: Vec::new(),
            validation_accuracy: None,
            loss: None,
            eval_success: None,
            intrinsic_reward: None,
            mix_weight: None,
        }
    }
}

/// Runs one episode from `reset(seed)`. The snapshot before every step is
/// recorded when `snapshots` is set.
pub fn rollout<E: GoalEnv>(
    env: &mut E,
    seed: u64,
    snapshots: bool,
    mut act: impl FnMut(&E, &[f64], &[f64]) -> Action,
) -> Result<EpisodeTrace> {
    let (mut state, goal) = env.reset(seed);
    let mut trace = EpisodeTrace::default();
    loop {
        if snapshots {
            trace.snapshots.push(env.snapshot());
        }
        let action = act(env, &state, &goal);
        let step = env.step(&action)?;
        let done = step.done;
        trace.transitions.push(Transition {
            state: std::mem::replace(&mut state, step.next_state.clone()),
            goal: goal.clone(),
            action,
            reward: step.reward,
            next_state: step.next_state,
            terminal: step.success,
        });
        if done {
            return Ok(trace);
        }
    }
}

/// Greedy success rate over `n_episodes` fresh episodes seeded from `seed`.
pub fn evaluate<E: GoalEnv, P: GoalPolicy<E> + ?Sized>(
    env: &E,
    policy: &P,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(TrainError::NoEpisodes);
    }
    let mut env = env.clone();
    let mut successes = 0;
    for i in 0..n_episodes {
        let trace = rollout(&mut env, derive_seed(seed, i as u64), false, |e, s, g| {
            policy.greedy_action(e, s, g)
        })?;
        successes += usize::from(trace.final_success());
    }
    Ok(successes as f64 / n_episodes as f64)
}

/// Behaviour action of `policy`: greedy when `explore` is off, otherwise
/// epsilon-random (discrete) or Gaussian-perturbed and clipped (continuous).
pub fn act<E: GoalEnv, R: Rng + ?Sized>(
    env: &E,
    policy: &PolicyNet,
    state: &[f64],
    goal: &[f64],
    explore: bool,
    rng: &mut R,
) -> Action {
    policy.act(env, state, goal, explore, rng)
}

/// Loss and gradient of the supervised action-prediction objective on
/// `batch`: cross-entropy for discrete actions, mean squared error in
/// network units for continuous ones.
pub fn supervised_gradient<E: GoalEnv>(
    env: &E,
    policy: &PolicyNet,
    batch: &[&HidExample],
) -> Result<(f64, Gradients)> {
    let pairs: Vec<(&[f64], &[f64])> = batch
        .iter()
        .map(|e| (e.state.as_slice(), e.goal.as_slice()))
        .collect();
    let input = encode_batch(env, &pairs);
    let (out, cache) = policy.net.forward(&input)?;
    let (loss, grad) = match policy.mode {
        ActionMode::Discrete(_) => {
            let labels: Vec<usize> = batch
                .iter()
                .map(|e| match policy.target_of(&e.action) {
                    Target::Class(c) => c,
                    Target::Vector(_) => unreachable!(),
                })
                .collect();
            cross_entropy_with_logits(&out, &labels)?
        }
        ActionMode::Continuous { dim, .. } => {
            let mut data = Vec::with_capacity(batch.len() * dim);
            for e in batch {
                match policy.target_of(&e.action) {
                    Target::Vector(v) => data.extend(v),
                    Target::Class(_) => unreachable!(),
                }
            }
            mse_loss(&out, &Matrix::from_vec(batch.len(), dim, data)?)?
        }
    };
    Ok((loss, policy.net.backward(&cache, &grad)?))
}

/// Continuous predictions count as correct within half an action cap.
const CONTINUOUS_HIT_RADIUS: f64 = 0.5;

/// Fraction of `examples` whose action `policy` predicts; `None` when empty.
pub fn prediction_accuracy<'a, E: GoalEnv>(
    env: &E,
    policy: &PolicyNet,
    examples: impl IntoIterator<Item = &'a HidExample>,
) -> Option<f64> {
    let examples: Vec<&HidExample> = examples.into_iter().collect();
    if examples.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    for chunk in examples.chunks(512) {
        let pairs: Vec<(&[f64], &[f64])> = chunk
            .iter()
            .map(|e| (e.state.as_slice(), e.goal.as_slice()))
            .collect();
        let out = policy.outputs(env, &pairs);
        for (r, e) in chunk.iter().enumerate() {
            let row = out.row(r);
            hits += usize::from(match policy.target_of(&e.action) {
                Target::Class(c) => argmax(row) == c,
                Target::Vector(v) => {
                    let d2: f64 = row.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt() <= CONTINUOUS_HIT_RADIUS
                }
            });
        }
    }
    Some(hits as f64 / examples.len() as f64)
}

/// Buffers, curriculum state and solvability testers of one HID learner.
/// Usable on its own or as the auxiliary module of a combined learner.
#[derive(Debug, Clone)]
pub struct HidModule<E: GoalEnv> {
    config: PchidConfig,
    schedule: Schedule,
    scratch: E,
    k_list: Vec<usize>,
    buffers: KBufferSet,
    validation: KBufferSet,
    monitor: ConvergenceMonitor,
    tester_policy: Option<PolicyNet>,
    rnd: Vec<RndPair>,
    holdout_rng: ChaCha8Rng,
    sampling_rng: ChaCha8Rng,
    growth: Vec<GrowthEvent>,
    last_accuracy: Option<f64>,
}

impl<E: GoalEnv> HidModule<E> {
    pub fn new(env: &E, config: PchidConfig, schedule: Schedule, streams: SeedStreams) -> Result<Self> {
        config.validate(env.horizon())?;
        let max_k = config.max_k;
        let (buffers, validation, k_list) = match schedule {
            Schedule::Continuation => (
                KBufferSet::new(max_k, config.buffer_capacity),
                KBufferSet::new(max_k, config.validation_capacity),
                vec![1],
            ),
            Schedule::Synchronous => (
                KBufferSet::merged(max_k, config.buffer_capacity * max_k),
                KBufferSet::merged(max_k, config.validation_capacity * max_k),
                (1..=max_k).collect(),
            ),
        };
        let rnd = match config.tester {
            TesterKind::Rnd(threshold) => {
                let (ws, wg) = env.encoding_widths();
                (2..=max_k)
                    .map(|k| {
                        RndPair::new(
                            ws + wg,
                            &[64, 64],
                            16,
                            derive_seed(streams.seed(Stream::Tester), k as u64),
                            threshold,
                        )
                    })
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => Vec::new(),
        };
        Ok(Self {
            monitor: ConvergenceMonitor::new(config.convergence_window, config.convergence_threshold),
            config,
            schedule,
            scratch: env.clone(),
            k_list,
            buffers,
            validation,
            tester_policy: None,
            rnd,
            holdout_rng: streams.rng(Stream::Holdout),
            sampling_rng: streams.rng(Stream::Sampling),
            growth: Vec::new(),
            last_accuracy: None,
        })
    }

    pub fn config(&self) -> &PchidConfig {
        &self.config
    }

    pub fn k_list(&self) -> &[usize] {
        &self.k_list
    }

    pub fn buffers(&self) -> &KBufferSet {
        &self.buffers
    }

    pub fn validation(&self) -> &KBufferSet {
        &self.validation
    }

    pub fn growth(&self) -> &[GrowthEvent] {
        &self.growth
    }

    /// Novelty testers for levels `2..=max_k`; empty unless the RND tester
    /// is configured.
    pub fn rnd_pairs(&self) -> &[RndPair] {
        &self.rnd
    }

    pub fn last_accuracy(&self) -> Option<f64> {
        self.last_accuracy
    }

    pub fn needs_snapshots(&self) -> bool {
        self.config.tester == TesterKind::Interaction && self.k_list.iter().any(|&k| k > 1)
    }

    /// Relabels `trace` for every `k` in `K` and files the surviving
    /// examples into the training or validation buffers. `policy` is the
    /// current learner; the synchronous schedule tests against it directly.
    pub fn ingest(&mut self, trace: &EpisodeTrace, policy: &PolicyNet) -> Result<usize> {
        if self.schedule == Schedule::Synchronous {
            self.tester_policy = Some(policy.clone());
        }
        let mut accepted = relabel_one_step(&self.scratch, trace);
        for &k in self.k_list.iter().filter(|&&k| k > 1) {
            let found = match self.config.tester {
                TesterKind::Interaction => {
                    let frozen = self.tester_policy.as_ref().unwrap_or(policy);
                    let mut tester = InteractionTest::new(self.scratch.clone(), frozen);
                    relabel_k_step(&self.scratch, trace, k, &mut tester)?
                }
                TesterKind::Rnd(_) => {
                    let mut tester = RndTest::new(&self.scratch, &self.rnd);
                    relabel_k_step(&self.scratch, trace, k, &mut tester)?
                }
                TesterKind::Oracle => {
                    let mut tester = OracleTest::new(&self.scratch);
                    relabel_k_step(&self.scratch, trace, k, &mut tester as &mut dyn SolvabilityTest)?
                }
            };
            accepted.extend(found);
        }
        self.observe_rnd(&accepted)?;
        let n = accepted.len();
        for example in accepted {
            if self.holdout_rng.gen::<f64>() < self.config.validation_fraction {
                self.validation.store(example)?;
            } else {
                self.buffers.store(example)?;
            }
        }
        Ok(n)
    }

    /// Trains the predictor of level `k` on accepted examples with fewer
    /// than `k` steps.
    fn observe_rnd(&mut self, accepted: &[HidExample]) -> Result<()> {
        for (i, pair) in self.rnd.iter_mut().enumerate() {
            let k = i + 2;
            let rows: Vec<Vec<f64>> = accepted
                .iter()
                .filter(|e| e.k < k)
                .map(|e| self.scratch.encode(&e.state, &e.goal))
                .collect();
            if !rows.is_empty() {
                pair.observe(&Matrix::from_rows(&rows)?)?;
            }
        }
        Ok(())
    }

    /// Minibatch gradient of the supervised objective, or `None` while the
    /// buffers hold fewer than one batch.
    pub fn gradient(&mut self, policy: &PolicyNet) -> Result<Option<(f64, Gradients)>> {
        if self.buffers.total_len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self
            .buffers
            .sample_joint_minibatch(self.config.batch_size, &mut self.sampling_rng)?;
        supervised_gradient(&self.scratch, policy, &batch).map(Some)
    }

    /// Held-out accuracy over the levels in `levels`.
    pub fn accuracy_on(&self, policy: &PolicyNet, levels: impl Fn(usize) -> bool) -> Option<f64> {
        prediction_accuracy(&self.scratch, policy, self.validation.iter().filter(|e| levels(e.k)))
    }

    /// Records held-out accuracy and grows `K` when it has plateaued and
    /// `B_max(K)` is large enough. Returns the new level when `K` grew.
    pub fn end_episode(&mut self, episode: usize, policy: &PolicyNet) -> Option<usize> {
        let top = *self.k_list.last().unwrap();
        self.last_accuracy = self.accuracy_on(policy, |k| k <= top);
        if self.schedule == Schedule::Synchronous {
            return None;
        }
        if let Some(acc) = self.last_accuracy {
            self.monitor.push(acc);
        }
        if top >= self.config.max_k
            || !self.monitor.converged()
            || self.buffers.len_k(top) < self.config.min_growth_examples
        {
            return None;
        }
        let new_k = top + 1;
        let before = self.accuracy_on(policy, |k| k < new_k).unwrap_or(0.0);
        self.finish(policy);
        self.growth.push(GrowthEvent {
            episode,
            new_k,
            accuracy_before: before,
            accuracy_after: None,
        });
        self.k_list.push(new_k);
        self.tester_policy = Some(policy.clone());
        self.monitor.reset();
        Some(new_k)
    }

    fn validation_accuracy_below(&self, policy: &PolicyNet, k: usize) -> Option<f64> {
        self.accuracy_on(policy, |j| j < k)
    }

    /// Fills in the post-growth accuracy of the last curriculum step.
    pub fn finish(&mut self, policy: &PolicyNet) {
        let last = self.growth.last().map(|g| g.new_k);
        if let Some(k) = last {
            let after = self.validation_accuracy_below(policy, k);
            self.growth.last_mut().unwrap().accuracy_after = after;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun<E: GoalEnv> {
    pub policy: PolicyNet,
    pub metrics: Vec<EpisodeMetrics>,
    pub module: HidModule<E>,
    /// Parameter vector after every episode, when requested.
    pub trajectory: Vec<Vec<f64>>,
}

/// Options that do not change what is learned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub record_trajectory: bool,
}

/// Algorithm 1: curriculum over step counts.
pub fn run_pchid<E: GoalEnv>(env: &E, config: &PchidConfig, seed: u64) -> Result<TrainingRun<E>> {
    train_hid(env, config, Schedule::Continuation, seed, RunOptions::default())
}

/// Algorithm 2: all step counts at once in one merged buffer.
pub fn run_pehid<E: GoalEnv>(env: &E, config: &PchidConfig, seed: u64) -> Result<TrainingRun<E>> {
    train_hid(env, config, Schedule::Synchronous, seed, RunOptions::default())
}

pub fn train_hid<E: GoalEnv>(
    env: &E,
    config: &PchidConfig,
    schedule: Schedule,
    seed: u64,
    options: RunOptions,
) -> Result<TrainingRun<E>> {
    let streams = SeedStreams::new(seed);
    let mut module = HidModule::new(env, config.clone(), schedule, streams)?;
    let mut policy = PolicyNet::new(env, &config.hidden, streams.seed(Stream::Init))?;
    policy.exploration = config.exploration;
    let mut optimizer = Adam::new(&policy.net, AdamConfig::with_lr(config.learning_rate));
    let mut explore_rng = streams.rng(Stream::Exploration);
    let mut env = env.clone();
    let mut metrics = Vec::with_capacity(config.episodes);
    let mut trajectory = Vec::new();

    for episode in 0..config.episodes {
        let trace = rollout(
            &mut env,
            streams.episode_seed(episode),
            module.needs_snapshots(),
            |e, s, g| policy.act(e, s, g, true, &mut explore_rng),
        )?;
        module.ingest(&trace, &policy)?;

        let mut loss_sum = 0.0;
        let mut updates = 0;
        for _ in 0..config.updates_per_episode {
            let Some((loss, grads)) = module.gradient(&policy)? else {
                break;
            };
            optimizer.step(&mut policy.net, &grads)?;
            loss_sum += loss;
            updates += 1;
        }
        module.end_episode(episode, &policy);

        let mut row = EpisodeMetrics::new(episode, &trace);
        row.k_max = *module.k_list().last().unwrap();
        row.buffer_sizes = module.buffers().sizes();
        row.validation_accuracy = module.last_accuracy();
        row.loss = (updates > 0).then(|| loss_sum / updates as f64);
        if config.eval_every > 0 && (episode + 1) % config.eval_every == 0 {
            row.eval_success = Some(evaluate(
                &env,
                &policy,
                config.eval_episodes,
                streams.seed(Stream::Eval),
            )?);
        }
        metrics.push(row);
        if options.record_trajectory {
            trajectory.push(policy.net.flatten());
        }
    }
    module.finish(&policy);
    Ok(TrainingRun {
        policy,
        metrics,
        module,
        trajectory,
    })
}
