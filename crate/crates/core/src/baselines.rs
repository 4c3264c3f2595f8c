//! Reinforcement-learning baselines and their combinations with a HID
//! module.
//!
//! * [`train_dqn`]: goal-conditioned DQN with a target network, optionally
//!   with hindsight experience replay. Discrete actions.
//! * [`train_ppo_lite`]: clipped-surrogate policy gradient with a Gaussian
//!   actor and a value baseline. Advantages are `return - value`, with no GAE
//!   and no normalization. Continuous actions.
//!
//! Either learner can be paired with a HID module through [`Combination`]:
//! joint training of one shared network, averaging of the two policies'
//! outputs, or an intrinsic reward for agreeing with the HID policy.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{Action, ActionSpace, GoalEnv};
use crate::hid::{her_relabel, HerStrategy, Transition};
use crate::nn::{
    argmax, log_softmax, mse_loss, softmax_in_place, Adam, AdamConfig, Gradients, Matrix, Mlp,
    OutputHead,
};
use crate::policy::{clip_norm, encode_batch, ActionMode, Exploration, PolicyNet};
use crate::seeding::{SeedStreams, Stream};
use crate::trainers::{
    evaluate, rollout, EpisodeMetrics, HidModule, PchidConfig, Result, Schedule, TrainError,
};

/// How a HID module is attached to an RL learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Combination {
    None,
    /// One shared network; per update the gradient is
    /// `rl_weight * rl_gradient + lambda * hid_gradient`.
    Joint { lambda: f64, rl_weight: f64 },
    /// Separate networks; actions mix the two outputs with weight `weight`
    /// on the RL side.
    Average { weight: f64 },
    /// Separate networks; the RL reward gains `beta` times the intrinsic
    /// agreement reward.
    Intrinsic { beta: f64 },
}

impl Combination {
    pub fn uses_hid(&self) -> bool {
        !matches!(self, Combination::None)
    }
}

/// Discrete averaging: argmax of `w * softmax(q) + (1 - w) * log_softmax(logits)`.
/// Normalizing the Q-values first makes the choice invariant to adding a
/// constant to all of them.
pub fn combine_average_discrete(q: &[f64], logits: &[f64], w: f64) -> usize {
    let mut p = q.to_vec();
    softmax_in_place(&mut p);
    let lp = log_softmax(logits);
    let scores: Vec<f64> = p
        .iter()
        .zip(&lp)
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect();
    argmax(&scores)
}

/// Continuous averaging: `w * a_rl + (1 - w) * a_hid`.
pub fn combine_average_continuous(a_rl: &[f64], a_hid: &[f64], w: f64) -> Vec<f64> {
    a_rl.iter()
        .zip(a_hid)
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect()
}

/// `-KL(p_hid || softmax(q))`, with `p_hid = softmax(logits)`. Never
/// positive; zero iff the two distributions coincide.
pub fn intrinsic_reward_discrete(q: &[f64], logits: &[f64]) -> f64 {
    let lq = log_softmax(q);
    let lp = log_softmax(logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(p, q)| p.exp() * (p - q))
        .sum();
    -kl.max(0.0)
}

/// `-|a_rl - a_hid|^2`.
pub fn intrinsic_reward_continuous(a_rl: &[f64], a_hid: &[f64]) -> f64 {
    -a_rl
        .iter()
        .zip(a_hid)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

/// `rl_weight * rl + lambda * hid`; a zero weight drops its term entirely so
/// that, for instance, `lambda = 0` reproduces the plain learner bit for bit.
pub fn joint_gradient(
    rl: Option<&Gradients>,
    hid: Option<&Gradients>,
    rl_weight: f64,
    lambda: f64,
) -> Option<Gradients> {
    let mut total: Option<Gradients> = None;
    for (g, w) in [(rl, rl_weight), (hid, lambda)] {
        let Some(g) = g else { continue };
        if w == 0.0 {
            continue;
        }
        match total.as_mut() {
            None => {
                let mut t = g.clone();
                if w != 1.0 {
                    t.scale(w);
                }
                total = Some(t);
            }
            Some(t) => t.add_scaled(g, w),
        }
    }
    total
}

/// Linear decay from `start` to `end` over `decay_episodes`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_episodes: usize,
}

impl EpsilonSchedule {
    pub fn at(&self, episode: usize) -> f64 {
        if self.decay_episodes == 0 || episode >= self.decay_episodes {
            return self.end;
        }
        let f = episode as f64 / self.decay_episodes as f64;
        self.start + (self.end - self.start) * f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub episodes: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub updates_per_episode: usize,
    /// Target network is copied from the online network every this many
    /// episodes.
    pub target_sync_episodes: usize,
    pub epsilon: EpsilonSchedule,
    pub her: Option<HerStrategy>,
    pub combination: Combination,
    /// Settings of the attached HID module, when there is one.
    pub hid: PchidConfig,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            hidden: vec![64, 64],
            learning_rate: 3e-4,
            gamma: 0.98,
            replay_capacity: 100_000,
            batch_size: 64,
            updates_per_episode: 40,
            target_sync_episodes: 20,
            epsilon: EpsilonSchedule {
                start: 1.0,
                end: 0.05,
                decay_episodes: 250,
            },
            her: None,
            combination: Combination::None,
            hid: PchidConfig::default(),
            eval_every: 0,
            eval_episodes: 100,
        }
    }
}

/// One-step TD targets: `r` for terminal transitions, otherwise
/// `r + gamma * max_a' Q_target(s', a')`.
pub fn td_targets(rewards: &[f64], terminals: &[bool], next_max: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(terminals)
        .zip(next_max)
        .map(|((&r, &t), &m)| if t { r } else { r + gamma * m })
        .collect()
}

/// Huber loss (delta 1) on the chosen-action Q-values and its gradient with
/// respect to the full output batch.
pub fn huber_td_loss(q: &Matrix, actions: &[usize], targets: &[f64]) -> (f64, Matrix) {
    let n = actions.len() as f64;
    let mut grad = Matrix::zeros(q.rows(), q.cols());
    let mut loss = 0.0;
    for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        let d = q.get(i, a) - y;
        loss += if d.abs() <= 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        grad.set(i, a, d.clamp(-1.0, 1.0) / n);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    /// Online network, wrapped as a discrete policy so it can double as the
    /// shared network of joint training.
    pub q: PolicyNet,
    pub target: Mlp,
    pub optimizer: Adam,
    pub replay: VecDeque<Transition>,
    pub config: DqnConfig,
}

impl DqnAgent {
    pub fn new<E: GoalEnv>(env: &E, config: DqnConfig, seed: u64) -> Result<Self> {
        if !matches!(env.action_space(), ActionSpace::Discrete(_)) {
            return Err(TrainError::Config("DQN needs a discrete action space".into()));
        }
        if !(0.0..=1.0).contains(&config.gamma) {
            return Err(TrainError::Config("gamma must lie in [0, 1]".into()));
        }
        if config.batch_size == 0 || config.target_sync_episodes == 0 {
            return Err(TrainError::Config(
                "batch_size and target_sync_episodes must be positive".into(),
            ));
        }
        let q = PolicyNet::new(env, &config.hidden, seed)?;
        Ok(Self {
            target: q.net.clone(),
            optimizer: Adam::new(&q.net, AdamConfig::with_lr(config.learning_rate)),
            replay: VecDeque::new(),
            q,
            config,
        })
    }

    pub fn remember(&mut self, transition: Transition) {
        if self.replay.len() == self.config.replay_capacity {
            self.replay.pop_front();
        }
        if self.config.replay_capacity > 0 {
            self.replay.push_back(transition);
        }
    }

    /// TD loss and gradient on a uniformly drawn replay minibatch, or `None`
    /// while the replay holds less than one batch.
    pub fn td_gradient<E: GoalEnv, R: Rng + ?Sized>(
        &self,
        env: &E,
        rng: &mut R,
    ) -> Result<Option<(f64, Gradients)>> {
        let n = self.config.batch_size;
        if self.replay.len() < n {
            return Ok(None);
        }
        let batch: Vec<&Transition> = (0..n)
            .map(|_| &self.replay[rng.gen_range(0..self.replay.len())])
            .collect();
        let pairs: Vec<(&[f64], &[f64])> = batch
            .iter()
            .map(|t| (t.state.as_slice(), t.goal.as_slice()))
            .collect();
        let next_pairs: Vec<(&[f64], &[f64])> = batch
            .iter()
            .map(|t| (t.next_state.as_slice(), t.goal.as_slice()))
            .collect();
        let (q, cache) = self.q.net.forward(&encode_batch(env, &pairs))?;
        let next = self.target.predict(&encode_batch(env, &next_pairs))?;
        let next_max: Vec<f64> = (0..n)
            .map(|r| next.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let terminals: Vec<bool> = batch.iter().map(|t| t.terminal).collect();
        let actions: Vec<usize> = batch
            .iter()
            .map(|t| t.action.discrete().expect("discrete replay"))
            .collect();
        let targets = td_targets(&rewards, &terminals, &next_max, self.config.gamma);
        let (loss, grad) = huber_td_loss(&q, &actions, &targets);
        Ok(Some((loss, self.q.net.backward(&cache, &grad)?)))
    }

    pub fn q_values<E: GoalEnv>(&self, env: &E, state: &[f64], goal: &[f64]) -> Vec<f64> {
        self.q.outputs(env, &[(state, goal)]).into_vec()
    }

    pub fn sync_target(&mut self) {
        self.target = self.q.net.clone();
    }
}

/// Greedy decision rule of a trained discrete learner.
#[derive(Debug, Clone)]
pub enum DiscretePolicy {
    Q(PolicyNet),
    Average {
        q: PolicyNet,
        hid: PolicyNet,
        weight: f64,
    },
}

impl DiscretePolicy {
    pub fn choose<E: GoalEnv>(&self, env: &E, state: &[f64], goal: &[f64]) -> usize {
        match self {
            DiscretePolicy::Q(q) => argmax(q.outputs(env, &[(state, goal)]).row(0)),
            DiscretePolicy::Average { q, hid, weight } => {
                let qv = q.outputs(env, &[(state, goal)]);
                let lv = hid.outputs(env, &[(state, goal)]);
                combine_average_discrete(qv.row(0), lv.row(0), *weight)
            }
        }
    }
}

impl<E: GoalEnv> crate::policy::GoalPolicy<E> for DiscretePolicy {
    fn greedy_actions(&self, env: &E, pairs: &[(&[f64], &[f64])]) -> Vec<Action> {
        pairs
            .iter()
            .map(|(s, g)| Action::Discrete(self.choose(env, s, g)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DqnRun<E: GoalEnv> {
    pub agent: DqnAgent,
    /// Separately trained HID policy (averaging and intrinsic modes).
    pub hid_policy: Option<PolicyNet>,
    pub module: Option<HidModule<E>>,
    pub policy: DiscretePolicy,
    pub metrics: Vec<EpisodeMetrics>,
}

/// Trains DQN (with HER and a HID combination if configured).
pub fn train_dqn<E: GoalEnv>(env: &E, config: &DqnConfig, seed: u64) -> Result<DqnRun<E>> {
    let streams = SeedStreams::new(seed);
    let mut agent = DqnAgent::new(env, config.clone(), streams.seed(Stream::Init))?;
    let mut module = if config.combination.uses_hid() {
        Some(HidModule::new(
            env,
            config.hid.clone(),
            Schedule::Continuation,
            SeedStreams::new(crate::seeding::derive_seed(seed, 0x41D)),
        )?)
    } else {
        None
    };
    // Separate HID network for the averaging and intrinsic modes.
    let mut hid = match config.combination {
        Combination::Average { .. } | Combination::Intrinsic { .. } => {
            let mut p = PolicyNet::new(
                env,
                &config.hid.hidden,
                crate::seeding::derive_seed(streams.seed(Stream::Init), 0x41D),
            )?;
            p.exploration = Exploration::default();
            let opt = Adam::new(&p.net, AdamConfig::with_lr(config.hid.learning_rate));
            Some((p, opt))
        }
        _ => None,
    };
    let mut explore_rng = streams.rng(Stream::Exploration);
    let mut replay_rng = streams.rng(Stream::Replay);
    let mut her_rng = streams.rng(Stream::Relabel);
    let n_actions = match env.action_space() {
        ActionSpace::Discrete(n) => n,
        ActionSpace::Continuous { .. } => unreachable!(),
    };
    let mut env = env.clone();
    let mut metrics = Vec::with_capacity(config.episodes);

    for episode in 0..config.episodes {
        let eps = config.epsilon.at(episode);
        let snapshots = module.as_ref().is_some_and(HidModule::needs_snapshots);
        let trace = {
            let agent = &agent;
            let hid = &hid;
            rollout(&mut env, streams.episode_seed(episode), snapshots, |e, s, g| {
                if explore_rng.gen::<f64>() < eps {
                    return Action::Discrete(explore_rng.gen_range(0..n_actions));
                }
                let q = agent.q_values(e, s, g);
                Action::Discrete(match (config.combination, hid) {
                    (Combination::Average { weight }, Some((p, _))) => {
                        combine_average_discrete(&q, p.outputs(e, &[(s, g)]).row(0), weight)
                    }
                    _ => argmax(&q),
                })
            })?
        };

        let mut intrinsic_sum = 0.0;
        for tr in &trace.transitions {
            let mut tr = tr.clone();
            if let (Combination::Intrinsic { beta }, Some((p, _))) = (config.combination, &hid) {
                let q = agent.q_values(&env, &tr.state, &tr.goal);
                let logits = p.outputs(&env, &[(&tr.state, &tr.goal)]);
                let r_int = intrinsic_reward_discrete(&q, logits.row(0));
                intrinsic_sum += r_int;
                tr.reward += beta * r_int;
            }
            agent.remember(tr);
        }
        if let Some(strategy) = config.her {
            for tr in her_relabel(&env, &trace, strategy, &mut her_rng) {
                agent.remember(tr);
            }
        }
        if let Some(m) = module.as_mut() {
            let learner = match &hid {
                Some((p, _)) => p.clone(),
                None => agent.q.clone(),
            };
            m.ingest(&trace, &learner)?;
        }

        let mut loss_sum = 0.0;
        let mut loss_n = 0;
        for _ in 0..config.updates_per_episode {
            let td = agent.td_gradient(&env, &mut replay_rng)?;
            if let Some((l, _)) = &td {
                loss_sum += l;
                loss_n += 1;
            }
            match config.combination {
                Combination::Joint { lambda, rl_weight } => {
                    let hid_grad = match module.as_mut() {
                        Some(m) if lambda != 0.0 => m.gradient(&agent.q)?,
                        _ => None,
                    };
                    let total = joint_gradient(
                        td.as_ref().map(|(_, g)| g),
                        hid_grad.as_ref().map(|(_, g)| g),
                        rl_weight,
                        lambda,
                    );
                    if let Some(g) = total {
                        agent.optimizer.step(&mut agent.q.net, &g)?;
                    }
                }
                _ => {
                    if let Some((_, g)) = td {
                        agent.optimizer.step(&mut agent.q.net, &g)?;
                    }
                    if let (Some(m), Some((p, opt))) = (module.as_mut(), hid.as_mut()) {
                        if let Some((_, g)) = m.gradient(p)? {
                            opt.step(&mut p.net, &g)?;
                        }
                    }
                }
            }
        }
        if let Some(m) = module.as_mut() {
            let learner = match &hid {
                Some((p, _)) => p,
                None => &agent.q,
            };
            m.end_episode(episode, learner);
        }
        if (episode + 1) % config.target_sync_episodes == 0 {
            agent.sync_target();
        }

        let mut row = EpisodeMetrics::new(episode, &trace);
        if let Some(m) = &module {
            row.k_max = *m.k_list().last().unwrap();
            row.buffer_sizes = m.buffers().sizes();
            row.validation_accuracy = m.last_accuracy();
        }
        row.loss = (loss_n > 0).then(|| loss_sum / loss_n as f64);
        if let Combination::Intrinsic { .. } = config.combination {
            row.intrinsic_reward = Some(intrinsic_sum / trace.len().max(1) as f64);
        }
        if let Combination::Average { weight } = config.combination {
            row.mix_weight = Some(weight);
        }
        if config.eval_every > 0 && (episode + 1) % config.eval_every == 0 {
            let policy = discrete_policy(&agent, &hid, config.combination);
            row.eval_success = Some(evaluate(
                &env,
                &policy,
                config.eval_episodes,
                streams.seed(Stream::Eval),
            )?);
        }
        metrics.push(row);
    }
    if let Some(m) = module.as_mut() {
        let learner = match &hid {
            Some((p, _)) => p,
            None => &agent.q,
        };
        m.finish(learner);
    }
    let policy = discrete_policy(&agent, &hid, config.combination);
    Ok(DqnRun {
        hid_policy: hid.map(|(p, _)| p),
        agent,
        module,
        policy,
        metrics,
    })
}

fn discrete_policy(
    agent: &DqnAgent,
    hid: &Option<(PolicyNet, Adam)>,
    combination: Combination,
) -> DiscretePolicy {
    match (combination, hid) {
        (Combination::Average { weight }, Some((p, _))) => DiscretePolicy::Average {
            q: agent.q.clone(),
            hid: p.clone(),
            weight,
        },
        _ => DiscretePolicy::Q(agent.q.clone()),
    }
}

/// Bias-corrected Adam over a plain parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct VecAdam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl VecAdam {
    fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c = self.config;
        let c1 = 1.0 - c.beta1.powi(self.t);
        let c2 = 1.0 - c.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.learning_rate * (*m / c1) / ((*v / c2).sqrt() + c.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub episodes: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub clip: f64,
    /// Episodes collected per policy update.
    pub episodes_per_update: usize,
    pub epochs: usize,
    pub minibatch: usize,
    /// Initial log standard deviation of the Gaussian actor, in action-cap
    /// units.
    pub init_log_sigma: f64,
    pub combination: Combination,
    pub hid: PchidConfig,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            gamma: 0.98,
            clip: 0.2,
            episodes_per_update: 4,
            epochs: 4,
            minibatch: 64,
            init_log_sigma: -0.7,
            combination: Combination::None,
            hid: PchidConfig::default(),
            eval_every: 0,
            eval_episodes: 100,
        }
    }
}

/// One stored on-policy sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub input: Vec<f64>,
    /// Sampled actor output in action-cap units, before norm clipping.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub ret: f64,
}

/// Per-sample record of one surrogate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioLog {
    pub ratio: f64,
    /// The ratio that enters the objective: clipped where the clipped branch
    /// is the active minimum.
    pub effective: f64,
    pub clipped: bool,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub actor: PolicyNet,
    pub log_sigma: Vec<f64>,
    pub critic: Mlp,
    actor_opt: Adam,
    sigma_opt: VecAdam,
    critic_opt: Adam,
    pub config: PpoConfig,
}

fn gaussian_log_prob(a: &[f64], mean: &[f64], log_sigma: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_sigma)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

impl PpoAgent {
    pub fn new<E: GoalEnv>(env: &E, config: PpoConfig, seed: u64) -> Result<Self> {
        let dim = match env.action_space() {
            ActionSpace::Continuous { dim, .. } => dim,
            ActionSpace::Discrete(_) => {
                return Err(TrainError::Config(
                    "PPO-lite needs a continuous action space".into(),
                ))
            }
        };
        if !(config.clip > 0.0 && config.clip < 1.0) {
            return Err(TrainError::Config("clip ratio must lie in (0, 1)".into()));
        }
        if config.episodes_per_update == 0 || config.minibatch == 0 {
            return Err(TrainError::Config(
                "episodes_per_update and minibatch must be positive".into(),
            ));
        }
        let actor = PolicyNet::new(env, &config.hidden, seed)?;
        let (ws, wg) = env.encoding_widths();
        let mut sizes = vec![ws + wg];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let critic = Mlp::new(
            &sizes,
            crate::nn::Activation::Tanh,
            OutputHead::Linear,
            seed.wrapping_add(1),
        )?;
        Ok(Self {
            actor_opt: Adam::new(&actor.net, AdamConfig::with_lr(config.actor_lr)),
            critic_opt: Adam::new(&critic, AdamConfig::with_lr(config.critic_lr)),
            sigma_opt: VecAdam::new(dim, AdamConfig::with_lr(config.actor_lr)),
            log_sigma: vec![config.init_log_sigma; dim],
            actor,
            critic,
            config,
        })
    }

    /// Samples an actor output; returns it with its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, input: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mean = self.actor.net.predict_one(input)?;
        let a: Vec<f64> = mean
            .iter()
            .zip(&self.log_sigma)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let lp = gaussian_log_prob(&a, &mean, &self.log_sigma);
        Ok((a, lp))
    }

    /// Clipped-surrogate actor gradient on `batch` with the given
    /// advantages. Returns the surrogate loss, network and log-sigma
    /// gradients and the per-sample ratio log.
    pub fn actor_gradient(
        &self,
        batch: &[&PpoSample],
        advantages: &[f64],
    ) -> Result<(f64, Gradients, Vec<f64>, Vec<RatioLog>)> {
        let n = batch.len();
        let dim = self.log_sigma.len();
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.input.as_slice()).collect();
        let input = Matrix::from_rows(&rows)?;
        let (mean, cache) = self.actor.net.forward(&input)?;
        let inv_var: Vec<f64> = self.log_sigma.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut grad_mean = Matrix::zeros(n, dim);
        let mut grad_sigma = vec![0.0; dim];
        let mut loss = 0.0;
        let mut log = Vec::with_capacity(n);
        let lo = 1.0 - self.config.clip;
        let hi = 1.0 + self.config.clip;
        for (i, (s, &adv)) in batch.iter().zip(advantages).enumerate() {
            let lp = gaussian_log_prob(&s.action, mean.row(i), &self.log_sigma);
            let ratio = (lp - s.log_prob).exp();
            let clipped = (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo);
            let effective = if clipped { ratio.clamp(lo, hi) } else { ratio };
            loss -= effective * adv / n as f64;
            log.push(RatioLog {
                ratio,
                effective,
                clipped,
                advantage: adv,
            });
            if clipped || adv == 0.0 {
                continue;
            }
            let c = ratio * adv / n as f64;
            for j in 0..dim {
                let d = s.action[j] - mean.get(i, j);
                grad_mean.set(i, j, -c * d * inv_var[j]);
                grad_sigma[j] -= c * (d * d * inv_var[j] - 1.0);
            }
        }
        let grads = self.actor.net.backward(&cache, &grad_mean)?;
        Ok((loss, grads, grad_sigma, log))
    }

    fn values(&self, batch: &[&PpoSample]) -> Result<Vec<f64>> {
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.input.as_slice()).collect();
        Ok(self.critic.predict(&Matrix::from_rows(&rows)?)?.into_vec())
    }

    /// One clipped-surrogate update pass over `samples`. `extra_actor`
    /// supplies an additional weighted actor gradient per minibatch (joint
    /// training). Returns the ratio log of every minibatch evaluation.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        samples: &[PpoSample],
        rng: &mut R,
        mut extra_actor: impl FnMut(&PolicyNet) -> Result<Option<Gradients>>,
        rl_weight: f64,
    ) -> Result<Vec<RatioLog>> {
        let mut log = Vec::new();
        if samples.is_empty() {
            return Ok(log);
        }
        for _ in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for chunk in order.chunks(self.config.minibatch) {
                let batch: Vec<&PpoSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let values = self.values(&batch)?;
                let advantages: Vec<f64> =
                    batch.iter().zip(&values).map(|(s, v)| s.ret - v).collect();
                let (_, g_actor, g_sigma, l) = self.actor_gradient(&batch, &advantages)?;
                log.extend(l);
                let extra = extra_actor(&self.actor)?;
                let rl = (rl_weight != 0.0).then_some(&g_actor);
                if let Some(total) = joint_gradient(rl, extra.as_ref(), rl_weight, 1.0) {
                    self.actor_opt.step(&mut self.actor.net, &total)?;
                }
                if rl_weight != 0.0 {
                    let scaled: Vec<f64> = g_sigma.iter().map(|g| g * rl_weight).collect();
                    self.sigma_opt.step(&mut self.log_sigma, &scaled);
                }
                let rows: Vec<&[f64]> = batch.iter().map(|s| s.input.as_slice()).collect();
                let input = Matrix::from_rows(&rows)?;
                let (v, cache) = self.critic.forward(&input)?;
                let targets =
                    Matrix::from_vec(batch.len(), 1, batch.iter().map(|s| s.ret).collect())?;
                let (_, gv) = mse_loss(&v, &targets)?;
                let gc = self.critic.backward(&cache, &gv)?;
                self.critic_opt.step(&mut self.critic, &gc)?;
            }
        }
        Ok(log)
    }
}

/// Discounted returns, restarting at every episode boundary.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Greedy decision rule of a trained continuous learner, in environment
/// units.
#[derive(Debug, Clone)]
pub enum ContinuousPolicy {
    Actor(PolicyNet),
    Average {
        actor: PolicyNet,
        hid: PolicyNet,
        weight: f64,
    },
}

impl<E: GoalEnv> crate::policy::GoalPolicy<E> for ContinuousPolicy {
    fn greedy_actions(&self, env: &E, pairs: &[(&[f64], &[f64])]) -> Vec<Action> {
        match self {
            ContinuousPolicy::Actor(p) => p.greedy_actions(env, pairs),
            ContinuousPolicy::Average { actor, hid, weight } => {
                let a = actor.outputs(env, pairs);
                let h = hid.outputs(env, pairs);
                (0..a.rows())
                    .map(|r| {
                        let mixed = combine_average_continuous(a.row(r), h.row(r), *weight);
                        actor.greedy_from_output(&mixed)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PpoRun<E: GoalEnv> {
    pub agent: PpoAgent,
    pub hid_policy: Option<PolicyNet>,
    pub module: Option<HidModule<E>>,
    pub policy: ContinuousPolicy,
    pub metrics: Vec<EpisodeMetrics>,
    /// Ratio logs of every update.
    pub ratios: Vec<RatioLog>,
    /// Undiscounted environment return of every training episode.
    pub returns: Vec<f64>,
}

/// Trains PPO-lite (with a HID combination if configured).
pub fn train_ppo_lite<E: GoalEnv>(env: &E, config: &PpoConfig, seed: u64) -> Result<PpoRun<E>> {
    let streams = SeedStreams::new(seed);
    let mut agent = PpoAgent::new(env, config.clone(), streams.seed(Stream::Init))?;
    let max_norm = match env.action_space() {
        ActionSpace::Continuous { max_norm, .. } => max_norm,
        ActionSpace::Discrete(_) => unreachable!(),
    };
    let mut module = if config.combination.uses_hid() {
        Some(HidModule::new(
            env,
            config.hid.clone(),
            Schedule::Continuation,
            SeedStreams::new(crate::seeding::derive_seed(seed, 0x41D)),
        )?)
    } else {
        None
    };
    let mut hid = match config.combination {
        Combination::Average { .. } | Combination::Intrinsic { .. } => {
            let p = PolicyNet::new(
                env,
                &config.hid.hidden,
                crate::seeding::derive_seed(streams.seed(Stream::Init), 0x41D),
            )?;
            let opt = Adam::new(&p.net, AdamConfig::with_lr(config.hid.learning_rate));
            Some((p, opt))
        }
        _ => None,
    };
    let mut explore_rng = streams.rng(Stream::Exploration);
    let mut sample_rng = streams.rng(Stream::Replay);
    let mut env = env.clone();
    let mut metrics = Vec::with_capacity(config.episodes);
    let mut ratios = Vec::new();
    let mut returns = Vec::with_capacity(config.episodes);
    let mut pending: Vec<PpoSample> = Vec::new();

    for episode in 0..config.episodes {
        let snapshots = module.as_ref().is_some_and(HidModule::needs_snapshots);
        let mut drawn: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
        let trace = {
            let agent = &agent;
            let hid = &hid;
            let mut failure = None;
            let trace = rollout(&mut env, streams.episode_seed(episode), snapshots, |e, s, g| {
                let input = e.encode(s, g);
                let (a, lp) = match agent.sample(&input, &mut explore_rng) {
                    Ok(x) => x,
                    Err(err) => {
                        failure.get_or_insert(err);
                        (vec![0.0; agent.log_sigma.len()], 0.0)
                    }
                };
                let executed = match (config.combination, hid) {
                    (Combination::Average { weight }, Some((p, _))) => {
                        let h = p.outputs(e, &[(s, g)]);
                        combine_average_continuous(&a, h.row(0), weight)
                    }
                    _ => a.clone(),
                };
                drawn.push((input, a, lp));
                let mut env_action: Vec<f64> = executed.iter().map(|v| v * max_norm).collect();
                clip_norm(&mut env_action, max_norm);
                Action::Continuous(env_action)
            })?;
            if let Some(err) = failure {
                return Err(err);
            }
            trace
        };

        let mut intrinsic_sum = 0.0;
        let mut rewards: Vec<f64> = trace.transitions.iter().map(|t| t.reward).collect();
        returns.push(rewards.iter().sum());
        if let (Combination::Intrinsic { beta }, Some((p, _))) = (config.combination, &hid) {
            for ((tr, (_, a, _)), r) in trace.transitions.iter().zip(&drawn).zip(&mut rewards) {
                let h = p.outputs(&env, &[(&tr.state, &tr.goal)]);
                let r_int = intrinsic_reward_continuous(a, h.row(0));
                intrinsic_sum += r_int;
                *r += beta * r_int;
            }
        }
        for ((input, action, log_prob), ret) in drawn
            .into_iter()
            .zip(discounted_returns(&rewards, config.gamma))
        {
            pending.push(PpoSample {
                input,
                action,
                log_prob,
                ret,
            });
        }
        if let Some(m) = module.as_mut() {
            let learner = match &hid {
                Some((p, _)) => p.clone(),
                None => agent.actor.clone(),
            };
            m.ingest(&trace, &learner)?;
        }

        if (episode + 1) % config.episodes_per_update == 0 {
            let samples = std::mem::take(&mut pending);
            let (lambda, rl_weight) = match config.combination {
                Combination::Joint { lambda, rl_weight } => (lambda, rl_weight),
                _ => (0.0, 1.0),
            };
            let module_ref = &mut module;
            let log = agent.update(
                &samples,
                &mut sample_rng,
                |actor| {
                    if lambda == 0.0 {
                        return Ok(None);
                    }
                    match module_ref.as_mut() {
                        Some(m) => Ok(m.gradient(actor)?.map(|(_, mut g)| {
                            g.scale(lambda);
                            g
                        })),
                        None => Ok(None),
                    }
                },
                rl_weight,
            )?;
            ratios.extend(log);
        }
        if let (Some(m), Some((p, opt))) = (module.as_mut(), hid.as_mut()) {
            for _ in 0..config.hid.updates_per_episode {
                match m.gradient(p)? {
                    Some((_, g)) => opt.step(&mut p.net, &g)?,
                    None => break,
                }
            }
        }
        if let Some(m) = module.as_mut() {
            let learner = match &hid {
                Some((p, _)) => p,
                None => &agent.actor,
            };
            m.end_episode(episode, learner);
        }

        let mut row = EpisodeMetrics::new(episode, &trace);
        if let Some(m) = &module {
            row.k_max = *m.k_list().last().unwrap();
            row.buffer_sizes = m.buffers().sizes();
            row.validation_accuracy = m.last_accuracy();
        }
        if let Combination::Intrinsic { .. } = config.combination {
            row.intrinsic_reward = Some(intrinsic_sum / trace.len().max(1) as f64);
        }
        if let Combination::Average { weight } = config.combination {
            row.mix_weight = Some(weight);
        }
        if config.eval_every > 0 && (episode + 1) % config.eval_every == 0 {
            let policy = continuous_policy(&agent, &hid, config.combination);
            row.eval_success = Some(evaluate(
                &env,
                &policy,
                config.eval_episodes,
                streams.seed(Stream::Eval),
            )?);
        }
        metrics.push(row);
    }
    if let Some(m) = module.as_mut() {
        let learner = match &hid {
            Some((p, _)) => p,
            None => &agent.actor,
        };
        m.finish(learner);
    }
    let policy = continuous_policy(&agent, &hid, config.combination);
    Ok(PpoRun {
        hid_policy: hid.map(|(p, _)| p),
        agent,
        module,
        policy,
        metrics,
        ratios,
        returns,
    })
}

fn continuous_policy(
    agent: &PpoAgent,
    hid: &Option<(PolicyNet, Adam)>,
    combination: Combination,
) -> ContinuousPolicy {
    match (combination, hid) {
        (Combination::Average { weight }, Some((p, _))) => ContinuousPolicy::Average {
            actor: agent.actor.clone(),
            hid: p.clone(),
            weight,
        },
        _ => ContinuousPolicy::Actor(agent.actor.clone()),
    }
}

/// Mode of the action space a policy network was built for.
pub fn is_discrete(policy: &PolicyNet) -> bool {
    matches!(policy.mode, ActionMode::Discrete(_))
}
