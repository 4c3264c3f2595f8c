//! Goal-conditioned policies: the network policy used by the trainers and a
//! BFS-optimal reference policy for GridWorld.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{bfs_distance_field, Action, ActionSpace, GoalEnv, GridWorldEnv, COMPASS};
use crate::nn::{argmax, Activation, Matrix, Mlp, NnError, OutputHead};

/// Anything that can pick greedy actions for `(state, goal)` pairs.
pub trait GoalPolicy<E: GoalEnv> {
    fn greedy_actions(&self, env: &E, pairs: &[(&[f64], &[f64])]) -> Vec<Action>;

    fn greedy_action(&self, env: &E, state: &[f64], goal: &[f64]) -> Action {
        self.greedy_actions(env, &[(state, goal)]).pop().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionMode {
    Discrete(usize),
    /// Network outputs are in units of `max_norm`.
    Continuous { dim: usize, max_norm: f64 },
}

impl From<ActionSpace> for ActionMode {
    fn from(space: ActionSpace) -> Self {
        match space {
            ActionSpace::Discrete(n) => ActionMode::Discrete(n),
            ActionSpace::Continuous { dim, max_norm } => ActionMode::Continuous { dim, max_norm },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exploration {
    /// Probability of a uniformly random discrete action.
    pub epsilon: f64,
    /// Gaussian noise on continuous actions, as a fraction of the
    /// displacement cap.
    pub sigma_frac: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            sigma_frac: 0.2,
        }
    }
}

/// MLP over `state ⧺ goal` producing action logits (discrete) or a mean
/// action (continuous).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp,
    pub mode: ActionMode,
    pub exploration: Exploration,
}

/// Stacks the encodings of `(state, goal)` pairs into a batch.
pub fn encode_batch<E: GoalEnv>(env: &E, pairs: &[(&[f64], &[f64])]) -> Matrix {
    let (ws, wg) = env.encoding_widths();
    let mut data = Vec::with_capacity(pairs.len() * (ws + wg));
    for (s, g) in pairs {
        env.encode_into(s, g, &mut data);
    }
    Matrix::from_vec(pairs.len(), ws + wg, data).expect("encoding width")
}

pub fn clip_norm(v: &mut [f64], max_norm: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

impl PolicyNet {
    pub fn new<E: GoalEnv>(env: &E, hidden: &[usize], seed: u64) -> Result<Self, NnError> {
        let (ws, wg) = env.encoding_widths();
        let mode = ActionMode::from(env.action_space());
        let (out, head) = match mode {
            ActionMode::Discrete(n) => (n, OutputHead::Logits),
            ActionMode::Continuous { dim, .. } => (dim, OutputHead::Linear),
        };
        let mut sizes = vec![ws + wg];
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Tanh, head, seed)?,
            mode,
            exploration: Exploration::default(),
        })
    }

    /// Raw network outputs for a batch of pairs.
    pub fn outputs<E: GoalEnv>(&self, env: &E, pairs: &[(&[f64], &[f64])]) -> Matrix {
        self.net
            .predict(&encode_batch(env, pairs))
            .expect("policy input width matches environment encoding")
    }

    /// Converts one output row to the greedy action.
    pub fn greedy_from_output(&self, row: &[f64]) -> Action {
        match self.mode {
            ActionMode::Discrete(_) => Action::Discrete(argmax(row)),
            ActionMode::Continuous { max_norm, .. } => {
                let mut a: Vec<f64> = row.iter().map(|v| v * max_norm).collect();
                clip_norm(&mut a, max_norm);
                Action::Continuous(a)
            }
        }
    }

    /// Behavior action. With `explore` off this is the argmax / clipped mean;
    /// with it on, epsilon-random (discrete) or Gaussian-perturbed and
    /// clipped (continuous).
    pub fn act<E: GoalEnv, R: Rng + ?Sized>(
        &self,
        env: &E,
        state: &[f64],
        goal: &[f64],
        explore: bool,
        rng: &mut R,
    ) -> Action {
        let out = self.outputs(env, &[(state, goal)]);
        self.act_from_output(out.row(0), explore, rng)
    }

    pub fn act_from_output<R: Rng + ?Sized>(
        &self,
        row: &[f64],
        explore: bool,
        rng: &mut R,
    ) -> Action {
        match self.mode {
            ActionMode::Discrete(n) => {
                if explore && rng.gen::<f64>() < self.exploration.epsilon {
                    Action::Discrete(rng.gen_range(0..n))
                } else {
                    Action::Discrete(argmax(row))
                }
            }
            ActionMode::Continuous { max_norm, .. } => {
                let sigma = self.exploration.sigma_frac;
                let mut a: Vec<f64> = row
                    .iter()
                    .map(|v| {
                        let noise: f64 = if explore && sigma > 0.0 {
                            {
                            let z: f64 = StandardNormal.sample(rng);
                            sigma * z
                        }
                        } else {
                            0.0
                        };
                        (v + noise) * max_norm
                    })
                    .collect();
                clip_norm(&mut a, max_norm);
                Action::Continuous(a)
            }
        }
    }

    /// Supervised target row for an action: the class index, or the action
    /// in network units.
    pub fn target_of(&self, action: &Action) -> Target {
        match (self.mode, action) {
            (ActionMode::Discrete(_), Action::Discrete(a)) => Target::Class(*a),
            (ActionMode::Continuous { max_norm, .. }, Action::Continuous(v)) => {
                Target::Vector(v.iter().map(|x| x / max_norm).collect())
            }
            _ => panic!("action {action:?} does not match policy mode {:?}", self.mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

impl<E: GoalEnv> GoalPolicy<E> for PolicyNet {
    fn greedy_actions(&self, env: &E, pairs: &[(&[f64], &[f64])]) -> Vec<Action> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let out = self.outputs(env, pairs);
        (0..out.rows())
            .map(|r| self.greedy_from_output(out.row(r)))
            .collect()
    }
}

/// Moves along a BFS shortest path (first improving compass direction).
#[derive(Debug, Clone, Copy, Default)]
pub struct BfsPolicy;

impl GoalPolicy<GridWorldEnv> for BfsPolicy {
    fn greedy_actions(&self, env: &GridWorldEnv, pairs: &[(&[f64], &[f64])]) -> Vec<Action> {
        pairs
            .iter()
            .map(|(state, goal)| {
                let (map, agent) = env.parts_from_state(state).expect("grid state");
                let target = GridWorldEnv::cell_from_goal(goal);
                let field = bfs_distance_field(&map, target);
                let here = field[map.index(agent)];
                let best = (0..COMPASS.len())
                    .filter_map(|a| {
                        let next = map.neighbor(agent, a)?;
                        field[map.index(next)].map(|d| (d, a))
                    })
                    .min();
                match (here, best) {
                    (Some(h), Some((d, a))) if d < h => Action::Discrete(a),
                    _ => Action::Discrete(0),
                }
            })
            .collect()
    }
}

impl<E: GoalEnv, F> GoalPolicy<E> for F
where
    F: Fn(&E, &[f64], &[f64]) -> Action,
{
    fn greedy_actions(&self, env: &E, pairs: &[(&[f64], &[f64])]) -> Vec<Action> {
        pairs.iter().map(|(s, g)| self(env, s, g)).collect()
    }
}
