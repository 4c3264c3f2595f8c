//! Deterministic multi-goal environments.
//!
//! Every environment exposes the extended state-goal interface: a state
//! vector, a goal vector, a mapping `map_to_goal` from states to the goal
//! they achieve, and a goal-equality predicate. States and goals are plain
//! `Vec<f64>` so relabeled examples can be stored and replayed uniformly.

mod bitflip;
mod gridworld;
mod pointreach;

pub use bitflip::{BitFlipConfig, BitFlipEnv};
pub use gridworld::{
    bfs_distance_field, bfs_shortest_steps, Cell, GridEncoding, GridLayout, GridMap,
    GridWorldConfig, GridWorldEnv, COMPASS,
};
pub use pointreach::{PointReachConfig, PointReachEnv};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid state or goal: {0}")]
    InvalidState(String),
    #[error("snapshot does not match this environment: {0}")]
    BadSnapshot(String),
    #[error("map: {0}")]
    Map(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Discrete(_) => None,
            Action::Continuous(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    /// Actions are real vectors; the environment clips their norm to
    /// `max_norm`.
    Continuous { dim: usize, max_norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Success or horizon exhaustion.
    pub done: bool,
    pub success: bool,
}

/// Serialized full environment state, including the step counter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvSnapshot(Vec<u8>);

impl EnvSnapshot {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

/// Deterministic goal-conditioned environment.
pub trait GoalEnv: Clone {
    /// Starts a fresh episode; fully determined by `seed`.
    fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>);

    fn step(&mut self, action: &Action) -> Result<StepResult>;

    fn state(&self) -> Vec<f64>;

    fn goal(&self) -> Vec<f64>;

    /// Replaces the desired goal of the running episode.
    fn set_goal(&mut self, goal: &[f64]) -> Result<()>;

    /// The goal achieved in `state`.
    fn map_to_goal(&self, state: &[f64]) -> Vec<f64>;

    /// Goal equality with the environment's tolerance.
    fn goals_match(&self, achieved: &[f64], desired: &[f64]) -> bool;

    /// Whether `state` achieves `goal`.
    fn is_success(&self, state: &[f64], goal: &[f64]) -> bool {
        self.goals_match(&self.map_to_goal(state), goal)
    }

    /// Reward for arriving in `next_state` while pursuing `goal`.
    fn reward(&self, next_state: &[f64], goal: &[f64]) -> f64;

    fn snapshot(&self) -> EnvSnapshot;

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()>;

    fn action_space(&self) -> ActionSpace;

    fn horizon(&self) -> usize;

    fn steps_taken(&self) -> usize;

    /// Widths of the network encodings of a state and of a goal.
    fn encoding_widths(&self) -> (usize, usize);

    /// Appends the network input for `(state, goal)`: the state encoding
    /// followed by the goal encoding.
    fn encode_into(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>);

    /// Exact minimal number of steps from `state` to `goal`, for
    /// environments where it is cheap to compute.
    fn oracle_steps(&self, _state: &[f64], _goal: &[f64]) -> Option<Option<usize>> {
        None
    }

    fn encode(&self, state: &[f64], goal: &[f64]) -> Vec<f64> {
        let (s, g) = self.encoding_widths();
        let mut out = Vec::with_capacity(s + g);
        self.encode_into(state, goal, &mut out);
        out
    }
}

/// Little-endian byte writer used by the snapshot encodings.
#[derive(Default)]
pub(crate) struct ByteWriter(Vec<u8>);

impl ByteWriter {
    pub(crate) fn tag(&mut self, tag: &[u8; 4]) {
        self.0.extend_from_slice(tag);
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> EnvSnapshot {
        EnvSnapshot(self.0)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(snapshot: &'a EnvSnapshot) -> Self {
        Self {
            bytes: &snapshot.0,
            pos: 0,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(EnvError::BadSnapshot("truncated".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn expect_tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        if self.take(4)? != tag {
            return Err(EnvError::BadSnapshot("wrong environment tag".into()));
        }
        Ok(())
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(EnvError::BadSnapshot("length overflow".into()));
        }
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap())))
            .collect()
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(EnvError::BadSnapshot("trailing bytes".into()));
        }
        Ok(())
    }
}
