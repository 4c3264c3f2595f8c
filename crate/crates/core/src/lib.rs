//! Policy continuation with hindsight inverse dynamics.
//!
//! Building blocks for learning goal-conditioned policies by supervised
//! learning on hindsight-relabeled transitions: a small MLP library,
//! deterministic multi-goal environments, relabeling and buffers,
//! solvability tests, the curriculum and synchronous trainers, RL baselines
//! with their combinations, and Ornstein-Uhlenbeck analysis tools.

pub mod envs;
pub mod hid;
pub mod nn;
pub mod policy;
pub mod seeding;
pub mod solvability;
pub mod trainers;
pub mod baselines;
pub mod ou;
