use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Action, ActionSpace, ByteReader, ByteWriter, EnvError, EnvSnapshot, GoalEnv, Result,
    StepResult,
};

/// Kinematic reaching in the unit cube.
///
/// Defaults: 3 dimensions, per-step displacement capped at 0.05, success
/// within 0.05 of the goal, 50-step horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PointReachConfig {
    pub dim: usize,
    pub max_step: f64,
    pub tolerance: f64,
    pub horizon: usize,
    pub reward_scale: f64,
}

impl Default for PointReachConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            max_step: 0.05,
            tolerance: 0.05,
            horizon: 50,
            reward_scale: 1.0,
        }
    }
}

/// State is the position; goals are positions. Reward 0 within tolerance of
/// the goal, -1 otherwise (both times the scale).
#[derive(Debug, Clone)]
pub struct PointReachEnv {
    config: PointReachConfig,
    position: Vec<f64>,
    goal: Vec<f64>,
    steps: usize,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl PointReachEnv {
    pub fn new(config: PointReachConfig) -> Self {
        let dim = config.dim;
        Self {
            config,
            position: vec![0.5; dim],
            goal: vec![0.5; dim],
            steps: 0,
        }
    }

    pub fn config(&self) -> &PointReachConfig {
        &self.config
    }

    pub fn set_state(&mut self, position: &[f64], goal: &[f64]) -> Result<()> {
        self.check_point(position)?;
        self.check_point(goal)?;
        self.position = position.to_vec();
        self.goal = goal.to_vec();
        self.steps = 0;
        Ok(())
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.config.dim || p.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::InvalidState(format!("point {p:?}")));
        }
        Ok(())
    }

    /// Clips `action` to the displacement cap.
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let norm = action.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.config.max_step {
            let s = self.config.max_step / norm;
            action.iter().map(|v| v * s).collect()
        } else {
            action.to_vec()
        }
    }
}

impl GoalEnv for PointReachEnv {
    fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.config.dim;
        self.position = (0..dim).map(|_| rng.gen::<f64>()).collect();
        loop {
            self.goal = (0..dim).map(|_| rng.gen::<f64>()).collect();
            if distance(&self.position, &self.goal) > self.config.tolerance {
                break;
            }
        }
        self.steps = 0;
        (self.state(), self.goal())
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        let raw = match action {
            Action::Continuous(v)
                if v.len() == self.config.dim && v.iter().all(|x| x.is_finite()) =>
            {
                v
            }
            other => return Err(EnvError::InvalidAction(format!("{other:?}"))),
        };
        let delta = self.clip_action(raw);
        for (p, d) in self.position.iter_mut().zip(&delta) {
            *p = (*p + d).clamp(0.0, 1.0);
        }
        self.steps += 1;
        let success = self.is_success(&self.position, &self.goal);
        Ok(StepResult {
            next_state: self.state(),
            reward: self.reward(&self.position, &self.goal),
            done: success || self.steps >= self.config.horizon,
            success,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.position.clone()
    }

    fn goal(&self) -> Vec<f64> {
        self.goal.clone()
    }

    fn set_goal(&mut self, goal: &[f64]) -> Result<()> {
        self.check_point(goal)?;
        self.goal = goal.to_vec();
        Ok(())
    }

    fn map_to_goal(&self, state: &[f64]) -> Vec<f64> {
        state[..self.config.dim].to_vec()
    }

    fn goals_match(&self, achieved: &[f64], desired: &[f64]) -> bool {
        distance(achieved, desired) <= self.config.tolerance
    }

    fn reward(&self, next_state: &[f64], goal: &[f64]) -> f64 {
        if self.is_success(next_state, goal) {
            0.0
        } else {
            -self.config.reward_scale
        }
    }

    fn snapshot(&self) -> EnvSnapshot {
        let mut w = ByteWriter::default();
        w.tag(b"PTRE");
        w.u64(self.steps as u64);
        w.f64s(&self.position);
        w.f64s(&self.goal);
        w.finish()
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        let mut r = ByteReader::new(snapshot);
        r.expect_tag(b"PTRE")?;
        let steps = r.u64()? as usize;
        let position = r.f64s()?;
        let goal = r.f64s()?;
        r.finish()?;
        if position.len() != self.config.dim || goal.len() != self.config.dim {
            return Err(EnvError::BadSnapshot("dimension".into()));
        }
        self.steps = steps;
        self.position = position;
        self.goal = goal;
        Ok(())
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous {
            dim: self.config.dim,
            max_norm: self.config.max_step,
        }
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn encoding_widths(&self) -> (usize, usize) {
        (self.config.dim, self.config.dim)
    }

    fn encode_into(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(state);
        out.extend_from_slice(goal);
    }
}
