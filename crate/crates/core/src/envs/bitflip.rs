use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Action, ActionSpace, ByteReader, ByteWriter, EnvError, EnvSnapshot, GoalEnv, Result,
    StepResult,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BitFlipConfig {
    pub bits: usize,
    /// Defaults to `bits`.
    pub horizon: Option<usize>,
    pub reward_scale: f64,
}

impl Default for BitFlipConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            horizon: None,
            reward_scale: 1.0,
        }
    }
}

/// `n` bits; action `a` flips `state[a]`. Reward 1 (times the scale) when the
/// state equals the goal, 0 otherwise.
#[derive(Debug, Clone)]
pub struct BitFlipEnv {
    config: BitFlipConfig,
    state: Vec<f64>,
    goal: Vec<f64>,
    steps: usize,
}

impl BitFlipEnv {
    pub fn new(config: BitFlipConfig) -> Self {
        let n = config.bits;
        Self {
            config,
            state: vec![0.0; n],
            goal: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn bits(&self) -> usize {
        self.config.bits
    }

    /// Puts the environment in an explicit configuration.
    pub fn set_state(&mut self, state: &[f64], goal: &[f64]) -> Result<()> {
        self.check_bits(state)?;
        self.check_bits(goal)?;
        self.state = state.to_vec();
        self.goal = goal.to_vec();
        self.steps = 0;
        Ok(())
    }

    fn check_bits(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.config.bits || v.iter().any(|b| *b != 0.0 && *b != 1.0) {
            return Err(EnvError::InvalidState(format!(
                "expected {} bits, got {v:?}",
                self.config.bits
            )));
        }
        Ok(())
    }
}

impl GoalEnv for BitFlipEnv {
    fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.bits;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
        };
        self.state = draw(&mut rng);
        loop {
            self.goal = draw(&mut rng);
            if self.goal != self.state {
                break;
            }
        }
        self.steps = 0;
        (self.state.clone(), self.goal.clone())
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        let a = match action {
            Action::Discrete(a) if *a < self.config.bits => *a,
            other => return Err(EnvError::InvalidAction(format!("{other:?}"))),
        };
        self.state[a] = 1.0 - self.state[a];
        self.steps += 1;
        let success = self.state == self.goal;
        Ok(StepResult {
            next_state: self.state.clone(),
            reward: self.reward(&self.state, &self.goal),
            done: success || self.steps >= self.horizon(),
            success,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.clone()
    }

    fn goal(&self) -> Vec<f64> {
        self.goal.clone()
    }

    fn set_goal(&mut self, goal: &[f64]) -> Result<()> {
        self.check_bits(goal)?;
        self.goal = goal.to_vec();
        Ok(())
    }

    fn map_to_goal(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }

    fn goals_match(&self, achieved: &[f64], desired: &[f64]) -> bool {
        achieved == desired
    }

    fn reward(&self, next_state: &[f64], goal: &[f64]) -> f64 {
        if self.is_success(next_state, goal) {
            self.config.reward_scale
        } else {
            0.0
        }
    }

    fn snapshot(&self) -> EnvSnapshot {
        let mut w = ByteWriter::default();
        w.tag(b"BITF");
        w.u64(self.steps as u64);
        w.f64s(&self.state);
        w.f64s(&self.goal);
        w.finish()
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        let mut r = ByteReader::new(snapshot);
        r.expect_tag(b"BITF")?;
        let steps = r.u64()? as usize;
        let state = r.f64s()?;
        let goal = r.f64s()?;
        r.finish()?;
        self.check_bits(&state)?;
        self.check_bits(&goal)?;
        self.steps = steps;
        self.state = state;
        self.goal = goal;
        Ok(())
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.config.bits)
    }

    fn horizon(&self) -> usize {
        self.config.horizon.unwrap_or(self.config.bits)
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn encoding_widths(&self) -> (usize, usize) {
        (self.config.bits, self.config.bits)
    }

    fn oracle_steps(&self, state: &[f64], goal: &[f64]) -> Option<Option<usize>> {
        Some(Some(state.iter().zip(goal).filter(|(a, b)| a != b).count()))
    }

    fn encode_into(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(state);
        out.extend_from_slice(goal);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(n: usize) -> BitFlipEnv {
        BitFlipEnv::new(BitFlipConfig {
            bits: n,
            ..Default::default()
        })
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env(3);
        let mut b = env(3);
        assert_eq!(a.reset(42), b.reset(42));
        let (s, g) = a.reset(43);
        assert_ne!(s, g);
    }

    #[test]
    fn action_flips_indexed_bit() {
        // Bit strings are written in index order, so action 2 flips the last
        // character of "000".
        let mut e = env(3);
        e.set_state(&[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        let r = e.step(&Action::Discrete(2)).unwrap();
        assert_eq!(r.next_state, vec![0.0, 0.0, 1.0]);
        assert!(r.success && r.done);
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn non_goal_step_has_zero_reward() {
        let mut e = env(3);
        e.set_state(&[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        let r = e.step(&Action::Discrete(0)).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(!r.success && !r.done);
    }

    #[test]
    fn rejects_out_of_range_action() {
        let mut e = env(3);
        e.reset(0);
        assert!(e.step(&Action::Discrete(3)).is_err());
        assert!(e.step(&Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn horizon_ends_episode() {
        let mut e = env(2);
        e.set_state(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(!e.step(&Action::Discrete(0)).unwrap().done);
        let r = e.step(&Action::Discrete(0)).unwrap();
        assert!(r.done && !r.success);
    }
}
