//! Scoring solvability tests against the environment's step oracle.
//!
//! Candidates come from uniformly random rollouts: for every `k` in
//! `2..=max_k` and every start `t`, the pair `(s_t, m(s_{t+k}))` is a
//! candidate whose truth is "the shortest path takes exactly `k` steps".

use anyhow::{bail, Result};
use pchid_core::envs::{Action, ActionSpace, GoalEnv};
use pchid_core::policy::BfsPolicy;
use pchid_core::seeding::derive_seed;
use pchid_core::solvability::{
    evaluate_test, Candidate, InteractionTest, NoveltyThreshold, OracleTest, RndTest,
    SolvabilityTest, TestReport,
};
use pchid_core::trainers::{rollout, train_hid, RunOptions, Schedule, TesterKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Algorithm, EnvSpec, ExperimentConfig};
use crate::experiment::{load_layout, with_env};
use pchid_core::envs::{BitFlipEnv, GridWorldEnv, PointReachEnv};

/// Which policy or model backs the test being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TesterSource {
    /// Interaction test with a BFS-optimal frozen policy (GridWorld only).
    Bfs,
    /// Train the configured HID learner, then score its own tester.
    Trained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestEvalRow {
    pub k: usize,
    pub tester: String,
    pub threshold: Option<f64>,
    pub report: TestReport,
}

impl TestEvalRow {
    pub const CSV_HEADER: &'static str = "k,tester,threshold,tp,fp,tn,fn,precision,recall";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.k,
            self.tester,
            self.threshold.map(|t| t.to_string()).unwrap_or_default(),
            r.true_positive,
            r.false_positive,
            r.true_negative,
            r.false_negative,
            r.precision(),
            r.recall()
        )
    }
}

/// Candidates from `episodes` random-action rollouts, grouped by `k`.
pub fn sample_candidates<E: GoalEnv>(
    env: &E,
    episodes: usize,
    max_k: usize,
    seed: u64,
) -> Result<Vec<(usize, Vec<Candidate>)>> {
    let mut env = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7E57));
    let space = env.action_space();
    let mut groups: Vec<(usize, Vec<Candidate>)> = (2..=max_k).map(|k| (k, Vec::new())).collect();
    for i in 0..episodes {
        let trace = rollout(&mut env, derive_seed(seed, i as u64), true, |_, _, _| match space {
            ActionSpace::Discrete(n) => Action::Discrete(rng.gen_range(0..n)),
            ActionSpace::Continuous { dim, max_norm } => {
                Action::Continuous((0..dim).map(|_| rng.gen_range(-max_norm..=max_norm)).collect())
            }
        })?;
        for (k, group) in groups.iter_mut() {
            if *k > trace.len() {
                continue;
            }
            for t in 0..=trace.len() - *k {
                group.push(Candidate {
                    snapshot: trace.snapshots[t].clone(),
                    state: trace.state_at(t).to_vec(),
                    goal: env.map_to_goal(trace.state_at(t + *k)),
                    k: *k,
                });
            }
        }
    }
    Ok(groups)
}

fn score<E: GoalEnv, T: SolvabilityTest + ?Sized>(
    env: &E,
    tester: &mut T,
    groups: &[(usize, Vec<Candidate>)],
    name: &str,
    threshold: Option<f64>,
) -> Result<Vec<TestEvalRow>> {
    groups
        .iter()
        .map(|(k, candidates)| {
            Ok(TestEvalRow {
                k: *k,
                tester: name.into(),
                threshold,
                report: evaluate_test(env, tester, candidates)?,
            })
        })
        .collect()
}

fn trained<E: GoalEnv>(
    env: &E,
    config: &ExperimentConfig,
    seed: u64,
    groups: &[(usize, Vec<Candidate>)],
) -> Result<Vec<TestEvalRow>> {
    let schedule = match config.algorithm {
        Algorithm::Pchid => Schedule::Continuation,
        Algorithm::Pehid => Schedule::Synchronous,
        _ => bail!("test evaluation trains a HID learner; use algorithm.kind = pchid or pehid"),
    };
    let run = train_hid(env, &config.hid, schedule, seed, RunOptions::default())?;
    match config.hid.tester {
        TesterKind::Interaction => {
            let mut tester = InteractionTest::new(env.clone(), &run.policy);
            score(env, &mut tester, groups, "interaction", None)
        }
        TesterKind::Rnd(threshold) => {
            let value = match threshold {
                NoveltyThreshold::Fixed(v) => v,
                NoveltyThreshold::Percentile { q } => q,
            };
            let mut tester = RndTest::new(env, run.module.rnd_pairs());
            score(env, &mut tester, groups, "rnd", Some(value))
        }
        TesterKind::Oracle => {
            let mut tester = OracleTest::new(env);
            score(env, &mut tester, groups, "oracle", None)
        }
    }
}

/// Precision and recall of a solvability test per `k` on `episodes`
/// random rollouts seeded from `seed`.
pub fn test_eval(
    config: &ExperimentConfig,
    seed: u64,
    episodes: usize,
    source: TesterSource,
) -> Result<Vec<TestEvalRow>> {
    if matches!(config.env, EnvSpec::PointReach(_)) {
        bail!("pointreach has no step oracle to score tests against");
    }
    let max_k = config.hid.max_k;
    match source {
        TesterSource::Bfs => {
            let EnvSpec::GridWorld(c) = &config.env else {
                bail!("the BFS policy is only defined on gridworld");
            };
            let mut c = c.clone();
            c.layout = load_layout(config)?;
            let env = GridWorldEnv::new(c);
            let groups = sample_candidates(&env, episodes, max_k, seed)?;
            let mut tester = InteractionTest::new(env.clone(), &BfsPolicy);
            score(&env, &mut tester, &groups, "interaction-bfs", None)
        }
        TesterSource::Trained => with_env!(config, |env| {
            let groups = sample_candidates(&env, episodes, max_k, seed)?;
            trained(&env, config, seed, &groups)
        }),
    }
}
