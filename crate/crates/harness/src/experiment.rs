//! Running configured experiments and persisting their metrics.
//!
//! Every file an experiment writes lives under its output directory:
//!
//! * `config.txt`: the canonical configuration
//! * `seed-<s>.metrics.csv`: one row per training episode; the last row's
//!   `eval_success` is the final held-out evaluation
//! * `seed-<s>.ckpt` (and `seed-<s>.hid.ckpt` for combinations with a
//!   separate HID network): final network parameters
//! * `summary.csv`: mean and sample standard deviation of the final success
//!   across seeds
//! * `timing.csv`: wall-clock seconds per seed, kept apart so the metrics
//!   files stay byte-identical between reruns

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Component, Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use pchid_core::baselines::{
    train_dqn, train_ppo_lite, Combination, ContinuousPolicy, DiscretePolicy,
};
use pchid_core::envs::{
    BitFlipEnv, GoalEnv, GridLayout, GridWorldEnv, PointReachEnv,
};
use pchid_core::nn::{load_checkpoint, save_checkpoint, Mlp};
use pchid_core::policy::PolicyNet;
use pchid_core::seeding::derive_seed;
use pchid_core::trainers::{evaluate, train_hid, EpisodeMetrics, RunOptions, Schedule};

use crate::config::{sweep_key, Algorithm, EnvSpec, ExperimentConfig};
use crate::testeval::{test_eval, TesterSource, TestEvalRow};

/// Environment variable naming the directory all output paths are resolved
/// against. Defaults to the working directory.
pub const OUTPUT_ROOT_VAR: &str = "PCHID_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// `root/dir`, refusing directories that would escape `root`.
pub fn resolve_output_dir(root: &Path, dir: &Path) -> Result<PathBuf> {
    ensure!(
        dir.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)),
        "output directory {} must be relative and stay inside the output root",
        dir.display()
    );
    Ok(root.join(dir))
}

/// Builds the configured environment and evaluates `$body` with it bound to
/// `$env`.
macro_rules! with_env {
    ($config:expr, |$env:ident| $body:expr) => {{
        let config: &ExperimentConfig = $config;
        match &config.env {
            EnvSpec::GridWorld(c) => {
                let mut c = c.clone();
                c.layout = load_layout(config)?;
                let $env = GridWorldEnv::new(c);
                $body
            }
            EnvSpec::BitFlip(c) => {
                let $env = BitFlipEnv::new(c.clone());
                $body
            }
            EnvSpec::PointReach(c) => {
                let $env = PointReachEnv::new(c.clone());
                $body
            }
        }
    }};
}
pub(crate) use with_env;

pub(crate) fn load_layout(config: &ExperimentConfig) -> Result<Option<GridLayout>> {
    let Some(path) = &config.map_file else {
        return Ok(None);
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading map file {}", path.display()))?;
    let layout = GridLayout::parse(&text)
        .map_err(|e| anyhow!("map file {}: {e}", path.display()))?;
    Ok(Some(layout))
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<EpisodeMetrics>,
    /// Undiscounted return of every training episode, where the learner
    /// records it.
    pub returns: Option<Vec<f64>>,
    /// Greedy success on `eval.episodes` held-out episodes after training.
    pub final_success: f64,
    pub wall_clock: Duration,
    /// Final parameters: the acting network, then the separate HID network
    /// if there is one.
    pub networks: Vec<Mlp>,
}

fn eval_seed(config: &ExperimentConfig, seed: u64) -> u64 {
    derive_seed(config.eval.seed, seed)
}

fn train_on<E: GoalEnv>(env: &E, config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let eval_episodes = config.eval.episodes;
    let (metrics, returns, final_success, networks) = match config.algorithm {
        Algorithm::Pchid | Algorithm::Pehid => {
            let schedule = if config.algorithm == Algorithm::Pchid {
                Schedule::Continuation
            } else {
                Schedule::Synchronous
            };
            let run = train_hid(env, &config.hid, schedule, seed, RunOptions::default())?;
            let success = evaluate(env, &run.policy, eval_episodes, eval_seed(config, seed))?;
            (run.metrics, None, success, vec![run.policy.net])
        }
        Algorithm::Dqn | Algorithm::DqnHer => {
            let dqn = config.dqn.as_ref().expect("validated");
            let run = train_dqn(env, dqn, seed)?;
            let success = evaluate(env, &run.policy, eval_episodes, eval_seed(config, seed))?;
            let mut nets = vec![run.agent.q.net];
            nets.extend(run.hid_policy.map(|p| p.net));
            (run.metrics, None, success, nets)
        }
        Algorithm::PpoLite => {
            let ppo = config.ppo.as_ref().expect("validated");
            let run = train_ppo_lite(env, ppo, seed)?;
            let success = evaluate(env, &run.policy, eval_episodes, eval_seed(config, seed))?;
            let mut nets = vec![run.agent.actor.net];
            nets.extend(run.hid_policy.map(|p| p.net));
            (run.metrics, Some(run.returns), success, nets)
        }
    };
    Ok(RunRecord {
        config_hash: config.hash(),
        seed,
        metrics,
        returns,
        final_success,
        wall_clock: start.elapsed(),
        networks,
    })
}

/// Trains and evaluates one seed without touching the file system.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    with_env!(config, |env| train_on(&env, config, seed))
}

pub const METRICS_HEADER: [&str; 11] = [
    "episode",
    "success",
    "steps",
    "k_max",
    "buffer_sizes",
    "validation_accuracy",
    "loss",
    "eval_success",
    "intrinsic_reward",
    "mix_weight",
    "return",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-episode rows of `record`; the final evaluation replaces the last
/// row's `eval_success`.
pub fn write_metrics<W: std::io::Write>(record: &RunRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    let last = record.metrics.len().saturating_sub(1);
    for (i, m) in record.metrics.iter().enumerate() {
        let eval = if i == last {
            Some(record.final_success)
        } else {
            m.eval_success
        };
        let ret = record.returns.as_ref().and_then(|r| r.get(i).copied());
        w.write_record([
            m.episode.to_string(),
            u8::from(m.success).to_string(),
            m.steps.to_string(),
            m.k_max.to_string(),
            m.buffer_sizes
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            opt(m.validation_accuracy),
            opt(m.loss),
            opt(eval),
            opt(m.intrinsic_reward),
            opt(m.mix_weight),
            opt(ret),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub config_hash: String,
    pub label: String,
    pub env: String,
    pub seeds: usize,
    pub mean_success: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_success: f64,
}

pub const SUMMARY_HEADER: &str = "config_hash,label,env,seeds,mean_success,std_success";

impl Summary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.config_hash, self.label, self.env, self.seeds, self.mean_success, self.std_success
        )
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(config: &ExperimentConfig, records: &[RunRecord]) -> Summary {
    let finals: Vec<f64> = records.iter().map(|r| r.final_success).collect();
    let (mean, std) = mean_std(&finals);
    Summary {
        config_hash: config.hash(),
        label: config.label(),
        env: config.env.name().into(),
        seeds: records.len(),
        mean_success: mean,
        std_success: std,
    }
}

/// Recomputes `(seeds, mean, std)` of the final success from the metrics
/// files in `dir`.
pub fn summary_from_metrics(dir: &Path) -> Result<(usize, f64, f64)> {
    let mut finals = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".metrics.csv"))
        .collect();
    names.sort();
    for path in names {
        let mut reader = csv::Reader::from_path(&path)?;
        let column = reader
            .headers()?
            .iter()
            .position(|h| h == "eval_success")
            .ok_or_else(|| anyhow!("{} has no eval_success column", path.display()))?;
        let last = reader
            .records()
            .last()
            .ok_or_else(|| anyhow!("{} is empty", path.display()))??;
        finals.push(last[column].parse::<f64>()?);
    }
    ensure!(!finals.is_empty(), "no metrics files in {}", dir.display());
    let (mean, std) = mean_std(&finals);
    Ok((finals.len(), mean, std))
}

fn write_checkpoint(path: &Path, net: &Mlp) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    save_checkpoint(net, BufWriter::new(file))?;
    Ok(())
}

/// Runs every seed of `config`, writing all artifacts under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<(Vec<RunRecord>, Summary)> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("config.txt"), config.serialize())?;
    let mut records = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let record = run_seed(config, seed).with_context(|| format!("seed {seed}"))?;
        let metrics = File::create(out_dir.join(format!("seed-{seed}.metrics.csv")))?;
        write_metrics(&record, BufWriter::new(metrics))?;
        write_checkpoint(&out_dir.join(format!("seed-{seed}.ckpt")), &record.networks[0])?;
        if let Some(hid) = record.networks.get(1) {
            write_checkpoint(&out_dir.join(format!("seed-{seed}.hid.ckpt")), hid)?;
        }
        records.push(record);
    }
    let timing: String = std::iter::once("seed,wall_clock_s\n".to_string())
        .chain(
            records
                .iter()
                .map(|r| format!("{},{:.3}\n", r.seed, r.wall_clock.as_secs_f64())),
        )
        .collect();
    fs::write(out_dir.join("timing.csv"), timing)?;
    let summary = summarize(config, &records);
    fs::write(
        out_dir.join("summary.csv"),
        format!("{SUMMARY_HEADER}\n{}\n", summary.csv_row()),
    )?;
    Ok((records, summary))
}

fn read_checkpoint(path: &Path) -> Result<Mlp> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(load_checkpoint(std::io::BufReader::new(file))?)
}

fn wrap<E: GoalEnv>(env: &E, net: Mlp) -> Result<PolicyNet> {
    let mut policy = PolicyNet::new(env, &[1], 0)?;
    ensure!(
        net.input_size() == policy.net.input_size() && net.output_size() == policy.net.output_size(),
        "checkpoint maps {} inputs to {} outputs; this environment needs {} to {}",
        net.input_size(),
        net.output_size(),
        policy.net.input_size(),
        policy.net.output_size()
    );
    policy.net = net;
    Ok(policy)
}

fn evaluate_on<E: GoalEnv>(
    env: &E,
    config: &ExperimentConfig,
    policy: Mlp,
    hid: Option<Mlp>,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let main = wrap(env, policy)?;
    let success = match (config.combination, hid) {
        (Combination::Average { weight }, Some(hid)) => {
            let hid = wrap(env, hid)?;
            if config.algorithm == Algorithm::PpoLite {
                let p = ContinuousPolicy::Average { actor: main, hid, weight };
                evaluate(env, &p, episodes, seed)?
            } else {
                let p = DiscretePolicy::Average { q: main, hid, weight };
                evaluate(env, &p, episodes, seed)?
            }
        }
        (Combination::Average { .. }, None) => {
            bail!("averaging needs the HID checkpoint as well")
        }
        _ => evaluate(env, &main, episodes, seed)?,
    };
    Ok(success)
}

/// Greedy success of saved networks on the configured evaluation protocol
/// for run seed `seed`.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    checkpoint: &Path,
    hid_checkpoint: Option<&Path>,
    seed: u64,
) -> Result<f64> {
    let net = read_checkpoint(checkpoint)?;
    let hid = hid_checkpoint.map(read_checkpoint).transpose()?;
    let episodes = config.eval.episodes;
    let eval = eval_seed(config, seed);
    with_env!(config, |env| evaluate_on(&env, config, net, hid, episodes, eval))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub key: String,
    pub value: String,
    pub summary: Summary,
}

pub const SWEEP_HEADER: &str = "parameter,value,config_hash,label,seeds,mean_success,std_success";

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Solvability-test scores per swept value, for threshold sweeps on
    /// environments with a step oracle.
    pub test_reports: Vec<(String, TestEvalRow)>,
}

/// Candidate episodes scored per value in a threshold sweep.
const SWEEP_TEST_EPISODES: usize = 50;

/// One experiment per value of `parameter`, each in its own subdirectory of
/// `out_dir`, plus a merged `sweep.csv`.
pub fn sweep(
    config: &ExperimentConfig,
    parameter: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<SweepOutcome> {
    let key = sweep_key(parameter)
        .ok_or_else(|| anyhow!("`{parameter}` is not sweepable"))?;
    ensure!(!values.is_empty(), "sweep over `{key}` needs at least one value");
    let configs = values
        .iter()
        .map(|v| config.with(key, v).map_err(|e| anyhow!("{key} = {v}: {e}")))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    let mut outcome = SweepOutcome::default();
    let mut table = format!("{SWEEP_HEADER}\n");
    let mut reports = String::new();
    let score_tests = key == "tester.threshold"
        && matches!(config.algorithm, Algorithm::Pchid | Algorithm::Pehid)
        && !matches!(config.env, EnvSpec::PointReach(_));
    for (value, cfg) in values.iter().zip(&configs) {
        let value = cfg.get(key).unwrap_or(value).to_string();
        let dir = out_dir.join(format!("{key}={value}"));
        let (_, summary) = run_experiment(cfg, &dir)?;
        table.push_str(&format!(
            "{key},{value},{},{},{},{},{}\n",
            summary.config_hash, summary.label, summary.seeds, summary.mean_success, summary.std_success
        ));
        outcome.rows.push(SweepRow {
            key: key.into(),
            value: value.clone(),
            summary,
        });
        if score_tests {
            for row in test_eval(cfg, cfg.seeds[0], SWEEP_TEST_EPISODES, TesterSource::Trained)? {
                reports.push_str(&format!("{value},{}\n", row.csv_row()));
                outcome.test_reports.push((value.clone(), row));
            }
        }
    }
    fs::write(out_dir.join("sweep.csv"), table)?;
    if score_tests {
        fs::write(
            out_dir.join("test_reports.csv"),
            format!("value,{}\n{reports}", TestEvalRow::CSV_HEADER),
        )?;
    }
    Ok(outcome)
}
