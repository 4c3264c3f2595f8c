//! Line-oriented experiment configuration.
//!
//! One `section.key = value` per line. `#` starts a comment, blank lines are
//! ignored. Only `env.kind` and `algorithm.kind` are required; every other
//! key that applies to the chosen environment and algorithm is filled from
//! its default, and keys that do not apply are rejected.
//!
//! Values are stored in canonical form (numbers re-printed, lists without
//! spaces), so serializing a parsed config and parsing it again gives an
//! equal config, and the config hash does not depend on key order or number
//! spelling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use pchid_core::baselines::{Combination, DqnConfig, EpsilonSchedule, PpoConfig};
use pchid_core::envs::{BitFlipConfig, GridEncoding, GridWorldConfig, PointReachConfig};
use pchid_core::hid::HerStrategy;
use pchid_core::policy::Exploration;
use pchid_core::solvability::NoveltyThreshold;
use pchid_core::trainers::{PchidConfig, TesterKind};
use sha2::{Digest, Sha256};

/// Where a problem was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum At {
    Line(usize),
    /// A required key was never given; carries the line after the last one.
    EndOfInput(usize),
    /// The offending value is a default.
    Default,
}

impl fmt::Display for At {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            At::Line(n) => write!(f, "line {n}"),
            At::EndOfInput(n) => write!(f, "line {n} (end of input)"),
            At::Default => write!(f, "default value"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{at}: expected `section.key = value`, got `{text}`")]
    Syntax { at: At, text: String },
    #[error("{at}: unknown key `{key}`")]
    UnknownKey { at: At, key: String },
    #[error("line {second}: duplicate key `{key}`, first set on line {first}")]
    Duplicate {
        key: String,
        first: usize,
        second: usize,
    },
    #[error("{at}: `{key}` expects {expected}, got `{value}`")]
    Type {
        at: At,
        key: String,
        expected: String,
        value: String,
    },
    #[error("{at}: missing required key `{key}`")]
    Missing { at: At, key: String },
    #[error("{at}: `{key}` does not apply to this experiment ({reason})")]
    NotApplicable { at: At, key: String, reason: String },
    #[error("{at}: invalid `{key}`: {reason}")]
    Invalid { at: At, key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Choice(&'static [&'static str]),
    /// Non-empty comma-separated unsigned integers.
    UintList,
    /// Like `UintList`; `a..b` expands to `a, a+1, ..., b-1`.
    Seeds,
    Path,
}

impl Kind {
    fn expected(self) -> String {
        match self {
            Kind::Uint => "a non-negative integer".into(),
            Kind::Float => "a finite number".into(),
            Kind::Choice(options) => format!("one of {}", options.join(", ")),
            Kind::UintList => "a comma-separated list of integers".into(),
            Kind::Seeds => "a list of seeds such as `0,1,2` or `0..10`".into(),
            Kind::Path => "a path".into(),
        }
    }

    /// Canonical spelling of `raw`, or `None` when it does not parse.
    fn canonical(self, raw: &str) -> Option<String> {
        let raw = raw.trim();
        match self {
            Kind::Uint => raw.parse::<u64>().ok().map(|v| v.to_string()),
            Kind::Float => raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|v| format!("{v:?}")),
            Kind::Choice(options) => {
                let lower = raw.to_ascii_lowercase();
                options.contains(&lower.as_str()).then_some(lower)
            }
            Kind::UintList => {
                let values = raw
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().ok())
                    .collect::<Option<Vec<_>>>()?;
                Some(join(&values))
            }
            Kind::Seeds => {
                let mut values = Vec::new();
                for part in raw.split(',') {
                    let part = part.trim();
                    if let Some((a, b)) = part.split_once("..") {
                        let (a, b) = (a.trim().parse::<u64>().ok()?, b.trim().parse::<u64>().ok()?);
                        if a >= b {
                            return None;
                        }
                        values.extend(a..b);
                    } else {
                        values.push(part.parse::<u64>().ok()?);
                    }
                }
                Some(join(&values))
            }
            Kind::Path => (!raw.is_empty()).then(|| raw.to_string()),
        }
    }
}

fn join(values: &[u64]) -> String {
    values
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// The selectors every other key's applicability depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Scope<'a> {
    env: &'a str,
    algorithm: &'a str,
    combination: &'a str,
    tester: &'a str,
}

impl Scope<'_> {
    fn uses_hid(&self) -> bool {
        matches!(self.algorithm, "pchid" | "pehid") || self.combination != "none"
    }

    fn is_rl(&self) -> bool {
        matches!(self.algorithm, "dqn" | "dqn+her" | "ppo-lite")
    }

    fn is_dqn(&self) -> bool {
        matches!(self.algorithm, "dqn" | "dqn+her")
    }
}

struct KeySpec {
    name: &'static str,
    kind: Kind,
    default: Option<&'static str>,
    applies: fn(&Scope) -> bool,
    /// Where the default comes from, for `explain`.
    source: &'static str,
}

const ENVS: &[&str] = &["gridworld", "bitflip", "pointreach"];
const ALGORITHMS: &[&str] = &["pchid", "pehid", "dqn", "dqn+her", "ppo-lite"];
const COMBINATIONS: &[&str] = &["none", "joint", "average", "intrinsic"];
const TESTERS: &[&str] = &["interaction", "rnd", "oracle"];
const THRESHOLD_MODES: &[&str] = &["percentile", "fixed"];
const ENCODINGS: &[&str] = &["flat", "flat-local", "relative"];

fn always(_: &Scope) -> bool {
    true
}
fn grid(s: &Scope) -> bool {
    s.env == "gridworld"
}
fn bitflip(s: &Scope) -> bool {
    s.env == "bitflip"
}
fn reach(s: &Scope) -> bool {
    s.env == "pointreach"
}
fn rl(s: &Scope) -> bool {
    s.is_rl()
}
fn hid(s: &Scope) -> bool {
    s.uses_hid()
}
fn rnd(s: &Scope) -> bool {
    s.uses_hid() && s.tester == "rnd"
}
fn joint(s: &Scope) -> bool {
    s.combination == "joint"
}
fn average(s: &Scope) -> bool {
    s.combination == "average"
}
fn intrinsic(s: &Scope) -> bool {
    s.combination == "intrinsic"
}
fn dqn(s: &Scope) -> bool {
    s.is_dqn()
}
fn her(s: &Scope) -> bool {
    s.algorithm == "dqn+her"
}
fn ppo(s: &Scope) -> bool {
    s.algorithm == "ppo-lite"
}

macro_rules! key {
    ($name:literal, $kind:expr, $default:expr, $applies:ident, $source:literal) => {
        KeySpec {
            name: $name,
            kind: $kind,
            default: $default,
            applies: $applies,
            source: $source,
        }
    };
}

static SCHEMA: &[KeySpec] = &[
    key!("env.kind", Kind::Choice(ENVS), None, always, "required"),
    key!("env.reward_scale", Kind::Float, Some("1.0"), always,
        "unscaled rewards; other values probe reward sensitivity"),
    key!("gridworld.size", Kind::Uint, Some("8"), grid, "scaled-down 8x8 map protocol"),
    key!("gridworld.obstacle_prob", Kind::Float, Some("0.3"), grid,
        "map generator: independent obstacle per cell"),
    key!("gridworld.horizon", Kind::Uint, Some("50"), grid, "GridWorld episode length"),
    key!("gridworld.success_reward", Kind::Float, Some("10.0"), grid, "GridWorld goal bonus"),
    key!("gridworld.step_reward", Kind::Float, Some("-0.02"), grid, "GridWorld per-step penalty"),
    key!("gridworld.encoding", Kind::Choice(ENCODINGS), Some("flat"), grid,
        "plain map + one-hot agent + one-hot goal; other encodings are opt-in"),
    key!("gridworld.map_file", Kind::Path, None, grid,
        "optional fixed map; random maps per episode when absent"),
    key!("bitflip.bits", Kind::Uint, Some("8"), bitflip, "8-bit flipping task"),
    key!("bitflip.horizon", Kind::Uint, None, bitflip,
        "optional; defaults to the number of bits"),
    key!("pointreach.dim", Kind::Uint, Some("3"), reach, "3-D reaching"),
    key!("pointreach.max_step", Kind::Float, Some("0.05"), reach, "displacement cap per step"),
    key!("pointreach.tolerance", Kind::Float, Some("0.05"), reach,
        "goal tolerance, equal to the displacement cap"),
    key!("pointreach.horizon", Kind::Uint, Some("50"), reach, "episode length of the reach task"),
    key!("algorithm.kind", Kind::Choice(ALGORITHMS), None, always, "required"),
    key!("algorithm.combination", Kind::Choice(COMBINATIONS), Some("none"), rl,
        "plain RL baseline unless a combination is requested"),
    key!("combo.lambda", Kind::Float, Some("1.0"), joint,
        "equal weighting of the supervised and TD terms"),
    key!("combo.rl_weight", Kind::Float, Some("1.0"), joint,
        "RL term at full weight; 0 reduces joint training to pure HID"),
    key!("combo.weight", Kind::Float, Some("0.5"), average, "midpoint of the averaging sweep"),
    key!("combo.beta", Kind::Float, Some("0.5"), intrinsic, "midpoint of the intrinsic-bonus sweep"),
    key!("train.episodes", Kind::Uint, Some("500"), always, "500-episode training budget"),
    key!("hid.max_k", Kind::Uint, Some("5"), hid, "largest step count of the curriculum"),
    key!("hid.hidden", Kind::UintList, Some("64,64"), hid, "two 64-unit tanh layers"),
    key!("hid.learning_rate", Kind::Float, Some("0.001"), hid, "Adam step size for supervised updates"),
    key!("hid.batch_size", Kind::Uint, Some("64"), hid, "minibatch drawn across all levels"),
    key!("hid.updates_per_episode", Kind::Uint, Some("40"), hid, "gradient steps after every episode"),
    key!("hid.buffer_capacity", Kind::Uint, Some("50000"), hid,
        "per-level ring size; the merged ring holds max_k times this"),
    key!("hid.validation_fraction", Kind::Float, Some("0.1"), hid,
        "share of relabeled examples held out for the convergence gate"),
    key!("hid.validation_capacity", Kind::Uint, Some("5000"), hid, "per-level held-out ring size"),
    key!("hid.convergence_window", Kind::Uint, Some("20"), hid,
        "held-out accuracy must stay flat over this many episodes"),
    key!("hid.convergence_threshold", Kind::Float, Some("0.01"), hid,
        "max - min of held-out accuracy over the window"),
    key!("hid.min_growth_examples", Kind::Uint, Some("500"), hid,
        "top level needs this many examples before the curriculum grows"),
    key!("hid.epsilon", Kind::Float, Some("0.2"), hid, "random-action probability while collecting"),
    key!("hid.sigma_frac", Kind::Float, Some("0.2"), hid,
        "continuous exploration noise, as a fraction of the displacement cap"),
    key!("tester.kind", Kind::Choice(TESTERS), Some("interaction"), hid,
        "rollout probe with a frozen policy copy"),
    key!("tester.threshold_mode", Kind::Choice(THRESHOLD_MODES), Some("percentile"), rnd,
        "novelty cut relative to recent scores"),
    key!("tester.threshold", Kind::Float, Some("0.9"), rnd,
        "90th percentile of recent novelty scores"),
    key!("dqn.hidden", Kind::UintList, Some("64,64"), dqn, "same trunk as the HID policy"),
    key!("dqn.learning_rate", Kind::Float, Some("0.0003"), dqn,
        "tuned: 0.001 let Q-values diverge past the maximum return with HER"),
    key!("dqn.gamma", Kind::Float, Some("0.98"), dqn, "discount for sparse goal rewards"),
    key!("dqn.replay_capacity", Kind::Uint, Some("100000"), dqn, "holds every transition of a run"),
    key!("dqn.batch_size", Kind::Uint, Some("64"), dqn, "matches the HID minibatch"),
    key!("dqn.updates_per_episode", Kind::Uint, Some("40"), dqn, "matches the HID update count"),
    key!("dqn.target_sync_episodes", Kind::Uint, Some("20"), dqn, "hard target-network copy period"),
    key!("dqn.epsilon_start", Kind::Float, Some("1.0"), dqn, "fully random at first"),
    key!("dqn.epsilon_end", Kind::Float, Some("0.05"), dqn, "residual exploration"),
    key!("dqn.epsilon_decay_episodes", Kind::Uint, Some("250"), dqn,
        "linear decay over half the budget"),
    key!("dqn.her_k_future", Kind::Uint, Some("4"), her, "future strategy with 4 extra goals"),
    key!("ppo.hidden", Kind::UintList, Some("64,64"), ppo, "same trunk as the HID policy"),
    key!("ppo.actor_lr", Kind::Float, Some("0.0003"), ppo, "common PPO actor step size"),
    key!("ppo.critic_lr", Kind::Float, Some("0.001"), ppo, "critic learns faster than the actor"),
    key!("ppo.gamma", Kind::Float, Some("0.98"), ppo, "matches the DQN discount"),
    key!("ppo.clip", Kind::Float, Some("0.2"), ppo, "standard ratio clip"),
    key!("ppo.episodes_per_update", Kind::Uint, Some("4"), ppo, "on-policy batch of 4 episodes"),
    key!("ppo.epochs", Kind::Uint, Some("4"), ppo, "passes over each batch"),
    key!("ppo.minibatch", Kind::Uint, Some("64"), ppo, "samples per actor/critic step"),
    key!("ppo.init_log_sigma", Kind::Float, Some("-0.7"), ppo,
        "initial std of about half the displacement cap"),
    key!("eval.episodes", Kind::Uint, Some("200"), always, "200 unseen episodes per final evaluation"),
    key!("eval.every", Kind::Uint, Some("0"), always, "no periodic evaluation during training"),
    key!("eval.seed", Kind::Uint, Some("1000003"), always,
        "held-out stream; each run evaluates on derive_seed(eval.seed, run seed)"),
    key!("run.seeds", Kind::Seeds, Some("0"), always, "single seed unless a list is given"),
    key!("run.output_dir", Kind::Path, Some("runs"), always,
        "relative to the output root; excluded from the config hash"),
];

fn spec(name: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|k| k.name == name)
}

/// Keys accepted by [`sweep`](crate::experiment::sweep), with short aliases.
pub const SWEEPABLE: &[(&str, &str)] = &[
    ("w", "combo.weight"),
    ("weight", "combo.weight"),
    ("beta", "combo.beta"),
    ("lambda", "combo.lambda"),
    ("threshold", "tester.threshold"),
    ("max_k", "hid.max_k"),
];

pub fn sweep_key(parameter: &str) -> Option<&'static str> {
    SWEEPABLE
        .iter()
        .find(|(alias, key)| *alias == parameter || *key == parameter)
        .map(|(_, key)| *key)
}

#[derive(Debug, Clone)]
pub enum EnvSpec {
    GridWorld(GridWorldConfig),
    BitFlip(BitFlipConfig),
    PointReach(PointReachConfig),
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::GridWorld(_) => "gridworld",
            EnvSpec::BitFlip(_) => "bitflip",
            EnvSpec::PointReach(_) => "pointreach",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Pchid,
    Pehid,
    Dqn,
    DqnHer,
    PpoLite,
}

impl Algorithm {
    fn parse(s: &str) -> Self {
        match s {
            "pchid" => Algorithm::Pchid,
            "pehid" => Algorithm::Pehid,
            "dqn" => Algorithm::Dqn,
            "dqn+her" => Algorithm::DqnHer,
            _ => Algorithm::PpoLite,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pchid => "pchid",
            Algorithm::Pehid => "pehid",
            Algorithm::Dqn => "dqn",
            Algorithm::DqnHer => "dqn+her",
            Algorithm::PpoLite => "ppo-lite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub every: usize,
    pub seed: u64,
}

/// A validated experiment. Two configs are equal when their canonical
/// settings are.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub map_file: Option<PathBuf>,
    pub algorithm: Algorithm,
    /// Settings of the HID learner, standalone or attached to a baseline.
    pub hid: PchidConfig,
    pub combination: Combination,
    pub dqn: Option<DqnConfig>,
    pub ppo: Option<PpoConfig>,
    pub seeds: Vec<u64>,
    pub eval: EvalProtocol,
    pub output_dir: PathBuf,
    settings: BTreeMap<String, String>,
    /// Line each explicitly given key came from.
    lines: BTreeMap<String, usize>,
}

impl PartialEq for ExperimentConfig {
    fn eq(&self, other: &Self) -> bool {
        self.settings == other.settings
    }
}

/// Parses a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut raw: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                at: At::Line(n),
                text: content.into(),
            });
        };
        let key = key.trim();
        if !key.contains('.') || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                at: At::Line(n),
                text: content.into(),
            });
        }
        if spec(key).is_none() {
            return Err(ConfigError::UnknownKey {
                at: At::Line(n),
                key: key.into(),
            });
        }
        if let Some((_, first)) = raw.get(key) {
            return Err(ConfigError::Duplicate {
                key: key.into(),
                first: *first,
                second: n,
            });
        }
        raw.insert(key.to_string(), (value.trim().to_string(), n));
    }
    resolve(raw, last_line + 1)
}

fn resolve(
    raw: BTreeMap<String, (String, usize)>,
    end: usize,
) -> Result<ExperimentConfig, ConfigError> {
    let mut settings = BTreeMap::new();
    let mut lines = BTreeMap::new();
    for (key, (value, line)) in &raw {
        let kind = spec(key).expect("checked while reading").kind;
        let canonical = kind.canonical(value).ok_or_else(|| ConfigError::Type {
            at: At::Line(*line),
            key: key.clone(),
            expected: kind.expected(),
            value: value.clone(),
        })?;
        settings.insert(key.clone(), canonical);
        lines.insert(key.clone(), *line);
    }
    for required in ["env.kind", "algorithm.kind"] {
        if !settings.contains_key(required) {
            return Err(ConfigError::Missing {
                at: At::EndOfInput(end),
                key: required.into(),
            });
        }
    }
    let get = |k: &str| settings.get(k).map(String::as_str);
    let scope = Scope {
        env: get("env.kind").unwrap(),
        algorithm: get("algorithm.kind").unwrap(),
        combination: get("algorithm.combination").unwrap_or("none"),
        tester: get("tester.kind").unwrap_or("interaction"),
    };
    for key in settings.keys() {
        let spec = spec(key).unwrap();
        if !(spec.applies)(&scope) {
            return Err(ConfigError::NotApplicable {
                at: At::Line(lines[key]),
                key: key.clone(),
                reason: format!(
                    "env.kind = {}, algorithm.kind = {}, algorithm.combination = {}",
                    scope.env, scope.algorithm, scope.combination
                ),
            });
        }
    }
    let mut filled = settings.clone();
    for spec in SCHEMA.iter().filter(|s| (s.applies)(&scope)) {
        if let Some(default) = spec.default {
            filled.entry(spec.name.to_string()).or_insert_with(|| default.to_string());
        }
    }
    build(filled, lines)
}

struct Reader<'a> {
    settings: &'a BTreeMap<String, String>,
    lines: &'a BTreeMap<String, usize>,
}

impl Reader<'_> {
    fn at(&self, key: &str) -> At {
        self.lines.get(key).map_or(At::Default, |&n| At::Line(n))
    }

    fn invalid(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            at: self.at(key),
            key: key.into(),
            reason: reason.into(),
        }
    }

    fn text(&self, key: &str) -> &str {
        &self.settings[key]
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.settings.get(key).map(String::as_str)
    }

    fn uint(&self, key: &str) -> usize {
        self.settings[key].parse().expect("canonical")
    }

    fn u64(&self, key: &str) -> u64 {
        self.settings[key].parse().expect("canonical")
    }

    fn float(&self, key: &str) -> f64 {
        self.settings[key].parse().expect("canonical")
    }

    fn list(&self, key: &str) -> Vec<u64> {
        self.settings[key]
            .split(',')
            .map(|v| v.parse().expect("canonical"))
            .collect()
    }

    fn positive(&self, key: &str) -> Result<usize, ConfigError> {
        match self.uint(key) {
            0 => Err(self.invalid(key, "must be positive")),
            v => Ok(v),
        }
    }

    fn positive_f(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.float(key);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be positive"))
        }
    }

    fn in_range(&self, key: &str, lo: f64, hi: f64) -> Result<f64, ConfigError> {
        let v = self.float(key);
        if (lo..=hi).contains(&v) {
            Ok(v)
        } else {
            Err(self.invalid(key, format!("must lie in [{lo}, {hi}]")))
        }
    }

    fn hidden(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let h: Vec<usize> = self.list(key).into_iter().map(|v| v as usize).collect();
        if h.contains(&0) {
            return Err(self.invalid(key, "layer sizes must be positive"));
        }
        Ok(h)
    }
}

fn build(
    settings: BTreeMap<String, String>,
    lines: BTreeMap<String, usize>,
) -> Result<ExperimentConfig, ConfigError> {
    let r = Reader {
        settings: &settings,
        lines: &lines,
    };
    let reward_scale = r.float("env.reward_scale");
    let (env, horizon, discrete) = match r.text("env.kind") {
        "gridworld" => {
            let size = r.positive("gridworld.size")?;
            if size < 2 {
                return Err(r.invalid("gridworld.size", "maps need at least 2x2 cells"));
            }
            let config = GridWorldConfig {
                size,
                obstacle_prob: r.in_range("gridworld.obstacle_prob", 0.0, 0.9)?,
                horizon: r.positive("gridworld.horizon")?,
                success_reward: r.float("gridworld.success_reward"),
                step_reward: r.float("gridworld.step_reward"),
                reward_scale,
                encoding: match r.text("gridworld.encoding") {
                    "flat" => GridEncoding::Flat,
                    "flat-local" => GridEncoding::FlatLocal,
                    _ => GridEncoding::Relative,
                },
                layout: None,
            };
            let h = config.horizon;
            (EnvSpec::GridWorld(config), h, true)
        }
        "bitflip" => {
            let bits = r.positive("bitflip.bits")?;
            let horizon = match r.opt("bitflip.horizon") {
                Some(_) => Some(r.positive("bitflip.horizon")?),
                None => None,
            };
            let config = BitFlipConfig {
                bits,
                horizon,
                reward_scale,
            };
            (EnvSpec::BitFlip(config), horizon.unwrap_or(bits), true)
        }
        _ => {
            let config = PointReachConfig {
                dim: r.positive("pointreach.dim")?,
                max_step: r.positive_f("pointreach.max_step")?,
                tolerance: r.positive_f("pointreach.tolerance")?,
                horizon: r.positive("pointreach.horizon")?,
                reward_scale,
            };
            let h = config.horizon;
            (EnvSpec::PointReach(config), h, false)
        }
    };
    let map_file = r.opt("gridworld.map_file").map(PathBuf::from);

    let algorithm = Algorithm::parse(r.text("algorithm.kind"));
    match algorithm {
        Algorithm::Dqn | Algorithm::DqnHer if !discrete => {
            return Err(r.invalid("algorithm.kind", "DQN needs a discrete action space"))
        }
        Algorithm::PpoLite if discrete => {
            return Err(r.invalid("algorithm.kind", "PPO-lite needs a continuous action space"))
        }
        _ => {}
    }
    let combination = match r.opt("algorithm.combination").unwrap_or("none") {
        "joint" => Combination::Joint {
            lambda: r.float("combo.lambda"),
            rl_weight: r.float("combo.rl_weight"),
        },
        "average" => Combination::Average {
            weight: r.in_range("combo.weight", 0.0, 1.0)?,
        },
        "intrinsic" => Combination::Intrinsic {
            beta: r.float("combo.beta"),
        },
        _ => Combination::None,
    };
    if let Combination::Joint { lambda, rl_weight } = combination {
        if lambda < 0.0 || rl_weight < 0.0 {
            let key = if lambda < 0.0 { "combo.lambda" } else { "combo.rl_weight" };
            return Err(r.invalid(key, "weights must be non-negative"));
        }
    }
    if let Combination::Intrinsic { beta } = combination {
        if beta < 0.0 {
            return Err(r.invalid("combo.beta", "must be non-negative"));
        }
    }

    let episodes = r.positive("train.episodes")?;
    let eval = EvalProtocol {
        episodes: r.positive("eval.episodes")?,
        every: r.uint("eval.every"),
        seed: r.u64("eval.seed"),
    };

    let mut hid = PchidConfig {
        episodes,
        eval_every: eval.every,
        eval_episodes: eval.episodes,
        ..PchidConfig::default()
    };
    if settings.contains_key("hid.max_k") {
        let max_k = r.positive("hid.max_k")?;
        if max_k > horizon {
            return Err(r.invalid("hid.max_k", format!("exceeds the episode horizon {horizon}")));
        }
        hid.max_k = max_k;
        hid.hidden = r.hidden("hid.hidden")?;
        hid.learning_rate = r.positive_f("hid.learning_rate")?;
        hid.batch_size = r.positive("hid.batch_size")?;
        hid.updates_per_episode = r.uint("hid.updates_per_episode");
        hid.buffer_capacity = r.positive("hid.buffer_capacity")?;
        hid.validation_fraction = r.float("hid.validation_fraction");
        if !(0.0..1.0).contains(&hid.validation_fraction) {
            return Err(r.invalid("hid.validation_fraction", "must lie in [0, 1)"));
        }
        hid.validation_capacity = r.positive("hid.validation_capacity")?;
        hid.convergence_window = r.positive("hid.convergence_window")?;
        hid.convergence_threshold = r.positive_f("hid.convergence_threshold")?;
        hid.min_growth_examples = r.uint("hid.min_growth_examples");
        hid.exploration = Exploration {
            epsilon: r.in_range("hid.epsilon", 0.0, 1.0)?,
            sigma_frac: r.in_range("hid.sigma_frac", 0.0, 10.0)?,
        };
        hid.tester = match r.text("tester.kind") {
            "interaction" => TesterKind::Interaction,
            "oracle" => {
                if matches!(env, EnvSpec::PointReach(_)) {
                    return Err(r.invalid("tester.kind", "pointreach has no step oracle"));
                }
                TesterKind::Oracle
            }
            _ => TesterKind::Rnd(match r.text("tester.threshold_mode") {
                "fixed" => NoveltyThreshold::Fixed(r.float("tester.threshold")),
                _ => NoveltyThreshold::Percentile {
                    q: r.in_range("tester.threshold", 0.0, 1.0)?,
                },
            }),
        };
    }

    let dqn = if matches!(algorithm, Algorithm::Dqn | Algorithm::DqnHer) {
        Some(DqnConfig {
            episodes,
            hidden: r.hidden("dqn.hidden")?,
            learning_rate: r.positive_f("dqn.learning_rate")?,
            gamma: r.in_range("dqn.gamma", 0.0, 1.0)?,
            replay_capacity: r.positive("dqn.replay_capacity")?,
            batch_size: r.positive("dqn.batch_size")?,
            updates_per_episode: r.uint("dqn.updates_per_episode"),
            target_sync_episodes: r.positive("dqn.target_sync_episodes")?,
            epsilon: EpsilonSchedule {
                start: r.in_range("dqn.epsilon_start", 0.0, 1.0)?,
                end: r.in_range("dqn.epsilon_end", 0.0, 1.0)?,
                decay_episodes: r.uint("dqn.epsilon_decay_episodes"),
            },
            her: (algorithm == Algorithm::DqnHer).then(|| HerStrategy::Future {
                k_future: r.uint("dqn.her_k_future"),
            }),
            combination,
            hid: hid.clone(),
            eval_every: eval.every,
            eval_episodes: eval.episodes,
        })
    } else {
        None
    };
    let ppo = if algorithm == Algorithm::PpoLite {
        Some(PpoConfig {
            episodes,
            hidden: r.hidden("ppo.hidden")?,
            actor_lr: r.positive_f("ppo.actor_lr")?,
            critic_lr: r.positive_f("ppo.critic_lr")?,
            gamma: r.in_range("ppo.gamma", 0.0, 1.0)?,
            clip: r.positive_f("ppo.clip")?,
            episodes_per_update: r.positive("ppo.episodes_per_update")?,
            epochs: r.positive("ppo.epochs")?,
            minibatch: r.positive("ppo.minibatch")?,
            init_log_sigma: r.float("ppo.init_log_sigma"),
            combination,
            hid: hid.clone(),
            eval_every: eval.every,
            eval_episodes: eval.episodes,
        })
    } else {
        None
    };

    let seeds = r.list("run.seeds");
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(r.invalid("run.seeds", "seeds must be distinct"));
    }
    let output_dir = PathBuf::from(r.text("run.output_dir"));

    Ok(ExperimentConfig {
        env,
        map_file,
        algorithm,
        hid,
        combination,
        dqn,
        ppo,
        seeds,
        eval,
        output_dir,
        settings,
        lines,
    })
}

impl ExperimentConfig {
    /// Canonical document: every applicable key, sorted.
    pub fn serialize(&self) -> String {
        self.settings
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical settings without the output directory, in
    /// lowercase hex.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.settings.iter().filter(|(k, _)| *k != "run.output_dir") {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.settings.get(key).map(String::as_str)
    }

    /// Short description such as `dqn/average` or `pchid`.
    pub fn label(&self) -> String {
        match self.get("algorithm.combination") {
            Some(c) if c != "none" => format!("{}/{c}", self.algorithm.name()),
            _ => self.algorithm.name().to_string(),
        }
    }

    /// Re-validates with `key` set to `value`, as if it had been written on
    /// the line after the last one.
    pub fn with(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let Some(spec) = spec(key) else {
            return Err(ConfigError::UnknownKey {
                at: At::Default,
                key: key.into(),
            });
        };
        let line = self.lines.values().max().copied().unwrap_or(0) + 1;
        let mut raw: BTreeMap<String, (String, usize)> = self
            .lines
            .iter()
            .map(|(k, &n)| (k.clone(), (self.settings[k].clone(), n)))
            .collect();
        raw.insert(spec.name.to_string(), (value.to_string(), line));
        resolve(raw, line + 1)
    }

    /// One line per applicable key: value, where it came from, and the
    /// rationale behind the default.
    pub fn explain(&self) -> String {
        let mut out = String::new();
        for spec in SCHEMA {
            let Some(value) = self.settings.get(spec.name) else {
                continue;
            };
            let origin = match self.lines.get(spec.name) {
                Some(n) => format!("line {n}"),
                None => "default".into(),
            };
            out.push_str(&format!(
                "{:<28} = {:<12} [{origin}] {}\n",
                spec.name, value, spec.source
            ));
        }
        out
    }
}

/// Every key with its default and rationale, independent of any config.
pub fn explain_defaults() -> String {
    SCHEMA
        .iter()
        .map(|s| {
            format!(
                "{:<28} = {:<12} {}\n",
                s.name,
                s.default.unwrap_or("-"),
                s.source
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "env.kind = gridworld\nalgorithm.kind = pchid\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(
            c.hid,
            PchidConfig {
                eval_episodes: 200,
                ..PchidConfig::default()
            }
        );
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.eval.episodes, 200);
        assert!(c.dqn.is_none());
        assert!(c.get("dqn.gamma").is_none());
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = parse_config("env.kind = bitflip\n\nenv.kind = gridworld\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::Duplicate {
                key: "env.kind".into(),
                first: 1,
                second: 3
            }
        );
        assert!(err.to_string().contains("line 3") && err.to_string().contains("line 1"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let unknown = parse_config("env.kind = gridworld\nenv.colour = red\n").unwrap_err();
        assert!(matches!(unknown, ConfigError::UnknownKey { at: At::Line(2), .. }));
        let typed = parse_config("env.kind = gridworld\nalgorithm.kind = pchid\nhid.max_k = five\n")
            .unwrap_err();
        assert!(matches!(typed, ConfigError::Type { at: At::Line(3), .. }));
        let missing = parse_config("env.kind = gridworld\n").unwrap_err();
        assert!(matches!(missing, ConfigError::Missing { at: At::EndOfInput(2), .. }));
        let syntax = parse_config("env.kind gridworld\n").unwrap_err();
        assert!(matches!(syntax, ConfigError::Syntax { at: At::Line(1), .. }));
        let stray = parse_config(&format!("{MINIMAL}dqn.gamma = 0.9\n")).unwrap_err();
        assert!(matches!(stray, ConfigError::NotApplicable { at: At::Line(3), .. }));
        let range = parse_config(&format!("{MINIMAL}hid.max_k = 80\n")).unwrap_err();
        assert!(matches!(range, ConfigError::Invalid { at: At::Line(3), .. }));
    }

    #[test]
    fn incompatible_algorithm_is_rejected() {
        assert!(parse_config("env.kind = pointreach\nalgorithm.kind = dqn\n").is_err());
        assert!(parse_config("env.kind = bitflip\nalgorithm.kind = ppo-lite\n").is_err());
    }

    #[test]
    fn seeds_expand_and_must_be_distinct() {
        let c = parse_config(&format!("{MINIMAL}run.seeds = 0..3, 7\n")).unwrap();
        assert_eq!(c.seeds, vec![0, 1, 2, 7]);
        assert!(parse_config(&format!("{MINIMAL}run.seeds = 1,1\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}run.seeds = 3..3\n")).is_err());
    }

    #[test]
    fn combination_keys_follow_the_mode() {
        let text = "env.kind = gridworld\nalgorithm.kind = dqn\nalgorithm.combination = average\ncombo.weight = 0.25\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.combination, Combination::Average { weight: 0.25 });
        assert!(c.get("hid.max_k").is_some());
        assert!(parse_config(&format!("{text}combo.beta = 1\n")).is_err());
    }

    #[test]
    fn comments_and_spelling_do_not_matter() {
        let a = parse_config("# header\nenv.kind = GridWorld  # trailing\nalgorithm.kind = pchid\nhid.learning_rate = 1e-3\n").unwrap();
        let b = parse_config(MINIMAL).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn output_dir_is_not_hashed() {
        let a = parse_config(MINIMAL).unwrap();
        let b = parse_config(&format!("{MINIMAL}run.output_dir = elsewhere\n")).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn with_revalidates() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.with("hid.max_k", "3").unwrap().hid.max_k, 3);
        assert!(c.with("hid.max_k", "0").is_err());
        assert!(c.with("combo.weight", "0.5").is_err());
    }

    #[test]
    fn explain_covers_every_applicable_key() {
        let c = parse_config(MINIMAL).unwrap();
        let text = c.explain();
        assert_eq!(text.lines().count(), c.serialize().lines().count());
        assert!(text.contains("env.kind") && text.contains("[line 1]"));
        assert!(text.contains("[default]"));
        assert_eq!(explain_defaults().lines().count(), SCHEMA.len());
    }
}
