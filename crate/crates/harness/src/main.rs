use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pchid_harness::analysis::{discrepancy_report, ou_analyze, table_csv, write_ou, OuSettings};
use pchid_harness::config::explain_defaults;
use pchid_harness::experiment::{
    evaluate_checkpoint, output_root, resolve_output_dir, run_experiment, sweep, OUTPUT_ROOT_VAR,
    SUMMARY_HEADER,
};
use pchid_harness::testeval::{test_eval, TestEvalRow, TesterSource};
use pchid_harness::{parse_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pchid", version, about = "Hindsight inverse dynamics experiments")]
#[command(after_help = "Output paths are resolved against $PCHID_OUTPUT_ROOT (default: .).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Fixed GridWorld map (`.` free, `#` wall, optional `S` and `G`).
    #[arg(long)]
    map_file: Option<PathBuf>,
    /// Seeds to run, e.g. `0,1,2` or `0..10`; replaces `run.seeds`.
    #[arg(long)]
    seeds: Option<String>,
    /// Replaces `run.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyChoice {
    Bfs,
    Trained,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, checkpoints and a summary.
    Train {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Print every setting with its origin before training.
        #[arg(long)]
        explain: bool,
    },
    /// Greedy success of a saved checkpoint on the configured evaluation protocol.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Separate HID network, for averaging combinations.
        #[arg(long)]
        hid_checkpoint: Option<PathBuf>,
        /// Run seed whose held-out episodes to use.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// One experiment per value of a parameter, merged into sweep.csv.
    Sweep {
        config: PathBuf,
        /// w, beta, lambda, threshold, max_k, or the full key.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// First-hitting-time quadrature against Monte Carlo for the normalized OU process.
    OuAnalyze {
        /// Normalized starting distances.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        s0: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-4)]
        dt: f64,
        #[arg(long, default_value_t = 50.0)]
        horizon: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value = "ou-analysis")]
        output_dir: PathBuf,
    },
    /// Precision and recall of a solvability test against the step oracle.
    TestEval {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "trained")]
        policy: PolicyChoice,
        /// Random rollouts that supply candidate pairs.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List every setting with its default and rationale, or resolve a config.
    Explain { config: Option<PathBuf> },
}

fn load(path: &PathBuf, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(map) = &overrides.map_file {
        config = config.with("gridworld.map_file", &map.to_string_lossy())?;
    }
    if let Some(seeds) = &overrides.seeds {
        config = config.with("run.seeds", seeds)?;
    }
    if let Some(dir) = &overrides.output_dir {
        config = config.with("run.output_dir", &dir.to_string_lossy())?;
    }
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let root = output_root();
    match cli.command {
        Command::Train {
            config,
            overrides,
            explain,
        } => {
            let config = load(&config, &overrides)?;
            if explain {
                print!("{}", config.explain());
            }
            let dir = resolve_output_dir(&root, &config.output_dir)?;
            let (records, summary) = run_experiment(&config, &dir)?;
            for r in &records {
                eprintln!(
                    "seed {}: success {:.3} ({:.1}s)",
                    r.seed,
                    r.final_success,
                    r.wall_clock.as_secs_f64()
                );
            }
            println!("{SUMMARY_HEADER}\n{}", summary.csv_row());
            eprintln!("wrote {}", dir.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            hid_checkpoint,
            seed,
            overrides,
        } => {
            let config = load(&config, &overrides)?;
            let success = evaluate_checkpoint(&config, &checkpoint, hid_checkpoint.as_deref(), seed)?;
            println!("{success}");
        }
        Command::Sweep {
            config,
            param,
            values,
            overrides,
        } => {
            let config = load(&config, &overrides)?;
            let dir = resolve_output_dir(&root, &config.output_dir)?;
            let outcome = sweep(&config, &param, &values, &dir)?;
            print!("{}", fs::read_to_string(dir.join("sweep.csv"))?);
            if !outcome.test_reports.is_empty() {
                print!("{}", fs::read_to_string(dir.join("test_reports.csv"))?);
            }
        }
        Command::OuAnalyze {
            s0,
            paths,
            dt,
            horizon,
            seed,
            output_dir,
        } => {
            let settings = OuSettings {
                starts: s0,
                paths,
                dt,
                horizon,
                seed,
            };
            let rows = ou_analyze(&settings)?;
            let dir = resolve_output_dir(&root, &output_dir)?;
            write_ou(&rows, &dir)?;
            print!("{}", table_csv(&rows));
            let report = discrepancy_report(&rows);
            if !report.is_empty() {
                eprintln!("{report}");
            }
        }
        Command::TestEval {
            config,
            policy,
            episodes,
            seed,
            overrides,
        } => {
            let config = load(&config, &overrides)?;
            let source = match policy {
                PolicyChoice::Bfs => TesterSource::Bfs,
                PolicyChoice::Trained => TesterSource::Trained,
            };
            let rows = test_eval(&config, seed, episodes, source)?;
            let mut out = format!("{}\n", TestEvalRow::CSV_HEADER);
            for row in &rows {
                out.push_str(&row.csv_row());
                out.push('\n');
            }
            let dir = resolve_output_dir(&root, &config.output_dir)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("test_eval.csv"), &out)?;
            print!("{out}");
        }
        Command::Explain { config: None } => {
            print!("{}", explain_defaults());
            println!("\nOutput root: ${OUTPUT_ROOT_VAR} (default: .)");
        }
        Command::Explain {
            config: Some(path),
        } => {
            let config = load(&path, &Overrides {
                map_file: None,
                seeds: None,
                output_dir: None,
            })?;
            print!("{}", config.explain());
            println!("# config hash {}", config.hash());
        }
    }
    Ok(())
}
