use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caption_grpo::config::{ConfigError, ExperimentConfig};
use caption_grpo::dataio::{load_records, records_from_tasks, save_records};
use caption_grpo::env::{generate_split, text_only_bayes_accuracy};
use caption_grpo::grpo::{beta_at, KlSchedule, KlStrategy};
use caption_grpo::metrics::export_json_lines;
use caption_grpo::policy::gradient_check;
use caption_grpo::trainer::{
    caption_ablation_rows, evaluate, kl_schedule_rows, run_experiment, run_sweep, summarize_sweep, Checkpoint, RunOptions,
    TrainError,
};
use clap::{Parser, Subcommand, ValueEnum};

/// Environment variable naming the default config file.
const CONFIG_ENV: &str = "CAPGRPO_CONFIG";

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_TRAIN: u8 = 5;
const EXIT_GRADCHECK: u8 = 6;

#[derive(Parser)]
#[command(name = "capgrpo", version, about = "Caption-reason-answer GRPO on a synthetic shortcut task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Config file (`key = value` lines); defaults to $CAPGRPO_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the plain GRPO baseline instead of the full configuration.
    #[arg(long)]
    baseline: bool,
    /// Override a setting, e.g. `--set learning_rate=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Caption,
    Kl,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on both splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample at the training temperature instead of greedy decoding.
        #[arg(long)]
        sampled: bool,
    },
    /// Run a sweep: the caption ablation or the KL schedule comparison.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "caption")]
        sweep: Sweep,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// Maximum concurrent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        resume: bool,
    },
    /// Check the policy gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the KL coefficient at every step of a schedule.
    Schedule {
        #[arg(long, default_value = "cosine")]
        strategy: String,
        #[arg(long, default_value_t = 0.04)]
        beta: f64,
        #[arg(long, default_value_t = 100)]
        t_max: u64,
    },
    /// Convert a metrics CSV to JSON lines.
    ExportMetrics {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keep only these columns.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
    },
    /// Write the synthetic splits as JSONL records, or validate a JSONL file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Validate this file instead of generating.
        #[arg(long)]
        validate: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config(_) => EXIT_CONFIG,
            TrainError::Io { .. } | TrainError::Checkpoint { .. } | TrainError::Metrics(_) => EXIT_IO,
            _ => EXIT_TRAIN,
        };
        Failure::new(code, e)
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = if args.baseline {
        ExperimentConfig::baseline()
    } else {
        ExperimentConfig::full()
    };
    let path = args.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(p) = path {
        let text = std::fs::read_to_string(&p).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", p.display())))?;
        cfg.apply_kv_text(&text)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::new(EXIT_USAGE, format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, output_dir, resume } => {
            let config = resolve_config(&cfg)?;
            let opts = RunOptions {
                resume,
                ..RunOptions::default()
            };
            let s = run_experiment(&config, &output_dir, &opts)?;
            println!(
                "steps {}  train_acc {:.4}  test_acc {:.4}  test_easy {:.4}  test_hard {:.4}  mean_len {:.2}  judge_errors {}",
                s.steps, s.train.accuracy, s.test.accuracy, s.test.easy_accuracy, s.test.hard_accuracy, s.test.mean_output_length, s.judge_errors
            );
        }
        Command::Eval { checkpoint, sampled } => {
            let state = Checkpoint::load(&checkpoint)?.restore(None)?;
            for (name, split) in [("train", &state.train), ("test", &state.test)] {
                let r = evaluate(&state, split, !sampled)?;
                println!(
                    "{name}: accuracy {:.4} easy {:.4} ({}) hard {:.4} ({}) format {:.4} mean_len {:.2} caption_sufficiency {:.4}",
                    r.accuracy, r.easy_accuracy, r.easy_tasks, r.hard_accuracy, r.hard_tasks, r.format_rate, r.mean_output_length, r.caption_sufficiency
                );
            }
        }
        Command::Ablate {
            cfg,
            sweep,
            output_dir,
            seeds,
            workers,
            resume,
        } => {
            let base = resolve_config(&cfg)?;
            let rows = match sweep {
                Sweep::Caption => caption_ablation_rows(&base),
                Sweep::Kl => kl_schedule_rows(&base),
            };
            let results = run_sweep(&rows, &seeds, &output_dir, workers, resume)?;
            println!("{:<32} {:>14} {:>14}", "row", "median_test", "median_hard");
            for (name, acc, hard) in summarize_sweep(&rows, &results) {
                println!("{name:<32} {acc:>14.4} {hard:>14.4}");
            }
        }
        Command::Gradcheck {
            instances,
            step,
            tolerance,
            hidden,
            seed,
        } => {
            let r = gradient_check(instances, step, hidden, seed).map_err(|e| Failure::new(EXIT_TRAIN, e))?;
            println!(
                "instances {}  coordinates {}  max_relative_error {:.3e}  tolerance {:.1e}",
                r.instances, r.coordinates_checked, r.max_relative_error, tolerance
            );
            if !(r.max_relative_error < tolerance) {
                return Err(Failure::new(EXIT_GRADCHECK, format!("gradient check failed on instance {}", r.worst_instance)));
            }
        }
        Command::Schedule { strategy, beta, t_max } => {
            let s = KlStrategy::parse_name(&strategy)
                .ok_or_else(|| Failure::new(EXIT_USAGE, format!("unknown strategy `{strategy}`")))?;
            let sched = KlSchedule::new(beta, s, t_max).map_err(|e| Failure::new(EXIT_USAGE, e))?;
            for t in 0..=t_max {
                let b = beta_at(&sched, t).map_err(|e| Failure::new(EXIT_USAGE, e))?;
                println!("{t}\t{b}");
            }
        }
        Command::ExportMetrics { input, output, columns } => {
            let text = export_json_lines(&input, columns.as_deref()).map_err(|e| Failure::new(EXIT_IO, e))?;
            match output {
                Some(p) => write_file(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::GenData { cfg, output_dir, validate } => {
            let config = resolve_config(&cfg)?;
            let (k, v) = (config.env.num_attributes, config.env.values_per_attribute);
            if let Some(path) = validate {
                let (records, report) = load_records(&path, k, v).map_err(|e| Failure::new(EXIT_IO, e))?;
                println!("{report}");
                if !report.is_clean() {
                    return Err(Failure::new(EXIT_IO, format!("{} invalid records", report.invalid.len())));
                }
                println!("{} records ok", records.len());
                return Ok(());
            }
            let dir = output_dir.ok_or_else(|| Failure::new(EXIT_USAGE, "gen-data needs --output-dir or --validate"))?;
            let (train, test) = generate_split(&config.env).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            for (name, split) in [("train", &train), ("test", &test)] {
                let path = dir.join(format!("{name}.jsonl"));
                std::fs::create_dir_all(&dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
                save_records(&path, &records_from_tasks(split)).map_err(|e| Failure::new(EXIT_IO, e))?;
                println!(
                    "{}: {} tasks, text-only Bayes accuracy {:.4}",
                    path.display(),
                    split.len(),
                    text_only_bayes_accuracy(split, &config.env)
                );
            }
            write_file(&dir.join("config.txt"), &config.to_kv_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
