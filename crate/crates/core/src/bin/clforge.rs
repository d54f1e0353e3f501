use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clforge::config::{ExperimentConfig, SuiteRef};
use clforge::experiment::{self, TAU_GRID};
use clforge::trainer::Mode;
use clforge::{metrics, selftest, taskgen, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_GATE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "clforge",
    version,
    about = "Continual segmentation with prompt-allocated LoRA adapters and Fisher-guided replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Similarity threshold for adapter reuse.
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured mode on every seed and aggregate.
    Run {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run the five-mode ablation ladder on the same suite and seeds.
    Ablate {
        #[command(flatten)]
        common: Overrides,
    },
    /// Full mode at several reuse thresholds.
    SweepTau {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = TAU_GRID.to_vec())]
        taus: Vec<f64>,
    },
    /// Export a suite as raw float64 image/mask files plus a manifest.
    GenTasks {
        /// Suite name (homogeneous, heterogeneous, mixed) or a JSON file of task specs.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild summary.json from metrics.csv in finished run directories.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the built-in oracle checks (pretrains or reuses the cached base).
    Selftest {
        #[arg(long, default_value_t = 43)]
        seed: u64,
    },
}

fn load(common: &Overrides) -> clforge::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(t) = common.tau {
        cfg.train.tau = t;
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> clforge::Result<()> {
    if dir.join("summary.json").is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        report_dirs(&c, out)?;
    }
    Ok(())
}

fn execute(cli: Cli) -> clforge::Result<u8> {
    match cli.command {
        Command::Run { common, mode } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let agg = experiment::cmd_run(&cfg)?;
            println!(
                "{} on {} over seeds {:?}: avg Dice {:.4} ± {:.4}, avg FR {:.2}% ± {:.2}",
                agg.mode, agg.suite, agg.seeds, agg.avg_dice.mean, agg.avg_dice.std, agg.avg_fr.mean, agg.avg_fr.std
            );
            println!("results in {}", cfg.resolved_out_dir().display());
        }
        Command::Ablate { common } => {
            let cfg = load(&common)?;
            let rows = experiment::cmd_ablate(&cfg)?;
            print!("{}", experiment::ladder_markdown(&rows));
        }
        Command::SweepTau { common, taus } => {
            let cfg = load(&common)?;
            let rows = experiment::cmd_sweep_tau(&cfg, &taus)?;
            println!("| tau | New | Reused | avg Dice | avg FR (%) |\n|---|---|---|---|---|");
            for r in rows {
                println!(
                    "| {} | {:.0}% | {:.0}% | {:.4} | {:.2} |",
                    r.tau,
                    100.0 * r.new_fraction,
                    100.0 * r.reuse_fraction,
                    r.avg_dice,
                    r.avg_fr
                );
            }
        }
        Command::GenTasks { suite, out } => {
            let specs = SuiteRef::try_from(suite)?.specs()?;
            let tasks = specs.iter().map(taskgen::generate).collect::<clforge::Result<Vec<_>>>()?;
            taskgen::export_tasks(&tasks, &out)?;
            println!("wrote {} tasks to {}", tasks.len(), out.display());
        }
        Command::Report { dir } => {
            let mut dirs = Vec::new();
            report_dirs(&dir, &mut dirs)?;
            if dirs.is_empty() {
                return Err(Error::InvalidArgument(format!("no summary.json under {}", dir.display())));
            }
            for d in dirs {
                let s = metrics::regenerate_report(&d)?;
                println!("{}: avg Dice {:.4}, avg FR {:.2}%", d.display(), s.avg_dice, s.avg_fr);
            }
        }
        Command::Selftest { seed } => {
            let mut cfg = ExperimentConfig::new(SuiteRef::Named(taskgen::SuiteName::Mixed), Mode::Full);
            cfg.seeds = vec![seed];
            let out = cfg.resolved_out_dir();
            fs::create_dir_all(&out)?;
            let model = experiment::pretrained_model(&cfg, &out)?;
            let checks = selftest::run_all(&model, seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(EXIT_GATE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    clforge::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Divergence(_) => EXIT_DIVERGENCE,
                _ => EXIT_FAILURE,
            }
        }
    };
    ExitCode::from(code)
}
