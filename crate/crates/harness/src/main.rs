use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use momentum_core::OpKind;
use momentum_harness::compare::{compare_files, summary_table, write_plot_data, Quantity};
use momentum_harness::config::{ConfigError, ExperimentConfig};
use momentum_harness::experiments::{gen_data, run_experiment};
use momentum_harness::verify::{run_suite, Suite, VerifyOptions};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "momentum", version, about = "Train, verify and compare momentum-augmented models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics plus a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed list: `3`, `0,1,2` or `0..5`.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a verification suite and print the report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt one op's backward rule (e.g. `tanh`) to exercise the checks.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Median and quartiles of one quantity across runs, per model.
    Compare {
        /// Metrics files or run directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "loss")]
        quantity: String,
        /// Plot-data file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the task data of each seed as whitespace-separated columns.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Verify(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load(config: &Path, seed: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.set("seeds", s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let runtime = |e: anyhow::Error| Failure::Verify(format!("{e:#}"));
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = load(&config, seed.as_deref(), &overrides)?;
            let runs = run_experiment(&cfg, &out).map_err(runtime)?;
            for r in &runs {
                let last = r.records.last().map_or(f64::NAN, |x| x.train_loss);
                match &r.halted {
                    Some(why) => eprintln!("seed {}: halted ({why}), {} records kept", r.seed, r.records.len()),
                    None => println!("seed {}: {} records, final train loss {last}", r.seed, r.records.len()),
                }
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Verify {
            suite,
            out,
            inject_fault,
        } => {
            let suite: Suite = suite.parse().map_err(|e: anyhow::Error| Failure::Config(e.to_string()))?;
            let fault = match inject_fault {
                Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| Failure::Config(format!("unknown op `{name}`")))?),
                None => None,
            };
            let report = run_suite(suite, &VerifyOptions { fault });
            let text = report.render();
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).map_err(|e| Failure::Verify(format!("writing {}: {e}", path.display())))?;
            }
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|c| c.property.as_str()).collect();
                Err(Failure::Verify(format!("failed: {}", names.join(", "))))
            }
        }
        Command::Compare { inputs, quantity, out } => {
            let q: Quantity = quantity.parse().map_err(|e: anyhow::Error| Failure::Config(e.to_string()))?;
            let summary = compare_files(&inputs, q).map_err(|e| Failure::Config(format!("{e:#}")))?;
            print!("{}", summary_table(&summary));
            if let Some(path) = out {
                write_plot_data(&path, &summary, &quantity).map_err(runtime)?;
            }
            Ok(())
        }
        Command::GenData { config, seed, out } => {
            let cfg = load(&config, seed.as_deref(), &[])?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Verify(format!("creating {}: {e}", out.display())))?;
            for &s in &cfg.seeds {
                let path = out.join(format!("{}-seed{s}.txt", cfg.task.name()));
                let text = gen_data(&cfg, s).map_err(runtime)?;
                std::fs::write(&path, text).map_err(|e| Failure::Verify(format!("writing {}: {e}", path.display())))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
