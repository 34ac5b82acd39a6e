use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rifls_cli::{cmd_audit, cmd_montecarlo, cmd_run, cmd_simulate, print_report, CliError, ExperimentConfig, Result};

/// Fixed-lag smoother experiments. Set RAYON_NUM_THREADS to bound the
/// number of worker threads used by `montecarlo`.
#[derive(Parser)]
#[command(name = "rifls", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one IMU and feature stream.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stream seed [default: seed0 from the config]
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: <out>/stream-<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one method over a simulated stream.
    Run {
        /// Directory written by `simulate`.
        stream: PathBuf,
        /// Overrides the config recorded with the stream.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Method name from the config or a built-in preset.
        #[arg(long, default_value = "ri-fls")]
        method: String,
        /// Output directory [default: <stream>/run-<method>]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the Jacobian trace of every n-th solve.
        #[arg(long, default_value_t = 10)]
        trace_stride: usize,
    },
    /// Nullity audit of a recorded trace.
    Audit {
        /// `trace.jsonl` written by `run`.
        trace: PathBuf,
        /// Output CSV [default: audit.csv next to the trace]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo ensemble over all configured methods.
    Montecarlo {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Output directory [default: out from the config]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let cfg = config.load()?;
            let seed = seed.unwrap_or(cfg.seed0);
            let out = out.unwrap_or_else(|| cfg.out.join(format!("stream-{seed}")));
            cmd_simulate(&cfg, seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Run { stream, config, method, out, trace_stride } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let out = out.unwrap_or_else(|| stream.join(format!("run-{method}")));
            let s = cmd_run(&stream, cfg.as_ref(), &method, &out, trace_stride)?;
            println!(
                "{method}: {} frames, {} marginalizations, final position error {:.4} m, final cost {:.4e}",
                s.frames, s.marginalizations, s.final_position_error, s.final_cost
            );
        }
        Command::Audit { trace, out } => {
            let out = out.unwrap_or_else(|| trace.parent().unwrap_or(Path::new(".")).join("audit.csv"));
            let rows = cmd_audit(&trace, &out)?;
            println!("audited {rows} steps into {}", out.display());
        }
        Command::Montecarlo { config, seed, trials, out } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.seed0 = s;
            }
            if let Some(n) = trials {
                cfg.n_trials = n;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let report = cmd_montecarlo(&cfg, &cfg.out)?;
            print_report(&report, &mut std::io::stdout()).map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
