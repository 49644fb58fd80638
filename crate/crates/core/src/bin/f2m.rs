use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use f2m::commands;
use f2m::config::{parse_config, Mode, Overrides};

#[derive(Parser)]
#[command(name = "f2m", version, about = "Flat-minima incremental few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base session and save a checkpoint.
    TrainBase(Common),
    /// Base training followed by every incremental session.
    Run {
        #[command(flatten)]
        common: Common,
        /// Plain training without noise, penalty, clamping or fine-tuning.
        #[arg(long)]
        baseline: bool,
        /// Continue from a checkpoint directory instead of starting over.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// The six-row component ablation.
    Ablation(Common),
    /// Final accuracy as a function of the noise bound.
    Sweep(Common),
    /// Flatness of a base model.
    Flatness {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Squared-gradient-norm trace of noise-averaged descent.
    Convergence(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config, or a JSON config / run manifest.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Noise bound b.
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    noise_samples: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated components, e.g. `fm,pf,pc,pn` or `none`.
    #[arg(long)]
    flags: Option<String>,
}

impl Common {
    fn overrides(&self, mode: Option<Mode>) -> Overrides {
        Overrides {
            mode,
            seed: self.seed,
            out: self.out.clone(),
            bound: self.bound,
            noise_samples: self.noise_samples,
            lambda: self.lambda,
            flags: self.flags.clone(),
            checkpoint: None,
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("F2M_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| format!("F2M_THREADS must be a positive integer, got `{value}`"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn execute(command: Command) -> f2m::Result<commands::Outcome> {
    match command {
        Command::TrainBase(c) => commands::train_base(&parse_config(c.config.as_deref(), &c.overrides(None))?),
        Command::Run {
            common,
            baseline,
            resume,
        } => {
            let mode = baseline.then_some(Mode::Baseline);
            let config = parse_config(common.config.as_deref(), &common.overrides(mode))?;
            commands::run(&config, resume.as_deref())
        }
        Command::Ablation(c) => commands::ablation(&parse_config(c.config.as_deref(), &c.overrides(None))?),
        Command::Sweep(c) => commands::sweep(&parse_config(c.config.as_deref(), &c.overrides(None))?),
        Command::Flatness { common, checkpoint } => {
            let mut o = common.overrides(None);
            o.checkpoint = checkpoint;
            commands::flatness(&parse_config(common.config.as_deref(), &o)?)
        }
        Command::Convergence(c) => commands::convergence(&parse_config(c.config.as_deref(), &c.overrides(None))?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match execute(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
