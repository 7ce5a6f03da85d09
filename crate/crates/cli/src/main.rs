use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use thermdiff_cli::commands::{self, Options};
use thermdiff_cli::{CliError, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "thermdiff", version, about = "Patch-based diffusion restoration of thermal images")]
struct Cli {
    /// Experiment config file; relative paths inside it resolve against its directory.
    #[arg(long, global = true, default_value = "thermdiff.conf")]
    config: PathBuf,
    /// Overrides `seeds.master`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite non-empty output directories.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic scene dataset.
    GenData,
    /// Apply the configured operator and sensor noise to every clean image.
    Degrade,
    /// Train the denoiser.
    Train {
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Restore every measurement in the input directory.
    Restore,
    /// Score restored images against references.
    Evaluate,
    /// Patch size and overlap sweep.
    Ablate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_master_seed(seed);
    }
    for p in &cfg.absolute_paths {
        eprintln!("warning: absolute path in config: {p}");
    }
    let mut opts = Options {
        force: cli.force,
        verbose: cli.verbose,
        resume: false,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, opts).map(drop),
        Command::Degrade => commands::degrade_cmd(&cfg, opts).map(drop),
        Command::Train { resume } => {
            opts.resume = resume;
            commands::train(&cfg, opts).map(drop)
        }
        Command::Restore => commands::restore_cmd(&cfg, opts).map(drop),
        Command::Evaluate => commands::evaluate(&cfg, opts).map(drop),
        Command::Ablate => commands::ablate(&cfg, opts).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
