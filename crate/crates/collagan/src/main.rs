use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use collagan::cli;

// Large activation buffers are allocated and freed once per op; the default
// allocator hands them back to the OS each time and the run becomes
// page-fault-bound.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "collagan",
    version,
    about = "Multi-domain image imputation: dataset synthesis, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural multi-contrast phantom dataset.
    GenData {
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        slices: usize,
        /// Square image extent in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator/discriminator pair on a dataset.
    Train {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, alias = "out-dir")]
        out: PathBuf,
    },
    /// Impute one domain for every test image and report NMSE/SSIM.
    Impute {
        /// Checkpoint stem (path without the .snap/.meta extension).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Name of the domain to synthesize.
        #[arg(long = "target-domain")]
        target_domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-out essentiality study over all domains.
    EvalEssentiality {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every differentiation primitive against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn run(command: Command) -> Result<(), cli::CliError> {
    match command {
        Command::GenData { subjects, slices, size, seed, out } => {
            cli::cmd_gen_data(subjects, slices, size, seed, &out)
        }
        Command::Train { data, config, seed, steps, out } => {
            cli::cmd_train(&data, config.as_deref(), seed, steps, &out)
        }
        Command::Impute { checkpoint, data, target_domain, out } => {
            cli::cmd_impute(&checkpoint, &data, &target_domain, &out)
        }
        Command::EvalEssentiality { checkpoint, data, out } => {
            cli::cmd_eval_essentiality(&checkpoint, &data, &out)
        }
        Command::Gradcheck { seed, tolerance } => cli::cmd_gradcheck(seed, tolerance),
    }
}

fn main() -> ExitCode {
    cli::init_thread_pool();
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::from(cli::EXIT_OK as u8),
        Err(err) => {
            eprintln!("collagan: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
