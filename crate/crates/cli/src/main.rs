use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gf2cnn::nn::CompressionMode;
use gf2cnn_cli::{cmd_compress, cmd_eval, cmd_gradcheck, cmd_memplan, cmd_quantize, cmd_train, exit_code, Common};

#[derive(Parser)]
#[command(name = "gf2cnn", version, about = "Train, quantize, compress and size GF(2)-compressed CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float network from scratch.
    Train(Opts),
    /// Evaluate a checkpoint on the test split.
    Eval(Opts),
    /// Insert and calibrate quantizers, evaluate without retraining.
    Quantize(Opts),
    /// Insert quantization and GF(2) compression, then retrain.
    Compress(Opts),
    /// Print the feature-map memory table.
    Memplan(Opts),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Opts),
}

#[derive(Args)]
struct Opts {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the compression bit-width.
    #[arg(long)]
    bits: Option<u8>,
    /// Override the compression mode: none, 1x1, 3x3s2, 2x2s2.
    #[arg(long)]
    mode: Option<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let (f, o): (fn(&Common) -> anyhow::Result<String>, Opts) = match cli.command {
        Command::Train(o) => (cmd_train, o),
        Command::Eval(o) => (cmd_eval, o),
        Command::Quantize(o) => (cmd_quantize, o),
        Command::Compress(o) => (cmd_compress, o),
        Command::Memplan(o) => (cmd_memplan, o),
        Command::Gradcheck(o) => (cmd_gradcheck, o),
    };
    if let Some(t) = o.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let mode = o.mode.as_deref().map(str::parse::<CompressionMode>).transpose()?;
    let common = Common {
        config: o.config,
        checkpoint: o.checkpoint,
        out: o.out,
        seed: o.seed,
        bits: o.bits,
        mode,
    };
    f(&common)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GF2CNN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
