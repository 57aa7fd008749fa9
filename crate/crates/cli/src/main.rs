use std::path::PathBuf;
use std::process::ExitCode;

use atoken_cli::run::{self, Failure, RunArgs, Source};
use atoken_cli::{requested_threads, with_thread_pool};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "atoken",
    version,
    about = "Adaptive token pipeline for monocular 3D features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score, cluster and reconstruct a feature map, writing all artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Synthetic scene description (JSON).
        #[arg(long, conflicts_with = "input")]
        scene: Option<PathBuf>,
        /// Feature map in ATFM format.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the gradient and oracle checks, one JSON report per line.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw a token map file as PPM (or SVG for a `.svg` output path).
    Render {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            scene,
            input,
            out_dir,
        } => {
            let source = match (scene, input) {
                (Some(s), _) => Source::Scene(s),
                (None, Some(i)) => Source::Input(i),
                (None, None) => Source::DefaultScene,
            };
            let metrics = run::run(&RunArgs {
                config,
                source,
                out_dir,
            })?;
            println!(
                "{}",
                serde_json::to_string(&metrics).map_err(|e| Failure::Io(e.into()))?
            );
            Ok(())
        }
        Command::Verify { seed } => {
            let reports = run::verify(seed)?;
            for r in &reports {
                println!(
                    "{}",
                    serde_json::to_string(r).map_err(|e| Failure::Io(e.into()))?
                );
            }
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.operation.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Verification(failed.join(", ")))
            }
        }
        Command::Render { tokens, out } => run::render(&tokens, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_thread_pool(requested_threads(), || execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atoken: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
