use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use normlab::data::{cifar10_dir, data_root, load_cifar10, load_mnist, mnist_dir};
use normlab::harness::{is_validation_error, load_config, run_experiment, RunOptions};
use normlab::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Compare neural-network normalizers on desk-scale experiments.
#[derive(Parser)]
#[command(name = "normlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSV results plus a manifest.
    Run {
        config: PathBuf,
        /// Output directory (overrides output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// First seed (overrides seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for independent (normalizer, seed) cells.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Fail on degenerate diagnostics or divergence.
        #[arg(long)]
        strict: bool,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Datasets operations.
    Datasets {
        #[command(subcommand)]
        action: DatasetsAction,
    },
}

#[derive(Subcommand)]
enum DatasetsAction {
    /// Report which datasets are present under NORMLAB_DATA_DIR (default ./data).
    Check,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if is_validation_error(e) { EXIT_VALIDATION } else { EXIT_RUNTIME })
}

fn datasets_check() -> ExitCode {
    let root = data_root(None);
    println!("data root: {}", root.display());
    println!("synthetic: ok (generated)");
    let mut broken = false;
    let checks: [(&str, PathBuf, fn(&std::path::Path) -> normlab::Result<normlab::data::Dataset>); 2] = [
        ("mnist", mnist_dir(&root), load_mnist),
        ("cifar10", cifar10_dir(&root), load_cifar10),
    ];
    for (name, dir, load) in checks {
        if !dir.exists() {
            println!("{name}: missing ({})", dir.display());
            continue;
        }
        match load(&dir) {
            Ok(d) => println!(
                "{name}: ok ({} train, {} test, shape {:?})",
                d.train_y.len(),
                d.test_y.len(),
                d.input_shape()
            ),
            Err(e) => {
                broken = true;
                println!("{name}: invalid: {e}");
            }
        }
    }
    if broken {
        ExitCode::from(EXIT_RUNTIME)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load_config(&config) {
            Ok(cfg) => {
                let fp = cfg.fingerprint().unwrap_or_default();
                println!("ok: {} ({} normalizers, fingerprint {fp})", cfg.experiment.name(), cfg.normalizers.len());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run {
            config,
            out,
            seed,
            workers,
            strict,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let opts = RunOptions {
                out,
                seed,
                workers,
                strict,
            };
            match run_experiment(&cfg, &opts) {
                Ok(report) => {
                    for w in &report.warnings {
                        eprintln!("warning: {w}");
                    }
                    for s in &report.summaries {
                        println!("{s}");
                    }
                    println!(
                        "wrote {} result files to {} (fingerprint {})",
                        report.files.len(),
                        report.out_dir.display(),
                        report.fingerprint
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Datasets {
            action: DatasetsAction::Check,
        } => datasets_check(),
    }
}
