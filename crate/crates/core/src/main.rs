use clap::{Parser, Subcommand};
use man_core::dataio::{self, LoadOptions};
use man_core::fusion::Variant;
use man_core::harness::{self, HarnessError, RunOptions, RunSummary};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "man",
    version,
    about = "Modality attention network experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test files from the config's [generate] section.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Write the files here instead of the paths in [data].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the generator seed.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        permissive: bool,
    },
    /// Train one variant for each seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Ignore unknown config keys.
        #[arg(long)]
        permissive: bool,
    },
    /// Tabulate run directories (each holding a summary.json) side by side.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seeds: u64,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn absolute(path: PathBuf) -> Result<PathBuf, HarnessError> {
    std::path::absolute(&path).map_err(|source| HarnessError::Io { path, source })
}

fn write_or_print(out: Option<PathBuf>, text: &str) -> Result<(), HarnessError> {
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<u8, HarnessError> {
    match cmd {
        Command::Gen {
            config,
            out,
            seeds,
            permissive,
        } => {
            let opts = LoadOptions {
                permissive,
                check_files: false,
            };
            let mut cfg = dataio::load_config_with(&config, opts)?;
            if let Some(dir) = out {
                let dir = absolute(dir)?;
                for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test] {
                    *p = dir.join(p.file_name().expect("data paths name files"));
                }
            }
            if let (Some(seed), Some(g)) = (seeds, cfg.generate.as_mut()) {
                g.seed = seed;
            }
            let res = harness::cmd_gen(&cfg)?;
            for f in &res.files {
                println!("wrote {}", f.display());
            }
            println!(
                "manifest {} sha256 {}",
                res.manifest.display(),
                res.manifest_hash
            );
            Ok(0)
        }
        Command::Run {
            config,
            variant,
            seeds,
            out,
            jobs,
            permissive,
        } => {
            let opts = LoadOptions {
                permissive,
                check_files: true,
            };
            let mut cfg = dataio::load_config_with(&config, opts)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(dir) = out {
                cfg.output_dir = absolute(dir)?;
            }
            // re-validate the overridden fields
            let cfg =
                dataio::parse_config(&cfg.to_toml(), &config, std::path::Path::new(""), opts)?;
            let data = harness::load_data(&cfg)?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            let summary = harness::run_loaded(&cfg, &data, RunOptions { jobs })?;
            print!("{}", harness::summary_csv(&summary));
            for s in summary.seeds.iter().filter(|s| s.error.is_some()) {
                eprintln!("seed {}: {}", s.seed, s.error.as_deref().unwrap_or(""));
            }
            Ok(0)
        }
        Command::Compare { runs, out } => {
            let summaries = runs
                .iter()
                .map(RunSummary::load)
                .collect::<Result<Vec<_>, _>>()?;
            let report = harness::cmd_compare(&summaries)?;
            write_or_print(out, &report.to_markdown())?;
            Ok(0)
        }
        Command::Gradcheck { seeds } => {
            let report = harness::cmd_gradcheck(seeds)?;
            for (op, err) in &report.ops {
                println!("{op:<24} {err:.3e}");
            }
            println!("{:<24} {:.3e}", "man_forward+loss", report.man_forward);
            let max = report.max_error();
            let ok = max < harness::GRADCHECK_TOLERANCE;
            println!("max {max:.3e} {}", if ok { "ok" } else { "FAILED" });
            Ok(if ok { 0 } else { 1 })
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let text = harness::cmd_eval(&checkpoint, &data)?;
            write_or_print(out, &text)?;
            Ok(0)
        }
    }
}
