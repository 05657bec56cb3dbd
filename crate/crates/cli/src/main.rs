use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spygr_cli::config::{parse_pixel, parse_shape, Overrides, RunConfig};
use spygr_cli::{
    cmd_ablate, cmd_bench, cmd_heatmap, cmd_train, cmd_verify, CliError, Fault, EXIT_CONFIG, EXIT_FAILED, EXIT_OK,
};
use spygr_harness::ablation::Thresholds;
use spygr_harness::train::threads_from_env;
use spygr_harness::AblationRow;

#[derive(Parser)]
#[command(name = "spygr", version, about = "Graph reasoning on feature pyramids: verify, bench, train, ablate, heatmap")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "N,C,H,W", value_parser = parse_shape)]
    shape: Option<[usize; 4]>,
    #[arg(long, value_name = "K")]
    levels: Option<usize>,
    #[arg(long, value_name = "M")]
    m: Option<usize>,
    /// One row, or a comma-separated list for `ablate`.
    #[arg(long, value_name = "ROW", value_delimiter = ',')]
    ablation: Option<Vec<AblationRow>>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    oracle_cap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle, Laplacian, zero-degree and gradient suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<Fault>,
    },
    /// Report model FLOPs and memory, and time factored against naive.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Skip the wall-time measurement.
        #[arg(long)]
        no_timing: bool,
    },
    /// Train one model on the synthetic task.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        iters: Option<usize>,
    },
    /// Train every selected row on every seed and tabulate mIoU.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        iters: Option<usize>,
        #[arg(long, value_name = "S,S,S", value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write one similarity heatmap per pyramid level.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Layer or pyramid parameter directory.
        #[arg(long, value_name = "DIR")]
        params: Option<PathBuf>,
        /// Image tensor file.
        #[arg(long, value_name = "PATH")]
        image: Option<PathBuf>,
        #[arg(long, value_name = "Y,X", value_parser = parse_pixel)]
        pixel: Option<[usize; 2]>,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        shape: c.shape,
        levels: c.levels,
        m: c.m,
        ablation: c.ablation.clone(),
        out: c.out.clone(),
        oracle_cap: c.oracle_cap,
        ..Overrides::default()
    }
}

fn resolve(c: &Common, extra: Overrides) -> Result<RunConfig, CliError> {
    let mut flags = overrides(c);
    flags.iters = extra.iters;
    flags.seeds = extra.seeds;
    flags.params = extra.params;
    flags.image = extra.image;
    flags.pixel = extra.pixel;
    let mut cfg = RunConfig::resolve(c.config.as_deref(), &flags)?;
    cfg.train.threads = threads_from_env()?;
    Ok(cfg)
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    emit(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Verify { common, inject_fault } => {
            let cfg = resolve(&common, Overrides::default())?;
            let report = cmd_verify(&cfg, inject_fault)?;
            emit(&report.to_json())?;
            if let Some(dir) = &cfg.out {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("verify.json");
                std::fs::write(&path, report.to_json())?;
                spygr_cli::RunManifest::new("verify", &cfg, vec![path]).write(dir)?;
            }
            for s in report.suites.iter().filter(|s| !s.passed) {
                eprintln!(
                    "FAILED {}: {} = {:e} (tolerance {:e}); {}",
                    s.name,
                    s.metric,
                    s.worst,
                    s.tolerance,
                    s.offending.as_deref().unwrap_or("")
                );
            }
            Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
        }
        Command::Bench { common, no_timing } => {
            let mut cfg = resolve(&common, Overrides::default())?;
            cfg.bench.timing &= !no_timing;
            print_json(&cmd_bench(&cfg)?)?;
            Ok(EXIT_OK)
        }
        Command::Train { common, iters } => {
            let cfg = resolve(&common, Overrides { iters, ..Overrides::default() })?;
            print_json(&cmd_train(&cfg)?)?;
            Ok(EXIT_OK)
        }
        Command::Ablate { common, iters, seeds } => {
            let cfg = resolve(&common, Overrides { iters, seeds, ..Overrides::default() })?;
            let table = cmd_ablate(&cfg, Thresholds::default())?;
            eprint!("{}", table.render());
            print_json(&table)?;
            let failed = [table.checks.locality_cap, table.checks.trend].contains(&Some(false));
            Ok(if failed { EXIT_FAILED } else { EXIT_OK })
        }
        Command::Heatmap { common, params, image, pixel } => {
            let cfg = resolve(&common, Overrides { params, image, pixel, ..Overrides::default() })?;
            print_json(&cmd_heatmap(&cfg)?)?;
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("spygr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
