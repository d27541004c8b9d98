use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfcg_cli::commands::{cmd_bench, cmd_cachesweep, cmd_liveliness, cmd_transfer_model};
use mfcg_cli::verify::{run_suites, VerifyOptions};
use mfcg_cli::{CliError, RunConfig};

/// Matrix-free conjugate gradient benchmarks and self-checks.
///
/// Settings come from an optional `key = value` file (`--config`) and are
/// overridden by flags. MFCG_THREADS is accepted and ignored: every run is
/// single-threaded.
#[derive(Parser)]
#[command(name = "mfcg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suites; exit 1 if any fails.
    Verify {
        /// Only suites whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        /// Negate every cell integral to check that the suites notice.
        #[arg(long)]
        inject_sign_flip: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Fixed-iteration timing runs, one CSV row per problem and variant.
    Bench(Settings),
    /// Range liveliness CDFs for default and optimized numbering.
    Liveliness(Settings),
    /// Simulated RAM traffic over cache capacities from 32 KiB to 64 MiB.
    Cachesweep(Settings),
    /// Predicted transfer per solver variant.
    TransferModel(Settings),
    /// Print the effective configuration.
    Config(Settings),
}

/// Config file plus per-key overrides.
#[derive(Args, Default)]
struct Settings {
    /// `key = value` file read before the flags.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// bp1..bp5, comma separated.
    #[arg(long)]
    bp: Option<String>,
    /// Polynomial degrees, comma separated.
    #[arg(long)]
    degree: Option<String>,
    /// Cells per direction, `4x4x4` or `4`; `;` separates sizes.
    #[arg(long)]
    cells: Option<String>,
    /// affine, quadratic_compute, isoparametric_compute,
    /// inverse_jacobian_load or final_tensor_load; comma separated.
    #[arg(long)]
    geometry: Option<String>,
    /// Amplitude of the smooth mesh perturbation.
    #[arg(long)]
    deformation: Option<String>,
    /// cg, pcg, pipelined, sstepN, combined_cg, combined_pcg or all.
    #[arg(long)]
    variant: Option<String>,
    /// manufactured or random.
    #[arg(long)]
    rhs: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    /// default or optimized.
    #[arg(long)]
    numbering: Option<String>,
    /// lexicographic or morton.
    #[arg(long)]
    traversal: Option<String>,
    /// Logical vector width; only changes the batch size.
    #[arg(long)]
    simd_lanes: Option<String>,
    /// Simulated cache capacity for the bench transfer columns.
    #[arg(long)]
    cache_bytes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// CSV destination; `-` or absent for stdout.
    #[arg(long)]
    out: Option<String>,
}

impl Settings {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let flags = [
            ("bp", &self.bp),
            ("degree", &self.degree),
            ("cells", &self.cells),
            ("geometry", &self.geometry),
            ("deformation", &self.deformation),
            ("variant", &self.variant),
            ("rhs", &self.rhs),
            ("iterations", &self.iterations),
            ("repeats", &self.repeats),
            ("numbering", &self.numbering),
            ("traversal", &self.traversal),
            ("simd_lanes", &self.simd_lanes),
            ("cache_bytes", &self.cache_bytes),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Verify { filter, inject_sign_flip, settings } => {
            let cfg = settings.resolve()?;
            let outcomes = run_suites(&cfg, VerifyOptions { filter: filter.as_deref(), inject_sign_flip });
            if outcomes.is_empty() {
                return Err(CliError::Usage(format!("no suite matches '{}'", filter.unwrap_or_default())));
            }
            let mut failed = 0;
            for o in &outcomes {
                match &o.result {
                    Ok(detail) => println!("suite {} PASS: {detail}", o.name),
                    Err(detail) => {
                        failed += 1;
                        println!("suite {} FAIL: {detail}", o.name);
                    }
                }
            }
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Bench(s) => {
            let cfg = s.resolve()?;
            let (csv, warnings) = cmd_bench(&cfg)?;
            warnings.iter().for_each(|w| eprintln!("{w}"));
            write_output(cfg.out.as_deref(), &csv)?;
        }
        Command::Liveliness(s) => {
            let cfg = s.resolve()?;
            let (csv, notes) = cmd_liveliness(&cfg)?;
            notes.iter().for_each(|n| eprintln!("{n}"));
            write_output(cfg.out.as_deref(), &csv)?;
        }
        Command::Cachesweep(s) => {
            let cfg = s.resolve()?;
            write_output(cfg.out.as_deref(), &cmd_cachesweep(&cfg)?)?;
        }
        Command::TransferModel(s) => {
            let cfg = s.resolve()?;
            write_output(cfg.out.as_deref(), &cmd_transfer_model(&cfg))?;
        }
        Command::Config(s) => print!("{}", s.resolve()?.emit()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mfcg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
