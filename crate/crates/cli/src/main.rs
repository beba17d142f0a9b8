use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use weaktomo::validate::{format_table, run_checks};
use weaktomo::{CliError, Experiment, ExperimentConfig, Result};
use weaktomo_core::nalgebra::DMatrix;
use weaktomo_core::operator::make_spin_system;
use weaktomo_core::C64;

#[derive(Parser)]
#[command(
    name = "weaktomo",
    version,
    about = "Spin-ensemble state reconstruction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for Monte-Carlo realizations (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Design control waveforms by entropy minimization.
    Design(Common),
    /// Mean fidelity versus SNR and number of runs.
    Sweep(Common),
    /// Mean fidelity versus control amplitude error.
    Sensitivity(Common),
    /// Write simulated measurement records.
    Simulate(Common),
    /// Reconstruct states from simulated records.
    Reconstruct(Common),
    /// Run the self-checks and print a pass/fail table.
    Validate {
        /// Run against a deliberately broken operator basis.
        #[arg(long, hide = true)]
        inject_corrupt_basis: bool,
    },
}

fn load(c: &Common) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Experiment::new(cfg)
}

fn validate(corrupt: bool) -> Result<()> {
    let mut all = Vec::new();
    for f in [0.5, 1.0, 1.5] {
        let mut sys = make_spin_system(f)?;
        if corrupt {
            let mut basis = sys.basis().to_vec();
            basis[0] = &basis[0] * C64::new(1.05, 0.0)
                + DMatrix::identity(sys.dim(), sys.dim()) * C64::new(0.01, 0.0);
            sys = sys.with_basis_unchecked(basis);
        }
        all.extend(run_checks(&sys).into_iter().map(|mut c| {
            c.detail = format!("F={f}: {}", c.detail);
            c
        }));
    }
    print!("{}", format_table(&all));
    let failed = all.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Validation(format!(
            "{failed} of {} checks failed",
            all.len()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Design(c) => {
            let exp = load(&c)?;
            let r = exp.design()?;
            println!(
                "rank {} entropy {} waveforms {}",
                r.final_rank,
                r.final_entropy(),
                r.waveforms.len()
            );
        }
        Command::Sweep(c) => {
            let rows = load(&c)?.sweep()?;
            info!("wrote {} sweep rows", rows.len());
        }
        Command::Sensitivity(c) => {
            let rows = load(&c)?.sensitivity()?;
            info!("wrote {} sensitivity rows", rows.len());
        }
        Command::Simulate(c) => {
            let n = load(&c)?.simulate()?;
            info!("wrote {n} records");
        }
        Command::Reconstruct(c) => {
            let rows = load(&c)?.reconstruct()?;
            info!("wrote {} results", rows.len());
        }
        Command::Validate {
            inject_corrupt_basis,
        } => validate(inject_corrupt_basis)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors share the config-error status; clap's default would
    // collide with the numerical-failure code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
