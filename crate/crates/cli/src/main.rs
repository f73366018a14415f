use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mbdoa_cli::{cmd_infer, cmd_simulate, cmd_sweep, cmd_train, selftest, CliError, RunConfig};

/// Direction-of-arrival estimation with a model-based autoencoder.
#[derive(Parser, Debug)]
#[command(name = "mbdoa", version)]
struct Cli {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives the reference deterministic run).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; its meaning depends on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder; writes the model (paths.model or --out) and loss trace.
    Train,
    /// Monte-Carlo sweep; writes CSV to paths.results or --out.
    Sweep,
    /// Estimate from a snapshot file; CSV to stdout or --out.
    Infer {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        snapshots: PathBuf,
    },
    /// Simulate one snapshot file (--out) from the scenario section.
    Simulate {
        /// Comma-separated source angles in radians.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        angles: Option<Vec<f64>>,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
    },
    /// Print the fully resolved configuration (to stdout or --out).
    Config,
    /// Gradient checks and invariant suites.
    Selftest,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Train => {
            let r = cmd_train(&config, out)?;
            println!(
                "wrote {} ({} parameters); final 100-batch mean loss {:.6}",
                r.model_path.display(),
                r.parameter_count,
                r.final_smoothed_loss
            );
        }
        Command::Sweep => {
            let r = cmd_sweep(&config, out)?;
            for c in &r.cells {
                println!(
                    "{:>8} {:<12} rmspe {:.6} rad ({:.3} deg)  outliers {}",
                    c.value,
                    c.estimator,
                    c.rmspe,
                    c.rmspe.to_degrees(),
                    c.outliers
                );
            }
        }
        Command::Infer { model, snapshots } => {
            let model = match model.or_else(|| config.paths.model.clone()) {
                Some(m) => m,
                None => return Err(CliError::config("missing required field `paths.model` (or pass --model)")),
            };
            match out {
                Some(p) => {
                    let f = std::fs::File::create(p)
                        .map_err(|e| CliError::config(format!("cannot write {}: {e}", p.display())))?;
                    cmd_infer(&model, &snapshots, std::io::BufWriter::new(f))?
                }
                None => cmd_infer(&model, &snapshots, std::io::stdout().lock())?,
            }
        }
        Command::Simulate { angles, snr_db } => {
            let Some(out) = out else {
                return Err(CliError::config("simulate needs --out"));
            };
            let s = cmd_simulate(&config, out, angles.as_deref(), snr_db)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "source,angle,power")?;
            for (i, (a, p)) in s.angles.iter().zip(&s.powers).enumerate() {
                writeln!(stdout, "{i},{a},{p}")?;
            }
            writeln!(stdout, "noise_variance,{},", s.noise_variance)?;
        }
        Command::Config => {
            let text = config.to_toml();
            match out {
                Some(p) => std::fs::write(p, text)
                    .map_err(|e| CliError::config(format!("cannot write {}: {e}", p.display())))?,
                None => print!("{text}"),
            }
        }
        Command::Selftest => {
            let checks = selftest::run(config.seed);
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(CliError::numerical(format!("{failed} self-test checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
