//! Command implementations behind the `mbdoa` binary.
//!
//! Exit codes: 0 success, 2 usage or configuration problems (including
//! unreadable or malformed files), 3 numerical failure.

pub mod config;
pub mod selftest;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mbdoa::array::{sample_snapshots, Scenario, SnapshotBatch};
use mbdoa::encoder::{read_model, train_with_observer, write_model, EncoderModel, LossTrace};
use mbdoa::estimators::{
    AngularGrid, Diagnostics, DoaEstimator, MbdEstimator, MusicEstimator, RefineOptions, SpiceEstimator, SpiceOptions,
};
use mbdoa::evaluation::{format_sig, run_sweep, SweepResult};
use mbdoa::linalg::ComplexMatrix;
use mbdoa::rng::stream;
use mbdoa::snapshot_io::{read_snapshots, write_snapshots};
use mbdoa::Error;

pub use config::RunConfig;
use config::EstimatorKind;

/// Failure carrying the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    /// Library errors raised while interpreting configuration are usage errors.
    pub fn from_config(e: Error) -> Self {
        Self::config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotPositiveDefinite { .. }
            | Error::NotPositiveSemidefinite { .. }
            | Error::EigenNoConvergence { .. }
            | Error::NonFiniteLoss { .. }
            | Error::StaleCache(_) => Self::numerical(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

fn required(path: Option<&PathBuf>, field: &str) -> CliResult<PathBuf> {
    path.cloned()
        .ok_or_else(|| CliError::config(format!("missing required field `{field}` (or pass --out)")))
}

pub fn load_model(path: &Path) -> CliResult<EncoderModel<f64>> {
    read_model(open(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model_path: PathBuf,
    pub trace: LossTrace,
    pub parameter_count: usize,
    /// Mean loss over the last (up to) 100 batches.
    pub final_smoothed_loss: f64,
}

/// Trains, writes the model (to `out` or `paths.model`) and the loss trace.
pub fn cmd_train(config: &RunConfig, out: Option<&Path>) -> CliResult<TrainReport> {
    let model_path = match out {
        Some(p) => p.to_path_buf(),
        None => required(config.paths.model.as_ref(), "paths.model")?,
    };
    let geometry = config.geometry()?;
    let train_cfg = config.train_config()?;
    let log_every = config.training.log_every;
    let outcome = train_with_observer(&train_cfg, &geometry, |s| {
        if log_every > 0 && (s.batch + 1) % log_every == 0 {
            eprintln!(
                "batch {:>6}  loss {:>12.6}  excess {:>10.6}  |grad| {:.3e}",
                s.batch + 1,
                s.mean_loss,
                s.mean_loss - s.mean_floor,
                s.grad_norm
            );
        }
    })?;
    let mut w = create(&model_path)?;
    write_model(&outcome.model, &mut w)?;
    w.flush()?;
    if let Some(trace_path) = &config.paths.loss_trace {
        let mut w = create(trace_path)?;
        outcome.trace.write_csv(&mut w)?;
        w.flush()?;
    }
    let n = outcome.trace.len();
    let final_smoothed_loss = LossTrace::window_mean(&outcome.trace.mean_loss, n.saturating_sub(100)..n);
    Ok(TrainReport {
        model_path,
        parameter_count: outcome.model.params().len(),
        trace: outcome.trace,
        final_smoothed_loss,
    })
}

/// Builds the estimators listed in the sweep section.
pub fn build_estimators(config: &RunConfig) -> CliResult<Vec<Box<dyn DoaEstimator<f64>>>> {
    let geometry = config.geometry()?;
    let grid = AngularGrid::new(&geometry, config.sweep.grid_points).map_err(CliError::from_config)?;
    let k = config.scenario.sources;
    let mut out: Vec<Box<dyn DoaEstimator<f64>>> = Vec::new();
    if config.sweep.estimators.is_empty() {
        return Err(CliError::config("sweep.estimators is empty"));
    }
    for (i, spec) in config.sweep.estimators.iter().enumerate() {
        match spec.kind {
            EstimatorKind::Music => {
                if k >= geometry.antennas {
                    return Err(CliError::config(format!("MUSIC needs K < M (K={k}, M={})", geometry.antennas)));
                }
                out.push(Box::new(Named {
                    name: spec.label(),
                    inner: MusicEstimator { grid: grid.clone() },
                }))
            }
            EstimatorKind::Spice => out.push(Box::new(Named {
                name: spec.label(),
                inner: SpiceEstimator {
                    grid: grid.clone(),
                    options: SpiceOptions {
                        max_iterations: spec.spice_iterations,
                        ..Default::default()
                    },
                },
            })),
            EstimatorKind::Mbd => {
                let path = required(spec.model.as_ref(), &format!("sweep.estimators[{i}].model"))?;
                let model = load_model(&path)?;
                let arch = model.architecture();
                if arch.input_side != geometry.antennas || arch.sources != k {
                    return Err(CliError::config(format!(
                        "{} was trained for M={}, K={}; config has M={}, K={k}",
                        path.display(),
                        arch.input_side,
                        arch.sources,
                        geometry.antennas
                    )));
                }
                let mut est = MbdEstimator::new(spec.label(), model, geometry.clone())?;
                if spec.refine_steps > 0 {
                    est = est.with_refinement(RefineOptions {
                        steps: spec.refine_steps,
                        step_size: spec.refine_step_size,
                        ..Default::default()
                    });
                }
                out.push(Box::new(est));
            }
        }
    }
    Ok(out)
}

/// Renames a grid estimator for the results table.
struct Named<E> {
    name: String,
    inner: E,
}

impl<E: DoaEstimator<f64>> DoaEstimator<f64> for Named<E> {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, sample_cov: &ComplexMatrix<f64>, sources: usize) -> mbdoa::Result<mbdoa::DoAEstimate> {
        self.inner.estimate(sample_cov, sources)
    }
}

/// Runs the configured sweep and writes its CSV (to `out` or `paths.results`).
pub fn cmd_sweep(config: &RunConfig, out: Option<&Path>) -> CliResult<SweepResult> {
    let results_path = match out {
        Some(p) => p.to_path_buf(),
        None => required(config.paths.results.as_ref(), "paths.results")?,
    };
    let geometry = config.geometry()?;
    let spec = config.sweep_spec()?;
    let estimators = build_estimators(config)?;
    let refs: Vec<&dyn DoaEstimator<f64>> = estimators.iter().map(|b| b.as_ref()).collect();
    let result = run_sweep(&spec, &geometry, &refs)?;
    let mut w = create(&results_path)?;
    result.write_csv(&mut w)?;
    w.flush()?;
    Ok(result)
}

/// Runs the encoder on a snapshot file and writes the latent estimate as
/// `quantity,row,col,real,imag` rows.
pub fn cmd_infer<W: Write>(model_path: &Path, snapshot_path: &Path, mut out: W) -> CliResult<()> {
    let model = load_model(model_path)?;
    let batch: SnapshotBatch<f64> =
        read_snapshots(open(snapshot_path)?).map_err(|e| CliError::config(format!("{}: {e}", snapshot_path.display())))?;
    let m = model.architecture().input_side;
    if batch.antennas() != m {
        return Err(CliError::config(format!(
            "snapshots have M={}, model expects M={m}",
            batch.antennas()
        )));
    }
    let est = mbdoa::estimators::mbd_estimate(&model, &batch)?;
    let Diagnostics::Mbd {
        latent,
        signal_covariance,
        ..
    } = est.diagnostics
    else {
        unreachable!("encoder estimates carry the latent")
    };
    writeln!(out, "quantity,row,col,real,imag")?;
    write_latent_rows(&mut out, &latent, &signal_covariance)?;
    out.flush()?;
    Ok(())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(format!("i/o error: {e}"))
    }
}

fn write_latent_rows<W: Write>(
    out: &mut W,
    latent: &mbdoa::LatentParams,
    signal_covariance: &ComplexMatrix<f64>,
) -> std::io::Result<()> {
    let f = |x: f64| format_sig(x, 12);
    for (i, a) in latent.angles.iter().enumerate() {
        writeln!(out, "angle,{i},,{},0", f(*a))?;
    }
    for (i, p) in latent.powers.iter().enumerate() {
        writeln!(out, "power,{i},,{},0", f(*p))?;
    }
    writeln!(out, "noise_variance,,,{},0", f(latent.noise_variance))?;
    let k = signal_covariance.rows();
    for i in 0..k {
        for j in 0..k {
            let z = signal_covariance[(i, j)];
            writeln!(out, "signal_covariance,{i},{j},{},{}", f(z.re), f(z.im))?;
        }
    }
    Ok(())
}

/// Simulates one batch from the config's scenario (optionally with fixed
/// angles and SNR), writes it as a snapshot file and returns the scenario.
pub fn cmd_simulate(
    config: &RunConfig,
    out: &Path,
    angles: Option<&[f64]>,
    snr_db: Option<f64>,
) -> CliResult<Scenario<f64>> {
    let geometry = config.geometry()?;
    let mut scen_cfg = config.scenario_config()?;
    if let Some(snr) = snr_db {
        scen_cfg = scen_cfg.with_snr_db(snr);
    }
    let mut rng = stream(config.seed, u64::MAX - 1, 0);
    let mut scenario: Scenario<f64> = mbdoa::array::draw_scenario(&scen_cfg, &mut rng)?;
    if let Some(a) = angles {
        if a.len() != scenario.sources() {
            return Err(CliError::config(format!(
                "{} angles given for K={}",
                a.len(),
                scenario.sources()
            )));
        }
        scenario.angles = a.iter().map(|&x| mbdoa::scalar::wrap_two_pi(x)).collect();
    }
    let batch = sample_snapshots(&geometry, &scenario, config.scenario.snapshots, &mut rng)?;
    let mut w = create(out)?;
    write_snapshots(&batch, &mut w)?;
    w.flush()?;
    Ok(scenario)
}
