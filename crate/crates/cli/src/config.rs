//! TOML run configuration. Every field has a default except the estimator
//! `kind` and the file paths a command actually needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mbdoa::array::{ArrayGeometry, CorrelationMode, ScenarioConfig};
use mbdoa::encoder::{AdamConfig, CovarianceMode, TrainConfig};
use mbdoa::evaluation::{SweepKind, SweepSpec};
use mbdoa::objective::LossKind;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometrySection,
    pub scenario: ScenarioSection,
    pub training: TrainingSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: GeometrySection::default(),
            scenario: ScenarioSection::default(),
            training: TrainingSection::default(),
            sweep: SweepSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub antennas: usize,
    pub radius_over_wavelength: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            antennas: 9,
            radius_over_wavelength: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Uncorrelated,
    Fixed,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub sources: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub power_min_db: f64,
    pub power_max_db: f64,
    pub correlation: CorrelationKind,
    /// Used when `correlation = "fixed"`.
    pub rho: f64,
    pub snapshots: usize,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self {
            sources: s.sources,
            snr_min_db: s.snr_min_db,
            snr_max_db: s.snr_max_db,
            power_min_db: s.power_min_db,
            power_max_db: s.power_max_db,
            correlation: CorrelationKind::Uncorrelated,
            rho: 0.0,
            snapshots: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Sml,
    Cov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Diag,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub loss: LossName,
    pub covariance_mode: ModeName,
    pub conv_channels: [usize; 4],
    pub hidden: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Print progress to stderr every this many batches (0 = quiet).
    pub log_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            batches: t.batches,
            loss: LossName::Sml,
            covariance_mode: ModeName::Diag,
            conv_channels: t.conv_channels,
            hidden: t.hidden,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKindName {
    Snr,
    Correlation,
    Cdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Music,
    Spice,
    Mbd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// Column label in the results; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Model file, required for `mbd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Gradient steps of SML refinement after the encoder (`mbd` only).
    #[serde(default)]
    pub refine_steps: usize,
    #[serde(default = "default_refine_step")]
    pub refine_step_size: f64,
    /// Iteration cap for `spice`.
    #[serde(default = "default_spice_iterations")]
    pub spice_iterations: usize,
}

fn default_refine_step() -> f64 {
    1e-5
}

fn default_spice_iterations() -> usize {
    200
}

impl EstimatorSpec {
    pub fn of_kind(kind: EstimatorKind) -> Self {
        Self {
            kind,
            name: None,
            model: None,
            refine_steps: 0,
            refine_step_size: default_refine_step(),
            spice_iterations: default_spice_iterations(),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            match self.kind {
                EstimatorKind::Music => "music",
                EstimatorKind::Spice => "spice",
                EstimatorKind::Mbd => "mbd",
            }
            .to_string()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKindName,
    pub values: Vec<f64>,
    /// Fixed SNR for correlation and cdf sweeps.
    pub snr_db: f64,
    pub trials: usize,
    pub grid_points: usize,
    pub estimators: Vec<EstimatorSpec>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: SweepKindName::Snr,
            values: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            snr_db: 20.0,
            trials: 500,
            grid_points: mbdoa::estimators::DEFAULT_GRID_POINTS,
            estimators: vec![
                EstimatorSpec::of_kind(EstimatorKind::Music),
                EstimatorSpec::of_kind(EstimatorKind::Spice),
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config =
            Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    /// Makes relative file paths relative to `dir` (the config file's directory).
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        fix(&mut self.paths.model);
        fix(&mut self.paths.loss_trace);
        fix(&mut self.paths.results);
        for e in &mut self.sweep.estimators {
            fix(&mut e.model);
        }
    }

    /// Fully resolved config as TOML, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn geometry(&self) -> Result<ArrayGeometry<f64>, CliError> {
        ArrayGeometry::uca(self.geometry.antennas, self.geometry.radius_over_wavelength).map_err(CliError::from_config)
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig, CliError> {
        let s = &self.scenario;
        let correlation = match s.correlation {
            CorrelationKind::Uncorrelated => CorrelationMode::Uncorrelated,
            CorrelationKind::Fixed => CorrelationMode::Fixed(s.rho),
            CorrelationKind::Uniform => CorrelationMode::Uniform,
        };
        let cfg = ScenarioConfig {
            sources: s.sources,
            correlation,
            snr_min_db: s.snr_min_db,
            snr_max_db: s.snr_max_db,
            power_min_db: s.power_min_db,
            power_max_db: s.power_max_db,
        };
        cfg.validate().map_err(CliError::from_config)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.training;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            batches: t.batches,
            adam: AdamConfig {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
            },
            loss: match t.loss {
                LossName::Sml => LossKind::Sml,
                LossName::Cov => LossKind::CovMatch,
            },
            covariance_mode: match t.covariance_mode {
                ModeName::Diag => CovarianceMode::Diag,
                ModeName::Full => CovarianceMode::Full,
            },
            scenario: self.scenario_config()?,
            snapshots: self.scenario.snapshots,
            conv_channels: t.conv_channels,
            hidden: t.hidden,
            seed: self.seed,
        };
        cfg.validate().map_err(CliError::from_config)?;
        Ok(cfg)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, CliError> {
        let s = &self.sweep;
        let kind = match s.kind {
            SweepKindName::Snr => SweepKind::Snr,
            SweepKindName::Correlation => SweepKind::Correlation,
            SweepKindName::Cdf => SweepKind::Cdf,
        };
        let mut scenario = self.scenario_config()?;
        if kind != SweepKind::Snr {
            scenario = scenario.with_snr_db(s.snr_db);
        }
        let spec = SweepSpec {
            kind,
            scenario,
            snapshots: self.scenario.snapshots,
            values: s.values.clone(),
            trials: s.trials,
            seed: self.seed,
        };
        spec.validate().map_err(CliError::from_config)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.geometry.antennas, 9);
        assert_eq!(c.geometry.radius_over_wavelength, 1.0);
        assert_eq!(c.scenario.snapshots, 100);
        assert_eq!(c.scenario.sources, 3);
        assert_eq!((c.scenario.snr_min_db, c.scenario.snr_max_db), (-10.0, 30.0));
        assert_eq!(c.training.batch_size, 256);
        assert_eq!(c.training.learning_rate, 1e-3);
        assert_eq!(c.training.batches, 40_000);
        assert_eq!(c.training.conv_channels, [64, 128, 256, 512]);
        assert_eq!(c.sweep.grid_points, 1200);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::parse("seed = 4\n[training]\nbatches = 7\n").unwrap();
        c.paths.model = Some("m.mbde".into());
        c.sweep.estimators.push(EstimatorSpec {
            model: Some("m.mbde".into()),
            name: Some("mbd-ml".into()),
            ..EstimatorSpec::of_kind(EstimatorKind::Mbd)
        });
        let text = c.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::parse("[[sweep.estimators]]\nname = \"x\"\n").unwrap_err();
        assert!(e.message.contains("kind"), "{}", e.message);
        assert_eq!(e.code, 2);
        let e = RunConfig::parse("[training]\nbatchsize = 3\n").unwrap_err();
        assert!(e.message.contains("batchsize"), "{}", e.message);
        let e = RunConfig::parse("[scenario]\ncorrelation = \"sometimes\"\n").unwrap_err();
        assert!(e.message.contains("correlation") || e.message.contains("sometimes"), "{}", e.message);
    }

    #[test]
    fn sweep_fixes_snr_for_correlation_sweeps() {
        let c = RunConfig::parse("[sweep]\nkind = \"correlation\"\nvalues = [0.0, 1.0]\nsnr_db = 20.0\n").unwrap();
        let s = c.sweep_spec().unwrap();
        assert_eq!((s.scenario.snr_min_db, s.scenario.snr_max_db), (20.0, 20.0));
        assert_eq!(s.scenario_at(1.0).correlation, CorrelationMode::Fixed(1.0));
    }
}
