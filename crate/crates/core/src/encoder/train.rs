use std::io::Write;

use rayon::prelude::*;

use super::{encoder_backward_into, encoder_forward, init_params, Adam, AdamConfig, CovarianceMode, EncoderArchitecture, EncoderModel};
use crate::array::{draw_scenario, sample_snapshots, ArrayGeometry, ScenarioConfig};
use crate::error::{Error, Result};
use crate::linalg::logdet_hermitian;
use crate::objective::{loss_and_grad, LossKind};
use crate::rng::{init_stream, stream};
use crate::scalar::Real;

/// Samples per work unit. Fixed so the reduction order never depends on
/// the number of worker threads.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub covariance_mode: CovarianceMode,
    pub scenario: ScenarioConfig,
    /// Snapshots per training sample.
    pub snapshots: usize,
    pub conv_channels: [usize; 4],
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            batches: 40_000,
            adam: AdamConfig::default(),
            loss: LossKind::Sml,
            covariance_mode: CovarianceMode::Diag,
            scenario: ScenarioConfig::default(),
            snapshots: 100,
            conv_channels: [64, 128, 256, 512],
            hidden: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced setting: channels 16/32/64/128, 2000 batches of 64.
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            batches: 2_000,
            conv_channels: [16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn architecture(&self, geometry: &ArrayGeometry<impl Real>) -> EncoderArchitecture {
        EncoderArchitecture::with_channels(
            geometry.antennas,
            self.scenario.sources,
            self.covariance_mode,
            self.conv_channels,
            self.hidden,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches == 0 {
            return Err(Error::Config("batch_size and batches must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.snapshots == 0 {
            return Err(Error::Config("snapshots must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        self.scenario.validate()
    }
}

/// Per-batch summary handed to the training observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub batch: usize,
    pub mean_loss: f64,
    /// Mean of the per-sample loss infimum (`ln det Ĉ + M` for SML, 0 for
    /// covariance matching).
    pub mean_floor: f64,
    pub grad_norm: f64,
}

/// Per-batch mean losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub mean_loss: Vec<f64>,
    pub mean_floor: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.mean_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_loss.is_empty()
    }

    /// Loss above the per-sample infimum; always non-negative.
    pub fn excess(&self) -> Vec<f64> {
        self.mean_loss.iter().zip(&self.mean_floor).map(|(l, f)| l - f).collect()
    }

    /// Mean of `values[range]`.
    pub fn window_mean(values: &[f64], range: std::ops::Range<usize>) -> f64 {
        let w = &values[range];
        w.iter().sum::<f64>() / w.len() as f64
    }

    /// `batch_index,mean_loss` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "batch_index,mean_loss")?;
        for (i, l) in self.mean_loss.iter().enumerate() {
            writeln!(out, "{i},{l:e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: EncoderModel<T>,
    pub trace: LossTrace,
}

/// Trains a freshly initialized encoder on continuously drawn scenarios.
pub fn train<T: Real>(config: &TrainConfig, geometry: &ArrayGeometry<T>) -> Result<TrainOutcome<T>> {
    train_with_observer(config, geometry, |_| {})
}

/// As [`train`], calling `observer` after every optimizer step.
///
/// Sample `j` of batch `b` uses the random stream `(seed, b, j)`, so the
/// result is identical for any thread count.
pub fn train_with_observer<T: Real>(
    config: &TrainConfig,
    geometry: &ArrayGeometry<T>,
    mut observer: impl FnMut(&BatchStats),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    geometry.validate()?;
    let arch = config.architecture(geometry);
    let mut model: EncoderModel<T> = init_params(&arch, &mut init_stream(config.seed))?;
    let n_params = arch.parameter_count();
    let mut adam = Adam::new(n_params, config.adam);
    let mut trace = LossTrace::default();
    let lr = T::lit(config.learning_rate);
    let inv_batch = T::one() / T::of(config.batch_size);
    let chunks: Vec<std::ops::Range<usize>> = (0..config.batch_size)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(config.batch_size))
        .collect();

    for batch in 0..config.batches {
        let partials: Vec<Result<ChunkSum<T>>> = chunks
            .par_iter()
            .map(|range| chunk_gradient(config, geometry, &model, batch, range.clone()))
            .collect();
        let mut grad = vec![T::zero(); n_params];
        let mut loss_sum = 0.0;
        let mut floor_sum = 0.0;
        for part in partials {
            let part = part?;
            for (g, p) in grad.iter_mut().zip(&part.grad) {
                *g += *p;
            }
            loss_sum += part.loss;
            floor_sum += part.floor;
        }
        grad.iter_mut().for_each(|g| *g *= inv_batch);
        let grad_norm = grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        adam.step(model.params_mut(), &grad, lr)?;
        let stats = BatchStats {
            batch,
            mean_loss: loss_sum / config.batch_size as f64,
            mean_floor: floor_sum / config.batch_size as f64,
            grad_norm,
        };
        trace.mean_loss.push(stats.mean_loss);
        trace.mean_floor.push(stats.mean_floor);
        observer(&stats);
    }
    Ok(TrainOutcome { model, trace })
}

struct ChunkSum<T> {
    grad: Vec<T>,
    loss: f64,
    floor: f64,
}

fn chunk_gradient<T: Real>(
    config: &TrainConfig,
    geometry: &ArrayGeometry<T>,
    model: &EncoderModel<T>,
    batch: usize,
    samples: std::ops::Range<usize>,
) -> Result<ChunkSum<T>> {
    let mut sum = ChunkSum {
        grad: vec![T::zero(); model.params().len()],
        loss: 0.0,
        floor: 0.0,
    };
    for j in samples {
        let mut scen_rng = stream(config.seed, batch as u64, 2 * j as u64);
        let mut snap_rng = stream(config.seed, batch as u64, 2 * j as u64 + 1);
        let scenario = draw_scenario::<T, _>(&config.scenario, &mut scen_rng)?;
        let sample = sample_snapshots(geometry, &scenario, config.snapshots, &mut snap_rng)?.sample_covariance;
        let (latent, cache) = encoder_forward(model, &sample)?;
        let (loss, head) = loss_and_grad(config.loss, geometry, &latent, &sample).map_err(|e| Error::NonFiniteLoss {
            batch,
            detail: format!("sample {j}: {e}; latent {latent:?}"),
        })?;
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() || !head.norm().is_finite() {
            return Err(Error::NonFiniteLoss {
                batch,
                detail: format!("sample {j}: loss {loss}; latent {latent:?}"),
            });
        }
        encoder_backward_into(model, &cache, &head, &mut sum.grad)?;
        sum.loss += loss;
        if config.loss == LossKind::Sml {
            // ln det Ĉ + M bounds the SML loss from below when Ĉ is full rank
            sum.floor += logdet_hermitian(&sample).map(|v| v.to_f64_lossy()).unwrap_or(f64::NEG_INFINITY)
                + geometry.antennas as f64;
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            batch_size: 12,
            batches: 6,
            conv_channels: [2, 3, 4, 5],
            hidden: 8,
            seed: 17,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn trace_length_and_determinism() {
        let g = ArrayGeometry::<f64>::default();
        let a = train(&small(), &g).unwrap();
        let b = train(&small(), &g).unwrap();
        assert_eq!(a.trace.len(), 6);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let g = ArrayGeometry::<f64>::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&small(), &g).unwrap())
        };
        let one = run(1);
        let three = run(3);
        assert_eq!(one.trace, three.trace);
        assert_eq!(one.model.params(), three.model.params());
    }

    #[test]
    fn sml_loss_stays_above_floor() {
        let g = ArrayGeometry::<f64>::default();
        let out = train(&small(), &g).unwrap();
        for e in out.trace.excess() {
            assert!(e >= -1e-9, "{e}");
        }
    }

    #[test]
    fn covariance_matching_trains_in_full_mode() {
        let g = ArrayGeometry::<f64>::default();
        let cfg = TrainConfig {
            loss: LossKind::CovMatch,
            covariance_mode: CovarianceMode::Full,
            ..small()
        };
        let out = train(&cfg, &g).unwrap();
        assert_eq!(out.model.architecture().head_dim(), 13);
        assert!(out.trace.mean_loss.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert!(out.trace.mean_floor.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let g = ArrayGeometry::<f64>::default();
        for cfg in [
            TrainConfig { batch_size: 0, ..small() },
            TrainConfig { learning_rate: -1.0, ..small() },
            TrainConfig { snapshots: 0, ..small() },
        ] {
            assert!(matches!(train(&cfg, &g), Err(Error::Config(_))));
        }
    }

    #[test]
    fn csv_trace_format() {
        let t = LossTrace {
            mean_loss: vec![1.5, -0.25],
            mean_floor: vec![0.0, 0.0],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("batch_index,mean_loss"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.5);
        assert_eq!(lines.next().unwrap().split(',').nth(1).unwrap().parse::<f64>().unwrap(), -0.25);
    }
}
