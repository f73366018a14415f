//! Periodic-error metric and Monte-Carlo sweeps.

use std::io::Write;
use std::time::{Duration, Instant};

use itertools::Itertools;
use rayon::prelude::*;

use crate::array::{draw_scenario, sample_snapshots, ArrayGeometry, CorrelationMode, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimators::DoaEstimator;
use crate::rng::stream;
use crate::scalar::{wrap_pi, Real};

/// Matched errors `wrap(θ_k − θ̂_π(k))` under the permutation `π` that
/// minimizes their squared sum. Returns the errors and `π`.
pub fn periodic_error<T: Real>(truth: &[T], estimate: &[T]) -> Result<(Vec<T>, Vec<usize>)> {
    if truth.len() != estimate.len() {
        return Err(Error::Domain(format!(
            "{} true angles but {} estimates",
            truth.len(),
            estimate.len()
        )));
    }
    let k = truth.len();
    let mut best: Option<(T, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let cost: T = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| wrap_pi(truth[i] - estimate[j]).powi(2))
            .sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, perm));
        }
    }
    let perm = best.map(|(_, p)| p).unwrap_or_default();
    let errors = perm.iter().enumerate().map(|(i, &j)| wrap_pi(truth[i] - estimate[j])).collect();
    Ok((errors, perm))
}

/// Root mean square periodic error over all pairs and all matched angles.
pub fn rmspe<T: Real>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<T> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Domain("rmspe of an empty list".into()));
    };
    let k = first.len();
    let mut sum = T::zero();
    for (truth, est) in pairs {
        if truth.len() != k {
            return Err(Error::Domain("inconsistent source counts".into()));
        }
        let (e, _) = periodic_error(truth, est)?;
        sum += e.iter().map(|v| *v * *v).sum::<T>();
    }
    Ok((sum / T::of(k * pairs.len())).sqrt())
}

/// RMS of already matched errors.
pub fn rms<T: Real>(errors: &[T]) -> Result<T> {
    if errors.is_empty() {
        return Err(Error::Domain("rms of an empty list".into()));
    }
    Ok((errors.iter().map(|e| *e * *e).sum::<T>() / T::of(errors.len())).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Values are SNRs in dB.
    Snr,
    /// Values are correlation coefficients.
    Correlation,
    /// A single correlation value; per-trial errors are kept for a CDF.
    Cdf,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Snr => "snr",
            SweepKind::Correlation => "correlation",
            SweepKind::Cdf => "cdf",
        }
    }
}

/// What to simulate and how often.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// Fixed scenario parameters; the swept quantity overrides one field.
    pub scenario: ScenarioConfig,
    pub snapshots: usize,
    pub values: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep values must not be empty".into()));
        }
        if self.trials == 0 || self.snapshots == 0 {
            return Err(Error::Config("trials and snapshots must be positive".into()));
        }
        if self.kind == SweepKind::Cdf && self.values.len() != 1 {
            return Err(Error::Config("a cdf sweep takes exactly one correlation value".into()));
        }
        for &v in &self.values {
            self.scenario_at(v).validate()?;
        }
        Ok(())
    }

    /// Scenario configuration at sweep value `v`.
    pub fn scenario_at(&self, v: f64) -> ScenarioConfig {
        match self.kind {
            SweepKind::Snr => self.scenario.clone().with_snr_db(v),
            SweepKind::Correlation | SweepKind::Cdf => self.scenario.clone().with_correlation(CorrelationMode::Fixed(v)),
        }
    }
}

/// Outcome for one (sweep value, estimator) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: f64,
    pub estimator: String,
    pub rmspe: f64,
    pub trials: usize,
    pub outliers: usize,
    /// Matched errors, `K` per trial in trial order.
    pub errors: Vec<f64>,
    /// Time spent inside the estimator, summed over trials.
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: SweepKind,
    /// Value-major, estimator-minor.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, value: f64, estimator: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.value == value && c.estimator == estimator)
    }

    /// Summary rows, or per-sample rows for a CDF sweep.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.kind == SweepKind::Cdf {
            writeln!(out, "estimator,error_sample")?;
            for c in &self.cells {
                for e in &c.errors {
                    writeln!(out, "{},{}", c.estimator, format_sig(*e, 12))?;
                }
            }
        } else {
            writeln!(out, "sweep_value,estimator,rmspe,trials,outlier_count")?;
            for c in &self.cells {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    format_sig(c.value, 12),
                    c.estimator,
                    format_sig(c.rmspe, 12),
                    c.trials,
                    c.outliers
                )?;
            }
        }
        Ok(())
    }
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{}", trim(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    }
}

struct TrialOutcome {
    errors: Vec<f64>,
    failed: bool,
    elapsed: Duration,
}

/// Runs every estimator on the same simulated batch for each trial.
///
/// Trial `t` at value index `v` draws everything from stream `(seed, v, t)`,
/// so results do not depend on scheduling. A failing estimator scores the
/// maximal error π on every angle and is counted as an outlier.
pub fn run_sweep<T: Real>(
    spec: &SweepSpec,
    geometry: &ArrayGeometry<T>,
    estimators: &[&dyn DoaEstimator<T>],
) -> Result<SweepResult> {
    spec.validate()?;
    geometry.validate()?;
    if estimators.is_empty() {
        return Err(Error::Config("no estimators given".into()));
    }
    let k = spec.scenario.sources;
    let mut cells = Vec::with_capacity(spec.values.len() * estimators.len());
    for (vi, &value) in spec.values.iter().enumerate() {
        let config = spec.scenario_at(value);
        let per_trial: Vec<Result<Vec<TrialOutcome>>> = (0..spec.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream(spec.seed, vi as u64, t as u64);
                let scenario = draw_scenario::<T, _>(&config, &mut rng)?;
                let batch = sample_snapshots(geometry, &scenario, spec.snapshots, &mut rng)?;
                let truth = &scenario.angles;
                Ok(estimators
                    .iter()
                    .map(|est| {
                        let start = Instant::now();
                        let result = est.evaluate(&batch.sample_covariance, k, truth);
                        let elapsed = start.elapsed();
                        let matched = result.and_then(|e| periodic_error(truth, &e.angles));
                        match matched {
                            Ok((errs, _)) => TrialOutcome {
                                errors: errs.iter().map(|e| e.to_f64_lossy()).collect(),
                                failed: false,
                                elapsed,
                            },
                            Err(_) => TrialOutcome {
                                errors: vec![std::f64::consts::PI; k],
                                failed: true,
                                elapsed,
                            },
                        }
                    })
                    .collect())
            })
            .collect();
        let per_trial: Vec<Vec<TrialOutcome>> = per_trial.into_iter().collect::<Result<_>>()?;
        for (ei, est) in estimators.iter().enumerate() {
            let mut errors = Vec::with_capacity(spec.trials * k);
            let mut outliers = 0;
            let mut wall_time = Duration::ZERO;
            for trial in &per_trial {
                let o = &trial[ei];
                errors.extend_from_slice(&o.errors);
                outliers += usize::from(o.failed);
                wall_time += o.elapsed;
            }
            cells.push(SweepCell {
                value,
                estimator: est.name().to_string(),
                rmspe: rms(&errors)?,
                trials: spec.trials,
                outliers,
                errors,
                wall_time,
            });
        }
    }
    Ok(SweepResult { kind: spec.kind, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{AngularGrid, DoAEstimate, Diagnostics, MusicEstimator};
    use crate::linalg::ComplexMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn periodic_error_examples() {
        let (e, _) = periodic_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        let (e, _) = periodic_error(&[0.1], &[TAU - 0.1]).unwrap();
        assert!((e[0] - 0.2).abs() < 1e-12);
        let (e, p) = periodic_error(&[0.0, PI / 2.0], &[PI / 2.0, 0.0]).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        assert_eq!(p, vec![1, 0]);
        assert!(matches!(periodic_error(&[0.0], &[0.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn rmspe_examples() {
        let pairs = vec![(vec![1.0, 2.0], vec![1.0, 2.0]); 3];
        assert_eq!(rmspe(&pairs).unwrap(), 0.0);
        assert!((rmspe(&[(vec![0.5f64], vec![0.7])]).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(rmspe::<f64>(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn random_guess_bound() {
        let mut rng = stream(99, 0, 0);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100_000)
            .map(|_| (vec![rng.random_range(0.0..TAU)], vec![rng.random_range(0.0..TAU)]))
            .collect();
        let r = rmspe(&pairs).unwrap();
        let target = PI / 3f64.sqrt();
        assert!((r / target - 1.0).abs() < 0.02, "{r} vs {target}");
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.0, 12), "0");
        assert_eq!(format_sig(1.5, 12), "1.5");
        assert_eq!(format_sig(-10.0, 12), "-10");
        assert_eq!(format_sig(PI, 12), "3.14159265359");
        assert_eq!(format_sig(1.0 / 3.0, 12), "0.333333333333");
        assert_eq!(format_sig(1.234e-7, 12), "1.234e-7");
        assert_eq!(format_sig(6.02e23, 12), "6.02e23");
        for x in [PI, 1e-9 * PI, -2.5e13, 0.1 + 0.2] {
            let back: f64 = format_sig(x, 12).parse().unwrap();
            assert!((back / x - 1.0).abs() < 1e-11);
        }
    }

    /// Returns the truth; calibrates the harness.
    struct Oracle;

    impl DoaEstimator<f64> for Oracle {
        fn name(&self) -> &str {
            "oracle"
        }

        fn estimate(&self, _: &ComplexMatrix<f64>, _: usize) -> Result<DoAEstimate<f64>> {
            Err(Error::Domain("oracle needs the truth".into()))
        }

        fn evaluate(&self, _: &ComplexMatrix<f64>, _: usize, truth: &[f64]) -> Result<DoAEstimate<f64>> {
            Ok(DoAEstimate {
                angles: truth.iter().rev().copied().collect(),
                diagnostics: Diagnostics::None,
            })
        }
    }

    struct AlwaysFails;

    impl DoaEstimator<f64> for AlwaysFails {
        fn name(&self) -> &str {
            "broken"
        }

        fn estimate(&self, _: &ComplexMatrix<f64>, _: usize) -> Result<DoAEstimate<f64>> {
            Err(Error::Domain("nope".into()))
        }
    }

    fn spec(kind: SweepKind, values: Vec<f64>, trials: usize, k: usize) -> SweepSpec {
        SweepSpec {
            kind,
            scenario: ScenarioConfig {
                sources: k,
                ..Default::default()
            },
            snapshots: 100,
            values,
            trials,
            seed: 5,
        }
    }

    #[test]
    fn oracle_and_failures() {
        let g = ArrayGeometry::<f64>::default();
        let r = run_sweep(&spec(SweepKind::Snr, vec![10.0], 1, 3), &g, &[&Oracle, &AlwaysFails]).unwrap();
        assert_eq!(r.cells[0].rmspe, 0.0);
        assert_eq!(r.cells[0].outliers, 0);
        assert_eq!(r.cells[1].rmspe, PI);
        assert_eq!(r.cells[1].outliers, 1);
    }

    #[test]
    fn cdf_sample_count_and_csv() {
        let g = ArrayGeometry::<f64>::default();
        let r = run_sweep(&spec(SweepKind::Cdf, vec![1.0], 100, 3), &g, &[&Oracle, &AlwaysFails]).unwrap();
        for c in &r.cells {
            assert_eq!(c.errors.len(), 300);
        }
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("estimator,error_sample"));
        assert_eq!(text.lines().count(), 601);
        assert!(matches!(
            run_sweep(&spec(SweepKind::Cdf, vec![0.0, 1.0], 1, 3), &g, &[&Oracle]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn music_single_source_high_snr() {
        let g = ArrayGeometry::<f64>::default();
        let music = MusicEstimator {
            grid: AngularGrid::standard(&g).unwrap(),
        };
        let r = run_sweep(&spec(SweepKind::Snr, vec![30.0], 200, 1), &g, &[&music]).unwrap();
        assert!(r.cells[0].rmspe < 1f64.to_radians(), "{}", r.cells[0].rmspe);
        assert_eq!(r.cells[0].outliers, 0);
    }

    #[test]
    fn snr_sweep_csv_rows_and_determinism() {
        let g = ArrayGeometry::<f64>::default();
        let music = MusicEstimator {
            grid: AngularGrid::new(&g, 360).unwrap(),
        };
        let s = spec(SweepKind::Snr, vec![-10.0, 0.0, 10.0, 20.0, 30.0], 20, 2);
        let csv = |threads| {
            let r = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_sweep(&s, &g, &[&music]).unwrap());
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = csv(1);
        assert_eq!(a.lines().count(), 6);
        assert!(a.starts_with("sweep_value,estimator,rmspe,trials,outlier_count\n-10,music,"));
        assert_eq!(a, csv(1));
        assert_eq!(a, csv(3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matching_invariant_to_relabeling(
            truth in proptest::collection::vec(0.0..TAU, 1..5),
            noise in proptest::collection::vec(-1.0f64..1.0, 5),
            seed in any::<u64>(),
        ) {
            let est: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
            let mut shuffled = est.clone();
            let mut rng = stream(seed, 0, 0);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let (a, _) = periodic_error(&truth, &est).unwrap();
            let (b, _) = periodic_error(&truth, &shuffled).unwrap();
            let ca: f64 = a.iter().map(|e| e * e).sum();
            let cb: f64 = b.iter().map(|e| e * e).sum();
            prop_assert!((ca - cb).abs() < 1e-12);
            prop_assert!(a.iter().all(|e| (-PI..PI).contains(e)));
        }

        #[test]
        fn rmspe_monotone_in_single_error(
            errs in proptest::collection::vec(-1.0f64..1.0, 1..4),
            idx in 0usize..4,
            grow in 0.0f64..1.0,
        ) {
            // with |errors| < π/2 per angle the identity pairing stays optimal when one grows
            let k = errs.len();
            let i = idx % k;
            let truth: Vec<f64> = (0..k).map(|j| j as f64 * TAU / k as f64).collect();
            let est: Vec<f64> = truth.iter().zip(&errs).map(|(t, e)| t + e * 0.3).collect();
            let mut worse = est.clone();
            let e = worse[i] - truth[i];
            worse[i] = truth[i] + e.signum() * (e.abs() + grow * 0.2);
            let a = rmspe(&[(truth.clone(), est)]).unwrap();
            let b = rmspe(&[(truth, worse)]).unwrap();
            prop_assert!(b >= a - 1e-15);
        }
    }
}
