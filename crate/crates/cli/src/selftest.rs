//! Randomized gradient and invariant checks runnable from the binary.

use rand::Rng;

use mbdoa::array::{draw_scenario, sample_snapshots, ArrayGeometry, CorrelationMode, LatentParams, ScenarioConfig};
use mbdoa::encoder::{encoder_backward, encoder_forward, init_params, CovarianceMode, EncoderArchitecture, EncoderModel};
use mbdoa::estimators::{music_estimate, AngularGrid, Diagnostics};
use mbdoa::evaluation::periodic_error;
use mbdoa::linalg::{hermitian_eig, ComplexMatrix};
use mbdoa::objective::{finite_diff_grad, loss_and_grad, LossKind, PreActivation};
use mbdoa::rng::{init_stream, stream, StreamRng};
use mbdoa::scalar::wrap_pi;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Random latent with `K` sources and a random full factor.
pub fn random_latent(rng: &mut StreamRng, k: usize) -> LatentParams<f64> {
    let raw: Vec<f64> = (0..PreActivation::<f64>::dimension(k, true))
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    PreActivation::from_flat(&raw, k, true).expect("valid length").to_latent()
}

/// Sample covariance of a random scenario.
pub fn random_sample_cov(rng: &mut StreamRng, geometry: &ArrayGeometry<f64>, k: usize, snapshots: usize) -> ComplexMatrix<f64> {
    let cfg = ScenarioConfig {
        sources: k,
        correlation: CorrelationMode::Uniform,
        ..Default::default()
    };
    let s = draw_scenario(&cfg, rng).expect("valid config");
    sample_snapshots(geometry, &s, snapshots, rng).expect("valid scenario").sample_covariance
}

/// Worst relative error between analytic and central-difference decoder
/// gradients over `points` random (latent, Ĉ) pairs.
pub fn decoder_gradient_error(kind: LossKind, seed: u64, points: usize, step: f64) -> f64 {
    let g = ArrayGeometry::default();
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut rng = stream(seed, 100 + kind as u64, p as u64);
        let latent = random_latent(&mut rng, 3);
        let c = random_sample_cov(&mut rng, &g, 3, 100);
        let (_, analytic) = loss_and_grad(kind, &g, &latent, &c).expect("finite loss");
        let fd = finite_diff_grad(kind, &g, &latent, &c, step).expect("finite loss");
        worst = worst.max(rel_err(&analytic.to_flat(true), &fd.to_flat(true)));
    }
    worst
}

/// Worst relative error of the composed encoder + SML gradient against
/// central differences on the tiny architecture.
pub fn encoder_gradient_error(seed: u64, points: usize) -> f64 {
    let g = ArrayGeometry::default();
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mode = if p % 2 == 0 { CovarianceMode::Diag } else { CovarianceMode::Full };
        let arch = EncoderArchitecture::with_channels(9, 2, mode, [2, 3, 4, 5], 8);
        let model: EncoderModel<f64> = init_params(&arch, &mut stream(seed, 200, p as u64)).expect("valid");
        let c = random_sample_cov(&mut stream(seed, 201, p as u64), &g, 2, 100);
        let loss_at = |m: &EncoderModel<f64>| -> f64 {
            let (latent, _) = encoder_forward(m, &c).expect("shape");
            loss_and_grad(LossKind::Sml, &g, &latent, &c).expect("finite").0
        };
        let (latent, cache) = encoder_forward(&model, &c).expect("shape");
        let (_, head) = loss_and_grad(LossKind::Sml, &g, &latent, &c).expect("finite");
        let analytic = encoder_backward(&model, &cache, &head).expect("fresh cache");
        let h = 1e-6;
        let fd: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

/// Invariant checks, each over `cases` random inputs.
pub fn invariant_checks(seed: u64, cases: usize) -> Vec<Check> {
    let g = ArrayGeometry::default();
    let mut out = Vec::new();
    let mut rng = stream(seed, 300, 0);

    let worst_modulus = (0..cases)
        .map(|_| {
            let theta: f64 = rng.random_range(-20.0..20.0);
            g.steering_vector(theta).iter().map(|z| (z.norm() - 1.0).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    out.push(Check {
        name: "steering vectors have unit modulus",
        passed: worst_modulus < 1e-12,
        detail: format!("max | |a_m| - 1 | = {worst_modulus:.2e}"),
    });

    let mut min_eig = f64::INFINITY;
    let mut max_asym: f64 = 0.0;
    for i in 0..cases {
        let k = 1 + i % 4;
        let c = random_sample_cov(&mut rng, &g, k, 1 + i % 30);
        max_asym = max_asym.max((&c - &c.adjoint()).max_abs());
        let eig = hermitian_eig(&c).expect("converges");
        min_eig = min_eig.min(eig.eigenvalues[0] / eig.eigenvalues.last().copied().unwrap_or(1.0).max(1e-300));
    }
    out.push(Check {
        name: "sample covariances are Hermitian PSD",
        passed: max_asym < 1e-12 && min_eig >= -1e-10,
        detail: format!("max asymmetry {max_asym:.2e}, min relative eigenvalue {min_eig:.2e}"),
    });

    let mut worst_perm: f64 = 0.0;
    let mut out_of_range = 0;
    for _ in 0..cases {
        let k = rng.random_range(1..=5);
        let truth: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let est: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0 * std::f64::consts::PI..10.0 * std::f64::consts::PI)).collect();
        let mut shuffled = est.clone();
        for i in (1..k).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let (a, _) = periodic_error(&truth, &est).expect("equal counts");
        let (b, _) = periodic_error(&truth, &shuffled).expect("equal counts");
        let ca: f64 = a.iter().map(|e| e * e).sum();
        let cb: f64 = b.iter().map(|e| e * e).sum();
        worst_perm = worst_perm.max((ca - cb).abs());
        out_of_range += a.iter().filter(|e| !(-std::f64::consts::PI..std::f64::consts::PI).contains(*e)).count();
        let x: f64 = rng.random_range(-10.0 * std::f64::consts::PI..10.0 * std::f64::consts::PI);
        let w = wrap_pi(x);
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&w) {
            out_of_range += 1;
        }
    }
    out.push(Check {
        name: "periodic error is permutation invariant and wrapped",
        passed: worst_perm < 1e-12 && out_of_range == 0,
        detail: format!("max cost change {worst_perm:.2e}, {out_of_range} values outside [-pi, pi)"),
    });

    let grid = AngularGrid::standard(&g).expect("valid geometry");
    let mut mismatches = 0;
    for i in 0..cases {
        let k = 1 + i % 3;
        let c = random_sample_cov(&mut rng, &g, k, 100);
        let peaks = |m: &ComplexMatrix<f64>| match music_estimate(m, &grid, k).expect("K < M").diagnostics {
            Diagnostics::Music { peaks, .. } => peaks,
            _ => unreachable!(),
        };
        if peaks(&c) != peaks(&c.scale(7.3)) {
            mismatches += 1;
        }
    }
    out.push(Check {
        name: "MUSIC peak selection is scale invariant",
        passed: mismatches == 0,
        detail: format!("{mismatches}/{cases} grid selections changed under 7.3x scaling"),
    });

    let mut bad_heads = 0;
    for i in 0..cases {
        let k = 1 + i % 4;
        let raw: Vec<f64> = (0..PreActivation::<f64>::dimension(k, true))
            .map(|_| rng.random_range(-80.0..80.0))
            .collect();
        let latent = PreActivation::from_flat(&raw, k, true).expect("length").to_latent();
        let sum: f64 = latent.powers.iter().sum();
        if latent.validate().is_err() || (sum - 1.0).abs() > 1e-9 {
            bad_heads += 1;
        }
    }
    let arch = EncoderArchitecture::with_channels(9, 3, CovarianceMode::Full, [4, 4, 4, 4], 16);
    for i in 0..cases.min(20) {
        let mut model: EncoderModel<f64> = init_params(&arch, &mut init_stream(seed + i as u64)).expect("valid");
        // blow the weights up so raw outputs land far in the saturated range
        for p in model.params_mut() {
            *p *= 30.0;
        }
        let c = random_sample_cov(&mut rng, &g, 3, 100);
        let (latent, _) = encoder_forward(&model, &c).expect("shape");
        if latent.validate().is_err() || (latent.powers.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bad_heads += 1;
        }
    }
    out.push(Check {
        name: "encoder heads always produce valid latents",
        passed: bad_heads == 0,
        detail: format!("{bad_heads} invalid latents"),
    });

    let mut psd_fail = 0;
    for _ in 0..cases {
        let k = rng.random_range(1..=4);
        let latent = random_latent(&mut rng, k);
        let cs = latent.signal_covariance();
        let eig = hermitian_eig(&cs).expect("converges");
        if eig.eigenvalues[0] < -1e-10 || !cs.is_hermitian(1e-12) {
            psd_fail += 1;
        }
    }
    out.push(Check {
        name: "decoded signal covariances are Hermitian PSD",
        passed: psd_fail == 0,
        detail: format!("{psd_fail}/{cases} failures"),
    });
    out
}

/// Full self-test as printed by `mbdoa selftest`.
pub fn run(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    for (kind, name) in [
        (LossKind::Sml, "SML gradient matches finite differences"),
        (LossKind::CovMatch, "covariance-matching gradient matches finite differences"),
    ] {
        let err = decoder_gradient_error(kind, seed, 20, 1e-5);
        checks.push(Check {
            name,
            passed: err < 1e-4,
            detail: format!("worst relative error {err:.2e} over 20 points"),
        });
    }
    let err = encoder_gradient_error(seed, 4);
    checks.push(Check {
        name: "encoder backprop matches finite differences",
        passed: err < 1e-3,
        detail: format!("worst relative error {err:.2e} over 4 points"),
    });
    checks.extend(invariant_checks(seed, 100));
    checks
}
