//! Training objectives and their exact gradients.
//!
//! Two losses compare the decoder output against a sample covariance `Ĉ`:
//!
//! * stochastic maximum likelihood, `ln det C_y + tr(C_y⁻¹ Ĉ)`;
//! * covariance matching, `‖Ĉ − A Ĉ_s Aᴴ‖²_F` (no noise term).
//!
//! Gradients are taken with respect to the *pre-activation* coordinates the
//! encoder emits (angle logits, power logits, the free entries of `L̂`, and
//! `ln σ̂²`). Both losses reduce to a Hermitian weight `W` with
//! `dℓ = Re tr(W dC)`, which [`decoder_backward`] pushes through the decoder.

use num_complex::Complex;
use num_traits::Zero;

use crate::array::{model_covariance, ArrayGeometry, LatentParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, logdet_from_cholesky, ComplexMatrix};
use crate::scalar::{wrap_two_pi, Real};

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Stochastic maximum likelihood.
    Sml,
    /// Frobenius covariance matching.
    CovMatch,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sml => "sml",
            LossKind::CovMatch => "cov",
        }
    }
}

/// `(row, col)` of every strictly-lower entry of a `k×k` matrix, in the order
/// the encoder head emits them.
pub fn strictly_lower_pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..k).flat_map(|i| (0..i).map(move |j| (i, j)))
}

pub fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Largest exponent magnitude the heads pass to `exp`, so outputs stay
/// finite and strictly positive for any raw network output.
pub fn exp_span<T: Real>() -> T {
    T::lit(0.9) * T::max_value().ln()
}

/// Softmax with logits floored at `max − exp_span`, so every weight is
/// strictly positive.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let span = exp_span::<T>();
    let e: Vec<T> = x.iter().map(|&v| (v - max).max(-span).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Raw encoder outputs before the head activations.
#[derive(Debug, Clone, PartialEq)]
pub struct PreActivation<T> {
    /// `θ = 2π·sigmoid(·)`.
    pub angle_logits: Vec<T>,
    /// `Λ = softmax(·)`.
    pub power_logits: Vec<T>,
    /// Strictly-lower entries of `L̂`, row-major. Empty means `L̂ = I`.
    pub factor_entries: Vec<Complex<T>>,
    /// `σ² = exp(·)`.
    pub log_noise: T,
}

impl<T: Real> PreActivation<T> {
    pub fn sources(&self) -> usize {
        self.angle_logits.len()
    }

    /// Flat length: `2K + 1`, plus `K(K−1)` when the factor is free.
    pub fn dimension(sources: usize, full_factor: bool) -> usize {
        2 * sources + 1 + if full_factor { sources * (sources - 1) } else { 0 }
    }

    /// Applies the head activations.
    pub fn to_latent(&self) -> LatentParams<T> {
        let k = self.sources();
        let angles = self
            .angle_logits
            .iter()
            .map(|&v| wrap_two_pi(T::TAU() * logistic(v)))
            .collect();
        let powers = softmax(&self.power_logits);
        let mut factor = ComplexMatrix::identity(k);
        if !self.factor_entries.is_empty() {
            for ((i, j), &z) in strictly_lower_pairs(k).zip(&self.factor_entries) {
                factor[(i, j)] = z;
            }
        }
        LatentParams {
            angles,
            powers,
            factor,
            noise_variance: self.log_noise.max(-exp_span::<T>()).min(exp_span::<T>()).exp(),
        }
    }

    /// Inverts the head activations (power logits are normalized to zero mean).
    pub fn from_latent(latent: &LatentParams<T>, full_factor: bool) -> Self {
        let k = latent.sources();
        let eps = T::epsilon();
        let angle_logits = latent
            .angles
            .iter()
            .map(|&t| {
                let s = (t / T::TAU()).max(eps).min(T::one() - eps);
                (s / (T::one() - s)).ln()
            })
            .collect();
        let logs: Vec<T> = latent.powers.iter().map(|p| p.ln()).collect();
        let mean = logs.iter().copied().sum::<T>() / T::of(k);
        let power_logits = logs.into_iter().map(|l| l - mean).collect();
        let factor_entries = if full_factor {
            strictly_lower_pairs(k).map(|(i, j)| latent.factor[(i, j)]).collect()
        } else {
            Vec::new()
        };
        Self {
            angle_logits,
            power_logits,
            factor_entries,
            log_noise: latent.noise_variance.ln(),
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(2 * self.sources() + 1 + 2 * self.factor_entries.len());
        v.extend_from_slice(&self.angle_logits);
        v.extend_from_slice(&self.power_logits);
        for z in &self.factor_entries {
            v.push(z.re);
            v.push(z.im);
        }
        v.push(self.log_noise);
        v
    }

    pub fn from_flat(flat: &[T], sources: usize, full_factor: bool) -> Result<Self> {
        let k = sources;
        if flat.len() != Self::dimension(k, full_factor) {
            return Err(Error::Dimension(format!(
                "head vector of length {} for K={k} ({})",
                flat.len(),
                if full_factor { "full" } else { "diag" }
            )));
        }
        let nf = if full_factor { k * (k - 1) / 2 } else { 0 };
        let factor_entries = (0..nf)
            .map(|n| Complex::new(flat[2 * k + 2 * n], flat[2 * k + 2 * n + 1]))
            .collect();
        Ok(Self {
            angle_logits: flat[..k].to_vec(),
            power_logits: flat[k..2 * k].to_vec(),
            factor_entries,
            log_noise: flat[flat.len() - 1],
        })
    }
}

/// Loss gradient in pre-activation coordinates.
///
/// `d_factor` always carries all `K(K−1)/2` strictly-lower entries (real part
/// holds `∂ℓ/∂Re`, imaginary part `∂ℓ/∂Im`), so the flat dimension is
/// `K + K + K(K−1) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGradient<T> {
    pub d_angles: Vec<T>,
    pub d_raw_powers: Vec<T>,
    pub d_factor: Vec<Complex<T>>,
    pub d_log_noise: T,
}

impl<T: Real> LatentGradient<T> {
    pub fn zeros(sources: usize) -> Self {
        Self {
            d_angles: vec![T::zero(); sources],
            d_raw_powers: vec![T::zero(); sources],
            d_factor: vec![Complex::zero(); sources * (sources - 1) / 2],
            d_log_noise: T::zero(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.d_angles.len() + self.d_raw_powers.len() + 2 * self.d_factor.len() + 1
    }

    /// Flat layout; with `full_factor = false` the factor block is dropped,
    /// matching a diagonal-covariance head.
    pub fn to_flat(&self, full_factor: bool) -> Vec<T> {
        let mut v = Vec::with_capacity(self.dimension());
        v.extend_from_slice(&self.d_angles);
        v.extend_from_slice(&self.d_raw_powers);
        if full_factor {
            for z in &self.d_factor {
                v.push(z.re);
                v.push(z.im);
            }
        }
        v.push(self.d_log_noise);
        v
    }

    pub fn from_flat(flat: &[T], sources: usize, full_factor: bool) -> Result<Self> {
        let p = PreActivation::from_flat(flat, sources, full_factor)?;
        let mut g = Self::zeros(sources);
        g.d_angles = p.angle_logits;
        g.d_raw_powers = p.power_logits;
        if full_factor {
            g.d_factor = p.factor_entries;
        }
        g.d_log_noise = p.log_noise;
        Ok(g)
    }

    pub fn norm(&self) -> T {
        self.to_flat(true).iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            d_angles: self.d_angles.iter().map(|&x| x * s).collect(),
            d_raw_powers: self.d_raw_powers.iter().map(|&x| x * s).collect(),
            d_factor: self.d_factor.iter().map(|&z| z * s).collect(),
            d_log_noise: self.d_log_noise * s,
        }
    }
}

fn check_inputs<T: Real>(geometry: &ArrayGeometry<T>, latent: &LatentParams<T>, sample_cov: &ComplexMatrix<T>) -> Result<()> {
    let m = geometry.antennas;
    if sample_cov.rows() != m || sample_cov.cols() != m {
        return Err(Error::Dimension(format!(
            "sample covariance is {}x{}, array has {m} antennas",
            sample_cov.rows(),
            sample_cov.cols()
        )));
    }
    if !(latent.noise_variance > T::zero()) {
        return Err(Error::Domain(format!(
            "noise variance must be positive, got {}",
            latent.noise_variance
        )));
    }
    Ok(())
}

/// `ln det C + tr(C⁻¹ Ĉ)` for an explicit model covariance.
pub fn sml_loss_from_covariance<T: Real>(model_cov: &ComplexMatrix<T>, sample_cov: &ComplexMatrix<T>) -> Result<T> {
    let l = cholesky(model_cov)?;
    let x = cholesky_solve(&l, sample_cov)?;
    Ok(logdet_from_cholesky(&l) + x.trace().re)
}

/// Stochastic maximum-likelihood loss of the decoder output against `Ĉ`.
pub fn sml_loss<T: Real>(geometry: &ArrayGeometry<T>, latent: &LatentParams<T>, sample_cov: &ComplexMatrix<T>) -> Result<T> {
    check_inputs(geometry, latent, sample_cov)?;
    sml_loss_from_covariance(&model_covariance(geometry, latent), sample_cov)
}

fn signal_part<T: Real>(geometry: &ArrayGeometry<T>, latent: &LatentParams<T>) -> ComplexMatrix<T> {
    let a = geometry.steering_matrix(&latent.angles);
    a.matmul(&latent.signal_covariance())
        .and_then(|x| x.matmul_adjoint(&a))
        .expect("consistent latent dimensions")
}

/// `‖Ĉ − A Ĉ_s Aᴴ‖²_F`.
pub fn covmatch_loss<T: Real>(
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    sample_cov: &ComplexMatrix<T>,
) -> Result<T> {
    check_inputs(geometry, latent, sample_cov)?;
    let r = sample_cov - &signal_part(geometry, latent);
    Ok(r.frobenius_norm().powi(2))
}

pub fn loss<T: Real>(
    kind: LossKind,
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    sample_cov: &ComplexMatrix<T>,
) -> Result<T> {
    match kind {
        LossKind::Sml => sml_loss(geometry, latent, sample_cov),
        LossKind::CovMatch => covmatch_loss(geometry, latent, sample_cov),
    }
}

/// Pushes a covariance-space weight `W` (with `dℓ = Re tr(W dC)`) back to the
/// pre-activation coordinates of the latent. `with_noise` controls whether
/// `C` contains the `σ² I` term.
pub fn decoder_backward<T: Real>(
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    weight: &ComplexMatrix<T>,
    with_noise: bool,
) -> LatentGradient<T> {
    let k = latent.sources();
    let m = geometry.antennas;
    let two = T::lit(2.0);
    let a = geometry.steering_matrix(&latent.angles);
    let da = geometry.steering_derivative_matrix(&latent.angles);
    let cs = latent.signal_covariance();

    // X = C_s Aᴴ W  (K×M)
    let wa = weight.matmul(&a).expect("weight is MxM");
    let x = cs.matmul(&wa.adjoint()).expect("KxK times KxM");
    let mut d_angles = Vec::with_capacity(k);
    for kk in 0..k {
        let mut acc = Complex::<T>::zero();
        for mm in 0..m {
            acc += x[(kk, mm)] * da[(mm, kk)];
        }
        let s = latent.angles[kk] / T::TAU();
        d_angles.push(two * acc.re * T::TAU() * s * (T::one() - s));
    }

    // B = Aᴴ W A  (K×K)
    let b = a.adjoint().matmul(&wa).expect("KxM times MxK");
    let p = latent.factor.matmul_adjoint(&latent.factor).expect("square factor");
    let d: Vec<T> = latent.powers.iter().map(|l| l.sqrt()).collect();
    let g_power: Vec<T> = (0..k)
        .map(|i| {
            let mut acc = Complex::<T>::zero();
            for j in 0..k {
                acc += p[(i, j)] * b[(j, i)] * d[j];
            }
            acc.re / d[i]
        })
        .collect();
    let weighted: T = latent.powers.iter().zip(&g_power).map(|(&l, &g)| l * g).sum();
    let d_raw_powers = latent
        .powers
        .iter()
        .zip(&g_power)
        .map(|(&l, &g)| l * (g - weighted))
        .collect();

    // E = D B D, gradient of the free factor entries is 2·(E L)_{ij}.
    let e = ComplexMatrix::from_fn(k, k, |i, j| b[(i, j)] * d[i] * d[j]);
    let el = e.matmul(&latent.factor).expect("square");
    let d_factor = strictly_lower_pairs(k).map(|(i, j)| el[(i, j)] * two).collect();

    let d_log_noise = if with_noise {
        latent.noise_variance * weight.trace().re
    } else {
        T::zero()
    };

    LatentGradient {
        d_angles,
        d_raw_powers,
        d_factor,
        d_log_noise,
    }
}

/// Loss value and pre-activation gradient in one pass.
pub fn loss_and_grad<T: Real>(
    kind: LossKind,
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    sample_cov: &ComplexMatrix<T>,
) -> Result<(T, LatentGradient<T>)> {
    check_inputs(geometry, latent, sample_cov)?;
    match kind {
        LossKind::Sml => {
            let c = model_covariance(geometry, latent);
            let l = cholesky(&c)?;
            let c_inv = cholesky_solve(&l, &ComplexMatrix::identity(c.rows()))?.hermitian_part();
            let c_inv_s = c_inv.matmul(sample_cov)?;
            let value = logdet_from_cholesky(&l) + c_inv_s.trace().re;
            // W = C⁻¹ − C⁻¹ Ĉ C⁻¹
            let w = (&c_inv - &c_inv_s.matmul(&c_inv)?).hermitian_part();
            Ok((value, decoder_backward(geometry, latent, &w, true)))
        }
        LossKind::CovMatch => {
            let r = sample_cov - &signal_part(geometry, latent);
            let value = r.frobenius_norm().powi(2);
            let w = r.scale(-T::lit(2.0)).hermitian_part();
            Ok((value, decoder_backward(geometry, latent, &w, false)))
        }
    }
}

pub fn sml_loss_grad<T: Real>(
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    sample_cov: &ComplexMatrix<T>,
) -> Result<LatentGradient<T>> {
    loss_and_grad(LossKind::Sml, geometry, latent, sample_cov).map(|(_, g)| g)
}

pub fn covmatch_loss_grad<T: Real>(
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    sample_cov: &ComplexMatrix<T>,
) -> Result<LatentGradient<T>> {
    loss_and_grad(LossKind::CovMatch, geometry, latent, sample_cov).map(|(_, g)| g)
}

/// Central differences of `f` around `at`, one pre-activation coordinate at a
/// time. The factor entries are always perturbed (a diagonal `at` is
/// promoted to an explicit zero factor).
pub fn finite_diff_with<T: Real>(
    at: &PreActivation<T>,
    step: T,
    mut f: impl FnMut(&PreActivation<T>) -> Result<T>,
) -> Result<LatentGradient<T>> {
    let k = at.sources();
    let mut base = at.clone();
    if base.factor_entries.is_empty() {
        base.factor_entries = vec![Complex::zero(); k * (k - 1) / 2];
    }
    let flat = base.to_flat();
    let mut grad = Vec::with_capacity(flat.len());
    let two_h = T::lit(2.0) * step;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += step;
        let mut minus = flat.clone();
        minus[i] -= step;
        let fp = f(&PreActivation::from_flat(&plus, k, true)?)?;
        let fm = f(&PreActivation::from_flat(&minus, k, true)?)?;
        grad.push((fp - fm) / two_h);
    }
    LatentGradient::from_flat(&grad, k, true)
}

/// Finite-difference gradient of the selected loss in pre-activation
/// coordinates, with step `h ∈ [1e-8, 1e-3]`.
pub fn finite_diff_grad<T: Real>(
    kind: LossKind,
    geometry: &ArrayGeometry<T>,
    latent: &LatentParams<T>,
    sample_cov: &ComplexMatrix<T>,
    step: T,
) -> Result<LatentGradient<T>> {
    if !(step >= T::lit(1e-8) && step <= T::lit(1e-3)) {
        return Err(Error::Domain(format!("finite-difference step {step} outside [1e-8, 1e-3]")));
    }
    let at = PreActivation::from_latent(latent, true);
    finite_diff_with(&at, step, |p| loss(kind, geometry, &p.to_latent(), sample_cov))
}
