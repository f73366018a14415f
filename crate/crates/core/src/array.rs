//! Narrowband signal model for a uniform circular array: steering vectors,
//! correlated source covariances, the model-based decoder `θ, Λ, L, σ² ↦ C_y`
//! and snapshot simulation.

use num_complex::Complex;
use num_traits::Zero;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, psd_sqrt, ComplexMatrix};
use crate::rng::complex_normal;
use crate::scalar::{wrap_two_pi, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayKind {
    /// Uniform circular array.
    Uca,
}

/// Antenna placement.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry<T> {
    pub kind: ArrayKind,
    pub antennas: usize,
    pub radius_over_wavelength: T,
}

impl<T: Real> Default for ArrayGeometry<T> {
    fn default() -> Self {
        Self {
            kind: ArrayKind::Uca,
            antennas: 9,
            radius_over_wavelength: T::one(),
        }
    }
}

impl<T: Real> ArrayGeometry<T> {
    pub fn uca(antennas: usize, radius_over_wavelength: T) -> Result<Self> {
        let g = Self {
            kind: ArrayKind::Uca,
            antennas,
            radius_over_wavelength,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas < 2 {
            return Err(Error::Domain(format!("array needs at least 2 antennas, got {}", self.antennas)));
        }
        if !(self.radius_over_wavelength > T::zero()) || !self.radius_over_wavelength.is_finite() {
            return Err(Error::Domain(format!(
                "radius/wavelength must be positive, got {}",
                self.radius_over_wavelength
            )));
        }
        Ok(())
    }

    /// Angular position of antenna `m` on the circle.
    #[inline]
    fn element_angle(&self, m: usize) -> T {
        T::TAU() * T::of(m) / T::of(self.antennas)
    }

    /// `a(θ)[m] = exp(−j 2π (R/λ) cos(θ − 2πm/M))`.
    pub fn steering_vector(&self, theta: T) -> Vec<Complex<T>> {
        let theta = wrap_two_pi(theta);
        let k = T::TAU() * self.radius_over_wavelength;
        (0..self.antennas)
            .map(|m| {
                let phase = -k * (theta - self.element_angle(m)).cos();
                Complex::new(phase.cos(), phase.sin())
            })
            .collect()
    }

    /// `∂a/∂θ`, entry `m` is `j 2π (R/λ) sin(θ − 2πm/M) · a(θ)[m]`.
    pub fn steering_derivative(&self, theta: T) -> Vec<Complex<T>> {
        let theta = wrap_two_pi(theta);
        let k = T::TAU() * self.radius_over_wavelength;
        (0..self.antennas)
            .map(|m| {
                let arg = theta - self.element_angle(m);
                let phase = -k * arg.cos();
                let a = Complex::new(phase.cos(), phase.sin());
                a * Complex::new(T::zero(), k * arg.sin())
            })
            .collect()
    }

    /// Array manifold `A(θ)`, one steering vector per column.
    pub fn steering_matrix(&self, angles: &[T]) -> ComplexMatrix<T> {
        let cols: Vec<_> = angles.iter().map(|&t| self.steering_vector(t)).collect();
        ComplexMatrix::from_fn(self.antennas, angles.len(), |i, j| cols[j][i])
    }

    /// `∂A/∂θ_k` stacked column-wise.
    pub fn steering_derivative_matrix(&self, angles: &[T]) -> ComplexMatrix<T> {
        let cols: Vec<_> = angles.iter().map(|&t| self.steering_derivative(t)).collect();
        ComplexMatrix::from_fn(self.antennas, angles.len(), |i, j| cols[j][i])
    }

    pub fn cast<U: Real>(&self) -> ArrayGeometry<U> {
        ArrayGeometry {
            kind: self.kind,
            antennas: self.antennas,
            radius_over_wavelength: U::lit(self.radius_over_wavelength.to_f64_lossy()),
        }
    }
}

/// Power-law correlation matrix with entries `ρ^|i−j|`.
pub fn correlation_matrix<T: Real>(rho: T, sources: usize) -> Result<ComplexMatrix<T>> {
    if !(rho >= T::zero() && rho <= T::one()) {
        return Err(Error::Domain(format!("correlation coefficient {rho} outside [0, 1]")));
    }
    Ok(ComplexMatrix::from_fn(sources, sources, |i, j| {
        let d = i.abs_diff(j) as i32;
        Complex::new(if d == 0 { T::one() } else { rho.powi(d) }, T::zero())
    }))
}

/// `C_s = Λ^{1/2} F Fᴴ Λ^{1/2}` for diagonal powers `Λ` and a square factor `F`.
pub fn signal_covariance<T: Real>(powers: &[T], factor: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    let k = powers.len();
    assert_eq!(factor.rows(), k, "factor/power dimension mismatch");
    let sq: Vec<T> = powers.iter().map(|p| p.sqrt()).collect();
    let scaled = ComplexMatrix::from_fn(k, factor.cols(), |i, j| factor[(i, j)] * sq[i]);
    scaled.matmul_adjoint(&scaled).expect("square factor").hermitian_part()
}

/// `A C_s Aᴴ + σ² I`.
pub fn covariance_from_parts<T: Real>(
    geometry: &ArrayGeometry<T>,
    angles: &[T],
    signal_cov: &ComplexMatrix<T>,
    noise_variance: T,
) -> ComplexMatrix<T> {
    let a = geometry.steering_matrix(angles);
    let mut c = a
        .matmul(signal_cov)
        .and_then(|acs| acs.matmul_adjoint(&a))
        .expect("manifold and signal covariance agree");
    c.add_diagonal(noise_variance);
    c.hermitian_part()
}

/// Ground-truth generative parameters of one simulated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    /// Radians in `[0, 2π)`.
    pub angles: Vec<T>,
    /// Sum to one.
    pub powers: Vec<T>,
    /// Square root of the correlation matrix: Cholesky factor when it is
    /// non-singular, Hermitian PSD root otherwise. Identity when uncorrelated.
    pub factor: ComplexMatrix<T>,
    pub noise_variance: T,
    /// Correlation coefficient the factor was built from, if any.
    pub correlation: Option<T>,
}

impl<T: Real> Scenario<T> {
    pub fn sources(&self) -> usize {
        self.angles.len()
    }

    /// `1/σ²` in dB (tr C_s is one by construction).
    pub fn snr_db(&self) -> T {
        -T::lit(10.0) * self.noise_variance.log10()
    }

    pub fn signal_covariance(&self) -> ComplexMatrix<T> {
        signal_covariance(&self.powers, &self.factor)
    }

    /// True `C_y`.
    pub fn covariance(&self, geometry: &ArrayGeometry<T>) -> ComplexMatrix<T> {
        covariance_from_parts(geometry, &self.angles, &self.signal_covariance(), self.noise_variance)
    }

    /// The same scene expressed as decoder latent parameters. Only exact for
    /// uncorrelated scenes, where the factor is the identity.
    pub fn to_latent(&self) -> Result<LatentParams<T>> {
        let k = self.sources();
        if (&self.factor - &ComplexMatrix::identity(k)).max_abs() > T::lit(1e-12_f64.max(T::TOL_FLOOR)) {
            return Err(Error::Domain(
                "only uncorrelated scenarios map exactly onto a unitriangular latent".into(),
            ));
        }
        LatentParams::new(
            self.angles.clone(),
            self.powers.clone(),
            ComplexMatrix::identity(k),
            self.noise_variance,
        )
    }
}

/// The encoder's latent estimate `{θ̂, Λ̂, L̂, σ̂²}`, i.e. the input of the
/// model-based decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParams<T> {
    pub angles: Vec<T>,
    pub powers: Vec<T>,
    /// Lower unitriangular.
    pub factor: ComplexMatrix<T>,
    pub noise_variance: T,
}

impl<T: Real> LatentParams<T> {
    pub fn new(angles: Vec<T>, powers: Vec<T>, factor: ComplexMatrix<T>, noise_variance: T) -> Result<Self> {
        let l = Self {
            angles,
            powers,
            factor,
            noise_variance,
        };
        l.validate()?;
        Ok(l)
    }

    /// Uncorrelated latent (`L̂ = I`).
    pub fn diagonal(angles: Vec<T>, powers: Vec<T>, noise_variance: T) -> Result<Self> {
        let k = angles.len();
        Self::new(angles, powers, ComplexMatrix::identity(k), noise_variance)
    }

    pub fn sources(&self) -> usize {
        self.angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.angles.len();
        if k == 0 || self.powers.len() != k || self.factor.rows() != k || self.factor.cols() != k {
            return Err(Error::Dimension(format!(
                "latent with {} angles, {} powers, {}x{} factor",
                k,
                self.powers.len(),
                self.factor.rows(),
                self.factor.cols()
            )));
        }
        let tol = T::lit(1e-9_f64.max(10.0 * T::TOL_FLOOR));
        if self.angles.iter().any(|&t| !(t >= T::zero() && t < T::TAU())) {
            return Err(Error::Domain("latent angles must lie in [0, 2π)".into()));
        }
        if self.powers.iter().any(|&p| !(p > T::zero())) {
            return Err(Error::Domain("latent powers must be positive".into()));
        }
        let total: T = self.powers.iter().copied().sum();
        if (total - T::one()).abs() > tol {
            return Err(Error::Domain(format!("latent powers sum to {total}, not 1")));
        }
        if !(self.noise_variance > T::zero()) || !self.noise_variance.is_finite() {
            return Err(Error::Domain(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        for i in 0..k {
            if self.factor[(i, i)] != Complex::new(T::one(), T::zero()) {
                return Err(Error::Domain("latent factor must have a unit diagonal".into()));
            }
            for j in (i + 1)..k {
                if !self.factor[(i, j)].is_zero() {
                    return Err(Error::Domain("latent factor must be lower triangular".into()));
                }
            }
        }
        if !self.factor.is_finite() {
            return Err(Error::Domain("latent factor has non-finite entries".into()));
        }
        Ok(())
    }

    /// `Ĉ_s = Λ̂^{1/2} L̂ L̂ᴴ Λ̂^{1/2}`.
    pub fn signal_covariance(&self) -> ComplexMatrix<T> {
        signal_covariance(&self.powers, &self.factor)
    }
}

/// The model-based decoder: `C_y = A(θ̂) Ĉ_s A(θ̂)ᴴ + σ̂² I`.
pub fn model_covariance<T: Real>(geometry: &ArrayGeometry<T>, latent: &LatentParams<T>) -> ComplexMatrix<T> {
    covariance_from_parts(geometry, &latent.angles, &latent.signal_covariance(), latent.noise_variance)
}

/// `N` received snapshots with their sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBatch<T> {
    /// One `M`-vector per snapshot.
    pub snapshots: Vec<Vec<Complex<T>>>,
    /// `(1/N) Σ y yᴴ`.
    pub sample_covariance: ComplexMatrix<T>,
}

impl<T: Real> SnapshotBatch<T> {
    pub fn from_snapshots(snapshots: Vec<Vec<Complex<T>>>) -> Result<Self> {
        let m = snapshots.first().map(Vec::len).ok_or_else(|| Error::Domain("no snapshots".into()))?;
        if snapshots.iter().any(|y| y.len() != m) {
            return Err(Error::Dimension("snapshots of unequal length".into()));
        }
        let sample_covariance = sample_covariance(&snapshots, m);
        Ok(Self {
            snapshots,
            sample_covariance,
        })
    }

    pub fn antennas(&self) -> usize {
        self.sample_covariance.rows()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

fn sample_covariance<T: Real>(snapshots: &[Vec<Complex<T>>], m: usize) -> ComplexMatrix<T> {
    let mut c = ComplexMatrix::zeros(m, m);
    for y in snapshots {
        for i in 0..m {
            for j in 0..=i {
                c[(i, j)] += y[i] * y[j].conj();
            }
        }
    }
    let inv_n = T::one() / T::of(snapshots.len());
    for i in 0..m {
        for j in 0..=i {
            let v = c[(i, j)] * inv_n;
            c[(i, j)] = v;
            c[(j, i)] = v.conj();
        }
        c[(i, i)].im = T::zero();
    }
    c
}

/// Draws `N` snapshots `y = A(θ) s + n` with `s ~ CN(0, C_s)`, `n ~ CN(0, σ² I)`.
pub fn sample_snapshots<T: Real, R: Rng + ?Sized>(
    geometry: &ArrayGeometry<T>,
    scenario: &Scenario<T>,
    count: usize,
    rng: &mut R,
) -> Result<SnapshotBatch<T>> {
    if count == 0 {
        return Err(Error::Domain("need at least one snapshot".into()));
    }
    let k = scenario.sources();
    let m = geometry.antennas;
    let root = psd_sqrt(&scenario.signal_covariance())?;
    // Mixing matrix A·C_s^{1/2}: the signal part of every snapshot.
    let mix = geometry.steering_matrix(&scenario.angles).matmul(&root)?;
    let noise_std = scenario.noise_variance.sqrt();
    let mut w = vec![Complex::<T>::zero(); k];
    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        for wk in w.iter_mut() {
            let (re, im) = complex_normal(rng);
            *wk = Complex::new(T::lit(re), T::lit(im));
        }
        let mut y = mix.mat_vec(&w)?;
        for ym in y.iter_mut().take(m) {
            let (re, im) = complex_normal(rng);
            *ym += Complex::new(T::lit(re), T::lit(im)) * noise_std;
        }
        snapshots.push(y);
    }
    SnapshotBatch::from_snapshots(snapshots)
}

/// How source correlation is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrelationMode {
    Uncorrelated,
    Fixed(f64),
    /// `ρ ~ U[0, 1]` per scenario.
    Uniform,
}

/// Distribution scenarios are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub sources: usize,
    pub correlation: CorrelationMode,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Raw per-source power range in dB before normalization.
    pub power_min_db: f64,
    pub power_max_db: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sources: 3,
            correlation: CorrelationMode::Uncorrelated,
            snr_min_db: -10.0,
            snr_max_db: 30.0,
            power_min_db: -9.0,
            power_max_db: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.snr_min_db = snr_db;
        self.snr_max_db = snr_db;
        self
    }

    pub fn with_correlation(mut self, correlation: CorrelationMode) -> Self {
        self.correlation = correlation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 {
            return Err(Error::Domain("scenario needs at least one source".into()));
        }
        if !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite() && self.snr_min_db <= self.snr_max_db) {
            return Err(Error::Domain(format!(
                "invalid SNR range [{}, {}] dB",
                self.snr_min_db, self.snr_max_db
            )));
        }
        if !(self.power_min_db.is_finite() && self.power_max_db.is_finite() && self.power_min_db <= self.power_max_db)
        {
            return Err(Error::Domain(format!(
                "invalid power range [{}, {}] dB",
                self.power_min_db, self.power_max_db
            )));
        }
        if let CorrelationMode::Fixed(rho) = self.correlation {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Domain(format!("correlation coefficient {rho} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a scenario: angles uniform on `[0, 2π)`, powers uniform in dB then
/// normalized to sum one, SNR uniform in dB, and the configured correlation.
pub fn draw_scenario<T: Real, R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Scenario<T>> {
    config.validate()?;
    let k = config.sources;
    let angles: Vec<T> = (0..k)
        .map(|_| wrap_two_pi(T::lit(rng.random_range(0.0..std::f64::consts::TAU))))
        .collect();
    let raw: Vec<f64> = (0..k)
        .map(|_| 10f64.powf(uniform(rng, config.power_min_db, config.power_max_db) / 10.0))
        .collect();
    let total: f64 = raw.iter().sum();
    let powers = raw.iter().map(|p| T::lit(p / total)).collect();
    let snr_db = uniform(rng, config.snr_min_db, config.snr_max_db);
    let noise_variance = T::lit(10f64.powf(-snr_db / 10.0));
    let rho = match config.correlation {
        CorrelationMode::Uncorrelated => None,
        CorrelationMode::Fixed(r) => Some(r),
        CorrelationMode::Uniform => Some(rng.random_range(0.0..=1.0)),
    };
    let factor = match rho {
        None => ComplexMatrix::identity(k),
        Some(r) => {
            let c = correlation_matrix(T::lit(r), k)?;
            if r < 1.0 {
                cholesky(&c)?
            } else {
                psd_sqrt(&c)?
            }
        }
    };
    Ok(Scenario {
        angles,
        powers,
        factor,
        noise_variance,
        correlation: rho.map(T::lit),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermitian_eig;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{PI, TAU};

    type C = Complex<f64>;

    fn geom(m: usize) -> ArrayGeometry<f64> {
        ArrayGeometry::uca(m, 1.0).unwrap()
    }

    /// Independent evaluation of the UCA response written from the formula.
    fn steering_oracle(m_total: usize, r: f64, theta: f64, m: usize) -> C {
        let phase = -2.0 * PI * r * (theta - 2.0 * PI * m as f64 / m_total as f64).cos();
        C::from_polar(1.0, phase)
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::uca(1, 1.0).is_err());
        assert!(ArrayGeometry::uca(4, 0.0).is_err());
        assert!(ArrayGeometry::<f64>::default().validate().is_ok());
    }

    #[test]
    fn steering_at_zero() {
        let a = geom(9).steering_vector(0.0);
        assert!((a[0] - C::new(1.0, 0.0)).norm() < 1e-14);
        let a = geom(4).steering_vector(0.0);
        for z in a {
            assert!((z - C::new(1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn steering_matches_formula() {
        let a = geom(9).steering_vector(PI / 3.0);
        for (m, z) in a.iter().enumerate() {
            assert!((z - steering_oracle(9, 1.0, PI / 3.0, m)).norm() < 1e-13);
        }
    }

    #[test]
    fn steering_derivative_finite_difference() {
        let g = geom(9);
        let h = 1e-6;
        let d = g.steering_derivative(1.2);
        let plus = g.steering_vector(1.2 + h);
        let minus = g.steering_vector(1.2 - h);
        for m in 0..9 {
            let fd = (plus[m] - minus[m]) / (2.0 * h);
            assert!((fd - d[m]).norm() <= 1e-6 * d[m].norm().max(1.0), "m={m}");
        }
    }

    #[test]
    fn steering_derivative_symmetry_points() {
        let d = geom(4).steering_derivative(0.0);
        assert!(d[0].norm() < 1e-14);
        assert!((d[1] - C::new(0.0, -TAU)).norm() < 1e-12);
    }

    #[test]
    fn correlation_matrix_examples() {
        assert_eq!(correlation_matrix(0.0, 3).unwrap(), ComplexMatrix::identity(3));
        let c = correlation_matrix(0.5, 3).unwrap();
        let expected =
            ComplexMatrix::from_real(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(c, expected);
        assert_eq!(
            correlation_matrix(1.0, 3).unwrap(),
            ComplexMatrix::from_real(3, 3, &[1.0; 9]).unwrap()
        );
        assert!(correlation_matrix(1.5, 3).is_err());
        assert!(correlation_matrix(-0.1, 3).is_err());
    }

    #[test]
    fn signal_covariance_examples() {
        let third = 1.0 / 3.0;
        let cs = signal_covariance(&[third; 3], &ComplexMatrix::identity(3));
        assert!((&cs - &ComplexMatrix::from_diag(&[third; 3])).max_abs() < 1e-15);

        let l = cholesky(&correlation_matrix(0.5, 2).unwrap()).unwrap();
        let cs = signal_covariance(&[0.5, 0.5], &l);
        let expected = ComplexMatrix::from_real(2, 2, &[0.5, 0.25, 0.25, 0.5]).unwrap();
        assert!((&cs - &expected).max_abs() < 1e-15);
    }

    #[test]
    fn signal_covariance_matches_triple_product() {
        let mut rng = stream(9, 0, 0);
        for _ in 0..20 {
            let k = 3;
            let powers: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let factor = ComplexMatrix::from_fn(k, k, |i, j| {
                if j > i {
                    C::new(0.0, 0.0)
                } else {
                    C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                }
            });
            let sqrt_l = ComplexMatrix::from_diag(&powers.iter().map(|p| p.sqrt()).collect::<Vec<_>>());
            let oracle = &(&(&sqrt_l * &factor) * &factor.adjoint()) * &sqrt_l;
            let cs = signal_covariance(&powers, &factor);
            assert!((&cs - &oracle).max_abs() < 1e-13);
            assert!(cs.is_hermitian(1e-15));
            assert!((cs.trace() - oracle.trace()).norm() < 1e-13);
        }
    }

    #[test]
    fn model_covariance_single_source_trace() {
        let g = geom(9);
        let latent = LatentParams::diagonal(vec![0.0], vec![1.0], 0.1).unwrap();
        let c = model_covariance(&g, &latent);
        let a = g.steering_vector(0.0);
        let mut expected = ComplexMatrix::outer(&a);
        expected.add_diagonal(0.1);
        assert!((&c - &expected).max_abs() < 1e-14);
        assert!((c.trace().re - (9.0 + 0.9)).abs() < 1e-12);
    }

    #[test]
    fn model_covariance_noise_dominated() {
        let g = geom(9);
        let latent = LatentParams::diagonal(vec![0.5, 2.0], vec![0.5, 0.5], 1e6).unwrap();
        let c = model_covariance(&g, &latent);
        let e = hermitian_eig(&c).unwrap();
        assert!(e.eigenvalues[0] >= 1e6 * (1.0 - 1e-12));
        let rel_dev = (&c - &ComplexMatrix::identity(9).scale(1e6)).frobenius_norm() / (1e6 * 3.0);
        assert!(rel_dev < 1e-4);
    }

    #[test]
    fn latent_validation() {
        assert!(LatentParams::diagonal(vec![0.1], vec![1.0], 0.0).is_err());
        assert!(LatentParams::diagonal(vec![7.0], vec![1.0], 1.0).is_err());
        assert!(LatentParams::diagonal(vec![0.1, 0.2], vec![0.3, 0.3], 1.0).is_err());
        let mut f = ComplexMatrix::identity(2);
        f[(0, 1)] = C::new(0.1, 0.0);
        assert!(LatentParams::new(vec![0.1, 0.2], vec![0.5, 0.5], f, 1.0).is_err());
        let mut f = ComplexMatrix::identity(2);
        f[(1, 1)] = C::new(2.0, 0.0);
        assert!(LatentParams::new(vec![0.1, 0.2], vec![0.5, 0.5], f, 1.0).is_err());
    }

    #[test]
    fn noiseless_single_source_is_rank_one() {
        let g = geom(9);
        let scenario = Scenario {
            angles: vec![1.0],
            powers: vec![1.0],
            factor: ComplexMatrix::identity(1),
            noise_variance: 0.0,
            correlation: None,
        };
        let batch = sample_snapshots(&g, &scenario, 50, &mut stream(1, 0, 0)).unwrap();
        let e = hermitian_eig(&batch.sample_covariance).unwrap();
        assert!(e.eigenvalues[7] < 1e-10 * e.eigenvalues[8]);
        let a = g.steering_vector(1.0);
        for y in &batch.snapshots {
            // y = c·a: check y·conj(a)/M reproduces y
            let coef = y.iter().zip(&a).map(|(yi, ai)| yi * ai.conj()).sum::<C>() / 9.0;
            for (yi, ai) in y.iter().zip(&a) {
                assert!((yi - coef * ai).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_covariance_converges() {
        let g = geom(9);
        let config = ScenarioConfig::default().with_correlation(CorrelationMode::Fixed(0.7)).with_snr_db(5.0);
        let scenario: Scenario<f64> = draw_scenario(&config, &mut stream(2, 0, 0)).unwrap();
        let batch = sample_snapshots(&g, &scenario, 100_000, &mut stream(2, 0, 1)).unwrap();
        let truth = scenario.covariance(&g);
        let err = (&batch.sample_covariance - &truth).frobenius_norm() / truth.frobenius_norm();
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = geom(9);
        let scenario: Scenario<f64> = draw_scenario(&ScenarioConfig::default(), &mut stream(3, 0, 0)).unwrap();
        let a = sample_snapshots(&g, &scenario, 100, &mut stream(3, 1, 0)).unwrap();
        let b = sample_snapshots(&g, &scenario, 100, &mut stream(3, 1, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_snapshots_rejected() {
        let g = geom(9);
        let scenario: Scenario<f64> = draw_scenario(&ScenarioConfig::default(), &mut stream(3, 0, 0)).unwrap();
        assert!(sample_snapshots(&g, &scenario, 0, &mut stream(3, 1, 0)).is_err());
    }

    #[test]
    fn draw_scenario_snr_and_modes() {
        let mut rng = stream(4, 0, 0);
        let s: Scenario<f64> = draw_scenario(&ScenarioConfig::default().with_snr_db(0.0), &mut rng).unwrap();
        assert_eq!(s.noise_variance, 1.0);
        assert_eq!(s.factor, ComplexMatrix::identity(3));
        assert!((s.powers.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let s: Scenario<f64> =
            draw_scenario(&ScenarioConfig::default().with_correlation(CorrelationMode::Fixed(1.0)), &mut rng).unwrap();
        let ones = ComplexMatrix::from_real(3, 3, &[1.0; 9]).unwrap();
        assert!((&s.factor.matmul_adjoint(&s.factor).unwrap() - &ones).max_abs() < 1e-10);
        assert!((s.signal_covariance().trace().re - 1.0).abs() < 1e-9);

        let bad = ScenarioConfig {
            snr_min_db: 10.0,
            snr_max_db: 0.0,
            ..Default::default()
        };
        assert!(draw_scenario::<f64, _>(&bad, &mut rng).is_err());
        let bad = ScenarioConfig::default().with_correlation(CorrelationMode::Fixed(2.0));
        assert!(draw_scenario::<f64, _>(&bad, &mut rng).is_err());
    }

    #[test]
    fn drawn_angles_pass_chi_square() {
        // 12 bins, 11 dof: critical value at significance 0.01 is 24.725.
        let mut rng = stream(5, 0, 0);
        let config = ScenarioConfig {
            sources: 1,
            ..Default::default()
        };
        let mut bins = [0usize; 12];
        let draws = 10_000;
        for _ in 0..draws {
            let s: Scenario<f64> = draw_scenario(&config, &mut rng).unwrap();
            bins[(s.angles[0] / TAU * 12.0) as usize] += 1;
        }
        let expected = draws as f64 / 12.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 24.725, "chi2 = {chi2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn steering_entries_unit_modulus(theta in -20.0f64..20.0, m in 2usize..16, r in 0.1f64..3.0) {
            let g = ArrayGeometry::uca(m, r).unwrap();
            for z in g.steering_vector(theta) {
                prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn model_covariance_low_rank_plus_noise(seed in any::<u64>(), k in 1usize..=4) {
            let mut rng = stream(seed, 0, 0);
            let g = geom(9);
            let angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..TAU)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let powers = raw.iter().map(|p| p / total).collect();
            let mut factor = ComplexMatrix::identity(k);
            for i in 0..k {
                for j in 0..i {
                    factor[(i, j)] = C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                }
            }
            let noise = rng.random_range(0.01..2.0);
            let latent = LatentParams::new(angles, powers, factor, noise).unwrap();
            let mut c = model_covariance(&g, &latent);
            prop_assert!(c.is_hermitian(1e-12));
            let e = hermitian_eig(&c).unwrap();
            prop_assert!(e.eigenvalues[0] >= noise * (1.0 - 1e-9));
            c.add_diagonal(-noise);
            let e = hermitian_eig(&c).unwrap();
            let top = e.eigenvalues[8];
            prop_assert!(e.eigenvalues.iter().all(|&w| w >= -1e-9 * top));
            prop_assert!(e.eigenvalues[8 - k] < 1e-9 * top);
        }

        #[test]
        fn generation_side_signal_covariance_has_unit_trace(seed in any::<u64>(), rho in 0.0f64..1.0, k in 1usize..=5) {
            let mut rng = stream(seed, 0, 0);
            let config = ScenarioConfig { sources: k, ..Default::default() }
                .with_correlation(CorrelationMode::Fixed(rho));
            let s: Scenario<f64> = draw_scenario(&config, &mut rng).unwrap();
            prop_assert!((s.signal_covariance().trace().re - 1.0).abs() < 1e-9);
        }

        #[test]
        fn sample_covariance_is_hermitian_psd(seed in any::<u64>(), n in 1usize..40) {
            let g = geom(9);
            let s: Scenario<f64> = draw_scenario(&ScenarioConfig::default(), &mut stream(seed, 0, 0)).unwrap();
            let batch = sample_snapshots(&g, &s, n, &mut stream(seed, 1, 0)).unwrap();
            prop_assert!(batch.sample_covariance.is_hermitian(1e-12));
            let e = hermitian_eig(&batch.sample_covariance).unwrap();
            let top = e.eigenvalues[8].max(1.0);
            prop_assert!(e.eigenvalues[0] >= -1e-10 * top);
        }
    }
}
