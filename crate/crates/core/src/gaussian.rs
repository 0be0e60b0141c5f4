//! Zero-mean circular-symmetric complex Gaussian variables.
//!
//! A sample `z = x + ip` carries a position quadrature `x` and a momentum
//! quadrature `p`, each drawn from `N(0, q)` where `q` is the per-quadrature
//! variance. The total complex variance is `E[|z|^2] = 2q`.
//!
//! # Draw sequence
//!
//! A [`GaussianSource`] wraps a `ChaCha8Rng` seeded with
//! `ChaCha8Rng::seed_from_u64(seed)` and positioned on stream `stream`
//! (stream 0 unless [`GaussianSource::with_stream`] is used). Every complex
//! sample consumes two standard normal variates from
//! `rand_distr::StandardNormal` (ziggurat), real part first, and scales both
//! by `sqrt(q)`. The sequence for a given `(seed, stream)` is part of the
//! public contract: reordering draws is a breaking change.

use std::f64::consts::{E, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One phase-space point: `re` is the position quadrature, `im` the momentum quadrature.
pub type ComplexSample = Complex64;

/// Seeded generator of `CN(0, 2q)` samples.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    quad_variance: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl GaussianSource {
    pub fn new(quad_variance: f64, seed: u64) -> Result<Self> {
        Self::with_stream(quad_variance, seed, 0)
    }

    /// Independent sub-stream of the same seed, used for per-worker or
    /// per-purpose splitting.
    pub fn with_stream(quad_variance: f64, seed: u64, stream: u64) -> Result<Self> {
        if !(quad_variance >= 0.0) || !quad_variance.is_finite() {
            return Err(Error::domain(format!(
                "quadrature variance must be finite and non-negative, got {quad_variance}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            quad_variance,
            seed,
            rng,
        })
    }

    pub fn quad_variance(&self) -> f64 {
        self.quad_variance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws `count` samples at the source's variance.
    pub fn sample(&mut self, count: usize) -> Result<GaussianVector> {
        if count == 0 {
            return Err(Error::argument("sample count must be at least 1"));
        }
        let q = self.quad_variance;
        let samples = (0..count).map(|_| self.draw_scaled(q)).collect();
        GaussianVector::new(samples, q)
    }

    /// One sample at the source's own variance.
    pub fn draw(&mut self) -> ComplexSample {
        self.draw_scaled(self.quad_variance)
    }

    /// One sample at an explicit per-quadrature variance. Consumes the same
    /// two variates as [`draw`](Self::draw).
    pub fn draw_scaled(&mut self, quad_variance: f64) -> ComplexSample {
        let s = quad_variance.sqrt();
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        Complex64::new(s * re, s * im)
    }

    /// One standard normal real variate.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One uniform variate in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// An ordered, non-empty list of complex samples sharing a nominal
/// per-quadrature variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVector {
    samples: Vec<ComplexSample>,
    quad_variance: f64,
}

impl GaussianVector {
    pub fn new(samples: Vec<ComplexSample>, quad_variance: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::argument("a Gaussian vector needs dimension >= 1"));
        }
        if let Some(i) = samples.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::domain(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, quad_variance })
    }

    pub fn samples(&self) -> &[ComplexSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ComplexSample> {
        self.samples
    }

    pub fn quad_variance(&self) -> f64 {
        self.quad_variance
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Multiplies every component by `e^{i gamma}`.
    pub fn rotated(&self, gamma: f64) -> Self {
        let w = Complex64::from_polar(1.0, gamma);
        Self {
            samples: self.samples.iter().map(|z| z * w).collect(),
            quad_variance: self.quad_variance,
        }
    }
}

fn require_positive(quad_variance: f64) -> Result<()> {
    if quad_variance > 0.0 && quad_variance.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "degenerate density: quadrature variance must be positive, got {quad_variance}"
        )))
    }
}

/// Joint density of `(x, p)`: `exp(-|z|^2 / 2q) / (2 pi q)`.
pub fn density(z: ComplexSample, quad_variance: f64) -> Result<f64> {
    require_positive(quad_variance)?;
    Ok((-z.norm_sqr() / (2.0 * quad_variance)).exp() / (2.0 * PI * quad_variance))
}

/// Rayleigh density of `|z|` with scale `q` equal to the per-quadrature variance.
pub fn magnitude_density(r: f64, quad_variance: f64) -> Result<f64> {
    require_positive(quad_variance)?;
    if !(r >= 0.0) {
        return Err(Error::domain(format!("magnitude must be >= 0, got {r}")));
    }
    Ok(r / quad_variance * (-r * r / (2.0 * quad_variance)).exp())
}

/// Density of `|z|^2` for the exponential law with rate parameter `1/sigma2`.
///
/// Sampled `CN(0, 2q)` variables have `|z|^2 ~ Exp(mean 2q)`, i.e. this
/// density evaluated at `sigma2 = 2q`.
pub fn squared_magnitude_density(s: f64, sigma2: f64) -> Result<f64> {
    require_positive(sigma2)?;
    if !(s >= 0.0) {
        return Err(Error::domain(format!("squared magnitude must be >= 0, got {s}")));
    }
    Ok((-s / sigma2).exp() / sigma2)
}

/// `log2(pi e 2q)` bits: the sum of the two quadrature entropies.
pub fn differential_entropy_complex(quad_variance: f64) -> Result<f64> {
    require_positive(quad_variance)?;
    Ok((PI * E * 2.0 * quad_variance).log2())
}

/// CDF of the Rayleigh law used by [`magnitude_density`].
pub fn magnitude_cdf(r: f64, quad_variance: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        1.0 - (-r * r / (2.0 * quad_variance)).exp()
    }
}

/// CDF of the exponential law used by [`squared_magnitude_density`].
pub fn squared_magnitude_cdf(s: f64, sigma2: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        1.0 - (-s / sigma2).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_variance_yields_zero_samples() {
        let mut src = GaussianSource::new(0.0, 7).unwrap();
        let v = src.sample(4).unwrap();
        assert!(v.samples().iter().all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn empirical_second_moment() {
        let mut src = GaussianSource::new(1.0, 11).unwrap();
        let v = src.sample(1_000_000).unwrap();
        let m2 = v.samples().iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
        assert!((m2 - 2.0).abs() < 0.01, "E|z|^2 = {m2}");
    }

    #[test]
    fn same_seed_same_draws() {
        let a = GaussianSource::new(0.7, 99).unwrap().sample(64).unwrap();
        let b = GaussianSource::new(0.7, 99).unwrap().sample(64).unwrap();
        assert_eq!(a, b);
        let c = GaussianSource::with_stream(0.7, 99, 1).unwrap().sample(64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn density_values() {
        assert_relative_eq!(
            density(Complex64::new(0.0, 0.0), 1.0 / (2.0 * PI)).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            density(Complex64::new(1.0, 0.0), 0.5).unwrap(),
            (-1.0f64).exp() / PI,
            epsilon = 1e-15
        );
        assert!((density(Complex64::new(1.0, 0.0), 0.5).unwrap() - 0.117099).abs() < 1e-6);
        assert!(matches!(density(Complex64::new(0.0, 0.0), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn density_normalizes_over_plane() {
        // Trapezoid rule on |z| <= 8 sigma in polar coordinates.
        let q: f64 = 0.8;
        let rmax = 8.0 * q.sqrt();
        let steps = 20_000;
        let h = rmax / steps as f64;
        let mut total = 0.0;
        for k in 0..=steps {
            let r = k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            total += w * 2.0 * PI * r * density(Complex64::new(r, 0.0), q).unwrap();
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn rayleigh_values() {
        assert_eq!(magnitude_density(0.0, 3.0).unwrap(), 0.0);
        assert!((magnitude_density(1.0, 1.0).unwrap() - 0.606531).abs() < 1e-6);
        assert!(magnitude_density(-1.0, 1.0).is_err());
    }

    #[test]
    fn exponential_values() {
        assert_eq!(squared_magnitude_density(0.0, 2.0).unwrap(), 0.5);
        assert!(squared_magnitude_density(-0.1, 1.0).is_err());
    }

    #[test]
    fn entropy_values() {
        assert!(differential_entropy_complex(1.0 / (2.0 * PI * E)).unwrap().abs() < 1e-12);
        assert!((differential_entropy_complex(1.0).unwrap() - (2.0 * PI * E).log2()).abs() < 1e-12);
        assert!((differential_entropy_complex(1.0).unwrap() - 4.094191).abs() < 1e-6);
        assert_relative_eq!(
            differential_entropy_complex(2.0).unwrap(),
            1.0 + differential_entropy_complex(1.0).unwrap(),
            epsilon = 1e-12
        );
        assert!(differential_entropy_complex(0.0).is_err());
        assert!(differential_entropy_complex(-1.0).is_err());
    }

    #[test]
    fn entropy_matches_monte_carlo_plugin() {
        let mut src = GaussianSource::new(1.0, 5).unwrap();
        let v = src.sample(1_000_000).unwrap();
        let est = -v
            .samples()
            .iter()
            .map(|z| density(*z, 1.0).unwrap().log2())
            .sum::<f64>()
            / v.len() as f64;
        assert!((est - differential_entropy_complex(1.0).unwrap()).abs() < 0.01);
    }

    #[test]
    fn nonfinite_rejected() {
        assert!(GaussianVector::new(vec![Complex64::new(f64::NAN, 0.0)], 1.0).is_err());
        assert!(GaussianVector::new(vec![], 1.0).is_err());
        assert!(GaussianSource::new(-1.0, 0).is_err());
    }
}
