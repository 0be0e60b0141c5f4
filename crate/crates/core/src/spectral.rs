//! Unitary discrete Fourier transform.
//!
//! Both directions scale by `1/sqrt(n)`, so `dft` and `idft` are exact
//! inverses and preserve the Euclidean norm. The forward kernel is
//! `exp(-2 pi i j k / n)` with zero-based indices.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::gaussian::GaussianVector;

/// A planned unitary transform of fixed size.
#[derive(Clone)]
pub struct SpectralConvention {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralConvention").field("size", &self.size).finish()
    }
}

impl SpectralConvention {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::argument("transform size must be >= 1"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, input: &[Complex64]) -> Result<Vec<Complex64>> {
        if input.len() != self.size {
            return Err(Error::argument(format!(
                "transform of size {} applied to {} components",
                self.size,
                input.len()
            )));
        }
        let mut buf = input.to_vec();
        plan.process(&mut buf);
        let scale = 1.0 / (self.size as f64).sqrt();
        buf.iter_mut().for_each(|c| *c *= scale);
        Ok(buf)
    }

    pub fn dft(&self, input: &[Complex64]) -> Result<Vec<Complex64>> {
        self.run(&self.forward, input)
    }

    pub fn idft(&self, input: &[Complex64]) -> Result<Vec<Complex64>> {
        self.run(&self.inverse, input)
    }

    /// `idft` of a Gaussian vector. The unitary map preserves the average
    /// per-quadrature variance, which the output keeps as its nominal value.
    pub fn idft_vector(&self, input: &GaussianVector) -> Result<GaussianVector> {
        GaussianVector::new(self.idft(input.samples())?, input.quad_variance())
    }

    pub fn dft_vector(&self, input: &GaussianVector) -> Result<GaussianVector> {
        GaussianVector::new(self.dft(input.samples())?, input.quad_variance())
    }
}

/// Squared Euclidean norm of a block, `tau = sum |c|^2`.
pub fn subcarrier_energy(block: &[Complex64]) -> f64 {
    block.iter().map(|c| c.norm_sqr()).sum()
}
