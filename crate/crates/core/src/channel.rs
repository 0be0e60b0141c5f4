//! The bank of Gaussian sub-channels and block transmission.
//!
//! Each sub-channel `i` has a complex transmittance `T_i` and additive
//! complex Gaussian noise with per-quadrature variance `sigma_N_i^2`. A
//! subcarrier sees the Fourier-domain coefficient `F(T)_i`, the unitary DFT
//! of the whole transmittance vector evaluated at index `i`.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSource, GaussianVector};
use crate::spectral::SpectralConvention;

/// Complex transmittance of one sub-channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmittance {
    pub re: f64,
    pub im: f64,
}

impl Transmittance {
    /// Both parts must lie in `[0, 1/sqrt(2)]`.
    pub fn new(re: f64, im: f64) -> Result<Self> {
        let ok = |x: f64| (0.0..=FRAC_1_SQRT_2 + 1e-15).contains(&x);
        if !ok(re) || !ok(im) {
            return Err(Error::domain(format!(
                "transmittance parts must lie in [0, 1/sqrt(2)], got ({re}, {im})"
            )));
        }
        Ok(Self { re, im })
    }

    /// Equal real and imaginary parts with `|T| = magnitude`.
    pub fn from_magnitude(magnitude: f64) -> Result<Self> {
        let part = magnitude * FRAC_1_SQRT_2;
        Self::new(part, part)
    }

    /// No range check. Used for idealized banks defined in the Fourier domain.
    pub fn unchecked(value: Complex64) -> Self {
        Self {
            re: value.re,
            im: value.im,
        }
    }

    pub fn as_complex(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubchannelProfile {
    pub transmittance: Transmittance,
    pub noise_quad_variance: f64,
}

impl SubchannelProfile {
    pub fn new(transmittance: Transmittance, noise_quad_variance: f64) -> Result<Self> {
        if !(noise_quad_variance >= 0.0) || !noise_quad_variance.is_finite() {
            return Err(Error::domain(format!(
                "noise variance must be finite and >= 0, got {noise_quad_variance}"
            )));
        }
        Ok(Self {
            transmittance,
            noise_quad_variance,
        })
    }
}

/// `sigma_w^2 / sigma_N^2`.
pub fn snr(profile: &SubchannelProfile, quad_variance: f64) -> Result<f64> {
    if profile.noise_quad_variance <= 0.0 {
        return Err(Error::domain("zero noise variance: SNR is infinite"));
    }
    Ok(quad_variance / profile.noise_quad_variance)
}

/// Noise-to-gain coefficient `nu_i = sigma_N_i^2 / |F(T_i)|^2`.
pub fn nu_coefficient(profile: &SubchannelProfile, fourier_gain: f64) -> Result<f64> {
    if !(fourier_gain > 0.0) {
        return Err(Error::domain(format!(
            "sub-channel unusable: Fourier gain {fourier_gain}"
        )));
    }
    Ok(profile.noise_quad_variance / fourier_gain)
}

/// `n` sub-channels with their cached Fourier response.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBank {
    subchannels: Vec<SubchannelProfile>,
    fourier_coefficients: Vec<Complex64>,
    fourier_gains: Vec<f64>,
}

impl ChannelBank {
    pub fn new(subchannels: Vec<SubchannelProfile>) -> Result<Self> {
        if subchannels.is_empty() {
            return Err(Error::argument("a channel bank needs at least one sub-channel"));
        }
        let t: Vec<Complex64> = subchannels.iter().map(|s| s.transmittance.as_complex()).collect();
        let coeffs = SpectralConvention::new(t.len())?.dft(&t)?;
        Ok(Self::assemble(subchannels, coeffs))
    }

    /// Builds a bank from its Fourier response directly. The time-domain
    /// transmittances are recovered with the inverse transform and are not
    /// range checked, so lossless or amplifying responses are expressible.
    pub fn from_fourier(coefficients: Vec<Complex64>, noise_quad_variances: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() || coefficients.len() != noise_quad_variances.len() {
            return Err(Error::argument(format!(
                "{} Fourier coefficients with {} noise variances",
                coefficients.len(),
                noise_quad_variances.len()
            )));
        }
        let t = SpectralConvention::new(coefficients.len())?.idft(&coefficients)?;
        let subchannels = t
            .into_iter()
            .zip(noise_quad_variances)
            .map(|(ti, noise)| SubchannelProfile::new(Transmittance::unchecked(ti), noise))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(subchannels, coefficients))
    }

    fn assemble(subchannels: Vec<SubchannelProfile>, fourier_coefficients: Vec<Complex64>) -> Self {
        let fourier_gains = fourier_coefficients.iter().map(|c| c.norm_sqr()).collect();
        Self {
            subchannels,
            fourier_coefficients,
            fourier_gains,
        }
    }

    pub fn len(&self) -> usize {
        self.subchannels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subchannels.is_empty()
    }

    pub fn subchannels(&self) -> &[SubchannelProfile] {
        &self.subchannels
    }

    pub fn fourier_coefficients(&self) -> &[Complex64] {
        &self.fourier_coefficients
    }

    /// `|F(T_i)|^2` for every sub-channel.
    pub fn fourier_gains(&self) -> &[f64] {
        &self.fourier_gains
    }

    pub fn noise(&self, i: usize) -> f64 {
        self.subchannels[i].noise_quad_variance
    }

    /// Every `nu_i`; sub-channels with zero Fourier gain get `+inf`.
    pub fn nus(&self) -> Vec<f64> {
        self.subchannels
            .iter()
            .zip(&self.fourier_gains)
            .map(|(s, &g)| nu_coefficient(s, g).unwrap_or(f64::INFINITY))
            .collect()
    }

    /// `1 - T_i`, reported alongside results; no eavesdropper channel is simulated.
    pub fn eve_transmittances(&self) -> Vec<Complex64> {
        self.subchannels
            .iter()
            .map(|s| Complex64::new(1.0, 0.0) - s.transmittance.as_complex())
            .collect()
    }

    fn check_active(&self, active: &[usize]) -> Result<()> {
        match active.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(Error::argument(format!(
                "sub-channel index {i} out of range for a bank of {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    /// Compares the mean Fourier gain with the mean time-domain `|T_i|^2`
    /// over the given sub-channels.
    pub fn fourier_boost(&self, indices: &[usize]) -> FourierBoost {
        let l = indices.len().max(1) as f64;
        let mean_fourier = indices.iter().map(|&i| self.fourier_gains[i]).sum::<f64>() / l;
        let mean_time = indices
            .iter()
            .map(|&i| self.subchannels[i].transmittance.norm_sqr())
            .sum::<f64>()
            / l;
        FourierBoost {
            mean_fourier_gain: mean_fourier,
            mean_time_gain: mean_time,
            boosted: mean_fourier > mean_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourierBoost {
    pub mean_fourier_gain: f64,
    pub mean_time_gain: f64,
    pub boosted: bool,
}

/// Security parameter derived from the expected transmittances under attack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EveModel {
    pub expected_transmittances: Vec<Complex64>,
    pub lambda: f64,
    pub nu_eve: f64,
}

/// `lambda = (1/n) sum_i |sum_k T*_k e^{-2 pi i ik/n}|^2` and `nu_Eve = 1/lambda`.
pub fn eve_parameter(expected_transmittances: &[Complex64], n: usize) -> Result<EveModel> {
    if n == 0 || expected_transmittances.len() != n {
        return Err(Error::argument(format!(
            "expected {n} transmittances, got {}",
            expected_transmittances.len()
        )));
    }
    // The inner sum is sqrt(n) times the unitary DFT coefficient.
    let lambda = SpectralConvention::new(n)?
        .dft(expected_transmittances)?
        .iter()
        .map(|c| c.norm_sqr())
        .sum::<f64>();
    if !(lambda > 0.0) {
        return Err(Error::domain("all expected transmittances are zero: lambda = 0"));
    }
    Ok(EveModel {
        expected_transmittances: expected_transmittances.to_vec(),
        lambda,
        nu_eve: 1.0 / lambda,
    })
}

/// One transmission round of `l` subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct AmqdBlock {
    pub block_index: u64,
    pub subcarriers: GaussianVector,
    pub quad_variance: f64,
}

/// `y_i = F(T_{a_i}) F(d)_i + F(Delta)_i` over the active sub-channels `a`.
///
/// Noise is drawn from `source` in block order, one complex draw per
/// component, at each sub-channel's own variance.
pub fn transmit_block(
    block: &AmqdBlock,
    bank: &ChannelBank,
    active: &[usize],
    source: &mut GaussianSource,
) -> Result<AmqdBlock> {
    let spectral = SpectralConvention::new(block.subcarriers.len())?;
    transmit_block_with(&spectral, block, bank, active, source)
}

/// [`transmit_block`] with a pre-planned transform.
pub fn transmit_block_with(
    spectral: &SpectralConvention,
    block: &AmqdBlock,
    bank: &ChannelBank,
    active: &[usize],
    source: &mut GaussianSource,
) -> Result<AmqdBlock> {
    if active.len() != block.subcarriers.len() {
        return Err(Error::argument(format!(
            "block of {} subcarriers with {} active sub-channels",
            block.subcarriers.len(),
            active.len()
        )));
    }
    let fd = spectral.dft(block.subcarriers.samples())?;
    let y = apply_channel(&fd, bank, active, source)?;
    Ok(AmqdBlock {
        block_index: block.block_index,
        subcarriers: GaussianVector::new(y, block.quad_variance)?,
        quad_variance: block.quad_variance,
    })
}

/// Per-sub-channel product form `y_i = F(T_{a_i}) z_i + noise_i` on symbols
/// that are already in the Fourier domain.
pub fn apply_channel(
    symbols: &[Complex64],
    bank: &ChannelBank,
    active: &[usize],
    source: &mut GaussianSource,
) -> Result<Vec<Complex64>> {
    if active.len() != symbols.len() {
        return Err(Error::argument(format!(
            "{} symbols with {} active sub-channels",
            symbols.len(),
            active.len()
        )));
    }
    bank.check_active(active)?;
    Ok(symbols
        .iter()
        .zip(active)
        .map(|(s, &i)| bank.fourier_coefficients[i] * s + source.draw_scaled(bank.noise(i)))
        .collect())
}

/// Zero-forcing equalization `z'_i = y_i / F(T_{a_i})`.
pub fn equalize(received: &[Complex64], bank: &ChannelBank, active: &[usize]) -> Result<Vec<Complex64>> {
    if active.len() != received.len() {
        return Err(Error::argument("received block length differs from active set"));
    }
    bank.check_active(active)?;
    active
        .iter()
        .zip(received)
        .map(|(&i, y)| {
            let c = bank.fourier_coefficients[i];
            if c.norm_sqr() == 0.0 {
                Err(Error::domain(format!("sub-channel {i} has zero Fourier gain")))
            } else {
                Ok(y / c)
            }
        })
        .collect()
}
