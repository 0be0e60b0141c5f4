//! Rates and capacities of the sub-channel bank, in bits.
//!
//! All signatures take per-quadrature variances; the complex-domain
//! factor of two cancels in every signal-to-noise ratio.

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::allocation::{user_rate, AllocationMatrix, VarianceAllocation};
use crate::channel::ChannelBank;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSource;

/// `log2(1 + v g / noise)` for one sub-channel; `+inf` on a noiseless
/// sub-channel that carries signal.
pub fn subchannel_rate(quad_variance: f64, gain: f64, noise_quad_variance: f64) -> f64 {
    let signal = quad_variance * gain;
    if signal == 0.0 {
        0.0
    } else if noise_quad_variance == 0.0 {
        f64::INFINITY
    } else {
        (signal / noise_quad_variance).ln_1p() / std::f64::consts::LN_2
    }
}

fn check_awgn(quad_signal: f64, quad_noise: f64) -> Result<()> {
    if !(quad_noise > 0.0) {
        return Err(Error::domain(format!(
            "noise variance must be positive, got {quad_noise}"
        )));
    }
    if !(quad_signal >= 0.0) {
        return Err(Error::domain(format!(
            "signal variance must be >= 0, got {quad_signal}"
        )));
    }
    Ok(())
}

/// `log2(1 + sigma_w^2 / sigma_N^2)` per complex channel use.
pub fn awgn_capacity_complex(quad_signal: f64, quad_noise: f64) -> Result<f64> {
    check_awgn(quad_signal, quad_noise)?;
    Ok((quad_signal / quad_noise).ln_1p() / std::f64::consts::LN_2)
}

/// Half of [`awgn_capacity_complex`]: one real quadrature.
pub fn awgn_capacity_quadrature(quad_signal: f64, quad_noise: f64) -> Result<f64> {
    Ok(0.5 * awgn_capacity_complex(quad_signal, quad_noise)?)
}

/// `sum_{i in good} log2(1 + sigma_w_i^2 |F(T_i)|^2 / sigma_N_i^2)`.
pub fn sum_capacity(bank: &ChannelBank, alloc: &VarianceAllocation, good: &[usize]) -> Result<f64> {
    if good.is_empty() {
        return Err(Error::argument("sum capacity over an empty sub-channel set"));
    }
    check_indices(bank, alloc, good)?;
    Ok(good
        .iter()
        .map(|&i| subchannel_rate(alloc.per_subchannel[i], bank.fourier_gains()[i], bank.noise(i)))
        .sum())
}

fn check_indices(bank: &ChannelBank, alloc: &VarianceAllocation, good: &[usize]) -> Result<()> {
    if alloc.per_subchannel.len() != bank.len() {
        return Err(Error::argument(format!(
            "allocation covers {} sub-channels, bank has {}",
            alloc.per_subchannel.len(),
            bank.len()
        )));
    }
    match good.iter().find(|&&i| i >= bank.len()) {
        Some(i) => Err(Error::argument(format!("sub-channel index {i} out of range"))),
        None => Ok(()),
    }
}

/// Maximum common rate: the sum capacity shared by `users`.
pub fn symmetric_capacity(bank: &ChannelBank, alloc: &VarianceAllocation, good: &[usize], users: usize) -> Result<f64> {
    if users == 0 {
        return Err(Error::argument("symmetric capacity needs K >= 1"));
    }
    Ok(sum_capacity(bank, alloc, good)? / users as f64)
}

/// Two-user region `{R1 <= C1, R2 <= C2, R1 + R2 <= C_sum}` with both
/// corner points at the full-allocation rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityRegion {
    #[serde(with = "crate::numfmt::real")]
    pub c1: f64,
    #[serde(with = "crate::numfmt::real")]
    pub c2: f64,
    #[serde(with = "crate::numfmt::real")]
    pub sum_bound: f64,
}

impl CapacityRegion {
    fn tolerance(&self) -> f64 {
        1e-12 * self.sum_bound.abs().max(1.0)
    }

    pub fn contains(&self, r1: f64, r2: f64) -> bool {
        let tol = self.tolerance();
        r1 >= -tol && r2 >= -tol && r1 <= self.c1 + tol && r2 <= self.c2 + tol && r1 + r2 <= self.sum_bound + tol
    }

    /// `count` points walking the outer boundary from `(0, C2)` through the
    /// sum-rate facet to `(C1, 0)`, then back along the axes to the origin.
    pub fn boundary(&self, count: usize) -> Vec<(f64, f64)> {
        let r2_top = self.c2.min(self.sum_bound);
        let r1_right = self.c1.min(self.sum_bound);
        let mut vertices = vec![(0.0, r2_top)];
        if self.sum_bound - r2_top > 0.0 {
            vertices.push((self.sum_bound - r2_top, r2_top));
        }
        if self.sum_bound - r1_right > 0.0 {
            vertices.push((r1_right, self.sum_bound - r1_right));
        }
        vertices.push((r1_right, 0.0));
        vertices.push((0.0, 0.0));
        vertices.push((0.0, r2_top));
        let seg_len: Vec<f64> = vertices
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .collect();
        let total: f64 = seg_len.iter().sum();
        if count == 0 || total == 0.0 {
            return vec![(0.0, 0.0); count];
        }
        (0..count)
            .map(|k| {
                let mut s = total * k as f64 / count as f64;
                for (w, &len) in vertices.windows(2).zip(&seg_len) {
                    if s <= len || len == 0.0 && s == 0.0 {
                        let t = if len > 0.0 { s / len } else { 0.0 };
                        return (w[0].0 + t * (w[1].0 - w[0].0), w[0].1 + t * (w[1].1 - w[0].1));
                    }
                    s -= len;
                }
                (0.0, r2_top)
            })
            .collect()
    }
}

pub fn capacity_region_2user(bank: &ChannelBank, alloc: &VarianceAllocation, good: &[usize]) -> Result<CapacityRegion> {
    let c = sum_capacity(bank, alloc, good)?;
    Ok(CapacityRegion {
        c1: c,
        c2: c,
        sum_bound: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceRole {
    Input,
    Subcarrier,
    Noise,
    Output,
}

/// Hermitian positive-semidefinite covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    entries: DMatrix<Complex64>,
    pub role: CovarianceRole,
}

impl CovarianceMatrix {
    pub fn new(entries: DMatrix<Complex64>, role: CovarianceRole) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::argument("covariance must be a non-empty square matrix"));
        }
        let scale = entries.iter().map(|c| c.norm()).fold(1.0, f64::max);
        let asym = (&entries - entries.adjoint())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        if asym > 1e-12 * scale {
            return Err(Error::domain(format!("covariance is not Hermitian (deviation {asym})")));
        }
        let min_eig = entries
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-9 * scale {
            return Err(Error::domain(format!(
                "covariance is not positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        Ok(Self { entries, role })
    }

    pub fn diagonal(values: &[f64], role: CovarianceRole) -> Result<Self> {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            values.len(),
            values.iter().map(|&v| Complex64::new(v, 0.0)),
        ));
        Self::new(d, role)
    }

    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }
}

/// `log2 det(I + F K_d F^dagger / (2 sigma_N^2))`.
pub fn mimo_mutual_information(transform: &DMatrix<Complex64>, k_d: &CovarianceMatrix, quad_noise: f64) -> Result<f64> {
    if !(quad_noise > 0.0) {
        return Err(Error::domain(format!(
            "noise variance must be positive, got {quad_noise}"
        )));
    }
    if transform.ncols() != k_d.dimension() {
        return Err(Error::argument(format!(
            "transform has {} columns, covariance dimension {}",
            transform.ncols(),
            k_d.dimension()
        )));
    }
    let rows = transform.nrows();
    let m = DMatrix::<Complex64>::identity(rows, rows)
        + transform * k_d.entries() * transform.adjoint() / Complex64::new(2.0 * quad_noise, 0.0);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::domain("I + F K F^dagger / 2 sigma^2 is not positive definite"))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|c| c.re.ln()).sum::<f64>() / std::f64::consts::LN_2)
}

/// Distribution over channel banks, for rates under partial side information.
pub trait BankSampler {
    fn draw(&self, source: &mut GaussianSource) -> Result<ChannelBank>;
}

/// Always the same bank: full side information.
#[derive(Debug, Clone)]
pub struct FixedBank(pub ChannelBank);

impl BankSampler for FixedBank {
    fn draw(&self, _: &mut GaussianSource) -> Result<ChannelBank> {
        Ok(self.0.clone())
    }
}

/// Finitely many banks with given probabilities; one uniform draw per trial.
#[derive(Debug, Clone)]
pub struct DiscreteBanks {
    banks: Vec<(f64, ChannelBank)>,
}

impl DiscreteBanks {
    pub fn new(banks: Vec<(f64, ChannelBank)>) -> Result<Self> {
        let total: f64 = banks.iter().map(|(p, _)| p).sum();
        if banks.is_empty() || (total - 1.0).abs() > 1e-12 || banks.iter().any(|(p, _)| *p < 0.0) {
            return Err(Error::domain("bank probabilities must be >= 0 and sum to 1"));
        }
        Ok(Self { banks })
    }

    pub fn banks(&self) -> &[(f64, ChannelBank)] {
        &self.banks
    }
}

impl BankSampler for DiscreteBanks {
    fn draw(&self, source: &mut GaussianSource) -> Result<ChannelBank> {
        let u = source.uniform();
        let mut acc = 0.0;
        for (p, bank) in &self.banks {
            acc += p;
            if u < acc {
                return Ok(bank.clone());
            }
        }
        Ok(self.banks[self.banks.len() - 1].1.clone())
    }
}

/// Base bank whose Fourier coefficient magnitudes are scaled by
/// `1 + relative_std * N(0, 1)` (clamped at zero) on every draw.
#[derive(Debug, Clone)]
pub struct JitteredBank {
    pub base: ChannelBank,
    pub relative_std: f64,
}

impl BankSampler for JitteredBank {
    fn draw(&self, source: &mut GaussianSource) -> Result<ChannelBank> {
        let coeffs = self
            .base
            .fourier_coefficients()
            .iter()
            .map(|c| c * (1.0 + self.relative_std * source.standard_normal()).max(0.0))
            .collect();
        let noise = self.base.subchannels().iter().map(|s| s.noise_quad_variance).collect();
        ChannelBank::from_fourier(coeffs, noise)
    }
}

/// Monte Carlo mean and standard error of the sum-capacity formula over
/// bank draws.
pub fn partial_csi_rate(
    sampler: &dyn BankSampler,
    alloc: &VarianceAllocation,
    trials: usize,
    source: &mut GaussianSource,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::argument("trials must be >= 1"));
    }
    // Welford updates: a constant sequence keeps its exact value as the mean.
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=trials {
        let bank = sampler.draw(source)?;
        let all: Vec<usize> = (0..bank.len()).collect();
        let rate = sum_capacity(&bank, alloc, &all)?;
        let delta = rate - mean;
        mean += delta / k as f64;
        m2 += delta * (rate - mean);
    }
    let variance = if trials > 1 { m2 / (trials - 1) as f64 } else { 0.0 };
    Ok((mean, (variance / trials as f64).sqrt()))
}

/// Semi-analytic mutual information `sum_i [H(y_i) - H(noise_i)]`: each
/// output entropy is the Gaussian entropy at the empirically estimated
/// output power.
///
/// Per sample and per sub-channel in `good` order, draws the signal then
/// the noise from `source`.
pub fn mi_monte_carlo(
    bank: &ChannelBank,
    alloc: &VarianceAllocation,
    good: &[usize],
    samples: usize,
    source: &mut GaussianSource,
) -> Result<f64> {
    if samples < 1000 {
        return Err(Error::argument(format!(
            "at least 1000 samples required, got {samples}"
        )));
    }
    check_indices(bank, alloc, good)?;
    if let Some(&i) = good.iter().find(|&&i| bank.noise(i) == 0.0) {
        return Err(Error::domain(format!(
            "sub-channel {i} is noiseless: mutual information is unbounded"
        )));
    }
    let mut power = vec![0.0; good.len()];
    for _ in 0..samples {
        for (slot, &i) in good.iter().enumerate() {
            let z = source.draw_scaled(alloc.per_subchannel[i]);
            let n = source.draw_scaled(bank.noise(i));
            power[slot] += (bank.fourier_coefficients()[i] * z + n).norm_sqr();
        }
    }
    Ok(good
        .iter()
        .zip(&power)
        .map(|(&i, p)| {
            let h_out = (PI * E * p / samples as f64).log2();
            let h_noise = (PI * E * 2.0 * bank.noise(i)).log2();
            h_out - h_noise
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiMode {
    Full,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    #[serde(with = "crate::numfmt::reals")]
    pub per_user: Vec<f64>,
    #[serde(with = "crate::numfmt::real")]
    pub sum_rate: f64,
    #[serde(with = "crate::numfmt::real")]
    pub symmetric_rate: f64,
    /// Rate of each user if it held every selected sub-channel.
    #[serde(with = "crate::numfmt::reals")]
    pub corner_points: Vec<f64>,
    pub csi_mode: CsiMode,
}

impl RateReport {
    pub fn from_matrix(
        matrix: &AllocationMatrix,
        bank: &ChannelBank,
        alloc: &VarianceAllocation,
        csi_mode: CsiMode,
    ) -> Result<Self> {
        let per_user = (0..matrix.users())
            .map(|k| user_rate(matrix, bank, alloc, k))
            .collect::<Result<Vec<f64>>>()?;
        let corner = sum_capacity(bank, alloc, matrix.subchannels())?;
        Ok(Self::new(per_user, vec![corner; matrix.users()], csi_mode))
    }

    pub fn new(per_user: Vec<f64>, corner_points: Vec<f64>, csi_mode: CsiMode) -> Self {
        let sum_rate: f64 = per_user.iter().sum();
        let symmetric_rate = sum_rate / per_user.len().max(1) as f64;
        Self {
            per_user,
            sum_rate,
            symmetric_rate,
            corner_points,
            csi_mode,
        }
    }
}
