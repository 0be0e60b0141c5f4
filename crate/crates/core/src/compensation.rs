//! Compensation of a non-Gaussian input modulation by lifting every
//! sub-channel coefficient.

use serde::{Deserialize, Serialize};

use crate::allocation::select_good_nus;
use crate::channel::ChannelBank;
use crate::error::{Error, Result};
use crate::input::{mmse, InputDistribution};

const KAPPA_EPS: f64 = 1e-9;
const KAPPA_TOL: f64 = 1e-10;

/// MMSE of an ideal Gaussian input: `1 / (1 + 2q)`.
pub fn xi_ideal(quad_variance: f64) -> Result<f64> {
    if !(quad_variance >= 0.0) {
        return Err(Error::domain(format!("variance must be >= 0, got {quad_variance}")));
    }
    Ok(1.0 / (1.0 + 2.0 * quad_variance))
}

/// `(1 - u) / u`, inverse of [`xi_ideal`] mapping back to `2q`.
pub fn xi_inverse_ideal(u: f64) -> Result<f64> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(Error::domain(format!("u must lie in (0, 1], got {u}")));
    }
    Ok((1.0 - u) / u)
}

/// MMSE of the unit-power shape of `dist` at per-quadrature SNR variance
/// `quad_variance` under unit complex noise.
pub fn xi_numeric(dist: &InputDistribution, quad_variance: f64) -> Result<f64> {
    mmse(dist, quad_variance)
}

/// Deviation functional `1 / (nu_min kappa) - xi_inv`.
pub fn g_delta(nu_min: f64, kappa: f64, xi_inv: f64) -> Result<f64> {
    if !(nu_min > 0.0) {
        return Err(Error::domain(format!("nu_min must be positive, got {nu_min}")));
    }
    if !(kappa > 0.0 && kappa < 1.0 / nu_min) {
        return Err(Error::domain(format!(
            "kappa must lie in (0, 1/nu_min) = (0, {}), got {kappa}",
            1.0 / nu_min
        )));
    }
    Ok(1.0 / (nu_min * kappa) - xi_inv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationResult {
    pub nu_eve: f64,
    pub nu_min: f64,
    /// Variance budget `nu_Eve - nu_min` of the ideal allocation.
    pub sigma_omega_sq: f64,
    /// `xi^{-1}` of the declared input at the operating variance.
    pub xi_inverse: f64,
    pub kappa: f64,
    pub sigma_kappa_sq: f64,
    pub nu_kappa: f64,
    pub g_delta: f64,
    #[serde(with = "crate::numfmt::reals")]
    pub lifted_nu: Vec<f64>,
    /// Good sub-channels whose lifted coefficient stays below `nu_Eve`.
    pub active: Vec<usize>,
}

impl CompensationResult {
    /// Largest violation of the identity chain
    /// `(sigma_omega^2 + sigma_kappa^2) + nu_min = nu_Eve + sigma_kappa^2 = 1/kappa`
    /// and of `nu_kappa = nu_min (1 - G)`.
    pub fn identity_error(&self) -> f64 {
        let lhs = self.sigma_omega_sq + self.sigma_kappa_sq + self.nu_min;
        let mid = self.nu_eve + self.sigma_kappa_sq;
        let inv = 1.0 / self.kappa;
        let lift = self.nu_min * (1.0 - self.g_delta);
        [(lhs - mid).abs(), (mid - inv).abs(), (self.nu_kappa - lift).abs()]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn compensate(bank: &ChannelBank, nu_eve: f64, dist: &InputDistribution) -> Result<CompensationResult> {
    compensate_nus(&bank.nus(), nu_eve, dist)
}

pub fn compensate_nus(nus: &[f64], nu_eve: f64, dist: &InputDistribution) -> Result<CompensationResult> {
    dist.validate()?;
    let good = select_good_nus(nus, nu_eve);
    if good.is_empty() {
        return Err(Error::argument(format!("no sub-channel has nu_i < nu_Eve = {nu_eve}")));
    }
    // Step 1: ideal allocation around the best sub-channel.
    let nu_min = good.iter().map(|&i| nus[i]).fold(f64::INFINITY, f64::min);
    if !(nu_min > 0.0) {
        return Err(Error::domain(
            "nu_min must be positive: a noiseless sub-channel cannot be compensated",
        ));
    }
    let sigma_omega_sq = nu_eve - nu_min;
    let operating = sigma_omega_sq / (2.0 * nu_min);
    let xi = if dist.is_ideal() {
        xi_ideal(operating)?
    } else {
        xi_numeric(dist, operating)?
    };
    let xi_inverse = xi_inverse_ideal(xi)?;

    // Step 2: kappa = 1 / (nu_Eve + nu_min (1 - G(kappa))).
    let residual = |kappa: f64| -> Result<f64> {
        let g = g_delta(nu_min, kappa, xi_inverse)?;
        Ok(kappa * (nu_eve + nu_min * (1.0 - g)) - 1.0)
    };
    let (mut lo, mut hi) = (KAPPA_EPS, 1.0 / nu_min - KAPPA_EPS);
    let (r_lo, r_hi) = (residual(lo)?, residual(hi)?);
    if r_lo.signum() == r_hi.signum() {
        return Err(Error::Convergence(format!(
            "kappa fixed point not bracketed in ({lo}, {hi}): residuals {r_lo}, {r_hi} \
             (nu_min {nu_min}, nu_Eve {nu_eve}, xi^-1 {xi_inverse})"
        )));
    }
    let rising = r_hi > r_lo;
    while hi - lo > KAPPA_TOL {
        let mid = 0.5 * (lo + hi);
        let r = residual(mid)?;
        if r == 0.0 {
            lo = mid;
            hi = mid;
        } else if (r > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let kappa = 0.5 * (lo + hi);

    // Steps 3 and 4.
    let g = g_delta(nu_min, kappa, xi_inverse)?;
    let sigma_kappa_sq = 1.0 / kappa - nu_eve;
    let nu_kappa = nu_min * (1.0 - g);
    let lifted_nu: Vec<f64> = nus.iter().map(|nu| nu + nu_kappa).collect();
    let active = good.into_iter().filter(|&i| lifted_nu[i] < nu_eve).collect();
    Ok(CompensationResult {
        nu_eve,
        nu_min,
        sigma_omega_sq,
        xi_inverse,
        kappa,
        sigma_kappa_sq,
        nu_kappa,
        g_delta: g,
        lifted_nu,
        active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{waterfill_exact_nus, VarianceAllocation};
    use crate::input::DistributionKind;
    use proptest::prelude::*;

    /// Frozen from an independent adaptive-quadrature evaluation of the
    /// truncated-Gaussian MMSE at per-quadrature variance 2.
    pub(crate) const TRUNCATED_NU_KAPPA: f64 = 0.027_264_429_641_820_076;

    fn truncated() -> InputDistribution {
        InputDistribution::new(DistributionKind::TruncatedGaussian { bound: 1.0 }, 1.0).unwrap()
    }

    #[test]
    fn xi_ideal_values() {
        assert_eq!(xi_ideal(0.0).unwrap(), 1.0);
        assert_eq!(xi_ideal(0.5).unwrap(), 0.5);
        assert!(xi_ideal(1e12).unwrap() < 1e-12);
        assert!(xi_ideal(2.0).unwrap() < xi_ideal(1.0).unwrap());
        assert!(xi_ideal(-1.0).is_err());
    }

    #[test]
    fn xi_inverse_values() {
        assert_eq!(xi_inverse_ideal(1.0).unwrap(), 0.0);
        assert_eq!(xi_inverse_ideal(0.5).unwrap(), 1.0);
        assert!(xi_inverse_ideal(0.0).is_err());
        assert!(xi_inverse_ideal(1.5).is_err());
    }

    #[test]
    fn xi_numeric_matches_ideal() {
        for &q in &[0.0, 0.05, 0.5, 2.0, 10.0] {
            let got = xi_numeric(&InputDistribution::ideal(1.0), q).unwrap();
            assert!((got - xi_ideal(q).unwrap()).abs() < 1e-4, "q {q}");
        }
        assert_eq!(xi_numeric(&truncated(), 0.0).unwrap(), 1.0);
        assert_eq!(xi_numeric(&InputDistribution::qpsk(1.0), 0.0).unwrap(), 1.0);
    }

    #[test]
    fn g_delta_values() {
        let (nu_min, kappa) = (0.25, 2.0);
        let ideal_inv = (1.0 - nu_min * kappa) / (nu_min * kappa);
        assert!((g_delta(nu_min, kappa, ideal_inv).unwrap() - 1.0).abs() < 1e-15);
        assert!(g_delta(nu_min, kappa, ideal_inv + 0.1).unwrap() < 1.0);
        assert!(g_delta(nu_min, 4.0, 0.0).is_err());
        assert!(g_delta(nu_min, 0.0, 0.0).is_err());
    }

    #[test]
    fn ideal_input_needs_no_lift() {
        let nus = [0.2, 0.4, 1.5];
        let r = compensate_nus(&nus, 1.0, &InputDistribution::ideal(1.0)).unwrap();
        assert!(r.nu_kappa.abs() < 1e-9);
        assert!(r.sigma_kappa_sq.abs() < 1e-9);
        assert!((r.g_delta - 1.0).abs() < 1e-9);
        assert!((r.kappa - 1.0).abs() < 1e-9);
        assert!((r.sigma_omega_sq - 0.8).abs() < 1e-15);
        assert!(r.identity_error() < 1e-9);
        assert_eq!(r.active, vec![0, 1]);
    }

    #[test]
    fn truncated_input_regression() {
        let nus = [0.2, 0.4, 1.5];
        let r = compensate_nus(&nus, 1.0, &truncated()).unwrap();
        assert!(r.nu_kappa > 0.0);
        assert!(r.g_delta < 1.0);
        assert!(r.identity_error() < 1e-9, "{}", r.identity_error());
        assert!((1.0 / r.kappa - (1.0 + r.sigma_kappa_sq)).abs() < 1e-9);
        assert!((r.nu_kappa - r.nu_min * (1.0 - r.g_delta)).abs() < 1e-9);
        assert!((r.nu_kappa - TRUNCATED_NU_KAPPA).abs() < 1e-9, "{}", r.nu_kappa);
        for &i in &r.active {
            assert!(r.lifted_nu[i] < 1.0);
        }
    }

    #[test]
    fn lifted_channels_at_threshold_are_dropped() {
        let nus = [0.2, 0.99];
        let r = compensate_nus(&nus, 1.0, &truncated()).unwrap();
        assert!(r.lifted_nu[1] >= 1.0);
        assert_eq!(r.active, vec![0]);
    }

    #[test]
    fn no_good_channel_is_an_error() {
        assert!(compensate_nus(&[1.5, 2.0], 1.0, &truncated()).is_err());
    }

    #[test]
    fn worse_inputs_lift_more() {
        let nus = [0.2, 0.5];
        let lift = |bound: f64| {
            let d = InputDistribution::new(DistributionKind::TruncatedGaussian { bound }, 1.0).unwrap();
            compensate_nus(&nus, 1.0, &d).unwrap().nu_kappa
        };
        let (tight, loose, near_ideal) = (lift(0.5), lift(1.0), lift(4.0));
        assert!(tight >= loose && loose >= near_ideal, "{tight} {loose} {near_ideal}");
        assert!(near_ideal.abs() < 1e-3);
    }

    #[test]
    fn lift_never_raises_capacity() {
        let nus = [0.2, 0.4, 0.7];
        let nu_eve = 1.0;
        let r = compensate_nus(&nus, nu_eve, &truncated()).unwrap();
        let rate = |nus: &[f64], good: &[usize]| -> f64 {
            let alloc: VarianceAllocation = waterfill_exact_nus(nus, nu_eve);
            good.iter()
                .map(|&i| (1.0 + alloc.per_subchannel[i] / nus[i]).log2())
                .sum()
        };
        let before = rate(&nus, &[0, 1, 2]);
        let after = rate(&r.lifted_nu, &r.active);
        assert!(after < before);
        let ideal = compensate_nus(&nus, nu_eve, &InputDistribution::ideal(1.0)).unwrap();
        assert!((rate(&ideal.lifted_nu, &ideal.active) - before).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn xi_round_trip(v in 1e-6f64..1e3) {
            let back = xi_inverse_ideal(xi_ideal(v).unwrap()).unwrap();
            prop_assert!((back - 2.0 * v).abs() <= 1e-12 * (2.0 * v).max(1.0));
        }

        #[test]
        fn identities_hold_for_constellations(nu_min in 0.05f64..0.9, extra in prop::collection::vec(0.0f64..2.0, 0..4)) {
            let mut nus = vec![nu_min];
            nus.extend(extra.iter().map(|e| nu_min + e));
            let r = compensate_nus(&nus, 1.0, &InputDistribution::qpsk(1.0)).unwrap();
            prop_assert!(r.identity_error() < 1e-9);
            prop_assert!(r.nu_kappa >= -1e-12);
            for &i in &r.active {
                prop_assert!(r.lifted_nu[i] < 1.0);
            }
        }
    }
}
