//! Opportunistic weighting of subcarriers by `sqrt(a) e^{i theta}`.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::allocation::VarianceAllocation;
use crate::capacity::subchannel_rate;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianSource, GaussianVector};
use crate::stats::std_dev;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub amplitude_sq: f64,
    pub phase: f64,
}

impl Weight {
    pub fn factor(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude_sq.sqrt(), self.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpportunisticPlan {
    weights: Vec<Weight>,
    pub block_index: u64,
}

impl OpportunisticPlan {
    /// Phases are reduced to `[0, 2 pi)`.
    pub fn new(weights: Vec<(f64, f64)>, block_index: u64) -> Result<Self> {
        if let Some((a, _)) = weights.iter().find(|(a, _)| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::domain(format!("amplitude_sq must be finite and >= 0, got {a}")));
        }
        if let Some((_, t)) = weights.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::domain(format!("phase must be finite, got {t}")));
        }
        let total: f64 = weights.iter().map(|(a, _)| a).sum();
        if !(total > 1.0) {
            return Err(Error::domain(format!("sum of amplitude_sq must exceed 1, got {total}")));
        }
        Ok(Self {
            weights: weights
                .into_iter()
                .map(|(amplitude_sq, phase)| Weight {
                    amplitude_sq,
                    phase: phase.rem_euclid(TAU),
                })
                .collect(),
            block_index,
        })
    }

    /// All `a = 1`, `theta = 0`; needs at least two subcarriers to satisfy
    /// the budget constraint.
    pub fn identity(len: usize, block_index: u64) -> Result<Self> {
        Self::new(vec![(1.0, 0.0); len], block_index)
    }

    /// Randomized amplitudes summing to `budget` (Dirichlet(1) shares),
    /// phases uniform.
    pub fn random(len: usize, budget: f64, block_index: u64, source: &mut GaussianSource) -> Result<Self> {
        check_budget(len, budget)?;
        let draws: Vec<f64> = (0..len).map(|_| -(1.0 - source.uniform()).ln()).collect();
        let total: f64 = draws.iter().sum();
        Self::new(
            draws
                .iter()
                .map(|e| (budget * e / total, TAU * source.uniform()))
                .collect(),
            block_index,
        )
    }

    pub fn weights(&self) -> &[Weight] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.amplitude_sq).collect()
    }

    /// Same amplitudes, new phases.
    pub fn with_phases(&self, phases: &[f64]) -> Result<Self> {
        check_len(self.len(), phases.len())?;
        Self::new(
            self.weights
                .iter()
                .zip(phases)
                .map(|(w, &t)| (w.amplitude_sq, t))
                .collect(),
            self.block_index,
        )
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::argument(format!("plan has {expected} weights, input has {got}")));
    }
    Ok(())
}

fn check_budget(len: usize, budget: f64) -> Result<()> {
    if len == 0 {
        return Err(Error::argument("plan needs at least one subcarrier"));
    }
    if !(budget > 1.0) || !budget.is_finite() {
        return Err(Error::argument(format!("budget must exceed 1, got {budget}")));
    }
    Ok(())
}

/// `c = (1/K) sum_k (1/d) sum_j |F(T_k)[j]|` over a `d x K` history.
pub fn stationarity_average(history: &[Vec<f64>]) -> Result<f64> {
    let users = history.first().map_or(0, Vec::len);
    if history.is_empty() || users == 0 {
        return Err(Error::argument("history must have at least one block and one user"));
    }
    if history.iter().any(|row| row.len() != users) {
        return Err(Error::argument("history rows differ in length"));
    }
    let d = history.len() as f64;
    let per_user = (0..users).map(|k| history.iter().map(|row| row[k]).sum::<f64>() / d);
    Ok(per_user.sum::<f64>() / users as f64)
}

/// `z'_i = sqrt(a_i) e^{i theta_i} z_i`.
pub fn apply_plan(z: &GaussianVector, plan: &OpportunisticPlan) -> Result<GaussianVector> {
    check_len(plan.len(), z.len())?;
    let out = z
        .samples()
        .iter()
        .zip(plan.weights())
        .map(|(s, w)| s * w.factor())
        .collect();
    GaussianVector::new(out, z.quad_variance())
}

/// `sum a_i |z_i|^2 / sum |z_i|^2`.
pub fn energy_factor(z: &GaussianVector, plan: &OpportunisticPlan) -> Result<f64> {
    check_len(plan.len(), z.len())?;
    let before: f64 = z.samples().iter().map(|s| s.norm_sqr()).sum();
    let after: f64 = z
        .samples()
        .iter()
        .zip(plan.weights())
        .map(|(s, w)| w.amplitude_sq * s.norm_sqr())
        .sum();
    Ok(if before > 0.0 { after / before } else { 1.0 })
}

/// Per-subcarrier `a_i |F(T_i)|^2` and their sum.
pub fn effective_gains(plan: &OpportunisticPlan, gains: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(plan.len(), gains.len())?;
    let per: Vec<f64> = plan
        .weights()
        .iter()
        .zip(gains)
        .map(|(w, g)| w.amplitude_sq * g)
        .collect();
    Ok((per.iter().sum(), per))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// Weights applied on top of the allocated variances.
    Raw,
    /// Variances rescaled so `sum a_i sigma_i^2` keeps the original total.
    Renormalized,
}

/// `sum_i log2(1 + sigma_i^2 a_i g_i / sigma_N_i^2)` over the plan's
/// subcarriers, where `alloc`, `gains` and `quad_noise` are indexed alike.
pub fn opportunistic_rate(
    plan: &OpportunisticPlan,
    gains: &[f64],
    alloc: &VarianceAllocation,
    quad_noise: &[f64],
    mode: RateMode,
) -> Result<f64> {
    check_len(plan.len(), gains.len())?;
    check_len(plan.len(), alloc.per_subchannel.len())?;
    check_len(plan.len(), quad_noise.len())?;
    let scale = match mode {
        RateMode::Raw => 1.0,
        RateMode::Renormalized => {
            let weighted: f64 = plan
                .weights()
                .iter()
                .zip(&alloc.per_subchannel)
                .map(|(w, v)| w.amplitude_sq * v)
                .sum();
            if weighted > 0.0 {
                alloc.total() / weighted
            } else {
                1.0
            }
        }
    };
    Ok(plan
        .weights()
        .iter()
        .zip(gains)
        .zip(alloc.per_subchannel.iter().zip(quad_noise))
        .map(|((w, g), (v, n))| subchannel_rate(scale * v, w.amplitude_sq * g, *n))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Concentrate,
    Proportional,
    Uniform,
}

pub fn optimize_plan(gains: &[f64], budget: f64, mode: PlanMode, block_index: u64) -> Result<OpportunisticPlan> {
    check_budget(gains.len(), budget)?;
    let s = gains.len();
    let amplitudes: Vec<f64> = match mode {
        PlanMode::Concentrate => {
            let best = gains
                .iter()
                .enumerate()
                .fold(0, |best, (i, g)| if *g > gains[best] { i } else { best });
            (0..s).map(|i| if i == best { budget } else { 0.0 }).collect()
        }
        PlanMode::Proportional => {
            let total: f64 = gains.iter().sum();
            if !(total > 0.0) {
                return Err(Error::argument("proportional plan needs a positive total gain"));
            }
            gains.iter().map(|g| budget * g / total).collect()
        }
        PlanMode::Uniform => vec![budget / s as f64; s],
    };
    OpportunisticPlan::new(amplitudes.into_iter().map(|a| (a, 0.0)).collect(), block_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub c_average: f64,
    pub gain_spread_before: f64,
    pub gain_spread_after: f64,
}

/// Spread (population standard deviation) of `|F(T)|` over all entries of a
/// `d x s` magnitude history, before and after per-block plans.
pub fn diversity_stats(history: &[Vec<f64>], plans: &[OpportunisticPlan]) -> Result<DiversityStats> {
    if history.len() != plans.len() {
        return Err(Error::argument(format!(
            "{} history blocks but {} plans",
            history.len(),
            plans.len()
        )));
    }
    let c_average = stationarity_average(history)?;
    let before: Vec<f64> = history.iter().flatten().copied().collect();
    let mut after = Vec::with_capacity(before.len());
    for (row, plan) in history.iter().zip(plans) {
        check_len(plan.len(), row.len())?;
        after.extend(row.iter().zip(plan.weights()).map(|(m, w)| w.amplitude_sq.sqrt() * m));
    }
    Ok(DiversityStats {
        c_average,
        gain_spread_before: std_dev(&before),
        gain_spread_after: std_dev(&after),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::AllocationMode;
    use crate::channel::ChannelBank;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn alloc(v: &[f64]) -> VarianceAllocation {
        VarianceAllocation::new(v.to_vec(), AllocationMode::ExactWaterfill).unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(OpportunisticPlan::new(vec![(0.5, 0.0), (0.5, 0.0)], 0).is_err());
        assert!(OpportunisticPlan::new(vec![(-0.1, 0.0), (2.0, 0.0)], 0).is_err());
        assert!(OpportunisticPlan::new(vec![(1.0, 0.0), (0.5, 0.0)], 0).is_ok());
        let p = OpportunisticPlan::new(vec![(2.0, -PI / 2.0)], 0).unwrap();
        assert!((p.weights()[0].phase - 1.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn stationarity_examples() {
        assert_eq!(stationarity_average(&[vec![0.7, 0.7], vec![0.7, 0.7]]).unwrap(), 0.7);
        assert!((stationarity_average(&[vec![0.6, 0.8]]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(stationarity_average(&[vec![0.3]]).unwrap(), 0.3);
        assert!(stationarity_average(&[]).is_err());
        assert!(stationarity_average(&[vec![]]).is_err());
    }

    #[test]
    fn apply_plan_examples() {
        let z = GaussianVector::new(
            vec![
                Complex64::new(0.3, -0.2),
                Complex64::new(-1.1, 0.4),
                Complex64::new(0.5, 0.5),
            ],
            1.0,
        )
        .unwrap();
        let id = OpportunisticPlan::identity(3, 0).unwrap();
        assert_eq!(apply_plan(&z, &id).unwrap().samples(), z.samples());
        let double = OpportunisticPlan::new(vec![(4.0, 0.0), (1.0, 0.0), (1.0, 0.0)], 0).unwrap();
        assert_eq!(apply_plan(&z, &double).unwrap().samples()[0], z.samples()[0] * 2.0);
        let flip = OpportunisticPlan::new(vec![(1.0, PI), (1.0, 0.0), (1.0, 0.0)], 0).unwrap();
        let out = apply_plan(&z, &flip).unwrap();
        assert!((out.samples()[0] + z.samples()[0]).norm() < 1e-15);
        assert!((out.samples()[0].norm() - z.samples()[0].norm()).abs() < 1e-15);
        assert!(apply_plan(&z, &OpportunisticPlan::identity(2, 0).unwrap()).is_err());
        assert!((energy_factor(&z, &id).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn effective_gain_examples() {
        let gains = [0.2, 0.5, 0.9];
        let id = OpportunisticPlan::identity(3, 0).unwrap();
        assert_eq!(effective_gains(&id, &gains).unwrap().0, gains.iter().sum::<f64>());
        let p = OpportunisticPlan::new(vec![(4.0, 0.7)], 0).unwrap();
        let (total, _) = effective_gains(&p, &[0.25]).unwrap();
        assert_eq!(total, 1.0);
        let explicit = (p.weights()[0].factor() * Complex64::new(0.25f64.sqrt(), 0.0)).norm_sqr();
        assert!((explicit - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_rate_equals_unweighted() {
        let bank = ChannelBank::from_fourier(
            vec![Complex64::new(0.9, 0.1), Complex64::new(0.2, -0.7)],
            vec![0.3, 0.4],
        )
        .unwrap();
        let a = alloc(&[0.5, 0.8]);
        let plain = crate::capacity::sum_capacity(&bank, &a, &[0, 1]).unwrap();
        let noise: Vec<f64> = (0..2).map(|i| bank.noise(i)).collect();
        let id = OpportunisticPlan::identity(2, 0).unwrap();
        let got = opportunistic_rate(&id, bank.fourier_gains(), &a, &noise, RateMode::Raw).unwrap();
        assert_eq!(got, plain);
        let renorm = opportunistic_rate(&id, bank.fourier_gains(), &a, &noise, RateMode::Renormalized).unwrap();
        assert_eq!(renorm, plain);
    }

    #[test]
    fn concentration_versus_spreading() {
        let gains = [1.0, 1.0];
        let noise = [1.0, 1.0];
        let id = OpportunisticPlan::identity(2, 0).unwrap();
        let conc = OpportunisticPlan::new(vec![(2.0, 0.0), (0.0, 0.0)], 0).unwrap();
        let mut wins = Vec::new();
        for &snr in &[0.1, 10.0] {
            let a = alloc(&[snr, snr]);
            let r_id = opportunistic_rate(&id, &gains, &a, &noise, RateMode::Raw).unwrap();
            let r_conc = opportunistic_rate(&conc, &gains, &a, &noise, RateMode::Raw).unwrap();
            wins.push(r_conc > r_id);
        }
        // Spreading wins at both ends under equal total weight (concavity).
        assert_eq!(wins, vec![false, false]);
    }

    #[test]
    fn optimize_examples() {
        let p = optimize_plan(&[0.1, 0.9], 2.0, PlanMode::Concentrate, 0).unwrap();
        assert_eq!(p.amplitudes(), vec![0.0, 2.0]);
        let tie = optimize_plan(&[0.5, 0.5], 2.0, PlanMode::Concentrate, 0).unwrap();
        assert_eq!(tie.amplitudes(), vec![2.0, 0.0]);
        let u = optimize_plan(&[0.1, 0.2, 0.3, 0.4], 2.0, PlanMode::Uniform, 0).unwrap();
        assert_eq!(u.amplitudes(), vec![0.5; 4]);
        let prop = optimize_plan(&[0.3; 4], 2.0, PlanMode::Proportional, 0).unwrap();
        assert_eq!(prop.amplitudes(), u.amplitudes());
        assert!(optimize_plan(&[0.1, 0.9], 1.0, PlanMode::Uniform, 0).is_err());
        assert!(optimize_plan(&[], 2.0, PlanMode::Uniform, 0).is_err());
    }

    #[test]
    fn randomized_plans_amplify_diversity() {
        let mut src = GaussianSource::new(1.0, 5).unwrap();
        let s = 8;
        let history: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..s).map(|_| 0.7 + 0.005 * src.standard_normal()).collect())
            .collect();
        let plans: Vec<OpportunisticPlan> = (0..100)
            .map(|j| OpportunisticPlan::random(s, 1.5 * s as f64, j, &mut src).unwrap())
            .collect();
        let stats = diversity_stats(&history, &plans).unwrap();
        assert!(stats.gain_spread_before < 0.05 * stats.c_average);
        assert!(stats.gain_spread_after > stats.gain_spread_before);
    }

    proptest! {
        #[test]
        fn rates_are_phase_invariant(
            a in prop::collection::vec(0.0f64..3.0, 4),
            t1 in prop::collection::vec(0.0f64..7.0, 4),
            t2 in prop::collection::vec(0.0f64..7.0, 4),
        ) {
            let mut amps = a.clone();
            amps[0] += 1.1;
            let p1 = OpportunisticPlan::new(amps.iter().zip(&t1).map(|(&a, &t)| (a, t)).collect(), 0).unwrap();
            let p2 = p1.with_phases(&t2).unwrap();
            let gains = [0.3, 0.8, 1.2, 0.05];
            let v = alloc(&[0.4, 0.1, 0.9, 0.3]);
            let noise = [0.2, 0.5, 0.3, 0.1];
            for mode in [RateMode::Raw, RateMode::Renormalized] {
                prop_assert_eq!(
                    opportunistic_rate(&p1, &gains, &v, &noise, mode).unwrap(),
                    opportunistic_rate(&p2, &gains, &v, &noise, mode).unwrap()
                );
            }
            prop_assert_eq!(effective_gains(&p1, &gains).unwrap(), effective_gains(&p2, &gains).unwrap());
        }

        #[test]
        fn amplifying_weights_raise_gain_and_rate(
            extra in prop::collection::vec(0.0f64..2.0, 3),
            bump in 1e-3f64..2.0,
            which in 0usize..3,
        ) {
            let mut amps: Vec<f64> = extra.iter().map(|e| 1.0 + e).collect();
            amps[which] += bump;
            let plan = OpportunisticPlan::new(amps.iter().map(|&a| (a, 0.0)).collect(), 0).unwrap();
            let id = OpportunisticPlan::identity(3, 0).unwrap();
            let gains = [0.4, 0.9, 0.2];
            let v = alloc(&[0.5, 0.2, 0.8]);
            let noise = [0.3, 0.3, 0.3];
            prop_assert!(effective_gains(&plan, &gains).unwrap().0 > effective_gains(&id, &gains).unwrap().0);
            prop_assert!(
                opportunistic_rate(&plan, &gains, &v, &noise, RateMode::Raw).unwrap()
                    > opportunistic_rate(&id, &gains, &v, &noise, RateMode::Raw).unwrap()
            );
        }

        #[test]
        fn weighting_before_or_after_transform_agree(
            re in prop::collection::vec(-1.0f64..1.0, 4),
            amps in prop::collection::vec(0.5f64..2.0, 4),
            phases in prop::collection::vec(0.0f64..6.0, 4),
        ) {
            // Weight on the symbol, or on the Fourier coefficient: same product.
            let plan = OpportunisticPlan::new(amps.iter().zip(&phases).map(|(&a, &t)| (a, t)).collect(), 0).unwrap();
            let coeffs = [Complex64::new(0.8, 0.1), Complex64::new(-0.3, 0.6), Complex64::new(0.2, 0.2), Complex64::new(1.0, -0.5)];
            for i in 0..4 {
                let z = Complex64::new(re[i], -re[i] * 0.5);
                let w = plan.weights()[i].factor();
                let on_symbol = coeffs[i] * (w * z);
                let on_coeff = (w * coeffs[i]) * z;
                prop_assert!((on_symbol - on_coeff).norm() < 1e-15);
            }
        }
    }
}
