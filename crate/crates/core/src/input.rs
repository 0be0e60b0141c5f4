//! Input modulation distributions with a fixed second moment, and the
//! numerics that compare them with ideal Gaussian modulation: MMSE of the
//! input given a noisy observation, output densities, and differential
//! entropy.
//!
//! Every distribution is renormalized to `E[|d|^2] = 2q` for its declared
//! per-quadrature variance `q`. The observation model used by
//! [`OutputModel`] works with the unit-power shape of the distribution:
//! `y = a d + n`, `E[|d|^2] = 1`, `n ~ CN(0, 1)`, so `a^2` is the SNR.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erf;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ComplexSample, GaussianSource};
use crate::quadrature::Rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionKind {
    IdealGaussian,
    /// Each quadrature is a normal truncated at `+-bound` standard deviations.
    TruncatedGaussian {
        bound: f64,
    },
    /// Uniform on a disc centred at the origin.
    UniformDisc,
    DiscreteConstellation {
        points: Vec<Complex64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDistribution {
    #[serde(flatten)]
    pub kind: DistributionKind,
    #[serde(default = "unit_variance")]
    pub quad_variance: f64,
}

fn unit_variance() -> f64 {
    1.0
}

/// Variance of the standard normal truncated to `[-b, b]`.
pub fn truncated_normal_variance(bound: f64) -> f64 {
    let phi = (-bound * bound / 2.0).exp() / (2.0 * PI).sqrt();
    1.0 - 2.0 * bound * phi / erf(bound * FRAC_1_SQRT_2)
}

impl InputDistribution {
    pub fn new(kind: DistributionKind, quad_variance: f64) -> Result<Self> {
        let d = Self { kind, quad_variance };
        d.validate()?;
        Ok(d)
    }

    pub fn ideal(quad_variance: f64) -> Self {
        Self {
            kind: DistributionKind::IdealGaussian,
            quad_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quad_variance >= 0.0) || !self.quad_variance.is_finite() {
            return Err(Error::domain("quad_variance must be finite and >= 0"));
        }
        match &self.kind {
            DistributionKind::TruncatedGaussian { bound } if !(*bound > 0.0) => {
                Err(Error::domain(format!("truncation bound must be positive, got {bound}")))
            }
            DistributionKind::DiscreteConstellation { points, probs } => {
                if points.is_empty() || points.len() != probs.len() {
                    return Err(Error::domain("constellation needs matching points and probabilities"));
                }
                if probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::domain("probabilities must be >= 0"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
                }
                if constellation_power(points, probs) <= 0.0 {
                    return Err(Error::domain("constellation has zero second moment"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_ideal(&self) -> bool {
        matches!(self.kind, DistributionKind::IdealGaussian)
    }

    /// Same shape at another variance.
    pub fn with_variance(&self, quad_variance: f64) -> Self {
        Self {
            kind: self.kind.clone(),
            quad_variance,
        }
    }

    /// 4-point QPSK.
    pub fn qpsk(quad_variance: f64) -> Self {
        let s = FRAC_1_SQRT_2;
        Self {
            kind: DistributionKind::DiscreteConstellation {
                points: vec![
                    Complex64::new(s, s),
                    Complex64::new(-s, s),
                    Complex64::new(-s, -s),
                    Complex64::new(s, -s),
                ],
                probs: vec![0.25; 4],
            },
            quad_variance,
        }
    }

    /// One sample, drawn from `source`, at the declared variance.
    pub fn sample(&self, source: &mut GaussianSource) -> ComplexSample {
        self.sample_unit(source) * (2.0 * self.quad_variance).sqrt()
    }

    /// One sample of the unit-power shape (`E[|d|^2] = 1`).
    pub fn sample_unit(&self, source: &mut GaussianSource) -> ComplexSample {
        match &self.kind {
            DistributionKind::IdealGaussian => source.draw_scaled(0.5),
            DistributionKind::TruncatedGaussian { bound } => {
                let scale = (0.5 / truncated_normal_variance(*bound)).sqrt();
                let mut draw = || loop {
                    let x = source.standard_normal();
                    if x.abs() <= *bound {
                        return x * scale;
                    }
                };
                let re = draw();
                Complex64::new(re, draw())
            }
            DistributionKind::UniformDisc => {
                let r = SQRT_2 * source.uniform().sqrt();
                Complex64::from_polar(r, 2.0 * PI * source.uniform())
            }
            DistributionKind::DiscreteConstellation { points, probs } => {
                let scale = 1.0 / constellation_power(points, probs).sqrt();
                let u = source.uniform();
                let mut acc = 0.0;
                for (p, c) in probs.iter().zip(points) {
                    acc += p;
                    if u < acc {
                        return c * scale;
                    }
                }
                points[points.len() - 1] * scale
            }
        }
    }

    /// `log2` of the input density at `z`, or `None` for discrete inputs.
    pub fn log2_density(&self, z: ComplexSample) -> Option<f64> {
        let q = self.quad_variance;
        match &self.kind {
            DistributionKind::IdealGaussian => Some((-z.norm_sqr() / (2.0 * q)).exp().log2() - (2.0 * PI * q).log2()),
            DistributionKind::TruncatedGaussian { bound } => {
                let s = (q / truncated_normal_variance(*bound)).sqrt();
                let c = bound * s;
                if z.re.abs() > c || z.im.abs() > c {
                    return Some(f64::NEG_INFINITY);
                }
                let mass = erf(bound * FRAC_1_SQRT_2);
                let norm = mass * (2.0 * PI).sqrt() * s;
                Some((-(z.re * z.re + z.im * z.im) / (2.0 * s * s)) / std::f64::consts::LN_2 - 2.0 * norm.log2())
            }
            DistributionKind::UniformDisc => {
                let r2 = 4.0 * q;
                Some(if z.norm_sqr() <= r2 {
                    -(PI * r2).log2()
                } else {
                    f64::NEG_INFINITY
                })
            }
            DistributionKind::DiscreteConstellation { .. } => None,
        }
    }

    /// Monte Carlo differential entropy `-E[log2 f(z)]` in bits; `-inf` for
    /// discrete inputs.
    pub fn entropy_monte_carlo(&self, samples: usize, source: &mut GaussianSource) -> f64 {
        let mut acc = 0.0;
        for _ in 0..samples {
            let z = self.sample(source);
            match self.log2_density(z) {
                Some(l) => acc -= l,
                None => return f64::NEG_INFINITY,
            }
        }
        acc / samples as f64
    }
}

fn constellation_power(points: &[Complex64], probs: &[f64]) -> f64 {
    points.iter().zip(probs).map(|(c, p)| p * c.norm_sqr()).sum()
}

/// Unit-power, per-quadrature marginal of a product-form distribution:
/// density proportional to `exp(-x^2 / 2 s^2)` on `[-c, c]`, variance 1/2.
#[derive(Debug, Clone, Copy)]
struct Marginal {
    s: f64,
    c: f64,
}

impl Marginal {
    fn of(kind: &DistributionKind) -> Option<Self> {
        match kind {
            DistributionKind::IdealGaussian => Some(Self {
                s: FRAC_1_SQRT_2,
                c: 9.0 * FRAC_1_SQRT_2,
            }),
            DistributionKind::TruncatedGaussian { bound } => {
                let s = (0.5 / truncated_normal_variance(*bound)).sqrt();
                Some(Self { s, c: bound * s })
            }
            _ => None,
        }
    }
}

/// Observation `y = a d + n` with `n ~ CN(0, 1)` (each quadrature `N(0, 1/2)`).
#[derive(Debug, Clone)]
pub struct OutputModel {
    kind: DistributionKind,
    amplitude: f64,
    table: Option<Table>,
}

/// Tabulated per-quadrature (product inputs) or radial (disc) output
/// log-density and posterior mean.
#[derive(Debug, Clone)]
struct Table {
    lo: f64,
    step: f64,
    log_density: Vec<f64>,
    posterior: Vec<f64>,
}

impl Table {
    fn build(lo: f64, hi: f64, points: usize, f: impl Fn(f64) -> (f64, f64)) -> Self {
        let step = (hi - lo) / (points - 1) as f64;
        let (log_density, posterior) = (0..points).map(|k| f(lo + k as f64 * step)).unzip();
        Self {
            lo,
            step,
            log_density,
            posterior,
        }
    }

    fn lookup(&self, x: f64) -> Option<(f64, f64)> {
        let t = (x - self.lo) / self.step;
        let last = self.log_density.len() - 1;
        if !(t >= 0.0) || t > last as f64 {
            return None;
        }
        // Three-point Lagrange interpolation around the nearest node.
        let k = (t.round() as usize).clamp(1, last - 1);
        let f = t - k as f64;
        let interp =
            |v: &[f64]| v[k] + 0.5 * f * (v[k + 1] - v[k - 1]) + 0.5 * f * f * (v[k + 1] - 2.0 * v[k] + v[k - 1]);
        Some((interp(&self.log_density), interp(&self.posterior)))
    }
}

const NOISE_VAR_QUAD: f64 = 0.5;

impl OutputModel {
    /// `snr = a^2`, the ratio of input power to noise power.
    pub fn new(dist: &InputDistribution, snr: f64) -> Result<Self> {
        dist.validate()?;
        if !(snr >= 0.0) || !snr.is_finite() {
            return Err(Error::domain(format!("SNR must be finite and >= 0, got {snr}")));
        }
        let a = snr.sqrt();
        let mut model = Self {
            kind: dist.kind.clone(),
            amplitude: a,
            table: None,
        };
        model.table = match &dist.kind {
            DistributionKind::TruncatedGaussian { .. } => {
                let m = Marginal::of(&dist.kind).expect("product form");
                let hi = a * m.c + 12.0 * NOISE_VAR_QUAD.sqrt();
                let pts = table_points(hi, a);
                Some(Table::build(-hi, hi, pts, |u| marginal_output(m, a, u)))
            }
            DistributionKind::UniformDisc => {
                let hi = a * SQRT_2 + 12.0 * NOISE_VAR_QUAD.sqrt();
                let pts = table_points(hi, a);
                Some(Table::build(0.0, hi, pts, |rho| disc_output(a, rho)))
            }
            _ => None,
        };
        Ok(model)
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Natural-log density of the output at `y`.
    pub fn ln_density(&self, y: Complex64) -> f64 {
        let a = self.amplitude;
        match &self.kind {
            DistributionKind::IdealGaussian => {
                let v = a * a + 1.0;
                -y.norm_sqr() / v - (PI * v).ln()
            }
            DistributionKind::TruncatedGaussian { .. } => {
                let m = Marginal::of(&self.kind).expect("product form");
                let one = |u: f64| match self.table.as_ref().and_then(|t| t.lookup(u)) {
                    Some((ld, _)) => ld,
                    None => marginal_output(m, a, u).0,
                };
                one(y.re) + one(y.im)
            }
            DistributionKind::UniformDisc => {
                let rho = y.norm();
                match self.table.as_ref().and_then(|t| t.lookup(rho)) {
                    Some((ld, _)) => ld,
                    None => disc_output(a, rho).0,
                }
            }
            DistributionKind::DiscreteConstellation { points, probs } => {
                let scale = 1.0 / constellation_power(points, probs).sqrt();
                log_sum_exp(
                    points
                        .iter()
                        .zip(probs)
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(c, p)| p.ln() - (y - c * (a * scale)).norm_sqr()),
                ) - PI.ln()
            }
        }
    }

    /// `E[d | y]` for the unit-power input `d`.
    pub fn posterior_mean(&self, y: Complex64) -> Complex64 {
        let a = self.amplitude;
        match &self.kind {
            DistributionKind::IdealGaussian => y * (a / (a * a + 1.0)),
            DistributionKind::TruncatedGaussian { .. } => {
                let m = Marginal::of(&self.kind).expect("product form");
                let one = |u: f64| match self.table.as_ref().and_then(|t| t.lookup(u)) {
                    Some((_, pm)) => pm,
                    None => marginal_output(m, a, u).1,
                };
                Complex64::new(one(y.re), one(y.im))
            }
            DistributionKind::UniformDisc => {
                let rho = y.norm();
                if rho == 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let g = match self.table.as_ref().and_then(|t| t.lookup(rho)) {
                    Some((_, g)) => g,
                    None => disc_output(a, rho).1,
                };
                y * (g / rho)
            }
            DistributionKind::DiscreteConstellation { points, probs } => constellation_posterior(points, probs, a, y),
        }
    }
}

fn table_points(hi: f64, a: f64) -> usize {
    // Resolve the posterior width 1/(a sqrt 2) and the noise width alike.
    let width = (NOISE_VAR_QUAD.sqrt() / a.max(1.0)).min(NOISE_VAR_QUAD.sqrt());
    ((hi / (width / 40.0)) as usize).clamp(4001, 200_001)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn constellation_posterior(points: &[Complex64], probs: &[f64], a: f64, y: Complex64) -> Complex64 {
    let scale = 1.0 / constellation_power(points, probs).sqrt();
    let logs: Vec<f64> = points
        .iter()
        .zip(probs)
        .map(|(c, p)| {
            if *p > 0.0 {
                p.ln() - (y - c * (a * scale)).norm_sqr()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for (l, c) in logs.iter().zip(points) {
        let w = (l - m).exp();
        num += c * (w * scale);
        den += w;
    }
    num / den
}

fn marginal_rule(m: Marginal, a: f64) -> Rule {
    let width = (NOISE_VAR_QUAD.sqrt() / a.max(1e-12)).min(m.s);
    let panels = ((2.0 * m.c) / (width / 2.0)).ceil().clamp(8.0, 6000.0) as usize;
    Rule::composite(-m.c, m.c, panels, 8)
}

/// `(ln p_1(u), E[x | u])` for one quadrature of a product input.
fn marginal_output(m: Marginal, a: f64, u: f64) -> (f64, f64) {
    let rule = marginal_rule(m, a);
    marginal_output_with(&rule, m, a, u)
}

fn marginal_output_with(rule: &Rule, m: Marginal, a: f64, u: f64) -> (f64, f64) {
    // Shift exponents by their maximum so far tails do not underflow.
    let expo = |x: f64| -x * x / (2.0 * m.s * m.s) - (u - a * x).powi(2) / (2.0 * NOISE_VAR_QUAD);
    let peak = rule.nodes.iter().map(|&x| expo(x)).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut mx = 0.0;
    let mut norm = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let e = (expo(x) - peak).exp() * w;
        z += e;
        mx += e * x;
        norm += w * (-x * x / (2.0 * m.s * m.s)).exp();
    }
    let ln_p = peak + z.ln() - norm.ln() - 0.5 * (2.0 * PI * NOISE_VAR_QUAD).ln();
    (ln_p, mx / z)
}

/// Exponentially scaled modified Bessel functions `(I0(x) e^-x, I1(x) e^-x)`
/// by the trapezoid rule on the periodic integral representation.
fn bessel_i01e(x: f64) -> (f64, f64) {
    let n = (64.0 + 24.0 * x.sqrt()) as usize;
    let h = PI / n as f64;
    let mut i0 = 0.0;
    let mut i1 = 0.0;
    for k in 0..=n {
        let phi = k as f64 * h;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        let e = (-x * (1.0 - phi.cos())).exp();
        i0 += w * e;
        i1 += w * e * phi.cos();
    }
    (i0 * h / PI, i1 * h / PI)
}

/// `(ln p_Y(rho), g(rho))` for the unit-power uniform disc, where
/// `E[d | y] = g(|y|) y / |y|`.
fn disc_output(a: f64, rho: f64) -> (f64, f64) {
    let r_max = SQRT_2;
    let width = (NOISE_VAR_QUAD.sqrt() / a.max(1e-12)).min(r_max);
    let panels = (r_max / (width / 2.0)).ceil().clamp(8.0, 4000.0) as usize;
    let rule = Rule::composite(0.0, r_max, panels, 8);
    // |y - a x|^2 = (rho - a r)^2 + 2 a rho r (1 - cos phi)
    let peak = rule
        .nodes
        .iter()
        .map(|&r| -(rho - a * r).powi(2))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut mz = 0.0;
    for (&r, &w) in rule.nodes.iter().zip(&rule.weights) {
        let (i0, i1) = bessel_i01e(2.0 * a * rho * r);
        let e = w * r * (-(rho - a * r).powi(2) - peak).exp();
        z += e * i0;
        mz += e * r * i1;
    }
    // p = (1 / (pi R^2)) (1 / pi) 2 pi * integral
    let ln_p = peak + z.ln() + (2.0 / (PI * r_max * r_max)).ln();
    (ln_p, if z > 0.0 { mz / z } else { 0.0 })
}

/// MMSE `E[|d - E[d | sqrt(2q) d + n]|^2]` for the unit-power shape of
/// `dist` under unit complex noise, by deterministic quadrature.
pub fn mmse(dist: &InputDistribution, quad_variance: f64) -> Result<f64> {
    dist.validate()?;
    if !(quad_variance >= 0.0) || !quad_variance.is_finite() {
        return Err(Error::domain(format!(
            "variance must be finite and >= 0, got {quad_variance}"
        )));
    }
    let snr = 2.0 * quad_variance;
    if snr == 0.0 {
        return Ok(1.0);
    }
    let a = snr.sqrt();
    match &dist.kind {
        DistributionKind::IdealGaussian | DistributionKind::TruncatedGaussian { .. } => {
            let m = Marginal::of(&dist.kind).expect("product form");
            let inner = marginal_rule(m, a);
            let hi = a * m.c + 12.0 * NOISE_VAR_QUAD.sqrt();
            let outer_width = NOISE_VAR_QUAD.sqrt() / 4.0;
            let panels = ((2.0 * hi) / outer_width).ceil().clamp(16.0, 20_000.0) as usize;
            let outer = Rule::composite(-hi, hi, panels, 8);
            let second = outer.integrate(|u| {
                let (ln_p, pm) = marginal_output_with(&inner, m, a, u);
                ln_p.exp() * pm * pm
            });
            Ok(2.0 * (0.5 - second))
        }
        DistributionKind::UniformDisc => {
            let hi = a * SQRT_2 + 12.0 * NOISE_VAR_QUAD.sqrt();
            let panels = (hi / (NOISE_VAR_QUAD.sqrt() / 4.0)).ceil().clamp(16.0, 4000.0) as usize;
            let rule = Rule::composite(0.0, hi, panels, 8);
            let second = rule.integrate(|rho| {
                let (ln_p, g) = disc_output(a, rho);
                2.0 * PI * rho * ln_p.exp() * g * g
            });
            Ok(1.0 - second)
        }
        DistributionKind::DiscreteConstellation { points, probs } => {
            let scale = 1.0 / constellation_power(points, probs).sqrt();
            let half = 9.0 * NOISE_VAR_QUAD.sqrt();
            let rule = Rule::composite(-half, half, 24, 8);
            let gauss: Vec<f64> = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&x, &w)| w * (-x * x).exp() / PI.sqrt())
                .collect();
            let mut second = 0.0;
            for (c, p) in points.iter().zip(probs) {
                if *p == 0.0 {
                    continue;
                }
                let centre = c * (a * scale);
                let mut acc = 0.0;
                for (&nx, &wx) in rule.nodes.iter().zip(&gauss) {
                    for (&ny, &wy) in rule.nodes.iter().zip(&gauss) {
                        let y = centre + Complex64::new(nx, ny);
                        acc += wx * wy * constellation_posterior(points, probs, a, y).norm_sqr();
                    }
                }
                second += p * acc;
            }
            Ok((1.0 - second).max(0.0))
        }
    }
}

/// Monte Carlo mutual information `I(d; y)` in bits between an input of
/// shape `dist` and its AWGN output at the given SNR, using the exact output
/// density of each kind.
pub fn mutual_information_monte_carlo(
    dist: &InputDistribution,
    snr: f64,
    samples: usize,
    source: &mut GaussianSource,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::argument("samples must be >= 1"));
    }
    let model = OutputModel::new(dist, snr)?;
    let a = model.amplitude();
    let mut acc = 0.0;
    for _ in 0..samples {
        let d = dist.sample_unit(source);
        let n = source.draw_scaled(NOISE_VAR_QUAD);
        let y = d * a + n;
        // ln p(y | d) = -|n|^2 - ln pi
        acc += -n.norm_sqr() - PI.ln() - model.ln_density(y);
    }
    Ok(acc / samples as f64 / std::f64::consts::LN_2)
}
