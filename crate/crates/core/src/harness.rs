//! Experiment configuration, end-to-end runs, distribution tests and
//! result emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{
    constant_variance_nus, select_good_nus, waterfill_exact_nus, AllocationMatrix, AllocationMode, AllocationPolicy,
    VarianceAllocation,
};
use crate::capacity::{
    capacity_region_2user, partial_csi_rate, subchannel_rate, sum_capacity, CapacityRegion, CsiMode, JitteredBank,
    RateReport,
};
use crate::channel::{
    equalize, eve_parameter, transmit_block_with, AmqdBlock, ChannelBank, SubchannelProfile, Transmittance,
};
use crate::compensation::{compensate_nus, CompensationResult};
use crate::error::{Error, Result};
use crate::gaussian::{magnitude_cdf, squared_magnitude_cdf, GaussianSource, GaussianVector};
use crate::input::InputDistribution;
use crate::numfmt::csv_real;
use crate::opportunistic::{
    apply_plan, effective_gains, energy_factor, opportunistic_rate, optimize_plan, DiversityStats, OpportunisticPlan,
    PlanMode, RateMode,
};
use crate::spectral::{subcarrier_energy, SpectralConvention};
use crate::stats::{ks_one_sample, mean, normal_cdf, std_dev, KsOutcome};

pub const SCHEMA_VERSION: u32 = 1;
pub const REGION_POINTS: usize = 64;
const ENERGY_SLACK: f64 = 1.02;
pub const KS_ALPHA: f64 = 0.01;

const STREAM_INPUT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_PLAN: u64 = 3;
const STREAM_PARTIAL_CSI: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    SingleTransmitter,
    MultipleTransmitters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubchannelSpec {
    pub re: f64,
    pub im: f64,
    pub noise_quad_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// Time-domain transmittances, range checked.
    Inline { subchannels: Vec<SubchannelSpec> },
    /// Fourier-domain coefficients `F(T_i)`.
    Fourier {
        coefficients: Vec<Complex64>,
        noise_quad_variances: Vec<f64>,
    },
    /// CSV profile with header `re,im,noise_quad_variance`; relative paths
    /// resolve against the config file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EveSpec {
    Transmittances { expected_transmittances: Vec<Complex64> },
    Level { nu_eve: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpportunisticSpec {
    /// Per-user `(a, theta)` lists, one entry per allocated sub-channel.
    Explicit {
        plans: Vec<Vec<(f64, f64)>>,
    },
    Optimize {
        plan_mode: PlanMode,
        budget: f64,
    },
    /// Fresh random amplitudes summing to `budget_per_subcarrier * s` in every block.
    Random {
        budget_per_subcarrier: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    RatesCsv,
    RegionJson,
    DistributionTests,
    DiversityCsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_policy() -> AllocationPolicy {
    AllocationPolicy::RoundRobin
}
fn default_mode() -> AllocationMode {
    AllocationMode::ExactWaterfill
}
fn default_input() -> InputDistribution {
    InputDistribution::ideal(1.0)
}
fn default_trials() -> usize {
    1
}
fn default_outputs() -> Vec<OutputKind> {
    vec![OutputKind::RatesCsv]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub setting: Setting,
    pub n: usize,
    pub users: usize,
    #[serde(default)]
    pub seed: u64,
    pub channel: ChannelSpec,
    pub eve: EveSpec,
    #[serde(default = "default_policy")]
    pub allocation: AllocationPolicy,
    #[serde(default = "default_mode")]
    pub variance_mode: AllocationMode,
    #[serde(default = "default_input")]
    pub input_distribution: InputDistribution,
    #[serde(default)]
    pub compensate: bool,
    #[serde(default)]
    pub opportunistic: Option<OpportunisticSpec>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub record_samples: bool,
    /// Relative standard deviation of per-block Fourier magnitude jitter.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<OutputKind>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Reads a config file and resolves a relative channel profile path
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        if let ChannelSpec::File { path: profile } = &mut config.channel {
            if profile.is_relative() {
                if let Some(dir) = path.parent() {
                    *profile = dir.join(&*profile);
                }
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Every violated field, or `Ok` when the config is runnable.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.users == 0 {
            problems.push("users: must be >= 1".to_string());
        }
        if self.n < self.users.max(1) {
            problems.push(format!("n: must be >= users ({}), got {}", self.users, self.n));
        }
        if self.trials == 0 {
            problems.push("trials: must be >= 1".to_string());
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            problems.push(format!("jitter: must be finite and >= 0, got {}", self.jitter));
        }
        match &self.channel {
            ChannelSpec::Inline { subchannels } => {
                if subchannels.len() != self.n {
                    problems.push(format!(
                        "channel.subchannels: expected {} entries, got {}",
                        self.n,
                        subchannels.len()
                    ));
                }
                for (i, s) in subchannels.iter().enumerate() {
                    if let Err(e) = profile_of(s) {
                        problems.push(format!("channel.subchannels[{i}]: {e}"));
                    }
                }
            }
            ChannelSpec::Fourier {
                coefficients,
                noise_quad_variances,
            } => {
                if coefficients.len() != self.n {
                    problems.push(format!(
                        "channel.coefficients: expected {} entries, got {}",
                        self.n,
                        coefficients.len()
                    ));
                }
                if noise_quad_variances.len() != self.n {
                    problems.push(format!(
                        "channel.noise_quad_variances: expected {} entries, got {}",
                        self.n,
                        noise_quad_variances.len()
                    ));
                }
                if coefficients.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                    problems.push("channel.coefficients: must be finite".to_string());
                }
                if noise_quad_variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    problems.push("channel.noise_quad_variances: must be finite and >= 0".to_string());
                }
            }
            ChannelSpec::File { path } => {
                if path.as_os_str().is_empty() {
                    problems.push("channel.path: must not be empty".to_string());
                }
            }
        }
        match &self.eve {
            EveSpec::Transmittances {
                expected_transmittances,
            } => {
                if expected_transmittances.len() != self.n {
                    problems.push(format!(
                        "eve.expected_transmittances: expected {} entries, got {}",
                        self.n,
                        expected_transmittances.len()
                    ));
                } else if expected_transmittances.iter().all(|t| t.norm_sqr() == 0.0) {
                    problems.push("eve.expected_transmittances: all zero".to_string());
                }
            }
            EveSpec::Level { nu_eve } => {
                if !(*nu_eve > 0.0) || !nu_eve.is_finite() {
                    problems.push(format!("eve.nu_eve: must be finite and > 0, got {nu_eve}"));
                }
            }
        }
        if let Err(e) = self.input_distribution.validate() {
            problems.push(format!("input_distribution: {e}"));
        }
        if let AllocationPolicy::GreedyByGain { demands: Some(d) } = &self.allocation {
            if d.len() != self.users {
                problems.push(format!(
                    "allocation.demands: expected {} entries, got {}",
                    self.users,
                    d.len()
                ));
            }
        }
        if let AllocationPolicy::Explicit { matrix } = &self.allocation {
            if matrix.iter().any(|row| row.len() != self.users) {
                problems.push(format!("allocation.matrix: every row needs {} entries", self.users));
            }
            if matrix.iter().flatten().any(|&e| e > 1) {
                problems.push("allocation.matrix: entries must be 0 or 1".to_string());
            }
        }
        match &self.opportunistic {
            Some(OpportunisticSpec::Explicit { plans }) => {
                if plans.len() != self.users {
                    problems.push(format!(
                        "opportunistic.plans: expected {} user plans, got {}",
                        self.users,
                        plans.len()
                    ));
                }
                for (k, plan) in plans.iter().enumerate() {
                    if let Err(e) = OpportunisticPlan::new(plan.clone(), 0) {
                        problems.push(format!("opportunistic.plans[{k}]: {e}"));
                    }
                }
            }
            Some(OpportunisticSpec::Optimize { budget, .. }) if !(*budget > 1.0) => {
                problems.push(format!("opportunistic.budget: must exceed 1, got {budget}"));
            }
            Some(OpportunisticSpec::Random { budget_per_subcarrier }) if !(*budget_per_subcarrier > 0.0) => {
                problems.push(format!(
                    "opportunistic.budget_per_subcarrier: must be > 0, got {budget_per_subcarrier}"
                ));
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn wants(&self, output: OutputKind) -> bool {
        self.outputs.contains(&output)
    }
}

fn profile_of(s: &SubchannelSpec) -> Result<SubchannelProfile> {
    SubchannelProfile::new(Transmittance::new(s.re, s.im)?, s.noise_quad_variance)
}

/// Reads a `re,im,noise_quad_variance` CSV profile.
pub fn load_profile(path: &Path) -> Result<Vec<SubchannelSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profile(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn parse_profile(text: &str) -> Result<Vec<SubchannelSpec>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["re", "im", "noise_quad_variance"] {
        return Err(Error::Parse(format!(
            "profile header must be re,im,noise_quad_variance, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// Bank described by the config, before any per-block jitter.
pub fn build_bank(config: &ExperimentConfig) -> Result<ChannelBank> {
    match &config.channel {
        ChannelSpec::Inline { subchannels } => {
            ChannelBank::new(subchannels.iter().map(profile_of).collect::<Result<_>>()?)
        }
        ChannelSpec::Fourier {
            coefficients,
            noise_quad_variances,
        } => ChannelBank::from_fourier(coefficients.clone(), noise_quad_variances.clone()),
        ChannelSpec::File { path } => {
            let specs = load_profile(path)?;
            if specs.len() != config.n {
                return Err(Error::Validation(vec![format!(
                    "channel.path: profile has {} sub-channels, n = {}",
                    specs.len(),
                    config.n
                )]));
            }
            ChannelBank::new(specs.iter().map(profile_of).collect::<Result<_>>()?)
        }
    }
}

pub fn nu_eve_of(config: &ExperimentConfig) -> Result<f64> {
    match &config.eve {
        EveSpec::Transmittances {
            expected_transmittances,
        } => Ok(eve_parameter(expected_transmittances, config.n)?.nu_eve),
        EveSpec::Level { nu_eve } => Ok(*nu_eve),
    }
}

fn allocate(nus: &[f64], nu_eve: f64, mode: AllocationMode) -> Result<VarianceAllocation> {
    match mode {
        AllocationMode::ExactWaterfill => Ok(waterfill_exact_nus(nus, nu_eve)),
        AllocationMode::Constant => constant_variance_nus(nus, nu_eve),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpportunisticBlock {
    pub amplitudes: Vec<Vec<f64>>,
    #[serde(with = "crate::numfmt::reals")]
    pub per_user_raw: Vec<f64>,
    #[serde(with = "crate::numfmt::reals")]
    pub per_user_renormalized: Vec<f64>,
    /// `sum a |z|^2 / sum |z|^2` of the block's transmitted symbols.
    pub energy_factor: f64,
    pub effective_gain_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensationBlock {
    pub result: CompensationResult,
    /// Water-filled sum rate over the lifted coefficients.
    #[serde(with = "crate::numfmt::real")]
    pub sum_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockRecord {
    pub block_index: u64,
    pub good: Vec<usize>,
    pub rates: RateReport,
    pub opportunistic: Option<OpportunisticBlock>,
    pub compensation: Option<CompensationBlock>,
    /// Mean `|F(T_i)|` over the good sub-channels.
    pub c_average: f64,
    pub gain_spread_before: f64,
    pub gain_spread_after: f64,
    /// Largest `|z' - z|` after zero-forcing decode.
    pub decode_error: f64,
    /// `| ||z||^2 - ||idft(z)||^2 |` before the channel.
    pub parseval_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialCsi {
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub nu_eve: f64,
    pub good: Vec<usize>,
    pub allocation: VarianceAllocation,
    #[serde(with = "crate::numfmt::real")]
    pub sum_capacity: f64,
    #[serde(with = "crate::numfmt::reals")]
    pub mean_per_user: Vec<f64>,
    #[serde(with = "crate::numfmt::real")]
    pub mean_sum_rate: f64,
    #[serde(with = "crate::numfmt::real")]
    pub mean_symmetric_rate: f64,
    pub region: CapacityRegion,
    pub max_decode_error: f64,
    pub max_parseval_error: f64,
    pub diversity: Option<DiversityStats>,
    pub partial_csi: Option<PartialCsi>,
}

/// Raw samples for the distribution suite, normalized to unit
/// per-quadrature variance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawSamples {
    pub inputs: Vec<Complex64>,
    pub subcarriers: Vec<Complex64>,
    pub block_energy: Vec<f64>,
    /// `n * 2 * mean_i(q_i)` for each block.
    pub energy_bound: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Versions {
    pub amqd_core: String,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub setting: Setting,
    pub seed: u64,
    pub versions: Versions,
    pub blocks: Vec<BlockRecord>,
    pub aggregate: Aggregate,
    /// Excluded from emitted files so outputs stay byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub samples: Option<RawSamples>,
}

/// Executes every block of the experiment. A pure function of the config.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord> {
    let started = Instant::now();
    config.validate()?;
    let base = build_bank(config)?;
    let nu_eve = nu_eve_of(config)?;
    let n = config.n;
    let base_nus = base.nus();
    let base_good = select_good_nus(&base_nus, nu_eve);
    if base_good.is_empty() {
        return Err(Error::Validation(vec![format!(
            "channel: no sub-channel has nu_i < nu_Eve = {nu_eve}"
        )]));
    }
    let base_alloc = allocate(&base_nus, nu_eve, config.variance_mode)?;
    let sum_cap = sum_capacity(&base, &base_alloc, &base_good)?;
    let region = capacity_region_2user(&base, &base_alloc, &base_good)?;

    let seed = config.seed;
    let mut inputs = GaussianSource::with_stream(1.0, seed, STREAM_INPUT)?;
    let mut noise = GaussianSource::with_stream(1.0, seed, STREAM_NOISE)?;
    let mut jitter_src = GaussianSource::with_stream(1.0, seed, STREAM_JITTER)?;
    let mut plan_src = GaussianSource::with_stream(1.0, seed, STREAM_PLAN)?;
    let spectral = SpectralConvention::new(n)?;
    let jittered = JitteredBank {
        base: base.clone(),
        relative_std: config.jitter,
    };
    let record_samples = config.record_samples || config.wants(OutputKind::DistributionTests);
    let mut samples = record_samples.then(RawSamples::default);
    let mut blocks = Vec::with_capacity(config.trials);
    let mut history_before = Vec::new();
    let mut history_after = Vec::new();

    for j in 0..config.trials as u64 {
        let bank = if config.jitter > 0.0 {
            use crate::capacity::BankSampler;
            jittered.draw(&mut jitter_src)?
        } else {
            base.clone()
        };
        let nus = bank.nus();
        let good = select_good_nus(&nus, nu_eve);
        if good.is_empty() {
            return Err(Error::Domain(format!("block {j}: no good sub-channel")));
        }
        let alloc = allocate(&nus, nu_eve, config.variance_mode)?;
        let gains_good: Vec<f64> = good.iter().map(|&i| bank.fourier_gains()[i]).collect();
        let matrix = AllocationMatrix::build(&good, config.users, &config.allocation, &gains_good, j)?;
        let rates = RateReport::from_matrix(&matrix, &bank, &alloc, CsiMode::Full)?;

        // Per-sub-channel weights from the users' plans.
        let mut weights = vec![(1.0, 0.0); n];
        let plans = match &config.opportunistic {
            None => None,
            Some(spec) => Some(user_plans(spec, &matrix, &bank, j, &mut plan_src)?),
        };
        if let Some(plans) = &plans {
            for (k, plan) in plans.iter().enumerate() {
                if let Some(plan) = plan {
                    for (&i, w) in matrix.subchannels_of(k).iter().zip(plan.weights()) {
                        weights[i] = (w.amplitude_sq, w.phase);
                    }
                }
            }
        }

        // User symbols on the good sub-channels, then the optional weighting.
        let mut z = vec![Complex64::new(0.0, 0.0); n];
        for &i in &good {
            let v = alloc.per_subchannel[i];
            z[i] = config.input_distribution.with_variance(v).sample(&mut inputs);
        }
        let raw = GaussianVector::new(z.clone(), alloc.mean_over_bank())?;
        let all = OpportunisticPlan::new(weights.clone(), j).ok();
        let sent = match (&plans, &all) {
            (Some(_), Some(plan)) => apply_plan(&raw, plan)?,
            _ => raw.clone(),
        };
        let subcarriers = spectral.idft_vector(&sent)?;
        let parseval_error = (subcarrier_energy(sent.samples()) - subcarrier_energy(subcarriers.samples())).abs();
        let block = AmqdBlock {
            block_index: j,
            subcarriers: subcarriers.clone(),
            quad_variance: sent.quad_variance(),
        };
        let all_idx: Vec<usize> = (0..n).collect();
        let received = transmit_block_with(&spectral, &block, &bank, &all_idx, &mut noise)?;
        let received_good: Vec<Complex64> = good.iter().map(|&i| received.subcarriers.samples()[i]).collect();
        let decoded = equalize(&received_good, &bank, &good)?;
        let decode_error = good
            .iter()
            .zip(&decoded)
            .map(|(&i, d)| (d - sent.samples()[i]).norm())
            .fold(0.0, f64::max);

        if let Some(s) = samples.as_mut() {
            for &i in &good {
                let v = alloc.per_subchannel[i];
                if v > 0.0 {
                    s.inputs.push(z[i] / v.sqrt());
                }
            }
            let q_bar = (0..n).map(|i| weights[i].0 * alloc.per_subchannel[i]).sum::<f64>() / n as f64;
            if q_bar > 0.0 {
                s.subcarriers
                    .extend(subcarriers.samples().iter().map(|d| d / q_bar.sqrt()));
            }
            s.block_energy.push(subcarrier_energy(subcarriers.samples()));
            s.energy_bound.push(n as f64 * 2.0 * q_bar);
        }

        let magnitudes: Vec<f64> = good.iter().map(|&i| bank.fourier_gains()[i].sqrt()).collect();
        let weighted: Vec<f64> = good
            .iter()
            .zip(&magnitudes)
            .map(|(&i, m)| weights[i].0.sqrt() * m)
            .collect();

        let opportunistic = match &plans {
            None => None,
            Some(plans) => Some(opportunistic_block(plans, &matrix, &bank, &alloc, &raw, &all)?),
        };
        let compensation = if config.compensate {
            let result = compensate_nus(&nus, nu_eve, &config.input_distribution)?;
            let lifted = waterfill_exact_nus(&result.lifted_nu, nu_eve);
            let sum_rate = result
                .active
                .iter()
                .map(|&i| subchannel_rate(lifted.per_subchannel[i], 1.0, result.lifted_nu[i]))
                .sum();
            Some(CompensationBlock { result, sum_rate })
        } else {
            None
        };

        blocks.push(BlockRecord {
            block_index: j,
            good: good.clone(),
            rates,
            opportunistic,
            compensation,
            c_average: mean(&magnitudes),
            gain_spread_before: std_dev(&magnitudes),
            gain_spread_after: std_dev(&weighted),
            decode_error,
            parseval_error,
        });
        history_before.extend(magnitudes);
        history_after.extend(weighted);
    }

    let trials = blocks.len() as f64;
    let mean_per_user = (0..config.users)
        .map(|k| blocks.iter().map(|b| b.rates.per_user[k]).sum::<f64>() / trials)
        .collect();
    let aggregate = Aggregate {
        nu_eve,
        good: base_good,
        allocation: base_alloc.clone(),
        sum_capacity: sum_cap,
        mean_per_user,
        mean_sum_rate: blocks.iter().map(|b| b.rates.sum_rate).sum::<f64>() / trials,
        mean_symmetric_rate: blocks.iter().map(|b| b.rates.symmetric_rate).sum::<f64>() / trials,
        region,
        max_decode_error: blocks.iter().map(|b| b.decode_error).fold(0.0, f64::max),
        max_parseval_error: blocks.iter().map(|b| b.parseval_error).fold(0.0, f64::max),
        diversity: config.opportunistic.as_ref().map(|_| DiversityStats {
            c_average: mean(&history_before),
            gain_spread_before: std_dev(&history_before),
            gain_spread_after: std_dev(&history_after),
        }),
        partial_csi: if config.jitter > 0.0 {
            let mut src = GaussianSource::with_stream(1.0, seed, STREAM_PARTIAL_CSI)?;
            let (mean, standard_error) = partial_csi_rate(&jittered, &base_alloc, config.trials, &mut src)?;
            Some(PartialCsi { mean, standard_error })
        } else {
            None
        },
    };

    Ok(RunRecord {
        config_hash: config.hash(),
        setting: config.setting,
        seed,
        versions: Versions {
            amqd_core: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: SCHEMA_VERSION,
        },
        blocks,
        aggregate,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        samples,
    })
}

/// Two-user capacity region of the configured bank at its base allocation.
pub fn region_of(config: &ExperimentConfig) -> Result<CapacityRegion> {
    config.validate()?;
    let bank = build_bank(config)?;
    let nu_eve = nu_eve_of(config)?;
    let nus = bank.nus();
    let good = select_good_nus(&nus, nu_eve);
    let alloc = allocate(&nus, nu_eve, config.variance_mode)?;
    capacity_region_2user(&bank, &alloc, &good)
}

/// Compensation of the configured input distribution on the base bank.
pub fn compensation_of(config: &ExperimentConfig) -> Result<CompensationResult> {
    config.validate()?;
    let bank = build_bank(config)?;
    compensate_nus(&bank.nus(), nu_eve_of(config)?, &config.input_distribution)
}

fn user_plans(
    spec: &OpportunisticSpec,
    matrix: &AllocationMatrix,
    bank: &ChannelBank,
    block_index: u64,
    source: &mut GaussianSource,
) -> Result<Vec<Option<OpportunisticPlan>>> {
    (0..matrix.users())
        .map(|k| {
            let subs = matrix.subchannels_of(k);
            if subs.is_empty() {
                return Ok(None);
            }
            let gains: Vec<f64> = subs.iter().map(|&i| bank.fourier_gains()[i]).collect();
            let plan = match spec {
                OpportunisticSpec::Explicit { plans } => {
                    let weights = &plans[k];
                    if weights.len() != subs.len() {
                        return Err(Error::Validation(vec![format!(
                            "opportunistic.plans[{k}]: user holds {} sub-channels, plan has {} weights",
                            subs.len(),
                            weights.len()
                        )]));
                    }
                    OpportunisticPlan::new(weights.clone(), block_index)?
                }
                OpportunisticSpec::Optimize { plan_mode, budget } => {
                    optimize_plan(&gains, *budget, *plan_mode, block_index)?
                }
                OpportunisticSpec::Random { budget_per_subcarrier } => {
                    let budget = (budget_per_subcarrier * subs.len() as f64).max(1.0 + 1e-9);
                    OpportunisticPlan::random(subs.len(), budget, block_index, source)?
                }
            };
            Ok(Some(plan))
        })
        .collect()
}

fn opportunistic_block(
    plans: &[Option<OpportunisticPlan>],
    matrix: &AllocationMatrix,
    bank: &ChannelBank,
    alloc: &VarianceAllocation,
    raw: &GaussianVector,
    all: &Option<OpportunisticPlan>,
) -> Result<OpportunisticBlock> {
    let mut per_user_raw = Vec::with_capacity(plans.len());
    let mut per_user_renormalized = Vec::with_capacity(plans.len());
    let mut amplitudes = Vec::with_capacity(plans.len());
    let mut effective_gain_total = 0.0;
    for (k, plan) in plans.iter().enumerate() {
        let Some(plan) = plan else {
            per_user_raw.push(0.0);
            per_user_renormalized.push(0.0);
            amplitudes.push(Vec::new());
            continue;
        };
        let subs = matrix.subchannels_of(k);
        let gains: Vec<f64> = subs.iter().map(|&i| bank.fourier_gains()[i]).collect();
        let noise: Vec<f64> = subs.iter().map(|&i| bank.noise(i)).collect();
        let v = VarianceAllocation::new(
            subs.iter().map(|&i| alloc.per_subchannel[i]).collect(),
            AllocationMode::ExactWaterfill,
        )?;
        per_user_raw.push(opportunistic_rate(plan, &gains, &v, &noise, RateMode::Raw)?);
        per_user_renormalized.push(opportunistic_rate(plan, &gains, &v, &noise, RateMode::Renormalized)?);
        effective_gain_total += effective_gains(plan, &gains)?.0;
        amplitudes.push(plan.amplitudes());
    }
    let energy_factor = match all {
        Some(plan) => energy_factor(raw, plan)?,
        None => 1.0,
    };
    Ok(OpportunisticBlock {
        amplitudes,
        per_user_raw,
        per_user_renormalized,
        energy_factor,
        effective_gain_total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteLine {
    pub name: String,
    pub outcome: KsOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyCheck {
    pub mean_energy: f64,
    /// `1.02 n 2 q`, averaged over blocks.
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub tests: Vec<SuiteLine>,
    pub energy: EnergyCheck,
}

impl DistributionReport {
    pub fn passed(&self) -> bool {
        self.energy.passed && self.tests.iter().all(|t| t.outcome.passed())
    }
}

/// KS tests at `alpha = 0.01`: `|z|` Rayleigh, `|z|^2` exponential,
/// subcarrier quadratures standard normal; plus `E[tau] <= 1.02 n 2 q`.
pub fn distribution_suite(record: &RunRecord) -> Result<DistributionReport> {
    let s = record
        .samples
        .as_ref()
        .ok_or_else(|| Error::argument("run record holds no raw samples (set record_samples)"))?;
    if s.inputs.is_empty() || s.subcarriers.is_empty() {
        return Err(Error::argument("run record holds an empty sample set"));
    }
    let magnitudes: Vec<f64> = s.inputs.iter().map(|z| z.norm()).collect();
    let squared: Vec<f64> = s.inputs.iter().map(|z| z.norm_sqr()).collect();
    let quadratures: Vec<f64> = s.subcarriers.iter().flat_map(|d| [d.re, d.im]).collect();
    let tests = vec![
        SuiteLine {
            name: "input_magnitude_rayleigh".to_string(),
            outcome: ks_one_sample(&magnitudes, |r| magnitude_cdf(r, 1.0), KS_ALPHA)?,
        },
        SuiteLine {
            name: "input_squared_magnitude_exponential".to_string(),
            outcome: ks_one_sample(&squared, |x| squared_magnitude_cdf(x, 2.0), KS_ALPHA)?,
        },
        SuiteLine {
            name: "subcarrier_quadrature_normal".to_string(),
            outcome: ks_one_sample(&quadratures, |x| normal_cdf(x, 0.0, 1.0), KS_ALPHA)?,
        },
    ];
    let mean_energy = mean(&s.block_energy);
    let bound = ENERGY_SLACK * mean(&s.energy_bound);
    Ok(DistributionReport {
        tests,
        energy: EnergyCheck {
            mean_energy,
            bound,
            passed: mean_energy <= bound,
        },
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// The record without wall-clock time or raw samples.
pub fn record_json(record: &RunRecord) -> Result<String> {
    to_json(record)
}

/// `block,user,rate,sum_rate,symmetric_rate,corner_point,csi_mode`.
pub fn rates_csv(record: &RunRecord) -> String {
    let mut out = String::from("block,user,rate,sum_rate,symmetric_rate,corner_point,csi_mode\n");
    for b in &record.blocks {
        for (k, rate) in b.rates.per_user.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                b.block_index,
                k,
                csv_real(*rate),
                csv_real(b.rates.sum_rate),
                csv_real(b.rates.symmetric_rate),
                csv_real(b.rates.corner_points[k]),
                match b.rates.csi_mode {
                    CsiMode::Full => "full",
                    CsiMode::Partial => "partial",
                }
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct RegionFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    region: &'a CapacityRegion,
    boundary: Vec<(f64, f64)>,
}

pub fn region_json(region: &CapacityRegion) -> Result<String> {
    to_json(&RegionFile {
        schema_version: SCHEMA_VERSION,
        region,
        boundary: region.boundary(REGION_POINTS),
    })
}

/// `block,c_average,spread_before,spread_after,energy_factor`.
pub fn diversity_csv(record: &RunRecord) -> String {
    let mut out = String::from("block,c_average,spread_before,spread_after,energy_factor\n");
    for b in &record.blocks {
        let factor = b.opportunistic.as_ref().map_or(1.0, |o| o.energy_factor);
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.block_index,
            csv_real(b.c_average),
            csv_real(b.gain_spread_before),
            csv_real(b.gain_spread_after),
            csv_real(factor)
        ));
    }
    out
}

#[derive(Serialize)]
struct DiversityRow {
    block: u64,
    c_average: f64,
    spread_before: f64,
    spread_after: f64,
    energy_factor: f64,
}

/// Writes `record.json` and every requested output into `dir`; tabular
/// outputs follow `format`. Returns the written paths.
pub fn emit(record: &RunRecord, config: &ExperimentConfig, format: OutputFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![write(dir, "record.json", &record_json(record)?)?];
    for output in &config.outputs {
        let path = match (output, format) {
            (OutputKind::RatesCsv, OutputFormat::Csv) => write(dir, "rates.csv", &rates_csv(record))?,
            (OutputKind::RatesCsv, OutputFormat::Json) => {
                let rates: Vec<&RateReport> = record.blocks.iter().map(|b| &b.rates).collect();
                write(dir, "rates.json", &to_json(&rates)?)?
            }
            (OutputKind::RegionJson, _) => write(dir, "region.json", &region_json(&record.aggregate.region)?)?,
            (OutputKind::DistributionTests, _) => {
                write(dir, "distribution_tests.json", &to_json(&distribution_suite(record)?)?)?
            }
            (OutputKind::DiversityCsv, OutputFormat::Csv) => write(dir, "diversity.csv", &diversity_csv(record))?,
            (OutputKind::DiversityCsv, OutputFormat::Json) => {
                let rows: Vec<DiversityRow> = record
                    .blocks
                    .iter()
                    .map(|b| DiversityRow {
                        block: b.block_index,
                        c_average: b.c_average,
                        spread_before: b.gain_spread_before,
                        spread_after: b.gain_spread_after,
                        energy_factor: b.opportunistic.as_ref().map_or(1.0, |o| o.energy_factor),
                    })
                    .collect();
                write(dir, "diversity.json", &to_json(&rows)?)?
            }
        };
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::DistributionKind;

    fn uniform_input() -> InputDistribution {
        InputDistribution::new(DistributionKind::UniformDisc, 1.0).unwrap()
    }

    fn unit_config(n: usize, users: usize) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            setting: Setting::SingleTransmitter,
            n,
            users,
            seed: 3,
            channel: ChannelSpec::Fourier {
                coefficients: vec![Complex64::new(1.0, 0.0); n],
                noise_quad_variances: vec![0.0; n],
            },
            eve: EveSpec::Level { nu_eve: 1.0 },
            allocation: AllocationPolicy::RoundRobin,
            variance_mode: AllocationMode::ExactWaterfill,
            input_distribution: InputDistribution::ideal(1.0),
            compensate: false,
            opportunistic: None,
            trials: 3,
            record_samples: false,
            jitter: 0.0,
            outputs: vec![OutputKind::RatesCsv],
        }
    }

    fn noisy_config() -> ExperimentConfig {
        let mut c = unit_config(8, 2);
        c.channel = ChannelSpec::Fourier {
            coefficients: (0..8)
                .map(|i| Complex64::from_polar(0.6 + 0.05 * i as f64, 0.3 * i as f64))
                .collect(),
            noise_quad_variances: vec![0.1; 8],
        };
        c
    }

    #[test]
    fn noiseless_unit_channels_round_trip() {
        for n in [1, 4, 64] {
            let mut c = unit_config(n, 1);
            // Zero noise gives nu = 0, so every sub-channel is good.
            c.trials = 2;
            let r = run(&c).unwrap();
            assert!(
                r.aggregate.max_decode_error < 1e-12,
                "n {n}: {}",
                r.aggregate.max_decode_error
            );
            assert!(r.aggregate.max_parseval_error < 1e-12);
        }
    }

    #[test]
    fn identical_configs_identical_records() {
        let c = noisy_config();
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(record_json(&a).unwrap(), record_json(&b).unwrap());
        assert_eq!(rates_csv(&a), rates_csv(&b));
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(a.config_hash, run(&other).unwrap().config_hash);
    }

    #[test]
    fn settings_share_the_math() {
        let mut c = noisy_config();
        let a = run(&c).unwrap();
        c.setting = Setting::MultipleTransmitters;
        let b = run(&c).unwrap();
        let ra: Vec<_> = a.blocks.iter().map(|b| b.rates.clone()).collect();
        let rb: Vec<_> = b.blocks.iter().map(|b| b.rates.clone()).collect();
        assert_eq!(ra, rb);
        assert_eq!(a.aggregate.max_decode_error, b.aggregate.max_decode_error);
    }

    #[test]
    fn corner_point_config() {
        let mut c = noisy_config();
        c.allocation = AllocationPolicy::Explicit {
            matrix: vec![vec![1, 0]; 8],
        };
        let r = run(&c).unwrap();
        let c_sum = r.aggregate.sum_capacity;
        for b in &r.blocks {
            assert!((b.rates.per_user[0] - c_sum).abs() <= 1e-12 * c_sum);
            assert_eq!(b.rates.per_user[1], 0.0);
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = unit_config(2, 3);
        c.trials = 0;
        c.jitter = -1.0;
        c.schema_version = 9;
        match c.validate() {
            Err(Error::Validation(list)) => {
                assert_eq!(list.len(), 4, "{list:?}");
                assert!(list.iter().any(|p| p.starts_with("n:")));
                assert!(list.iter().any(|p| p.starts_with("trials:")));
                assert!(list.iter().any(|p| p.starts_with("jitter:")));
                assert!(list.iter().any(|p| p.starts_with("schema_version:")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let c = noisy_config();
        let text = c.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert!(ExperimentConfig::from_json(r#"{"n": 1}"#).is_err());
    }

    #[test]
    fn profile_parsing() {
        let p = parse_profile("re,im,noise_quad_variance\n0.5,0.1,0.2\n0.3,0.3,0.1\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].im, 0.3);
        assert!(parse_profile("a,b\n1,2\n").is_err());
    }

    #[test]
    fn suite_passes_for_gaussian_and_catches_uniform() {
        let mut c = noisy_config();
        c.n = 64;
        c.channel = ChannelSpec::Fourier {
            coefficients: vec![Complex64::new(0.8, 0.2); 64],
            noise_quad_variances: vec![0.1; 64],
        };
        c.trials = 400;
        c.record_samples = true;
        let r = run(&c).unwrap();
        let report = distribution_suite(&r).unwrap();
        assert!(report.passed(), "{report:?}");

        c.input_distribution = uniform_input();
        let r = run(&c).unwrap();
        let report = distribution_suite(&r).unwrap();
        assert!(!report.tests[0].outcome.passed());

        let mut no_samples = r.clone();
        no_samples.samples = None;
        assert!(distribution_suite(&no_samples).is_err());
        no_samples.samples = Some(RawSamples::default());
        assert!(distribution_suite(&no_samples).is_err());
    }

    #[test]
    fn region_file_has_boundary() {
        let r = run(&noisy_config()).unwrap();
        let text = region_json(&r.aggregate.region).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["boundary"].as_array().unwrap().len(), REGION_POINTS);
        assert!(v["c1"].is_number() && v["c2"].is_number() && v["sum_bound"].is_number());
    }

    #[test]
    fn emit_is_byte_stable() {
        let mut c = noisy_config();
        c.outputs = vec![OutputKind::RatesCsv, OutputKind::RegionJson, OutputKind::DiversityCsv];
        c.opportunistic = Some(OpportunisticSpec::Random {
            budget_per_subcarrier: 1.5,
        });
        let r = run(&c).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = emit(&r, &c, OutputFormat::Csv, d1.path()).unwrap();
        let p2 = emit(&run(&c).unwrap(), &c, OutputFormat::Csv, d2.path()).unwrap();
        assert_eq!(p1.len(), 4);
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{}", a.display());
        }
        let div = fs::read_to_string(d1.path().join("diversity.csv")).unwrap();
        assert!(div.starts_with("block,c_average,spread_before,spread_after,energy_factor\n"));
        assert_eq!(div.lines().count(), 1 + c.trials);
        assert!(!div.contains('\r'));
        let bad = Path::new("/proc/nonexistent/dir");
        assert!(matches!(emit(&r, &c, OutputFormat::Csv, bad), Err(Error::Io { .. })));
    }

    #[test]
    fn compensation_and_jitter_are_recorded() {
        let mut c = noisy_config();
        c.compensate = true;
        c.input_distribution = InputDistribution::new(DistributionKind::TruncatedGaussian { bound: 1.0 }, 1.0).unwrap();
        c.jitter = 0.05;
        c.trials = 20;
        let r = run(&c).unwrap();
        for b in &r.blocks {
            let comp = b.compensation.as_ref().unwrap();
            assert!(comp.result.nu_kappa > 0.0);
            assert!(comp.sum_rate < b.rates.sum_rate);
        }
        let p = r.aggregate.partial_csi.as_ref().unwrap();
        assert!(p.standard_error > 0.0);
    }
}
