use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amqd_core::allocation::{AllocationMode, VarianceAllocation};
use amqd_core::capacity::{mi_monte_carlo, sum_capacity};
use amqd_core::channel::ChannelBank;
use amqd_core::harness::{
    compensation_of, diversity_csv, emit, region_json, region_of, run, ExperimentConfig, OpportunisticSpec,
    OutputFormat, OutputKind,
};
use amqd_core::spectral::SpectralConvention;
use amqd_core::{Error, GaussianSource};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;

#[derive(Parser)]
#[command(name = "amqd", version, about = "Multicarrier Gaussian multiple-access experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every block of an experiment and write the requested outputs.
    Run(Common),
    /// Write the two-user capacity region with 64 boundary points.
    Region(Common),
    /// Solve the input compensation for the configured distribution.
    Compensate(Common),
    /// Run with opportunistic plans and write per-block gain spreads.
    Diversity(Common),
    /// Quick numerical self-checks; needs no config.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Parse(_) => 1,
        _ => 2,
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(common) => {
            let config = load(&common)?;
            let record = run(&config)?;
            for path in emit(&record, &config, common.format.into(), &common.out)? {
                println!("{}", path.display());
            }
            let a = &record.aggregate;
            println!(
                "blocks {}  nu_eve {:.6}  good {}  sum capacity {:.6}  mean sum rate {:.6}",
                record.blocks.len(),
                a.nu_eve,
                a.good.len(),
                a.sum_capacity,
                a.mean_sum_rate
            );
        }
        Command::Region(common) => {
            let config = load(&common)?;
            let region = region_of(&config)?;
            let path = write(&common.out, "region.json", &region_json(&region)?)?;
            println!("{}", path.display());
            println!(
                "C1 {:.6}  C2 {:.6}  sum bound {:.6}",
                region.c1, region.c2, region.sum_bound
            );
        }
        Command::Compensate(common) => {
            let config = load(&common)?;
            let result = compensation_of(&config)?;
            let mut text = serde_json::to_string_pretty(&result).map_err(|e| Error::Parse(e.to_string()))?;
            text.push('\n');
            let path = write(&common.out, "compensation.json", &text)?;
            println!("{}", path.display());
            println!(
                "nu_min {:.6}  kappa {:.9}  nu_kappa {:.9}  G {:.9}  active {}",
                result.nu_min,
                result.kappa,
                result.nu_kappa,
                result.g_delta,
                result.active.len()
            );
        }
        Command::Diversity(common) => {
            let mut config = load(&common)?;
            if config.opportunistic.is_none() {
                config.opportunistic = Some(OpportunisticSpec::Random {
                    budget_per_subcarrier: 1.5,
                });
            }
            if !config.wants(OutputKind::DiversityCsv) {
                config.outputs.push(OutputKind::DiversityCsv);
            }
            let record = run(&config)?;
            let path = match common.format {
                Format::Csv => write(&common.out, "diversity.csv", &diversity_csv(&record))?,
                Format::Json => {
                    let only = ExperimentConfig {
                        outputs: vec![OutputKind::DiversityCsv],
                        ..config.clone()
                    };
                    emit(&record, &only, OutputFormat::Json, &common.out)?
                        .pop()
                        .expect("diversity output")
                }
            };
            println!("{}", path.display());
            if let Some(d) = &record.aggregate.diversity {
                println!(
                    "c {:.6}  spread before {:.6}  spread after {:.6}",
                    d.c_average, d.gain_spread_before, d.gain_spread_after
                );
            }
        }
        Command::Selftest { seed } => {
            if !selftest(seed)? {
                eprintln!("self-test failed");
                std::process::exit(2);
            }
        }
    }
    Ok(())
}

fn report(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn selftest(seed: u64) -> Result<bool, Error> {
    let mut ok = true;
    let mut src = GaussianSource::new(1.0, seed)?;

    let mut worst = 0.0f64;
    for n in [1, 2, 4, 8, 64, 1024] {
        let x: Vec<Complex64> = src.sample(n)?.into_samples();
        let s = SpectralConvention::new(n)?;
        let back = s.dft(&s.idft(&x)?)?;
        let norm: f64 = x.iter().map(|c| c.norm_sqr()).sum();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / norm.sqrt();
        worst = worst.max(err);
    }
    ok &= report(
        "unitary round trip",
        worst < 1e-12,
        format!("max relative error {worst:.3e}"),
    );

    let bank = ChannelBank::from_fourier(
        vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(0.6, 0.8),
            Complex64::new(0.8, -0.6),
        ],
        vec![1.0, 1.0, 1.0, 1.0],
    )?;
    let alloc = VarianceAllocation::new(vec![0.1, 1.0, 10.0, 1.0], AllocationMode::ExactWaterfill)?;
    let good = [0, 1, 2, 3];
    let closed = sum_capacity(&bank, &alloc, &good)?;
    let mc = mi_monte_carlo(&bank, &alloc, &good, 200_000, &mut src)?;
    ok &= report(
        "capacity estimator",
        (mc - closed).abs() < 0.05,
        format!("Monte Carlo {mc:.4} vs closed form {closed:.4} bits"),
    );
    Ok(ok)
}
