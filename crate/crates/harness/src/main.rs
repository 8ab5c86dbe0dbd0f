use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

use clap::{Args, Parser, Subcommand};
use fisher_steer_harness::config::{ExperimentConfig, ExperimentKind};
use fisher_steer_harness::output::{all_passed, write_manifest, write_table, Check, Format};
use fisher_steer_harness::{framework, geometry, steering_comparison, toy_stability};

/// Pullback-Fisher steering experiments.
#[derive(Parser)]
#[command(name = "fisher-steer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact-oracle direction stability and KL ratios on affine toy models.
    ToyStability(Common),
    /// Layerwise spectra, recursion residuals and depth bounds.
    Geometry(Common),
    /// Iterative Fisher steering against Euclidean and fixed-direction baselines.
    Steer(Common),
    /// Proxy-metric cost ratios, bounds and counterexample witnesses.
    Framework(Common),
    /// Runs every experiment at reduced size and checks its thresholds.
    Selftest(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Number of inputs, contexts or draws.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

/// Applies `--dims` and `--n` to the section of `kind`.
fn apply_overrides(cfg: &mut ExperimentConfig, kind: ExperimentKind, dims: &Option<Vec<usize>>, n: Option<usize>) {
    match kind {
        ExperimentKind::ToyStability => {
            if let Some(d) = dims {
                cfg.toy_stability.dims = d.clone();
            }
            if let Some(n) = n {
                cfg.toy_stability.n_inputs = n;
            }
        }
        ExperimentKind::Geometry => {
            if let Some(d) = dims {
                cfg.geometry.dims = d.clone();
            }
            if let Some(n) = n {
                cfg.geometry.n_inputs = n;
            }
        }
        ExperimentKind::Steering => {
            if let Some(&d) = dims.as_ref().and_then(|d| d.first()) {
                cfg.steering.dim = d;
            }
            if let Some(n) = n {
                cfg.steering.n_contexts = n;
            }
        }
        ExperimentKind::Framework => {
            if let Some(d) = dims {
                cfg.framework.dims = d.clone();
            }
            if let Some(n) = n {
                cfg.framework.n_draws = n;
            }
        }
    }
}

/// Runs one experiment, writes its tables and manifest, and returns its checks.
fn run(kind: ExperimentKind, cfg: &ExperimentConfig, dir: &Path, format: Format) -> anyhow::Result<Vec<Check>> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let stem = |s: &str| format!("{}_{s}", kind.as_str().replace('-', "_"));
    let mut files = Vec::new();
    let checks = match kind {
        ExperimentKind::ToyStability => {
            let r = toy_stability::run_toy_stability(cfg)?;
            files.push(write_table(dir, &stem("cosines"), &r.cosine_rows, format)?);
            files.push(write_table(dir, &stem("cases"), &r.case_rows, format)?);
            files.push(write_table(dir, &stem("summary"), &r.summary_rows, format)?);
            files.push(write_table(dir, &stem("slopes"), &r.slope_rows, format)?);
            if !all_passed(&r.checks) {
                for s in &r.summary_rows {
                    log::warn!(
                        "d={} ρ={} {}: n={} median={:.6} IQR=[{:.6}, {:.6}]",
                        s.d,
                        s.rho,
                        s.metric,
                        s.n,
                        s.median,
                        s.iqr_low,
                        s.iqr_high
                    );
                }
            }
            r.checks
        }
        ExperimentKind::Geometry => {
            let r = geometry::run_geometry(cfg)?;
            files.push(write_table(dir, &stem("spectral"), &r.spectral_rows, format)?);
            files.push(write_table(dir, &stem("depth_bound"), &r.depth_rows, format)?);
            files.push(write_table(dir, &stem("summary"), &r.summary_rows, format)?);
            files.push(write_table(dir, &stem("spectrum"), &r.spectrum_rows, format)?);
            r.checks
        }
        ExperimentKind::Steering => {
            let r = steering_comparison::run_steering_comparison(cfg)?;
            files.push(write_table(dir, &stem("paths"), &r.path_rows, format)?);
            files.push(write_table(dir, &stem("crossings"), &r.crossing_rows, format)?);
            files.push(write_table(dir, &stem("contexts"), &r.context_rows, format)?);
            files.push(write_table(dir, &stem("comparison"), &r.comparison_rows, format)?);
            files.push(write_table(dir, &stem("coverage"), &r.coverage_rows, format)?);
            r.checks
        }
        ExperimentKind::Framework => {
            let r = framework::run_framework(cfg)?;
            files.push(write_table(dir, &stem("costs"), &r.cost_rows, format)?);
            files.push(write_table(dir, &stem("bounds"), &r.bound_rows, format)?);
            files.push(write_table(dir, &stem("witnesses"), &r.witness_rows, format)?);
            files.push(write_table(dir, &stem("optimality"), &r.optimality_rows, format)?);
            r.checks
        }
    };
    files.push(write_table(dir, &stem("checks"), &checks, format)?);
    write_manifest(dir, kind, cfg, started, clock.elapsed(), &files, &checks)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks)
}

/// Configuration used by `selftest`: every experiment at a size that runs in seconds.
fn selftest_config(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.toy_stability.dims = vec![4, 8];
    cfg.toy_stability.n_inputs = 40;
    cfg.toy_stability.slope_models = 5;
    cfg.geometry.n_nets = 2;
    cfg.geometry.n_inputs = 5;
    cfg.steering.n_contexts = 30;
    cfg.framework.n_draws = 100;
    cfg.framework.optimality_samples = 10_000;
    cfg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = (|| -> anyhow::Result<bool> {
        let (kinds, common, selftest) = match &cli.command {
            Command::ToyStability(c) => (vec![ExperimentKind::ToyStability], c, false),
            Command::Geometry(c) => (vec![ExperimentKind::Geometry], c, false),
            Command::Steer(c) => (vec![ExperimentKind::Steering], c, false),
            Command::Framework(c) => (vec![ExperimentKind::Framework], c, false),
            Command::Selftest(c) => (
                vec![ExperimentKind::ToyStability, ExperimentKind::Geometry, ExperimentKind::Steering, ExperimentKind::Framework],
                c,
                true,
            ),
        };
        let mut cfg = common.load()?;
        if selftest {
            cfg = selftest_config(cfg);
        }
        let mut passed = true;
        for kind in kinds {
            let mut c = cfg.clone();
            apply_overrides(&mut c, kind, &common.dims, common.n);
            c.validate()?;
            let dir = if selftest { c.output_dir.join(kind.as_str()) } else { c.output_dir.clone() };
            passed &= all_passed(&run(kind, &c, &dir, common.format)?);
        }
        Ok(passed)
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
