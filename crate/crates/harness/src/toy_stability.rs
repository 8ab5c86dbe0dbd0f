//! Direction stability on random affine toy models.
//!
//! For each width `d` one model is drawn (`d × d` affine map, `2d` tokens) and
//! evaluated at `n_inputs` random inputs. The concept at each input is the
//! log-odds of a random token pair, a linear probe `β = γ_{y₁} − γ_{y₀}`, so the
//! concept constraint is exactly the hyperplane `qᵀδ = ρ` with `q = Wᵀβ`.
//! Per input the Fisher direction `G⁻¹q` is compared with the brute-force KL
//! minimiser on that hyperplane, and the exact KL of Euclidean and Fisher
//! steps of equal concept change are compared.

use fisher_steer::metric::pullback_fisher;
use fisher_steer::steering::{critical_radius, estimate_curvature_constants, optimal_direction, probe_covector};
use fisher_steer::transformer::make_toy_affine;
use fisher_steer::{LayeredMap, ToyAffineModel64};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ToyStabilityConfig};
use crate::oracle::{exact_kl_minimizer, LinearLogitProblem, OracleConfig};
use crate::output::Check;
use crate::seeds::case_seed;
use crate::stats::{median, summarize, StatsSummary};

pub const EXPERIMENT: &str = "toy-stability";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub case: usize,
    pub rho: f64,
    pub cosine: f64,
    pub one_minus_cosine: f64,
    pub kl_fisher: f64,
    pub kl_oracle: f64,
    pub kl_euclidean: f64,
    pub step_norm: f64,
    pub step_over_r_crit: f64,
    pub oracle_evals: usize,
    pub warning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub case: usize,
    pub token_base: usize,
    pub token_target: usize,
    pub condition_number: f64,
    pub kl_euclidean: f64,
    pub kl_fisher: f64,
    pub r_kl: f64,
    pub lambda_min: f64,
    pub c_kl: f64,
    pub r_crit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub seed: u64,
    /// Width, or 0 for the pooled row.
    pub d: usize,
    /// Concept change, or 0 for all grid values pooled.
    pub rho: f64,
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub iqr_low: f64,
    pub iqr_high: f64,
    pub spearman_r: Option<f64>,
    pub spearman_p: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyStabilityResult {
    pub cosine_rows: Vec<CosineRow>,
    pub case_rows: Vec<CaseRow>,
    pub summary_rows: Vec<SummaryRow>,
    pub slope_rows: Vec<SlopeRow>,
    pub checks: Vec<Check>,
}

pub fn model_for(seed: u64, d: usize) -> fisher_steer::Result<ToyAffineModel64> {
    make_toy_affine(d, case_seed(seed, "toy-stability/model", d, 0))
}

/// Random input and token pair for one case.
pub fn draw_case(d: usize, vocab: usize, input_scale: f64, seed: u64) -> (DVector<f64>, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * input_scale);
    let y0 = rng.random_range(0..vocab);
    let mut y1 = rng.random_range(0..vocab - 1);
    if y1 >= y0 {
        y1 += 1;
    }
    (h, y0, y1)
}

/// `½‖â − b̂‖² = 1 − cos(a, b)` without cancellation.
pub fn one_minus_cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    0.5 * (a.normalize() - b.normalize()).norm_squared()
}

struct CaseOutput {
    cosines: Vec<CosineRow>,
    case: CaseRow,
}

fn run_case(
    model: &ToyAffineModel64,
    t: &ToyStabilityConfig,
    hash: &str,
    d: usize,
    case: usize,
    seed: u64,
) -> fisher_steer::Result<CaseOutput> {
    let vocab = model.table().vocab_size();
    let (h, y0, y1) = draw_case(d, vocab, t.input_scale, seed);
    let beta = model.table().row(y1) - model.table().row(y0);
    let q = probe_covector(model, 0, &h, &beta)?;
    let metric = pullback_fisher(model, 0, &h)?;
    let problem = LinearLogitProblem::for_affine(model, &h)?;
    let euclid = |rho: f64| &q * (rho / q.norm_squared());

    let kl_e = problem.kl(&euclid(t.rho_ratio));
    let kl_f = problem.kl(&optimal_direction(&metric, &q, t.rho_ratio)?);
    let m = metric.lambda_min_positive().unwrap_or(0.0);
    let (c_kl, k2) = estimate_curvature_constants(model, 0, &h, t.curvature_probes, 0.1, seed ^ 0x5eed)?;
    // The map is affine: the measured K₂ is rounding noise.
    let k2 = if k2 < 1e-8 { 0.0 } else { k2 };
    let r_crit = critical_radius(m, c_kl, k2, beta.norm(), t.rho_ratio, 0.1, 0.1);

    let mut cosines = Vec::with_capacity(t.rho_grid.len());
    for (i, &rho) in t.rho_grid.iter().enumerate() {
        let fisher = optimal_direction(&metric, &q, rho)?;
        let oracle = exact_kl_minimizer(&problem, &q, rho, &t.oracle, seed.wrapping_add(i as u64))?;
        let omc = one_minus_cosine(&fisher, &oracle.delta);
        cosines.push(CosineRow {
            config_hash: hash.to_string(),
            seed,
            d,
            case,
            rho,
            cosine: 1.0 - omc,
            one_minus_cosine: omc,
            kl_fisher: problem.kl(&fisher),
            kl_oracle: oracle.kl,
            kl_euclidean: problem.kl(&euclid(rho)),
            step_norm: fisher.norm(),
            step_over_r_crit: fisher.norm() / r_crit,
            oracle_evals: oracle.evaluations,
            warning: oracle.warning.unwrap_or_default(),
        });
    }
    Ok(CaseOutput {
        cosines,
        case: CaseRow {
            config_hash: hash.to_string(),
            seed,
            d,
            case,
            token_base: y0,
            token_target: y1,
            condition_number: metric.condition_number()?,
            kl_euclidean: kl_e,
            kl_fisher: kl_f,
            r_kl: kl_e / kl_f,
            lambda_min: m,
            c_kl,
            r_crit,
        },
    })
}

pub fn run_toy_stability(cfg: &ExperimentConfig) -> anyhow::Result<ToyStabilityResult> {
    let t = &cfg.toy_stability;
    let hash = cfg.hash();
    let mut cosine_rows = Vec::new();
    let mut case_rows = Vec::new();
    for &d in &t.dims {
        let model = model_for(cfg.seed, d)?;
        let outputs: Vec<fisher_steer::Result<CaseOutput>> = (0..t.n_inputs)
            .into_par_iter()
            .map(|case| run_case(&model, t, &hash, d, case, case_seed(cfg.seed, EXPERIMENT, d, case)))
            .collect();
        for out in outputs {
            let out = out?;
            cosine_rows.extend(out.cosines);
            case_rows.push(out.case);
        }
    }

    let mut summary_rows = Vec::new();
    let mut checks = Vec::new();
    let summary = |d: usize, rho: f64, metric: &str, stats: StatsSummary| SummaryRow {
        config_hash: hash.clone(),
        seed: cfg.seed,
        d,
        rho,
        metric: metric.into(),
        n: stats.n,
        median: stats.median,
        iqr_low: stats.iqr_low,
        iqr_high: stats.iqr_high,
        spearman_r: stats.spearman_r,
        spearman_p: stats.spearman_p,
    };
    for &d in &t.dims {
        let cos: Vec<f64> = cosine_rows.iter().filter(|r| r.d == d).map(|r| r.cosine).collect();
        let s = summarize(&cos, &[], None);
        checks.push(Check::new(
            format!("median cosine d={d}"),
            s.median > t.min_median_cosine,
            format!("{:.6} over {} (input, ρ) cases, need > {}", s.median, s.n, t.min_median_cosine),
        ));
        summary_rows.push(summary(d, 0.0, "cosine", s));
        for &rho in &t.rho_grid {
            let v: Vec<f64> = cosine_rows.iter().filter(|r| r.d == d && r.rho == rho).map(|r| r.cosine).collect();
            summary_rows.push(summary(d, rho, "cosine", summarize(&v, &[], None)));
        }
        let rows: Vec<&CaseRow> = case_rows.iter().filter(|r| r.d == d).collect();
        let ratio: Vec<f64> = rows.iter().map(|r| r.r_kl).collect();
        let kappa: Vec<f64> = rows.iter().map(|r| r.condition_number).collect();
        summary_rows.push(summary(d, t.rho_ratio, "r_kl", summarize(&ratio, &[], Some(&kappa))));
    }
    let ratio: Vec<f64> = case_rows.iter().map(|r| r.r_kl).collect();
    let kappa: Vec<f64> = case_rows.iter().map(|r| r.condition_number).collect();
    let pooled = summarize(&ratio, &[], Some(&kappa));
    checks.push(Check::new(
        "median R_KL",
        pooled.median > t.min_median_ratio,
        format!("{:.4} over {} cases at ρ = {}, need > {}", pooled.median, pooled.n, t.rho_ratio, t.min_median_ratio),
    ));
    let (r, p) = (pooled.spearman_r.unwrap_or(f64::NAN), pooled.spearman_p.unwrap_or(f64::NAN));
    checks.push(Check::new(
        "Spearman(kappa, R_KL)",
        r > t.min_spearman_r && p < t.max_spearman_p,
        format!("r = {r:.4}, p = {p:.3e}, need r > {} and p < {}", t.min_spearman_r, t.max_spearman_p),
    ));
    summary_rows.push(summary(0, t.rho_ratio, "r_kl", pooled));
    let warnings = cosine_rows.iter().filter(|r| !r.warning.is_empty()).count();
    if warnings > 0 {
        log::warn!("{warnings} oracle searches hit their budget");
    }
    let slope_rows = if t.slope_models > 0 {
        let rows = direction_stability_slopes(
            &hash,
            cfg.seed,
            t.slope_models,
            t.slope_dim,
            t.slope_rho.0,
            t.slope_rho.1,
            t.slope_points,
            &t.oracle,
        )?;
        let worst = rows.iter().map(|r| r.slope).fold(f64::INFINITY, f64::min);
        checks.push(Check::new(
            "direction-stability slope",
            worst >= t.min_slope,
            format!("min log-log slope {worst:.4} over {} models at d = {}, need ≥ {}", rows.len(), t.slope_dim, t.min_slope),
        ));
        rows
    } else {
        Vec::new()
    };
    Ok(ToyStabilityResult { cosine_rows, case_rows, summary_rows, slope_rows, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeRow {
    pub config_hash: String,
    pub model: usize,
    pub seed: u64,
    pub d: usize,
    pub slope: f64,
    pub one_minus_cos_min_rho: f64,
    pub one_minus_cos_max_rho: f64,
}

/// Least-squares slope of `log(1 − cos(δ_oracle, δ_Fisher))` against `log ρ`
/// per model, with `ρ` log-spaced over `[rho_lo, rho_hi]`.
pub fn direction_stability_slopes(
    hash: &str,
    base_seed: u64,
    n_models: usize,
    d: usize,
    rho_lo: f64,
    rho_hi: f64,
    n_rho: usize,
    oracle: &OracleConfig,
) -> fisher_steer::Result<Vec<SlopeRow>> {
    let rhos: Vec<f64> =
        (0..n_rho).map(|i| (rho_lo.ln() + (rho_hi / rho_lo).ln() * i as f64 / (n_rho - 1) as f64).exp()).collect();
    (0..n_models)
        .into_par_iter()
        .map(|k| {
            let seed = case_seed(base_seed, "direction-stability", d, k);
            let model = make_toy_affine(d, seed)?;
            let (h, y0, y1) = draw_case(d, model.table().vocab_size(), 1.0, seed);
            let beta = model.table().row(y1) - model.table().row(y0);
            let q = probe_covector(&model, 0, &h, &beta)?;
            let metric = pullback_fisher(&model, 0, &h)?;
            let problem = LinearLogitProblem::for_affine(&model, &h)?;
            let fisher = optimal_direction(&metric, &q, 1.0)?;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (i, &rho) in rhos.iter().enumerate() {
                let o = exact_kl_minimizer(&problem, &q, rho, oracle, seed.wrapping_add(i as u64))?;
                xs.push(rho.ln());
                ys.push(one_minus_cosine(&o.delta, &fisher).max(f64::MIN_POSITIVE).ln());
            }
            Ok(SlopeRow {
                config_hash: hash.to_string(),
                model: k,
                seed,
                d,
                slope: ls_slope(&xs, &ys),
                one_minus_cos_min_rho: ys[0].exp(),
                one_minus_cos_max_rho: ys[ys.len() - 1].exp(),
            })
        })
        .collect()
}

pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Median over the pooled cosine column, used in diagnostics output.
pub fn median_cosine(rows: &[CosineRow]) -> f64 {
    median(&rows.iter().map(|r| r.cosine).collect::<Vec<_>>()).unwrap_or(f64::NAN)
}
