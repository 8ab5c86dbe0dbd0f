//! Proxy-metric diagnostics on random metrics.
//!
//! Each draw is a random SPD metric `G` with log-eigenvalues spread over
//! `log_spread` nats and a random covector `q`. Every proxy in the catalogue is scored
//! by its cost ratio and excess, and the applicable bound is checked. Both
//! counterexample witnesses and the optimality sweep are separate tables.

use fisher_steer::proxy::{
    caa_gaussian_identity, cost_ratio, diagonal_fisher_report, excess_cost, info_theoretic_excess, iti_decomposition,
    kantorovich_bound, no_universal_lower_witness, proxy_direction, ranking_counterexample, relative_perturbation_bound,
    second_order_cost,
};
use fisher_steer::steering::{optimal_direction, tikhonov_bias};
use fisher_steer::{CostReport64, ProxyKind, ProxyMetricSpec, PullbackMetric64};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, FrameworkConfig};
use crate::output::Check;
use crate::seeds::case_seed;

pub const EXPERIMENT: &str = "framework";

/// Slack allowed on `≤ bound` comparisons.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub draw: usize,
    /// Steering method the proxy stands for.
    pub method: &'static str,
    pub proxy_kind: &'static str,
    pub ratio: f64,
    pub excess: f64,
    pub e_w_b: Option<f64>,
    pub var_w_b: Option<f64>,
    pub kantorovich_bound: f64,
    /// Relative-perturbation size where the row has a bound in terms of it.
    pub eta: Option<f64>,
    pub bound: Option<f64>,
    pub bound_holds: Option<bool>,
}

/// One bound or identity evaluation that is not a proxy cost row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub draw: usize,
    pub check: &'static str,
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessRow {
    pub config_hash: String,
    pub witness: &'static str,
    pub quantity: &'static str,
    pub value: f64,
    pub expected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub metric: usize,
    pub rank: usize,
    pub samples: usize,
    pub optimal_cost: f64,
    /// Smallest `δᵀGδ / δ*ᵀGδ*` over feasible perturbations.
    pub min_cost_ratio: f64,
    pub beaten: usize,
}

#[derive(Debug, Clone)]
pub struct FrameworkResult {
    pub cost_rows: Vec<CostRow>,
    pub bound_rows: Vec<BoundRow>,
    pub witness_rows: Vec<WitnessRow>,
    pub optimality_rows: Vec<OptimalityRow>,
    pub checks: Vec<Check>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, d).qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DMatrix::from_diagonal(&r.diagonal().map(|x| if x < 0.0 { -1.0 } else { 1.0 }));
    q * signs
}

/// `U diag(exp(s (u_i − ½))) Uᵀ` with `u_i` uniform; the first `d − rank`
/// eigenvalues are set to zero.
pub fn random_metric(rng: &mut ChaCha8Rng, d: usize, log_spread: f64, rank: usize) -> DMatrix<f64> {
    let u = random_orthogonal(rng, d);
    let lam = DVector::from_fn(d, |i, _| {
        let x: f64 = rng.random();
        if i < d - rank {
            0.0
        } else {
            (log_spread * (x - 0.5)).exp()
        }
    });
    let m = &u * DMatrix::from_diagonal(&lam) * u.transpose();
    (&m + m.transpose()) * 0.5
}

/// `E` symmetric with zero diagonal and `‖E‖₂ = eta`.
fn off_diagonal_perturbation(rng: &mut ChaCha8Rng, d: usize, eta: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, d, d);
    let mut e = &a + a.transpose();
    e.fill_diagonal(0.0);
    let n = fisher_steer::linalg::spectral_norm(&e);
    e * (eta / n)
}

/// `G^{1/2}(I + E)G^{1/2}` with `E` symmetric, `‖E‖₂ = eta`.
fn relative_perturbation(rng: &mut ChaCha8Rng, g: &PullbackMetric64, eta: f64) -> DMatrix<f64> {
    let d = g.dim();
    let a = gaussian_matrix(rng, d, d);
    let e = &a + a.transpose();
    let e = &e * (eta / fisher_steer::linalg::spectral_norm(&e));
    let half = g.positive_function(|l| l.sqrt());
    let m = &half * (DMatrix::identity(d, d) + e) * &half;
    (&m + m.transpose()) * 0.5
}

fn smallest_factor(d: usize) -> Option<usize> {
    (2..d).find(|a| d % a == 0)
}

struct DrawOutcome {
    costs: Vec<CostRow>,
    bounds: Vec<BoundRow>,
}

fn cost_row(
    lineage: (&str, u64, usize, usize),
    method: &'static str,
    report: &CostReport64,
    kant: f64,
    bound: Option<(Option<f64>, Option<f64>)>,
) -> CostRow {
    let (hash, seed, d, draw) = lineage;
    let cv = report.cv_decomposition.as_ref();
    let (eta, bound) = bound.unwrap_or((None, None));
    CostRow {
        config_hash: hash.to_string(),
        seed,
        d,
        draw,
        method,
        proxy_kind: report.proxy_kind,
        ratio: report.ratio,
        excess: report.excess,
        e_w_b: cv.map(|c| c.e_w_b),
        var_w_b: cv.map(|c| c.var_w_b),
        kantorovich_bound: kant,
        eta,
        bound,
        bound_holds: bound.map(|b| report.ratio <= b * (1.0 + BOUND_SLACK)),
    }
}

fn run_draw(f: &FrameworkConfig, hash: &str, d: usize, draw: usize, seed: u64) -> fisher_steer::Result<DrawOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lineage = (hash, seed, d, draw);
    let g = PullbackMetric64::from_matrix(random_metric(&mut rng, d, f.log_spread, d))?;
    let q = gaussian_vector(&mut rng, d);
    let kant = kantorovich_bound(&g)?;
    let mut costs = Vec::new();
    let mut bounds = Vec::new();
    let mut bound_row = |check: &'static str, measured: f64, bound: f64| {
        bounds.push(BoundRow {
            config_hash: hash.to_string(),
            seed,
            d,
            draw,
            check,
            measured,
            bound,
            holds: measured <= bound + BOUND_SLACK * bound.abs().max(f64::MIN_POSITIVE),
        });
    };

    // Every proxy direction must satisfy the three excess identities.
    let mut score = |method: &'static str, spec: ProxyMetricSpec<f64>, bound: Option<(Option<f64>, Option<f64>)>| {
        let report = cost_ratio(&g, &spec, &q)?;
        let delta = proxy_direction(&g, &spec, &q, 1.0)?;
        excess_cost(&g, &delta, &q, 1.0)?;
        costs.push(cost_row(lineage, method, &report, kant, bound));
        Ok::<CostReport64, fisher_steer::Error>(report)
    };

    score("fisher", ProxyMetricSpec::new(ProxyKind::Custom(g.matrix().clone())), None)?;
    let euclid = score("euclidean", ProxyMetricSpec::new(ProxyKind::Identity), Some((None, Some(kant))))?;
    let noisy = &q + gaussian_vector(&mut rng, d) * (0.3 * q.norm() / (d as f64).sqrt());
    score("actadd", ProxyMetricSpec::new(ProxyKind::Identity).with_covector(noisy), None)?;
    let sigma = random_metric(&mut rng, d, 2.0, d);
    score("caa", ProxyMetricSpec::new(ProxyKind::Identity).with_covector(&sigma * &q), None)?;
    score("rep_surgery", ProxyMetricSpec::new(ProxyKind::InverseCovariance(sigma.clone())), None)?;
    score("iti_diagonal", ProxyMetricSpec::new(ProxyKind::Diagonal(None)), None)?;
    let k = (d / 2).max(1);
    let psi = DMatrix::identity(d, d).columns(0, k).into_owned();
    score("iti_subspace", ProxyMetricSpec::new(ProxyKind::Subspace(psi.clone())), None)?;
    if let Some(a) = smallest_factor(d) {
        let (ma, mb) = (random_metric(&mut rng, a, 1.0, a), random_metric(&mut rng, d / a, 1.0, d / a));
        score("kfac", ProxyMetricSpec::new(ProxyKind::Kronecker(ma, mb)), None)?;
    }
    let m_rel = relative_perturbation(&mut rng, &g, f.relative_eta);
    let rel = relative_perturbation_bound(&g, &m_rel, f.n_covectors, seed ^ 0x5eed)?;
    score("relative_perturbation", ProxyMetricSpec::new(ProxyKind::Custom(m_rel)), Some((Some(rel.eta), rel.bound)))?;
    if let Some(b) = rel.bound {
        bound_row("relative_perturbation_mc", rel.max_sampled_ratio, b);
    }

    // The Euclidean excess in closed form.
    let (info, _) = info_theoretic_excess(&g, &q, 1.0)?;
    bound_row("euclidean_excess_closed_form", (info - euclid.excess).abs(), 1e-9 * euclid.cost);

    // Diagonal Fisher on a metric with controlled off-diagonal energy.
    let dvec = DVector::from_fn(d, |_, _| (f.log_spread * (rng.random::<f64>() - 0.5)).exp());
    let half = DMatrix::from_diagonal(&dvec.map(f64::sqrt));
    let e = off_diagonal_perturbation(&mut rng, d, f.diagonal_eta);
    let g_diag = PullbackMetric64::from_matrix(&half * (DMatrix::identity(d, d) + e) * &half)?;
    let rep = diagonal_fisher_report(&g_diag, &q, 1.0)?;
    if let Some(b) = rep.bound {
        bound_row("diagonal_fisher", rep.ratio_closed_form, b);
    }
    bound_row("diagonal_closed_form_ratio", (rep.ratio_closed_form - rep.report.ratio).abs(), 1e-8 * rep.report.ratio);

    // Subspace restriction.
    let iti = iti_decomposition(&g, &q, 1.0, &psi)?;
    bound_row("iti_subspace_cost_nonnegative", -iti.subspace_cost, 1e-9 * iti.total_excess.abs());
    bound_row("iti_within_cost_nonnegative", -iti.within_cost, 1e-9 * iti.total_excess.abs());
    bound_row(
        "iti_terms_sum",
        (iti.subspace_cost + iti.within_cost - iti.total_excess).abs(),
        1e-9 * iti.total_excess.abs().max(second_order_cost(&g, &optimal_direction(&g, &q, 1.0)?)),
    );

    // Tikhonov bias at three regularization strengths.
    let med = g.median_positive().unwrap_or(1.0);
    for c in [1e-2, 1.0, 1e2] {
        let (measured, b) = tikhonov_bias(&g, &q, c * med)?;
        bound_row("tikhonov_bias", measured, b);
    }

    // CAA under a shared-covariance Gaussian model.
    let mu_minus = gaussian_vector(&mut rng, d);
    let mu_plus = &mu_minus + gaussian_vector(&mut rng, d);
    let caa = caa_gaussian_identity(&sigma, &mu_plus, &mu_minus, 1.0)?;
    bound_row("caa_identity", caa.max_abs_diff, 1e-10 * caa.delta_caa.amax());

    Ok(DrawOutcome { costs, bounds })
}

/// Over `n_metrics` random metrics (every other one rank-deficient by one),
/// checks that no feasible `δ = δ* + P z` costs less than `δ*`.
pub fn optimality_sweep(
    hash: &str,
    base_seed: u64,
    d: usize,
    n_metrics: usize,
    samples: usize,
    log_spread: f64,
) -> fisher_steer::Result<Vec<OptimalityRow>> {
    (0..n_metrics)
        .into_par_iter()
        .map(|m| {
            let seed = case_seed(base_seed, "framework/optimality", d, m);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rank = if m % 2 == 0 { d } else { d - 1 };
            let gm = random_metric(&mut rng, d, log_spread, rank);
            let g = PullbackMetric64::from_matrix(gm.clone())?;
            let q = &gm * gaussian_vector(&mut rng, d);
            let rho: f64 = rng.random_range(0.1..2.0);
            let star = optimal_direction(&g, &q, rho)?;
            let c_star = star.dot(&(&gm * &star));
            let qq = q.norm_squared();
            let mut min_ratio = f64::INFINITY;
            let mut beaten = 0;
            for _ in 0..samples {
                let z = gaussian_vector(&mut rng, d);
                let z = &z - &q * (q.dot(&z) / qq);
                let scale = 10f64.powf(rng.random_range(-6.0..2.0)) * star.norm() / z.norm().max(f64::MIN_POSITIVE);
                let delta = &star + z * scale;
                let c = delta.dot(&(&gm * &delta));
                let ratio = c / c_star;
                min_ratio = min_ratio.min(ratio);
                if ratio < 1.0 - 1e-12 {
                    beaten += 1;
                }
            }
            Ok(OptimalityRow {
                config_hash: hash.to_string(),
                seed,
                d,
                metric: m,
                rank,
                samples,
                optimal_cost: c_star,
                min_cost_ratio: min_ratio,
                beaten,
            })
        })
        .collect()
}

pub fn witness_rows(hash: &str) -> fisher_steer::Result<(Vec<WitnessRow>, bool, bool)> {
    let (eps, k, rho) = (0.5, 10.0, 1.0);
    let w = ranking_counterexample(eps, k, rho)?;
    let row = |witness, quantity, value, expected| WitnessRow { config_hash: hash.to_string(), witness, quantity, value, expected };
    let mut rows = vec![
        row("ranking_invalid", "eps", eps, None),
        row("ranking_invalid", "K", k, None),
        row("ranking_invalid", "rho", rho, None),
        row("ranking_invalid", "norm_a", w.norm_a, Some(eps)),
        row("ranking_invalid", "norm_b", w.norm_b, Some(k - 1.0)),
        row("ranking_invalid", "cost_a", w.cost_a, Some(rho * rho * (1.0 + eps * eps) / 2.0)),
        row("ranking_invalid", "cost_b", w.cost_b, Some(rho * rho / 2.0)),
    ];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    let ranking_ok = w.holds
        && close(w.cost_a, rho * rho * (1.0 + eps * eps) / 2.0)
        && close(w.cost_b, rho * rho / 2.0)
        && close(w.norm_a, eps)
        && close(w.norm_b, k - 1.0);
    let (r_d, eta) = no_universal_lower_witness(eps)?;
    rows.push(row("no_universal_lower", "eps", eps, None));
    rows.push(row("no_universal_lower", "ratio_diagonal", r_d, Some(1.0)));
    rows.push(row("no_universal_lower", "eta", eta, Some(eps)));
    let lower_ok = close(r_d, 1.0) && eta > 0.0;
    Ok((rows, ranking_ok, lower_ok))
}

pub fn run_framework(cfg: &ExperimentConfig) -> anyhow::Result<FrameworkResult> {
    let f = &cfg.framework;
    let hash = cfg.hash();
    let mut cost_rows = Vec::new();
    let mut bound_rows = Vec::new();
    let mut optimality_rows = Vec::new();
    for &d in &f.dims {
        let outcomes: Vec<fisher_steer::Result<DrawOutcome>> = (0..f.n_draws)
            .into_par_iter()
            .map(|i| run_draw(f, &hash, d, i, case_seed(cfg.seed, EXPERIMENT, d, i)))
            .collect();
        for o in outcomes {
            let o = o?;
            cost_rows.extend(o.costs);
            bound_rows.extend(o.bounds);
        }
        optimality_rows.extend(optimality_sweep(&hash, cfg.seed, d, f.optimality_metrics, f.optimality_samples, f.log_spread)?);
    }
    let (witness_rows, ranking_ok, lower_ok) = witness_rows(&hash)?;

    let mut checks = Vec::new();
    let fisher_worst =
        cost_rows.iter().filter(|r| r.method == "fisher").map(|r| (r.ratio - 1.0).abs()).fold(0.0, f64::max);
    checks.push(Check::new("M = G has ratio 1", fisher_worst <= 1e-8, format!("max |R − 1| = {fisher_worst:.3e}")));
    let below_one = cost_rows.iter().filter(|r| r.ratio < 1.0 - 1e-9).count();
    checks.push(Check::new("R ≥ 1", below_one == 0, format!("{below_one} of {} rows below 1", cost_rows.len())));
    let cost_violations = cost_rows.iter().filter(|r| r.bound_holds == Some(false)).count();
    checks.push(Check::new(
        "proxy cost bounds",
        cost_violations == 0,
        format!(
            "{cost_violations} violations in {} bounded rows",
            cost_rows.iter().filter(|r| r.bound_holds.is_some()).count()
        ),
    ));
    let mut kinds: Vec<&'static str> = bound_rows.iter().map(|r| r.check).collect();
    kinds.sort_unstable();
    kinds.dedup();
    for kind in kinds {
        let rows: Vec<&BoundRow> = bound_rows.iter().filter(|r| r.check == kind).collect();
        let bad = rows.iter().filter(|r| !r.holds).count();
        checks.push(Check::new(kind, bad == 0, format!("{bad} violations in {} rows", rows.len())));
    }
    let beaten: usize = optimality_rows.iter().map(|r| r.beaten).sum();
    let worst = optimality_rows.iter().map(|r| r.min_cost_ratio).fold(f64::INFINITY, f64::min);
    checks.push(Check::new(
        "optimal direction unbeaten",
        beaten == 0,
        format!("{beaten} cheaper perturbations; smallest cost ratio {worst:.15}"),
    ));
    checks.push(Check::new("ranking counterexample", ranking_ok, "ε = 0.5, K = 10, ρ = 1"));
    checks.push(Check::new("no universal lower bound witness", lower_ok, "ε = 0.5"));
    Ok(FrameworkResult { cost_rows, bound_rows, witness_rows, optimality_rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_orthogonal(&mut rng, 5);
        assert!((u.transpose() * &u - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_metric_has_requested_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = PullbackMetric64::from_matrix(random_metric(&mut rng, 6, 4.0, 5)).unwrap();
        assert_eq!(g.rank(), 5);
    }

    #[test]
    fn off_diagonal_perturbation_has_requested_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = off_diagonal_perturbation(&mut rng, 4, 0.3);
        assert!(e.diagonal().amax() == 0.0);
        assert!((fisher_steer::linalg::spectral_norm(&e) - 0.3).abs() < 1e-12);
    }
}
