//! Layerwise geometry of the pullback Fisher metric on small pre-LN networks.
//!
//! For each width, `n_nets` random networks are drawn and `n_inputs` layer-0
//! states per network are propagated. At every layer the spectral report,
//! the one-step recursion residual and the depth bounds are recorded.

use fisher_steer::metric::{depth_bound_check, pullback_fisher, verify_recursion};
use fisher_steer::transformer::{BlockKind, JacobianMethod, NetworkSpec, Nonlinearity};
use fisher_steer::{LayeredMap, ResidualBlock, ToyNetwork, ToyNetwork64};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, GeometryConfig};
use crate::output::Check;
use crate::seeds::case_seed;
use crate::stats::median;

pub const EXPERIMENT: &str = "geometry";

/// Recursion residuals above this fail the run.
pub const RECURSION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub net: usize,
    pub input: usize,
    pub layer: usize,
    pub condition_number: f64,
    pub trace_erank: f64,
    pub entropy_erank: f64,
    pub null_dim: usize,
    pub participation_ratio: f64,
    pub deviation: f64,
    /// Empty at the last layer.
    pub recursion_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub net: usize,
    pub input: usize,
    pub layer: usize,
    pub max_rho: f64,
    pub measured_condition: f64,
    pub condition_bound: Option<f64>,
    pub condition_ok: Option<bool>,
    pub trace_erank: f64,
    pub erank_lower_bound: Option<f64>,
    pub erank_ok: Option<bool>,
}

/// Medians over all networks and inputs of one width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummaryRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub layer: usize,
    pub n: usize,
    pub condition_number: f64,
    pub entropy_erank_fraction: f64,
    pub null_dim: f64,
    pub deviation: f64,
}

/// Median normalized spectrum `λ_i / λ_max` per layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub layer: usize,
    pub index: usize,
    pub normalized_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct GeometryResult {
    pub spectral_rows: Vec<SpectralRow>,
    pub depth_rows: Vec<DepthRow>,
    pub summary_rows: Vec<LayerSummaryRow>,
    pub spectrum_rows: Vec<SpectrumRow>,
    pub checks: Vec<Check>,
}

pub fn network_spec(g: &GeometryConfig, d: usize) -> NetworkSpec {
    NetworkSpec {
        dim: d,
        hidden: d * g.hidden_mult,
        layers: g.layers,
        vocab: d * g.vocab_mult,
        kind: BlockKind::PreLnMlp,
        nonlinearity: Nonlinearity::GeluTanh,
        weight_scale: g.weight_scale,
        final_ln: true,
        jitter: g.jitter,
    }
}

/// Copy of `net` whose residual branches are identically zero.
pub fn zero_block_copy(net: &ToyNetwork64) -> fisher_steer::Result<ToyNetwork64> {
    let blocks: Vec<ResidualBlock<f64>> = net
        .blocks()
        .iter()
        .map(|b| ResidualBlock {
            w_in: b.w_in.map(|_| 0.0),
            b_in: b.b_in.map(|_| 0.0),
            w_out: b.w_out.map(|_| 0.0),
            b_out: b.b_out.map(|_| 0.0),
            ..b.clone()
        })
        .collect();
    ToyNetwork::new(blocks, net.final_ln().cloned(), net.table().clone())
}

struct Trajectory {
    spectral: Vec<SpectralRow>,
    depth: Vec<DepthRow>,
    spectra: Vec<Vec<f64>>,
}

fn trajectory(
    net: &ToyNetwork64,
    h0: &DVector<f64>,
    lineage: (&str, u64, usize, usize, usize),
) -> fisher_steer::Result<Trajectory> {
    let (hash, seed, d, net_id, input) = lineage;
    let depth = net.num_layers();
    let states = net.hidden_states(0, h0)?;
    let mut spectral = Vec::with_capacity(depth + 1);
    let mut spectra = Vec::with_capacity(depth + 1);
    for (layer, h) in states.iter().enumerate() {
        let g = pullback_fisher(net, layer, h)?;
        let r = g.spectral_report()?;
        let residual =
            if layer < depth { Some(verify_recursion(net, layer, h, JacobianMethod::Analytic)?) } else { None };
        let lmax = g.lambda_max();
        spectra.push(g.eigvals().iter().map(|&l| l.max(0.0) / lmax).collect());
        spectral.push(SpectralRow {
            config_hash: hash.to_string(),
            seed,
            d,
            net: net_id,
            input,
            layer,
            condition_number: r.condition_number,
            trace_erank: r.trace_effective_rank,
            entropy_erank: r.entropy_effective_rank,
            null_dim: r.null_dim,
            participation_ratio: r.participation_ratio,
            deviation: r.euclidean_deviation,
            recursion_residual: residual,
        });
    }
    let layers: Vec<usize> = (0..=depth).collect();
    let depth_rows = depth_bound_check(net, h0, &layers)?
        .into_iter()
        .map(|r| DepthRow {
            config_hash: hash.to_string(),
            seed,
            d,
            net: net_id,
            input,
            layer: r.layer,
            max_rho: r.rhos.iter().copied().fold(0.0, f64::max),
            measured_condition: r.measured_condition,
            condition_bound: r.condition_bound,
            condition_ok: r.condition_ok,
            trace_erank: r.trace_erank,
            erank_lower_bound: r.erank_lower_bound,
            erank_ok: r.erank_ok,
        })
        .collect();
    Ok(Trajectory { spectral, depth: depth_rows, spectra })
}

pub fn run_geometry(cfg: &ExperimentConfig) -> anyhow::Result<GeometryResult> {
    let g = &cfg.geometry;
    let hash = cfg.hash();
    let mut result = GeometryResult {
        spectral_rows: Vec::new(),
        depth_rows: Vec::new(),
        summary_rows: Vec::new(),
        spectrum_rows: Vec::new(),
        checks: Vec::new(),
    };
    let mut zero_block_identical = true;
    for &d in &g.dims {
        let spec = network_spec(g, d);
        let cases: Vec<(usize, usize)> = (0..g.n_nets).flat_map(|n| (0..g.n_inputs).map(move |i| (n, i))).collect();
        let nets: Vec<ToyNetwork64> =
            (0..g.n_nets).map(|n| spec.build(case_seed(cfg.seed, "geometry/network", d, n))).collect::<Result<_, _>>()?;
        let trajectories: Vec<fisher_steer::Result<Trajectory>> = cases
            .par_iter()
            .map(|&(n, i)| {
                let s = case_seed(cfg.seed, "geometry/input", d, n * g.n_inputs + i);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let h0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * g.input_scale);
                trajectory(&nets[n], &h0, (&hash, s, d, n, i))
            })
            .collect();
        let mut spectra: Vec<Vec<Vec<f64>>> = vec![Vec::new(); g.layers + 1];
        for t in trajectories {
            let t = t?;
            for (l, s) in t.spectra.into_iter().enumerate() {
                spectra[l].push(s);
            }
            result.spectral_rows.extend(t.spectral);
            result.depth_rows.extend(t.depth);
        }

        for layer in 0..=g.layers {
            let rows: Vec<&SpectralRow> = result.spectral_rows.iter().filter(|r| r.d == d && r.layer == layer).collect();
            let col = |f: &dyn Fn(&SpectralRow) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            result.summary_rows.push(LayerSummaryRow {
                config_hash: hash.clone(),
                seed: cfg.seed,
                d,
                layer,
                n: rows.len(),
                condition_number: col(&|r| r.condition_number),
                entropy_erank_fraction: col(&|r| r.entropy_erank / d as f64),
                null_dim: col(&|r| r.null_dim as f64),
                deviation: col(&|r| r.deviation),
            });
            for index in 0..d {
                let vals: Vec<f64> = spectra[layer].iter().map(|s| s[index]).collect();
                result.spectrum_rows.push(SpectrumRow {
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                    d,
                    layer,
                    index,
                    normalized_eigenvalue: median(&vals).unwrap_or(f64::NAN),
                });
            }
        }
        let kappas: Vec<f64> = result.summary_rows.iter().filter(|r| r.d == d).map(|r| r.condition_number).collect();
        let rising = kappas.windows(2).filter(|w| w[1] > w[0]).count();
        log::info!("d = {d}: median κ(G) by layer {kappas:?}; {rising} increases with depth");

        let zero = zero_block_copy(&nets[0])?;
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed, "geometry/zero-block", d, 0));
        let h0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * g.input_scale);
        let t = trajectory(&zero, &h0, (&hash, 0, d, 0, 0))?;
        let first = &t.spectral[0];
        zero_block_identical &= t.spectral.iter().all(|r| {
            let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
            r.null_dim == first.null_dim
                && rel(r.condition_number, first.condition_number)
                && rel(r.trace_erank, first.trace_erank)
                && rel(r.entropy_erank, first.entropy_erank)
                && rel(r.deviation, first.deviation)
        });
    }

    let worst_residual = result.spectral_rows.iter().filter_map(|r| r.recursion_residual).fold(0.0, f64::max);
    result.checks.push(Check::new(
        "recursion residual",
        worst_residual <= RECURSION_TOL,
        format!("max ‖G − AᵀG'A‖/‖G‖ = {worst_residual:.3e} over {} states", result.spectral_rows.len()),
    ));
    let applicable: Vec<&DepthRow> = result.depth_rows.iter().filter(|r| r.condition_ok.is_some()).collect();
    let violations = applicable.iter().filter(|r| r.condition_ok == Some(false)).count();
    result.checks.push(Check::new(
        "condition-number depth bound",
        violations == 0,
        format!(
            "{violations} violations in {} rows with all ρ_k < 1 ({} vacuous rows)",
            applicable.len(),
            result.depth_rows.len() - applicable.len()
        ),
    ));
    let erank_violations = result.depth_rows.iter().filter(|r| r.erank_ok == Some(false)).count();
    result.checks.push(Check::new(
        "effective-rank bound",
        erank_violations == 0,
        format!("{erank_violations} violations in {} rows", result.depth_rows.iter().filter(|r| r.erank_ok.is_some()).count()),
    ));
    let no_kernel = result.spectral_rows.iter().filter(|r| r.null_dim == 0).count();
    result.checks.push(Check::new(
        "LayerNorm kernel visible at every layer",
        no_kernel == 0,
        format!("{no_kernel} of {} states with null_dim = 0", result.spectral_rows.len()),
    ));
    result.checks.push(Check::new(
        "zero blocks give identical reports",
        zero_block_identical,
        "residual branches zeroed on the first network of each width",
    ));
    Ok(result)
}
