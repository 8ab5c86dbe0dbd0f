//! Iterative Fisher steering against Euclidean and fixed-direction baselines
//! on a small synthetic pre-LN network.
//!
//! The concept is a set of token pairs planted in the unembedding table. In
//! the decomposable regime every target row equals its base row plus one
//! shared difference vector, so the pair log-odds agree at every `λ`; the
//! heterogeneous regime perturbs the difference per pair. Contexts are random
//! layer-`ℓ` hidden states whose starting concept probability lies below the
//! first target. Each context calibrates `η` on the Euclidean direction; all
//! methods inherit it. Off-target KL is compared at exact target crossings.

use std::collections::BTreeMap;

use fisher_steer::softmax::ConceptSpec;
use fisher_steer::steering::{
    calibrate_step, concept_probability_at, euclidean_steer, fixed_direction_steer, iterative_fisher_steer,
    make_baseline_directions, record_crossings, BaselineDirections, CalibrationStatus, MethodTag, MetricChoice,
    TraceStatus,
};
use fisher_steer::transformer::{BlockKind, NetworkSpec, Nonlinearity};
use fisher_steer::{ConceptSpec64, LayeredMap, SteeringConfig, SteeringTrace, ToyNetwork64, UnembeddingTable64};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConceptRegime, ExperimentConfig, SteeringExperimentConfig};
use crate::output::Check;
use crate::seeds::case_seed;
use crate::stats::{median, win_rate};

pub const EXPERIMENT: &str = "steer";

/// Methods compared against Fisher, in output order.
pub const METHODS: [MethodTag; 6] = [
    MethodTag::Fisher,
    MethodTag::Euclidean,
    MethodTag::Caa,
    MethodTag::ActAdd,
    MethodTag::Iti,
    MethodTag::FisherIdentity,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRow {
    pub config_hash: String,
    pub seed: u64,
    pub regime: ConceptRegime,
    pub method: &'static str,
    pub context_id: usize,
    pub layer: usize,
    pub step: usize,
    pub p_w: f64,
    pub total_kl: f64,
    /// Empty when the merged distributions have mismatched support.
    pub off_target_kl: Option<f64>,
    pub cf_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingRow {
    pub config_hash: String,
    pub seed: u64,
    pub regime: ConceptRegime,
    pub method: &'static str,
    pub context_id: usize,
    pub layer: usize,
    pub target: f64,
    pub p_w_exact: f64,
    pub total_kl: f64,
    pub off_target_kl: Option<f64>,
    pub cf_mass: f64,
    pub bisection_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextRow {
    pub config_hash: String,
    pub seed: u64,
    pub regime: ConceptRegime,
    pub context_id: usize,
    pub base_p_w: f64,
    pub calibration: CalibrationStatus,
    pub eta: f64,
    pub calibrated_final_p_w: f64,
    pub fisher_status: String,
}

/// Off-target KL ratio `baseline / reference` at each target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub config_hash: String,
    pub seed: u64,
    pub regime: ConceptRegime,
    pub baseline: String,
    pub reference: &'static str,
    pub target: f64,
    pub n: usize,
    pub median_ratio: Option<f64>,
    pub win_rate: Option<f64>,
    pub binomial_p: Option<f64>,
}

/// Fraction of calibrated contexts whose path crosses each target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub config_hash: String,
    pub seed: u64,
    pub regime: ConceptRegime,
    pub method: &'static str,
    pub target: f64,
    pub reached: usize,
    pub n_contexts: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct SteeringResult {
    pub path_rows: Vec<PathRow>,
    pub crossing_rows: Vec<CrossingRow>,
    pub context_rows: Vec<ContextRow>,
    pub comparison_rows: Vec<ComparisonRow>,
    pub coverage_rows: Vec<CoverageRow>,
    pub checks: Vec<Check>,
    pub n_calibrated: usize,
}

/// Network with the concept planted in its unembedding table.
pub fn build_setup(
    s: &SteeringExperimentConfig,
    regime: ConceptRegime,
    seed: u64,
) -> fisher_steer::Result<(ToyNetwork64, ConceptSpec64)> {
    let spec = NetworkSpec {
        dim: s.dim,
        hidden: s.dim * s.hidden_mult,
        layers: s.layers,
        vocab: s.vocab,
        kind: BlockKind::PreLnMlp,
        nonlinearity: Nonlinearity::GeluTanh,
        weight_scale: s.weight_scale,
        final_ln: true,
        jitter: s.jitter,
    };
    let net: ToyNetwork64 = spec.build(case_seed(seed, "steer/network", s.dim, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, "steer/concept", s.dim, 0));
    let mut gamma = net.table().gamma().clone();
    let shared = DVector::from_fn(s.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut pairs = Vec::with_capacity(s.n_pairs);
    for i in 0..s.n_pairs {
        let (b, t) = (2 * i, 2 * i + 1);
        let mut diff = shared.clone();
        if regime == ConceptRegime::Heterogeneous {
            diff += DVector::from_fn(s.dim, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        }
        let row = gamma.row(b).transpose() + diff;
        gamma.set_row(t, &row.transpose());
        pairs.push((b, t));
    }
    let net = net.with_table(UnembeddingTable64::new(gamma)?)?;
    let concept = ConceptSpec::new(pairs, s.vocab)?;
    Ok((net, concept))
}

fn draw_hidden(d: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Starting contexts: the first `n_contexts` candidate states with
/// `P^W ∈ (0.01, first target)`.
pub fn select_contexts(
    net: &ToyNetwork64,
    concept: &ConceptSpec64,
    s: &SteeringExperimentConfig,
    seed: u64,
) -> Vec<(usize, u64, DVector<f64>)> {
    let hi = s.targets.first().copied().unwrap_or(0.5);
    let mut out = Vec::with_capacity(s.n_contexts);
    for c in 0..s.n_contexts * 200 {
        let cs = case_seed(seed, "steer/context", s.dim, c);
        let h = draw_hidden(s.dim, s.input_scale, cs);
        if let Ok(p) = concept_probability_at(net, s.layer, &h, concept) {
            if p > 0.01 && p < hi {
                out.push((c, cs, h));
                if out.len() == s.n_contexts {
                    break;
                }
            }
        }
    }
    out
}

/// Contrastive contexts: from `4n` random states, the `n` with highest and the
/// `n` with lowest concept probability.
pub fn contrastive_sets(
    net: &ToyNetwork64,
    concept: &ConceptSpec64,
    s: &SteeringExperimentConfig,
    seed: u64,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut scored: Vec<(f64, usize, DVector<f64>)> = (0..4 * s.n_contrast)
        .filter_map(|i| {
            let h = draw_hidden(s.dim, s.input_scale, case_seed(seed, "steer/contrast", s.dim, i));
            concept_probability_at(net, s.layer, &h, concept).ok().map(|p| (p, i, h))
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = s.n_contrast.min(scored.len() / 2);
    let mut negative: Vec<(usize, DVector<f64>)> = scored[..n].iter().map(|x| (x.1, x.2.clone())).collect();
    let mut positive: Vec<(usize, DVector<f64>)> = scored[scored.len() - n..].iter().map(|x| (x.1, x.2.clone())).collect();
    negative.sort_by_key(|x| x.0);
    positive.sort_by_key(|x| x.0);
    (positive.into_iter().map(|x| x.1).collect(), negative.into_iter().map(|x| x.1).collect())
}

pub fn steering_config(s: &SteeringExperimentConfig) -> SteeringConfig<f64> {
    SteeringConfig {
        reg_constant: s.reg_constant,
        step_size: 0.1,
        max_steps: s.max_steps,
        sign_probe_eps: None,
        targets: s.targets.clone(),
        bisection_tol: s.bisection_tol,
        covector_mode: None,
        metric: MetricChoice::Pullback,
        jacobian_refresh: None,
        calibration_window: s.calibration_window,
    }
}

struct ContextOutcome {
    context: ContextRow,
    traces: Vec<SteeringTrace<f64>>,
}

struct Lineage<'a> {
    hash: &'a str,
    regime: ConceptRegime,
}

fn run_context(
    net: &ToyNetwork64,
    concept: &ConceptSpec64,
    base: &BaselineDirections<f64>,
    s: &SteeringExperimentConfig,
    lineage: &Lineage<'_>,
    (id, seed, h0): &(usize, u64, DVector<f64>),
) -> fisher_steer::Result<ContextOutcome> {
    let cfg = steering_config(s);
    let layer = s.layer;
    let base_p = concept_probability_at(net, layer, h0, concept)?;
    let cal = calibrate_step(net, layer, h0, concept, &cfg)?;
    let mut context = ContextRow {
        config_hash: lineage.hash.to_string(),
        seed: *seed,
        regime: lineage.regime,
        context_id: *id,
        base_p_w: base_p,
        calibration: cal.status,
        eta: cal.eta,
        calibrated_final_p_w: cal.final_p_w,
        fisher_status: String::new(),
    };
    if cal.status != CalibrationStatus::Calibrated {
        return Ok(ContextOutcome { context, traces: Vec::new() });
    }
    let run = SteeringConfig { sign_probe_eps: Some(s.sign_probe_fraction * cal.eta), ..cfg.with_step_size(cal.eta) };
    let identity = SteeringConfig { metric: MetricChoice::Identity, ..run.clone() };
    let mut traces = vec![
        iterative_fisher_steer(net, layer, h0, concept, &run)?,
        euclidean_steer(net, layer, h0, concept, &run)?,
    ];
    for (tag, v) in [(MethodTag::Caa, &base.caa), (MethodTag::ActAdd, &base.actadd), (MethodTag::Iti, &base.iti)] {
        if v.norm() > 0.0 {
            traces.push(fixed_direction_steer(net, layer, h0, concept, v, &run, tag)?);
        }
    }
    traces.push(iterative_fisher_steer(net, layer, h0, concept, &identity)?);
    for t in traces.iter_mut() {
        record_crossings(net, concept, t, &run.targets, run.bisection_tol)?;
    }
    context.fisher_status = match &traces[0].status {
        TraceStatus::Complete => "complete".into(),
        TraceStatus::Stagnated => "stagnated".into(),
        TraceStatus::Truncated(m) => format!("truncated: {m}"),
    };
    Ok(ContextOutcome { context, traces })
}

fn off_kl(tr: &SteeringTrace<f64>, target: f64) -> Option<f64> {
    tr.crossing(target).and_then(|c| c.off_target_kl.finite())
}

fn compare(lineage: &Lineage<'_>, seed: u64, baseline: &str, reference: &'static str, target: f64, pairs: &[(f64, f64)]) -> ComparisonRow {
    let ratios: Vec<f64> = pairs.iter().map(|(b, r)| b / r).collect();
    // A win is a strictly smaller off-target KL for the reference method.
    let wr = win_rate(pairs);
    ComparisonRow {
        config_hash: lineage.hash.to_string(),
        seed,
        regime: lineage.regime,
        baseline: baseline.into(),
        reference,
        target,
        n: pairs.len(),
        median_ratio: median(&ratios),
        win_rate: wr.map(|w| w.0),
        binomial_p: wr.map(|w| w.1),
    }
}

fn regime_name(r: ConceptRegime) -> &'static str {
    match r {
        ConceptRegime::Decomposable => "decomposable",
        ConceptRegime::Heterogeneous => "heterogeneous",
    }
}

fn run_regime(cfg: &ExperimentConfig, regime: ConceptRegime, out: &mut SteeringResult) -> anyhow::Result<()> {
    let s = &cfg.steering;
    let hash = cfg.hash();
    let lineage = Lineage { hash: &hash, regime };
    let name = regime_name(regime);
    let (net, concept) = build_setup(s, regime, cfg.seed)?;
    let (pos, neg) = contrastive_sets(&net, &concept, s, cfg.seed);
    let base = make_baseline_directions(&net, s.layer, &concept, &pos, &neg)?;
    if base.caa_degenerate {
        log::warn!("{name}: contrastive means coincide; the CAA direction is degenerate");
    }
    let contexts = select_contexts(&net, &concept, s, cfg.seed);
    if contexts.len() < s.n_contexts {
        log::warn!("{name}: only {} of {} requested contexts start below the first target", contexts.len(), s.n_contexts);
    }
    let outcomes: Vec<fisher_steer::Result<ContextOutcome>> =
        contexts.par_iter().map(|c| run_context(&net, &concept, &base, s, &lineage, c)).collect();

    // per calibrated context: method → trace
    let mut calibrated: Vec<BTreeMap<&'static str, SteeringTrace<f64>>> = Vec::new();
    let mut n_contexts = 0;
    for o in outcomes {
        let o = o?;
        let (id, seed) = (o.context.context_id, o.context.seed);
        for tr in &o.traces {
            for st in &tr.steps {
                out.path_rows.push(PathRow {
                    config_hash: hash.clone(),
                    seed,
                    regime,
                    method: tr.method.as_str(),
                    context_id: id,
                    layer: tr.layer,
                    step: st.step,
                    p_w: st.p_w,
                    total_kl: st.total_kl,
                    off_target_kl: st.off_target_kl.finite(),
                    cf_mass: st.cf_mass,
                });
            }
            for c in &tr.crossings {
                out.crossing_rows.push(CrossingRow {
                    config_hash: hash.clone(),
                    seed,
                    regime,
                    method: tr.method.as_str(),
                    context_id: id,
                    layer: tr.layer,
                    target: c.target,
                    p_w_exact: c.p_w,
                    total_kl: c.total_kl,
                    off_target_kl: c.off_target_kl.finite(),
                    cf_mass: c.cf_mass,
                    bisection_iters: c.bisection_iters,
                });
            }
        }
        if o.context.calibration == CalibrationStatus::Calibrated {
            calibrated.push(o.traces.into_iter().map(|t| (t.method.as_str(), t)).collect());
        }
        out.context_rows.push(o.context);
        n_contexts += 1;
    }

    let n_cal = calibrated.len();
    let asserted = regime == ConceptRegime::Decomposable;
    if asserted {
        out.n_calibrated = n_cal;
        out.checks.push(Check::new(
            format!("{name}: calibrated contexts"),
            n_cal >= s.min_contexts,
            format!("{n_cal} of {n_contexts} contexts calibrated, need ≥ {}", s.min_contexts),
        ));
    }
    let mut mutual_targets = 0;
    for &target in &s.targets {
        for m in METHODS {
            let reached = calibrated.iter().filter(|c| c.get(m.as_str()).is_some_and(|t| t.crossing(target).is_some())).count();
            out.coverage_rows.push(CoverageRow {
                config_hash: hash.clone(),
                seed: cfg.seed,
                regime,
                method: m.as_str(),
                target,
                reached,
                n_contexts: n_cal,
                coverage: if n_cal > 0 { reached as f64 / n_cal as f64 } else { 0.0 },
            });
        }
        let pairs_vs = |baseline: &str, reference: &str| -> Vec<(f64, f64)> {
            calibrated
                .iter()
                .filter_map(|c| Some((off_kl(c.get(baseline)?, target)?, off_kl(c.get(reference)?, target)?)))
                .collect()
        };
        let main = compare(&lineage, cfg.seed, "euclidean", "fisher", target, &pairs_vs("euclidean", "fisher"));
        if main.n > 0 {
            mutual_targets += 1;
            let med = main.median_ratio.unwrap_or(f64::NAN);
            let p = main.binomial_p.unwrap_or(1.0);
            let detail = format!(
                "n = {}, median ratio = {med:.4}, win rate = {:.3}, binomial p = {p:.3e}",
                main.n,
                main.win_rate.unwrap_or(f64::NAN)
            );
            if asserted {
                out.checks.push(Check::new(
                    format!("{name}: Euclidean/Fisher off-target KL at P^W = {target}"),
                    med > 1.0 && p < s.max_binomial_p,
                    detail,
                ));
            } else {
                log::info!("{name} at P^W = {target}: {detail}");
            }
        }
        out.comparison_rows.push(main);
        for baseline in ["caa", "actadd", "iti"] {
            out.comparison_rows.push(compare(&lineage, cfg.seed, baseline, "fisher", target, &pairs_vs(baseline, "fisher")));
        }
        let strongest: Vec<(f64, f64)> = calibrated
            .iter()
            .filter_map(|c| {
                let f = off_kl(c.get("fisher")?, target)?;
                let best = ["caa", "actadd", "iti"].iter().filter_map(|b| off_kl(c.get(b)?, target)).min_by(f64::total_cmp)?;
                Some((best, f))
            })
            .collect();
        out.comparison_rows.push(compare(&lineage, cfg.seed, "strongest_fixed", "fisher", target, &strongest));
        out.comparison_rows.push(compare(
            &lineage,
            cfg.seed,
            "euclidean",
            "fisher_identity",
            target,
            &pairs_vs("euclidean", "fisher_identity"),
        ));
    }
    if asserted {
        out.checks.push(Check::new(
            format!("{name}: mutually reached targets"),
            mutual_targets > 0,
            format!("{mutual_targets} of {} targets reached by both Fisher and Euclidean", s.targets.len()),
        ));
    }
    Ok(())
}

pub fn run_steering_comparison(cfg: &ExperimentConfig) -> anyhow::Result<SteeringResult> {
    let mut out = SteeringResult {
        path_rows: Vec::new(),
        crossing_rows: Vec::new(),
        context_rows: Vec::new(),
        comparison_rows: Vec::new(),
        coverage_rows: Vec::new(),
        checks: Vec::new(),
        n_calibrated: 0,
    };
    for &regime in &cfg.steering.regimes {
        run_regime(cfg, regime, &mut out)?;
    }
    Ok(out)
}
