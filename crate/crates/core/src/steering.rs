//! Steering directions and the iterative steering loop.
//!
//! - closed form: [`optimal_direction`], [`regularized_direction`], [`tikhonov_solve`]
//! - covectors: [`concept_gradient_covector`], [`probe_covector`]
//! - loops: [`iterative_fisher_steer`], [`euclidean_steer`], [`fixed_direction_steer`]
//! - evaluation: [`calibrate_step`], [`bisect_crossing`], [`record_crossings`]
//! - baselines: [`make_baseline_directions`]
//! - value-approximation radius: [`critical_radius`], [`estimate_curvature_constants`]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metric::PullbackMetric;
use crate::softmax::{
    concept_probability, counterfactual_mass, off_target_kl, ConceptSpec, CovectorMode, KlValue, UnembeddingTable,
};
use crate::transformer::{JacobianMethod, LayeredMap};
use crate::{lit, to_f64, Scalar};

// ---------------------------------------------------------------------------
// Closed-form directions
// ---------------------------------------------------------------------------

/// Relative tolerance on `‖q − Π_{Range(G)} q‖ / ‖q‖`.
pub const RANGE_TOL: f64 = 1e-6;

/// `δ* = ρ G⁺q / (qᵀG⁺q)`.
pub fn optimal_direction<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>, rho: T) -> Result<DVector<T>> {
    check_covector(metric, q)?;
    let qn = q.norm();
    let residual = metric.range_residual(q);
    if residual > lit::<T>(RANGE_TOL) * qn {
        return Err(Error::UnreachableConcept { residual: to_f64(residual / qn) });
    }
    let x = metric.pinv_apply(q);
    let s = q.dot(&x);
    if !(s > T::zero()) {
        return Err(Error::DegenerateMetric(format!("qᵀG⁺q = {:e}", to_f64(s))));
    }
    Ok(x * (rho / s))
}

fn check_covector<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>) -> Result<()> {
    if q.len() != metric.dim() {
        return Err(Error::invalid(format!("covector of length {}, metric of size {}", q.len(), metric.dim())));
    }
    if !(q.norm() > T::zero()) || !crate::linalg::is_finite_vec(q) {
        return Err(Error::invalid("covector must be finite and nonzero"));
    }
    Ok(())
}

/// `(G + αI)⁻¹ q` through the eigendecomposition; negative eigenvalue noise is
/// clamped to zero.
pub fn tikhonov_solve<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>, alpha: T) -> Result<DVector<T>> {
    check_covector(metric, q)?;
    if !(alpha > T::zero()) {
        return Err(Error::invalid("Tikhonov shift must be positive"));
    }
    let coeffs = metric.eigvecs().transpose() * q;
    let scaled = DVector::from_iterator(
        coeffs.len(),
        coeffs.iter().zip(metric.eigvals().iter()).map(|(&c, &l)| c / (l.max(T::zero()) + alpha)),
    );
    Ok(metric.eigvecs() * scaled)
}

/// Unit vector along `(G + αI)⁻¹q` with `α = c · λ_med`.
pub fn regularized_direction<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>, c: T) -> Result<DVector<T>> {
    if !(c > T::zero()) {
        return Err(Error::invalid("regularization constant must be positive"));
    }
    let med = metric
        .median_positive()
        .ok_or_else(|| Error::DegenerateMetric("no positive eigenvalue".into()))?;
    let x = tikhonov_solve(metric, q, c * med)?;
    Ok(x.normalize())
}

/// `(‖(G+αI)⁻¹q − G⁺q‖, α/(λ_r+α) · ‖G⁺q‖)` with `λ_r` the smallest positive eigenvalue.
pub fn tikhonov_bias<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>, alpha: T) -> Result<(T, T)> {
    let lr = metric
        .lambda_min_positive()
        .ok_or_else(|| Error::DegenerateMetric("no positive eigenvalue".into()))?;
    let exact = metric.pinv_apply(q);
    let measured = (tikhonov_solve(metric, q, alpha)? - &exact).norm();
    Ok((measured, alpha / (lr + alpha) * exact.norm()))
}

// ---------------------------------------------------------------------------
// Covectors
// ---------------------------------------------------------------------------

/// `P^W(1)` at the output of `f^{(layer)}(h)`.
pub fn concept_probability_at<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    concept: &ConceptSpec<T>,
) -> Result<T> {
    let lambda = net.forward_from(layer, h)?;
    concept_probability(&net.table().distribution(&lambda)?.probs, concept)
}

/// `∇_λ P^W(1) = (S₀ Σ_{T₁} p_y γ_y − S₁ Σ_{T₀} p_y γ_y) / S²`.
pub fn concept_gradient_lambda<T: Scalar>(
    table: &UnembeddingTable<T>,
    lambda: &DVector<T>,
    concept: &ConceptSpec<T>,
) -> Result<DVector<T>> {
    let probs = table.distribution(lambda)?.probs;
    concept_probability(&probs, concept)?;
    let (s0, s1) = concept.pair_masses(&probs);
    let mut m0 = DVector::zeros(table.dim());
    let mut m1 = DVector::zeros(table.dim());
    for &(b, t) in concept.pairs() {
        m0 += table.row(b) * probs[b];
        m1 += table.row(t) * probs[t];
    }
    let s = s0 + s1;
    Ok((m1 * s0 - m0 * s1) / (s * s))
}

/// `∇_h P^W(1)` at `h`.
pub fn concept_gradient_covector<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    concept: &ConceptSpec<T>,
    method: JacobianMethod,
) -> Result<DVector<T>> {
    match method {
        JacobianMethod::Analytic => {
            let lambda = net.forward_from(layer, h)?;
            let g = concept_gradient_lambda(net.table(), &lambda, concept)?;
            let j = net.jacobian_from(layer, h, JacobianMethod::Analytic)?;
            Ok(j.transpose() * g)
        }
        JacobianMethod::CentralDiff => {
            net.check_input(layer, h)?;
            let jac = crate::transformer::central_diff_jacobian(h, |x| {
                Ok(DVector::from_element(1, concept_probability_at(net, layer, x, concept)?))
            })?;
            Ok(jac.row(0).transpose())
        }
    }
}

/// `q = Jᵀβ_W`.
pub fn probe_covector<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    beta: &DVector<T>,
) -> Result<DVector<T>> {
    if beta.len() != net.dim() {
        return Err(Error::invalid("probe width does not match the model"));
    }
    Ok(net.jacobian_from(layer, h, JacobianMethod::Analytic)?.transpose() * beta)
}

fn steering_covector<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    concept: &ConceptSpec<T>,
    mode: CovectorMode,
) -> Result<DVector<T>> {
    match mode {
        CovectorMode::ConceptProbGradient => concept_gradient_covector(net, layer, h, concept, JacobianMethod::Analytic),
        CovectorMode::LinearProbe => {
            let probe = concept
                .probe
                .as_ref()
                .ok_or_else(|| Error::invalid("linear-probe covector requested but the concept has no probe"))?;
            probe_covector(net, layer, h, &probe.weight)
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and traces
// ---------------------------------------------------------------------------

/// Metric used inside the Fisher loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    #[default]
    Pullback,
    /// `G_t = I`; reduces the Fisher loop to normalized gradient ascent.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringConfig<T: Scalar> {
    /// `c` in `α = c · λ_med`.
    pub reg_constant: T,
    /// `η`.
    pub step_size: T,
    /// `T`.
    pub max_steps: usize,
    /// Sign-probe step; `None` means `1e-4 · η`.
    pub sign_probe_eps: Option<T>,
    pub targets: Vec<T>,
    pub bisection_tol: T,
    /// Overrides the concept's covector mode when set.
    pub covector_mode: Option<CovectorMode>,
    pub metric: MetricChoice,
    /// Recompute `J` every `k` steps; `None` keeps `J₀` frozen.
    pub jacobian_refresh: Option<usize>,
    /// Calibration acceptance window for the final Euclidean `P^W`.
    pub calibration_window: (T, T),
}

impl<T: Scalar> Default for SteeringConfig<T> {
    fn default() -> Self {
        Self {
            reg_constant: T::one(),
            step_size: lit(0.1),
            max_steps: 30,
            sign_probe_eps: None,
            targets: [0.3, 0.5, 0.7, 0.9].into_iter().map(lit).collect(),
            bisection_tol: lit(1e-3),
            covector_mode: None,
            metric: MetricChoice::Pullback,
            jacobian_refresh: None,
            calibration_window: (lit(0.9), lit(0.92)),
        }
    }
}

impl<T: Scalar> SteeringConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg_constant > T::zero()) || !(self.step_size > T::zero()) {
            return Err(Error::invalid("reg_constant and step_size must be positive"));
        }
        if self.targets.iter().any(|&t| !(t > T::zero() && t < T::one())) {
            return Err(Error::invalid("targets must lie in (0, 1)"));
        }
        if self.targets.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("targets must be strictly increasing"));
        }
        if !(self.bisection_tol > T::zero()) {
            return Err(Error::invalid("bisection_tol must be positive"));
        }
        if matches!(self.jacobian_refresh, Some(0)) {
            return Err(Error::invalid("jacobian_refresh interval must be at least 1"));
        }
        let (lo, hi) = self.calibration_window;
        if !(lo > T::zero() && lo < hi && hi <= T::one()) {
            return Err(Error::invalid("calibration window must satisfy 0 < lo < hi ≤ 1"));
        }
        Ok(())
    }

    pub fn probe_eps(&self) -> T {
        self.sign_probe_eps.unwrap_or(self.step_size * lit::<T>(1e-4))
    }

    pub fn with_step_size(&self, eta: T) -> Self {
        Self { step_size: eta, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Fisher,
    Euclidean,
    Caa,
    ActAdd,
    Iti,
    /// Fisher loop with the metric forced to the identity.
    FisherIdentity,
    Fixed,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Fisher => "fisher",
            MethodTag::Euclidean => "euclidean",
            MethodTag::Caa => "caa",
            MethodTag::ActAdd => "actadd",
            MethodTag::Iti => "iti",
            MethodTag::FisherIdentity => "fisher_identity",
            MethodTag::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceStatus {
    Complete,
    /// The covector vanished.
    Stagnated,
    /// A step raised an error; the message is kept.
    Truncated(String),
}

/// Output metrics at one point of a steering path, relative to the start.
#[derive(Debug, Clone)]
pub struct StepRecord<T: Scalar> {
    pub step: usize,
    pub h: DVector<T>,
    pub lambda: DVector<T>,
    pub p_w: T,
    /// `KL(P₀ ‖ P_t)`.
    pub total_kl: T,
    pub off_target_kl: KlValue<T>,
    /// Counterfactual mass relative to the start.
    pub cf_mass: T,
}

#[derive(Debug, Clone)]
pub struct CrossingRecord<T: Scalar> {
    pub target: T,
    /// Index `t` of the segment `[h_t, h_{t+1}]` holding the crossing.
    pub segment: usize,
    pub h: DVector<T>,
    pub p_w: T,
    pub total_kl: T,
    pub off_target_kl: KlValue<T>,
    pub cf_mass: T,
    pub bisection_iters: usize,
}

#[derive(Debug, Clone)]
pub struct SteeringTrace<T: Scalar> {
    pub method: MethodTag,
    pub layer: usize,
    pub base_probs: DVector<T>,
    pub steps: Vec<StepRecord<T>>,
    pub crossings: Vec<CrossingRecord<T>>,
    pub status: TraceStatus,
}

impl<T: Scalar> SteeringTrace<T> {
    pub fn final_p_w(&self) -> T {
        self.steps.last().expect("trace has at least the initial state").p_w
    }

    pub fn crossing(&self, target: T) -> Option<&CrossingRecord<T>> {
        self.crossings.iter().find(|c| c.target == target)
    }

    pub fn base(&self) -> &StepRecord<T> {
        &self.steps[0]
    }
}

/// Evaluates every trace metric at `h`, relative to `base`.
pub fn evaluate_point<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    concept: &ConceptSpec<T>,
    base: Option<(&DVector<T>, &DVector<T>)>,
    step: usize,
) -> Result<StepRecord<T>> {
    let lambda = net.forward_from(layer, h)?;
    let probs = net.table().distribution(&lambda)?.probs;
    let p_w = concept_probability(&probs, concept)?;
    let (total_kl, off, cf) = match base {
        None => (T::zero(), KlValue::Finite(T::zero()), T::one()),
        Some((lambda0, probs0)) => {
            let total = net.table().kl_divergence(lambda0, &lambda)?;
            let off = off_target_kl(probs0, &probs, concept)?;
            let cf0 = counterfactual_mass(probs0, concept);
            (total, off, counterfactual_mass(&probs, concept) / cf0)
        }
    };
    Ok(StepRecord { step, h: h.clone(), lambda, p_w, total_kl, off_target_kl: off, cf_mass: cf })
}

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

enum Rule<'a, T: Scalar> {
    Fisher { j: DMatrix<T> },
    Euclidean,
    Fixed(&'a DVector<T>),
}

fn tiny<T: Scalar>() -> T {
    lit(1e-300)
}

fn run_loop<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h0: &DVector<T>,
    concept: &ConceptSpec<T>,
    cfg: &SteeringConfig<T>,
    mut rule: Rule<'_, T>,
    method: MethodTag,
) -> Result<SteeringTrace<T>> {
    let first = evaluate_point(net, layer, h0, concept, None, 0)?;
    let base_lambda = first.lambda.clone();
    let base_probs = net.table().distribution(&base_lambda)?.probs;
    let mode = cfg.covector_mode.unwrap_or(concept.covector_mode);
    let eps = cfg.probe_eps();
    let mut trace = SteeringTrace {
        method,
        layer,
        base_probs: base_probs.clone(),
        steps: vec![first],
        crossings: Vec::new(),
        status: TraceStatus::Complete,
    };
    let mut fixed_sign: Option<T> = None;

    for t in 0..cfg.max_steps {
        let current = trace.steps.last().expect("non-empty");
        let (h, p_now, lambda) = (current.h.clone(), current.p_w, current.lambda.clone());
        let attempt = (|| -> Result<Option<DVector<T>>> {
            let unit = match &mut rule {
                Rule::Fixed(v) => v.normalize(),
                Rule::Euclidean | Rule::Fisher { .. } => {
                    let q = steering_covector(net, layer, &h, concept, mode)?;
                    if !(q.norm() > tiny()) {
                        return Ok(None);
                    }
                    match &mut rule {
                        Rule::Fisher { j } => {
                            if let Some(k) = cfg.jacobian_refresh {
                                if t > 0 && t % k == 0 {
                                    *j = net.jacobian_from(layer, &h, JacobianMethod::Analytic)?;
                                }
                            }
                            let g = match cfg.metric {
                                MetricChoice::Pullback => {
                                    let fisher = net.table().fisher_matrix(&lambda, None)?;
                                    j.transpose() * fisher * &*j
                                }
                                MetricChoice::Identity => DMatrix::identity(h.len(), h.len()),
                            };
                            let metric = PullbackMetric::from_matrix(g)?;
                            regularized_direction(&metric, &q, cfg.reg_constant)?
                        }
                        _ => q.normalize(),
                    }
                }
            };
            let sign = match (&rule, fixed_sign) {
                (Rule::Fixed(_), Some(s)) => s,
                _ => {
                    let probe = concept_probability_at(net, layer, &(&h + &unit * eps), concept)?;
                    let s = if probe < p_now { -T::one() } else { T::one() };
                    if matches!(rule, Rule::Fixed(_)) {
                        fixed_sign = Some(s);
                    }
                    s
                }
            };
            Ok(Some(&h + unit * (sign * cfg.step_size)))
        })();
        match attempt {
            Ok(None) => {
                trace.status = TraceStatus::Stagnated;
                break;
            }
            Ok(Some(next)) => {
                match evaluate_point(net, layer, &next, concept, Some((&base_lambda, &base_probs)), t + 1) {
                    Ok(rec) => trace.steps.push(rec),
                    Err(e) => {
                        trace.status = TraceStatus::Truncated(e.to_string());
                        break;
                    }
                }
            }
            Err(e) => {
                trace.status = TraceStatus::Truncated(e.to_string());
                break;
            }
        }
    }
    Ok(trace)
}

/// Iterative Fisher steering with the Jacobian frozen at `h0`.
pub fn iterative_fisher_steer<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h0: &DVector<T>,
    concept: &ConceptSpec<T>,
    cfg: &SteeringConfig<T>,
) -> Result<SteeringTrace<T>> {
    cfg.validate()?;
    let j = net.jacobian_from(layer, h0, JacobianMethod::Analytic)?;
    let tag = match cfg.metric {
        MetricChoice::Pullback => MethodTag::Fisher,
        MetricChoice::Identity => MethodTag::FisherIdentity,
    };
    run_loop(net, layer, h0, concept, cfg, Rule::Fisher { j }, tag)
}

/// Normalized gradient ascent on `P^W`.
pub fn euclidean_steer<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h0: &DVector<T>,
    concept: &ConceptSpec<T>,
    cfg: &SteeringConfig<T>,
) -> Result<SteeringTrace<T>> {
    cfg.validate()?;
    run_loop(net, layer, h0, concept, cfg, Rule::Euclidean, MethodTag::Euclidean)
}

/// Constant unit direction `±v/‖v‖`; the sign is probed once at `h0`.
pub fn fixed_direction_steer<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h0: &DVector<T>,
    concept: &ConceptSpec<T>,
    v: &DVector<T>,
    cfg: &SteeringConfig<T>,
    tag: MethodTag,
) -> Result<SteeringTrace<T>> {
    cfg.validate()?;
    if v.len() != h0.len() || !(v.norm() > T::zero()) {
        return Err(Error::invalid("fixed steering direction must be nonzero and match the model width"));
    }
    run_loop(net, layer, h0, concept, cfg, Rule::Fixed(v), tag)
}

// ---------------------------------------------------------------------------
// Calibration and crossings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Calibrated,
    /// `P^W(h0)` already reaches the window floor.
    Trivial,
    Failed,
}

#[derive(Debug, Clone, Copy)]
pub struct Calibration<T: Scalar> {
    pub eta: T,
    pub status: CalibrationStatus,
    pub final_p_w: T,
    pub iterations: usize,
}

pub const CALIBRATION_ITERS: usize = 40;

/// Finds `η` such that `T` Euclidean steps end with `P^W` in the calibration
/// window, by bisection in `log η` over `[1e-4, 1e2] · ‖h0‖ / T`.
pub fn calibrate_step<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h0: &DVector<T>,
    concept: &ConceptSpec<T>,
    cfg: &SteeringConfig<T>,
) -> Result<Calibration<T>> {
    cfg.validate()?;
    if cfg.max_steps == 0 {
        return Err(Error::invalid("calibration needs a step budget of at least 1"));
    }
    let (floor, ceil) = cfg.calibration_window;
    let scale = h0.norm().max(lit(1e-12)) / lit::<T>(cfg.max_steps as f64);
    let mut lo = scale * lit::<T>(1e-4);
    let mut hi = scale * lit::<T>(1e2);
    let p0 = concept_probability_at(net, layer, h0, concept)?;
    if p0 >= floor {
        return Ok(Calibration { eta: lo, status: CalibrationStatus::Trivial, final_p_w: p0, iterations: 0 });
    }
    let final_p = |eta: T| -> Result<T> { Ok(euclidean_steer(net, layer, h0, concept, &cfg.with_step_size(eta))?.final_p_w()) };
    let p_hi = final_p(hi)?;
    if p_hi < floor {
        return Ok(Calibration { eta: hi, status: CalibrationStatus::Failed, final_p_w: p_hi, iterations: 0 });
    }
    if p_hi <= ceil {
        return Ok(Calibration { eta: hi, status: CalibrationStatus::Calibrated, final_p_w: p_hi, iterations: 0 });
    }
    let mut last = p_hi;
    for it in 1..=CALIBRATION_ITERS {
        let mid = (lo * hi).sqrt();
        let p = final_p(mid)?;
        last = p;
        if p >= floor && p <= ceil {
            return Ok(Calibration { eta: mid, status: CalibrationStatus::Calibrated, final_p_w: p, iterations: it });
        }
        if p < floor {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration { eta: hi, status: CalibrationStatus::Failed, final_p_w: last, iterations: CALIBRATION_ITERS })
}

pub const MAX_BISECTION_ITERS: usize = 50;
const SEGMENT_SCAN: usize = 8;

/// Locates the first point on the trace path where `P^W = τ` (within `tol`).
///
/// The first segment whose endpoints bracket `τ` is scanned at a few interior
/// points so that, on a non-monotone segment, the earliest sign change is the
/// one refined.
pub fn bisect_crossing<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    concept: &ConceptSpec<T>,
    trace: &SteeringTrace<T>,
    target: T,
    tol: T,
) -> Result<CrossingRecord<T>> {
    let layer = trace.layer;
    let base = trace.base();
    let base_ref = Some((&base.lambda, &trace.base_probs));
    let record = |h: &DVector<T>, segment: usize, iters: usize| -> Result<CrossingRecord<T>> {
        let r = evaluate_point(net, layer, h, concept, base_ref, segment)?;
        Ok(CrossingRecord {
            target,
            segment,
            h: r.h,
            p_w: r.p_w,
            total_kl: r.total_kl,
            off_target_kl: r.off_target_kl,
            cf_mass: r.cf_mass,
            bisection_iters: iters,
        })
    };
    let steps = &trace.steps;
    for t in 0..steps.len() {
        if steps[t].p_w == target {
            return record(&steps[t].h, t, 0);
        }
        if t + 1 == steps.len() {
            break;
        }
        let (fa, fb) = (steps[t].p_w - target, steps[t + 1].p_w - target);
        if fa * fb >= T::zero() {
            continue;
        }
        let (ha, hb) = (&steps[t].h, &steps[t + 1].h);
        let at = |s: T| -> DVector<T> { ha + (hb - ha) * s };
        let f = |s: T| -> Result<T> { Ok(concept_probability_at(net, layer, &at(s), concept)? - target) };

        let mut a = T::zero();
        let mut b = T::one();
        let mut f_a = fa;
        for k in 1..=SEGMENT_SCAN {
            let s = lit::<T>(k as f64 / SEGMENT_SCAN as f64);
            let v = if k == SEGMENT_SCAN { fb } else { f(s)? };
            if v == T::zero() {
                return record(&at(s), t, 0);
            }
            if f_a * v < T::zero() {
                b = s;
                break;
            }
            a = s;
            f_a = v;
        }
        let mut mid = (a + b) * lit::<T>(0.5);
        for it in 1..=MAX_BISECTION_ITERS {
            mid = (a + b) * lit::<T>(0.5);
            let v = f(mid)?;
            if v.abs() <= tol {
                return record(&at(mid), t, it);
            }
            if f_a * v < T::zero() {
                b = mid;
            } else {
                a = mid;
                f_a = v;
            }
        }
        log::warn!("bisection for target {:.3} did not reach tolerance", to_f64(target));
        return record(&at(mid), t, MAX_BISECTION_ITERS);
    }
    Err(Error::ContractViolation(format!(
        "no pair of consecutive steps brackets P^W = {}",
        to_f64(target)
    )))
}

/// Fills `trace.crossings` for every target the path reaches.
pub fn record_crossings<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    concept: &ConceptSpec<T>,
    trace: &mut SteeringTrace<T>,
    targets: &[T],
    tol: T,
) -> Result<()> {
    let mut found = Vec::new();
    for &target in targets {
        match bisect_crossing(net, concept, trace, target, tol) {
            Ok(c) => found.push(c),
            Err(Error::ContractViolation(_)) => {}
            Err(e) => return Err(e),
        }
    }
    trace.crossings = found;
    Ok(())
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BaselineDirections<T: Scalar> {
    /// `μ₊ − μ₋`.
    pub caa: DVector<T>,
    /// Set when `‖μ₊ − μ₋‖` vanishes relative to the activation scale.
    pub caa_degenerate: bool,
    /// Difference of the first positive and first negative context.
    pub actadd: DVector<T>,
    /// Mean concept gradient restricted to the selected coordinate blocks.
    pub iti: DVector<T>,
    pub iti_blocks: Vec<usize>,
    pub block_size: usize,
}

/// Builds the fixed-direction baselines from layer-`layer` hidden states.
///
/// The attention-head selection of the original ITI has no counterpart in a
/// residual MLP stack; coordinate blocks play the role of heads here. Each
/// block is scored by the training accuracy of a nearest-class-mean probe
/// restricted to it, and the `k` best blocks (with `k · block ≈ d/8`) keep
/// their share of the mean concept-gradient covector.
pub fn make_baseline_directions<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    concept: &ConceptSpec<T>,
    positive: &[DVector<T>],
    negative: &[DVector<T>],
) -> Result<BaselineDirections<T>> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::invalid("each contrastive class needs at least one context"));
    }
    let d = net.dim();
    if positive.iter().chain(negative).any(|h| h.len() != d) {
        return Err(Error::invalid("context width does not match the model"));
    }
    let mean = |xs: &[DVector<T>]| xs.iter().fold(DVector::zeros(d), |a, x| a + x) / lit::<T>(xs.len() as f64);
    let (mu_p, mu_n) = (mean(positive), mean(negative));
    let caa = &mu_p - &mu_n;
    let scale = mu_p.norm().max(mu_n.norm()).max(T::one());
    let caa_degenerate = !(caa.norm() > lit::<T>(1e-12) * scale);
    let actadd = &positive[0] - &negative[0];

    let block_size = (d / 16).max(1);
    let n_blocks = d.div_ceil(block_size);
    let k = ((d as f64 / 8.0 / block_size as f64).round() as usize).clamp(1, n_blocks);
    let mut scores: Vec<(usize, f64)> = (0..n_blocks)
        .map(|b| {
            let range = b * block_size..((b + 1) * block_size).min(d);
            let proj = |x: &DVector<T>| -> (f64, f64) {
                let mut dp = 0.0;
                let mut dn = 0.0;
                for i in range.clone() {
                    dp += (to_f64(x[i]) - to_f64(mu_p[i])).powi(2);
                    dn += (to_f64(x[i]) - to_f64(mu_n[i])).powi(2);
                }
                (dp, dn)
            };
            let correct = positive.iter().filter(|x| { let (a, b) = proj(x); a < b }).count()
                + negative.iter().filter(|x| { let (a, b) = proj(x); b < a }).count();
            (b, correct as f64 / (positive.len() + negative.len()) as f64)
        })
        .collect();
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut iti_blocks: Vec<usize> = scores.iter().take(k).map(|s| s.0).collect();
    iti_blocks.sort_unstable();

    let mut grad = DVector::zeros(d);
    let mut used = 0usize;
    for h in positive.iter().chain(negative) {
        if let Ok(g) = concept_gradient_covector(net, layer, h, concept, JacobianMethod::Analytic) {
            grad += g;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::DegenerateConcept("concept gradient undefined at every context".into()));
    }
    let mut iti = DVector::zeros(d);
    for &b in &iti_blocks {
        for i in b * block_size..((b + 1) * block_size).min(d) {
            iti[i] = grad[i];
        }
    }
    Ok(BaselineDirections { caa, caa_degenerate, actadd, iti, iti_blocks, block_size })
}

// ---------------------------------------------------------------------------
// Critical radius
// ---------------------------------------------------------------------------

/// `min{ η_KL m / (2 C_KL), √(2 η_W |ρ| / (‖β_W‖ K₂)) }`; a zero `K₂` makes the
/// second term infinite.
pub fn critical_radius(m: f64, c_kl: f64, k2: f64, beta_norm: f64, rho: f64, eta_kl: f64, eta_w: f64) -> f64 {
    let first = if c_kl > 0.0 { eta_kl * m / (2.0 * c_kl) } else { f64::INFINITY };
    let den = beta_norm * k2;
    let second = if den > 0.0 { (2.0 * eta_w * rho.abs() / den).sqrt() } else { f64::INFINITY };
    first.min(second)
}

/// Probe estimates of `C_KL` (cubic remainder of the KL expansion) and `K₂`
/// (second differential of `f`) from `n_probes` random directions at radius `r`.
pub fn estimate_curvature_constants<N: LayeredMap<f64> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<f64>,
    n_probes: usize,
    r: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let metric = crate::metric::pullback_fisher(net, layer, h)?;
    let lambda0 = net.forward_from(layer, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_kl: f64 = 0.0;
    let mut k2: f64 = 0.0;
    for _ in 0..n_probes.max(1) {
        let u = DVector::from_fn(h.len(), |_, _| StandardNormal.sample(&mut rng)).normalize() * r;
        let lp = net.forward_from(layer, &(h + &u))?;
        let lm = net.forward_from(layer, &(h - &u))?;
        let kl = net.table().kl_divergence(&lambda0, &lp)?;
        let quad = 0.5 * u.dot(&(metric.matrix() * &u));
        c_kl = c_kl.max((kl - quad).abs() / r.powi(3));
        k2 = k2.max((&lp + &lm - &lambda0 * 2.0).norm() / (r * r));
    }
    Ok((c_kl, k2))
}
