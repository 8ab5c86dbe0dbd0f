//! Proxy-metric steering: directions `ρM⁻¹q̂ / (qᵀM⁻¹q̂)`, their exact excess
//! cost relative to the Fisher optimum, and the bounds on the cost ratio.
//!
//! Every routine works in the eigen-coordinates of `G` restricted to its
//! positive spectrum: with `U₊` the eigenvectors above `rank_tol`, vectors are
//! compressed to `U₊ᵀv` and proxies to `U₊ᵀMU₊`. For full-rank `G` this is only
//! a rotation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{spd_solve, spectral_norm, symmetrize, SymEigen};
use crate::metric::PullbackMetric;
use crate::steering::optimal_direction;
use crate::{lit, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub enum ProxyKind<T: Scalar> {
    Identity,
    /// `diag(v)`; `None` takes the diagonal of `G`.
    Diagonal(Option<DVector<T>>),
    /// `M = Σ⁻¹` for the given covariance `Σ`.
    InverseCovariance(DMatrix<T>),
    /// Euclidean steering restricted to the span of orthonormal columns `Ψ`.
    Subspace(DMatrix<T>),
    /// `A ⊗ B`, materialized.
    Kronecker(DMatrix<T>, DMatrix<T>),
    Custom(DMatrix<T>),
}

impl<T: Scalar> ProxyKind<T> {
    pub fn label(&self) -> &'static str {
        match self {
            ProxyKind::Identity => "identity",
            ProxyKind::Diagonal(_) => "diagonal",
            ProxyKind::InverseCovariance(_) => "inverse_covariance",
            ProxyKind::Subspace(_) => "subspace",
            ProxyKind::Kronecker(..) => "kronecker",
            ProxyKind::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMetricSpec<T: Scalar> {
    pub kind: ProxyKind<T>,
    /// Proxy covector `q̂`; `None` uses the true covector.
    pub covector_override: Option<DVector<T>>,
}

impl<T: Scalar> ProxyMetricSpec<T> {
    pub fn new(kind: ProxyKind<T>) -> Self {
        Self { kind, covector_override: None }
    }

    pub fn with_covector(mut self, q_hat: DVector<T>) -> Self {
        self.covector_override = Some(q_hat);
        self
    }

    /// The full `d × d` proxy metric, checked symmetric positive definite.
    /// `Subspace` has no such matrix and yields `None`.
    pub fn realize(&self, metric: &PullbackMetric<T>) -> Result<Option<DMatrix<T>>> {
        let d = metric.dim();
        let m = match &self.kind {
            ProxyKind::Identity => DMatrix::identity(d, d),
            ProxyKind::Diagonal(Some(v)) => DMatrix::from_diagonal(v),
            ProxyKind::Diagonal(None) => DMatrix::from_diagonal(&metric.matrix().diagonal()),
            ProxyKind::InverseCovariance(sigma) => {
                check_square(sigma, d, "covariance")?;
                let chol = nalgebra::Cholesky::new(symmetrize(sigma))
                    .ok_or_else(|| Error::InfeasibleProxy("covariance is not positive definite".into()))?;
                chol.inverse()
            }
            ProxyKind::Subspace(_) => return Ok(None),
            ProxyKind::Kronecker(a, b) => a.kronecker(b),
            ProxyKind::Custom(m) => m.clone(),
        };
        check_square(&m, d, "proxy metric")?;
        let m = symmetrize(&m);
        let min = SymEigen::new(&m).values.iter().copied().fold(T::max_value().unwrap_or(T::one()), |a, b| a.min(b));
        if !(min > T::zero()) {
            return Err(Error::InfeasibleProxy(format!(
                "{} proxy is not positive definite (min eigenvalue {:e})",
                self.kind.label(),
                to_f64(min)
            )));
        }
        Ok(Some(m))
    }
}

fn check_square<T: Scalar>(m: &DMatrix<T>, d: usize, what: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::invalid(format!("{what} must be {d}×{d}, got {}×{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

/// The positive-spectrum coordinate frame of `G`.
struct Frame<T: Scalar> {
    u: DMatrix<T>,
    lam: DVector<T>,
}

impl<T: Scalar> Frame<T> {
    fn new(metric: &PullbackMetric<T>) -> Result<Self> {
        let r = metric.rank();
        if r == 0 {
            return Err(Error::DegenerateMetric("no positive eigenvalue".into()));
        }
        Ok(Self { u: metric.positive_basis(), lam: metric.eigvals().rows(0, r).into_owned() })
    }

    fn compress(&self, v: &DVector<T>) -> DVector<T> {
        self.u.transpose() * v
    }

    fn compress_mat(&self, m: &DMatrix<T>) -> DMatrix<T> {
        symmetrize(&(self.u.transpose() * m * &self.u))
    }

    /// `xᵀGx` for compressed `x`.
    fn quad(&self, x: &DVector<T>) -> T {
        x.iter().zip(self.lam.iter()).fold(T::zero(), |a, (&xi, &l)| a + l * xi * xi)
    }

    /// `qᵀG⁻¹q` for compressed `q`.
    fn inv_quad(&self, q: &DVector<T>) -> T {
        q.iter().zip(self.lam.iter()).fold(T::zero(), |a, (&qi, &l)| a + qi * qi / l)
    }
}

/// `C_G(δ) = ½ δᵀGδ`.
pub fn second_order_cost<T: Scalar>(metric: &PullbackMetric<T>, delta: &DVector<T>) -> T {
    delta.dot(&(metric.matrix() * delta)) * lit::<T>(0.5)
}

/// Proxy direction in the full space: `ρM⁻¹q̂ / (qᵀM⁻¹q̂)`.
pub fn proxy_direction_full<T: Scalar>(m: &DMatrix<T>, q_hat: &DVector<T>, q: &DVector<T>, rho: T) -> Result<DVector<T>> {
    let x = spd_solve(m, q_hat).ok_or_else(|| Error::InfeasibleProxy("proxy metric is not positive definite".into()))?;
    scale_to_constraint(x, q, q_hat, rho)
}

fn scale_to_constraint<T: Scalar>(x: DVector<T>, q: &DVector<T>, q_hat: &DVector<T>, rho: T) -> Result<DVector<T>> {
    let den = q.dot(&x);
    let scale = q.norm() * x.norm();
    if !(den.abs() > lit::<T>(1e-12) * scale) || q_hat.norm() == T::zero() {
        return Err(Error::InfeasibleProxy(format!(
            "qᵀM⁻¹q̂ = {:e} is numerically zero",
            to_f64(den)
        )));
    }
    Ok(x * (rho / den))
}

/// Proxy steering direction for `spec`, in the positive eigenspace of `G`.
pub fn proxy_direction<T: Scalar>(
    metric: &PullbackMetric<T>,
    spec: &ProxyMetricSpec<T>,
    q: &DVector<T>,
    rho: T,
) -> Result<DVector<T>> {
    let d = metric.dim();
    if q.len() != d {
        return Err(Error::invalid("covector width does not match the metric"));
    }
    let q_hat = spec.covector_override.clone().unwrap_or_else(|| q.clone());
    if q_hat.len() != d {
        return Err(Error::invalid("proxy covector width does not match the metric"));
    }
    if let ProxyKind::Subspace(psi) = &spec.kind {
        check_orthonormal(psi, d)?;
        let q_s = psi.transpose() * q;
        if !(q_s.norm() > lit::<T>(1e-12) * q.norm()) {
            return Err(Error::InfeasibleSubspace);
        }
        let qh_s = psi.transpose() * &q_hat;
        return scale_to_constraint(psi * qh_s, q, &q_hat, rho);
    }
    let m = spec.realize(metric)?.expect("non-subspace proxies realize a matrix");
    let frame = Frame::new(metric)?;
    let m_r = frame.compress_mat(&m);
    let (q_r, qh_r) = (frame.compress(q), frame.compress(&q_hat));
    let x = spd_solve(&m_r, &qh_r)
        .ok_or_else(|| Error::InfeasibleProxy("proxy is singular on the positive eigenspace of G".into()))?;
    let x = scale_to_constraint(x, &q_r, &qh_r, rho)?;
    Ok(&frame.u * x)
}

fn check_orthonormal<T: Scalar>(psi: &DMatrix<T>, d: usize) -> Result<()> {
    if psi.nrows() != d || psi.ncols() == 0 || psi.ncols() > d {
        return Err(Error::invalid("subspace basis must be d × k with 1 ≤ k ≤ d"));
    }
    let gram = psi.transpose() * psi;
    let err = (gram - DMatrix::identity(psi.ncols(), psi.ncols())).amax();
    if err > lit(1e-10) {
        return Err(Error::invalid(format!("subspace basis is not orthonormal (error {:e})", to_f64(err))));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Excess cost
// ---------------------------------------------------------------------------

/// Three evaluations of `C_G(δ) − C_G(δ*)`.
#[derive(Debug, Clone, Copy)]
pub struct ExcessCost<T> {
    pub direct: T,
    /// `½ (δ − δ*)ᵀ G (δ − δ*)`.
    pub pythagorean: T,
    /// `½ Σ λ_i e_i²`.
    pub spectral: T,
}

/// Relative tolerance on the agreement of the three excess forms, measured
/// against `C_G(δ)`.
pub const EXCESS_TOL: f64 = 1e-9;

pub fn excess_cost<T: Scalar>(metric: &PullbackMetric<T>, delta: &DVector<T>, q: &DVector<T>, rho: T) -> Result<ExcessCost<T>> {
    let slack = q.dot(delta) - rho;
    let scale = rho.abs().max(q.norm() * delta.norm());
    if slack.abs() > lit::<T>(1e-8) * scale {
        return Err(Error::ContractViolation(format!(
            "δ violates qᵀδ = ρ by {:e}",
            to_f64(slack)
        )));
    }
    let star = optimal_direction(metric, q, rho)?;
    let e = delta - &star;
    let c_delta = second_order_cost(metric, delta);
    let direct = c_delta - second_order_cost(metric, &star);
    let pythagorean = second_order_cost(metric, &e);
    let coeffs = metric.eigvecs().transpose() * &e;
    let spectral = coeffs
        .iter()
        .zip(metric.eigvals().iter())
        .fold(T::zero(), |a, (&c, &l)| a + l * c * c)
        * lit::<T>(0.5);
    let tol = lit::<T>(EXCESS_TOL) * c_delta.abs().max(lit(1e-300));
    for (what, v) in [("direct excess", direct), ("spectral excess", spectral)] {
        if (v - pythagorean).abs() > tol {
            return Err(Error::IdentityViolation { what, lhs: to_f64(v), rhs: to_f64(pythagorean) });
        }
    }
    Ok(ExcessCost { direct, pythagorean, spectral })
}

// ---------------------------------------------------------------------------
// Cost ratio
// ---------------------------------------------------------------------------

/// `R = E_w[b²]/E_w[b]²` expressed through the whitened proxy `B = G^{1/2}M⁻¹G^{1/2}`.
#[derive(Debug, Clone, Serialize)]
pub struct CvDecomposition {
    pub e_w_b: f64,
    pub var_w_b: f64,
    pub weights: Vec<f64>,
    pub eigvals: Vec<f64>,
}

impl CvDecomposition {
    /// `Var_w(b) / E_w[b]²`.
    pub fn squared_cv(&self) -> f64 {
        self.var_w_b / (self.e_w_b * self.e_w_b)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport<T: Scalar> {
    pub proxy_kind: &'static str,
    /// `C_G(δ_M)` at `ρ = 1`.
    pub cost: T,
    /// `C_G(δ*)` at `ρ = 1`.
    pub optimal_cost: T,
    /// `R_G(M; q)` from the cost formula.
    pub ratio: T,
    pub excess: T,
    /// Present when `q̂ = q` and the proxy is a full matrix.
    pub cv_decomposition: Option<CvDecomposition>,
}

/// Relative agreement required between the two forms of `R_G`.
pub const RATIO_TOL: f64 = 1e-8;

/// `R_G(M; q)` by the cost formula and, where defined, by the weighted-CV form.
pub fn cost_ratio<T: Scalar>(metric: &PullbackMetric<T>, spec: &ProxyMetricSpec<T>, q: &DVector<T>) -> Result<CostReport<T>> {
    let frame = Frame::new(metric)?;
    let q_r = frame.compress(q);
    if !(q_r.norm() > T::zero()) {
        return Err(Error::UnreachableConcept { residual: 1.0 });
    }
    let delta = proxy_direction(metric, spec, q, T::one())?;
    let cost = frame.quad(&frame.compress(&delta)) * lit::<T>(0.5);
    let optimal_cost = lit::<T>(0.5) / frame.inv_quad(&q_r);
    let ratio = cost / optimal_cost;

    let cv_decomposition = match (&spec.kind, &spec.covector_override) {
        (ProxyKind::Subspace(_), _) | (_, Some(_)) => None,
        _ => {
            let m = spec.realize(metric)?.expect("full proxy");
            let cv = cv_form(&frame, &frame.compress_mat(&m), &q_r)?;
            let r_cv = 1.0 + cv.squared_cv();
            let r = to_f64(ratio);
            if (r_cv - r).abs() > RATIO_TOL * r {
                return Err(Error::IdentityViolation { what: "cost ratio (cost form vs CV form)", lhs: r, rhs: r_cv });
            }
            Some(cv)
        }
    };
    Ok(CostReport { proxy_kind: spec.kind.label(), cost, optimal_cost, ratio, excess: cost - optimal_cost, cv_decomposition })
}

fn cv_form<T: Scalar>(frame: &Frame<T>, m_r: &DMatrix<T>, q_r: &DVector<T>) -> Result<CvDecomposition> {
    let r = frame.lam.len();
    let sqrt_g = DMatrix::from_diagonal(&frame.lam.map(|l| l.sqrt()));
    let m_inv = nalgebra::Cholesky::new(m_r.clone())
        .ok_or_else(|| Error::InfeasibleProxy("proxy is singular on the positive eigenspace of G".into()))?
        .inverse();
    let b = symmetrize(&(&sqrt_g * m_inv * &sqrt_g));
    let nu = DVector::from_fn(r, |i, _| q_r[i] / frame.lam[i].sqrt()).normalize();
    let eig = SymEigen::new(&b);
    let weights: Vec<f64> = (0..r).map(|i| to_f64(eig.vectors.column(i).dot(&nu)).powi(2)).collect();
    let eigvals: Vec<f64> = eig.values.iter().map(|&v| to_f64(v)).collect();
    let e_w_b: f64 = weights.iter().zip(&eigvals).map(|(w, b)| w * b).sum();
    let e_w_b2: f64 = weights.iter().zip(&eigvals).map(|(w, b)| w * b * b).sum();
    Ok(CvDecomposition { e_w_b, var_w_b: e_w_b2 - e_w_b * e_w_b, weights, eigvals })
}

/// `R_G(I; q) = (qᵀGq)(qᵀG⁻¹q)/‖q‖⁴`.
pub fn euclidean_ratio<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>) -> Result<T> {
    let frame = Frame::new(metric)?;
    let q_r = frame.compress(q);
    let n2 = q_r.norm_squared();
    Ok(frame.quad(&q_r) * frame.inv_quad(&q_r) / (n2 * n2))
}

/// `(κ + 1)² / (4κ)` with the positive-restricted condition number.
pub fn kantorovich_bound<T: Scalar>(metric: &PullbackMetric<T>) -> Result<T> {
    let k = metric.condition_number()?;
    Ok((k + T::one()) * (k + T::one()) / (lit::<T>(4.0) * k))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RelativePerturbation {
    /// `‖G^{-1/2}(M − G)G^{-1/2}‖₂`.
    pub eta: f64,
    /// `1/(1 − η²)`; `None` when `η ≥ 1`.
    pub bound: Option<f64>,
    /// Largest ratio over the sampled covectors.
    pub max_sampled_ratio: f64,
    /// `None` when the bound is vacuous.
    pub holds: Option<bool>,
}

/// Computes the relative-perturbation size of `M` and checks the ratio bound on
/// `samples` random covectors drawn in the positive eigenspace.
pub fn relative_perturbation_bound<T: Scalar>(
    metric: &PullbackMetric<T>,
    m: &DMatrix<T>,
    samples: usize,
    seed: u64,
) -> Result<RelativePerturbation> {
    let frame = Frame::new(metric)?;
    check_square(m, metric.dim(), "proxy metric")?;
    let m_r = frame.compress_mat(m);
    let inv_sqrt = DMatrix::from_diagonal(&frame.lam.map(|l| T::one() / l.sqrt()));
    let s = &inv_sqrt * (m_r - DMatrix::from_diagonal(&frame.lam)) * &inv_sqrt;
    let eta = to_f64(spectral_norm(&symmetrize(&s)));
    let bound = (eta < 1.0).then(|| 1.0 / (1.0 - eta * eta));
    let spec = ProxyMetricSpec::new(ProxyKind::Custom(m.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let c = DVector::<T>::from_fn(frame.lam.len(), |_, _| lit(StandardNormal.sample(&mut rng)));
        let q = &frame.u * c;
        worst = worst.max(to_f64(cost_ratio(metric, &spec, &q)?.ratio));
    }
    Ok(RelativePerturbation {
        eta,
        bound,
        max_sampled_ratio: worst,
        holds: bound.map(|b| worst <= b * (1.0 + 1e-9)),
    })
}

/// `(ρ²/2)(qᵀGq/‖q‖⁴ − 1/(qᵀG⁻¹q))` and the eigen-residual `‖Gq − μq‖/‖Gq‖`
/// with `μ = qᵀGq/‖q‖²`.
pub fn info_theoretic_excess<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>, rho: T) -> Result<(T, T)> {
    let frame = Frame::new(metric)?;
    let q_r = frame.compress(q);
    let n2 = q_r.norm_squared();
    if !(n2 > T::zero()) {
        return Err(Error::invalid("covector has no component in the positive eigenspace"));
    }
    let gq = q_r.component_mul(&frame.lam);
    let excess = rho * rho * lit::<T>(0.5) * (frame.quad(&q_r) / (n2 * n2) - T::one() / frame.inv_quad(&q_r));
    let mu = frame.quad(&q_r) / n2;
    let residual = (&gq - &q_r * mu).norm() / gq.norm();
    Ok((excess, residual))
}

// ---------------------------------------------------------------------------
// Method-specific identities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CaaIdentity<T: Scalar> {
    /// `ρ v / (qᵀv)` with `v = μ₊ − μ₋`.
    pub delta_caa: DVector<T>,
    /// Proxy direction with `M = Σ⁻¹`, `q̂ = q`.
    pub delta_proxy: DVector<T>,
    pub max_abs_diff: T,
    pub matches: bool,
    /// `μ₊ = μ₋`: both directions are undefined and returned as zero.
    pub degenerate: bool,
}

/// Under a shared-covariance Gaussian model `q = Σ⁻¹(μ₊ − μ₋)` and the mean
/// difference equals the proxy direction with `M = Σ⁻¹`.
pub fn caa_gaussian_identity<T: Scalar>(
    sigma: &DMatrix<T>,
    mu_plus: &DVector<T>,
    mu_minus: &DVector<T>,
    rho: T,
) -> Result<CaaIdentity<T>> {
    let d = mu_plus.len();
    check_square(sigma, d, "covariance")?;
    if mu_minus.len() != d {
        return Err(Error::invalid("class means differ in length"));
    }
    let chol = nalgebra::Cholesky::new(symmetrize(sigma))
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
    let v = mu_plus - mu_minus;
    let scale = mu_plus.norm().max(mu_minus.norm()).max(T::one());
    if !(v.norm() > lit::<T>(1e-14) * scale) {
        let z = DVector::zeros(d);
        return Ok(CaaIdentity { delta_caa: z.clone(), delta_proxy: z, max_abs_diff: T::zero(), matches: false, degenerate: true });
    }
    let q = chol.solve(&v);
    let delta_caa = &v * (rho / q.dot(&v));
    let x = sigma * &q;
    let delta_proxy = &x * (rho / q.dot(&x));
    let max_abs_diff = (&delta_caa - &delta_proxy).amax();
    let matches = max_abs_diff <= lit::<T>(1e-10) * delta_caa.amax();
    Ok(CaaIdentity { delta_caa, delta_proxy, max_abs_diff, matches, degenerate: false })
}

#[derive(Debug, Clone, Copy)]
pub struct ItiDecomposition<T> {
    /// `C_G(δ_S*) − C_G(δ*)` from the closed form.
    pub subspace_cost: T,
    /// `C_G(δ_ITI) − C_G(δ_S*)`.
    pub within_cost: T,
    /// `C_G(δ_ITI) − C_G(δ*)`, measured directly.
    pub total_excess: T,
}

/// Splits the excess of Euclidean-within-`S` steering into the subspace
/// restriction cost and the within-subspace metric error.
pub fn iti_decomposition<T: Scalar>(
    metric: &PullbackMetric<T>,
    q: &DVector<T>,
    rho: T,
    psi: &DMatrix<T>,
) -> Result<ItiDecomposition<T>> {
    let d = metric.dim();
    check_orthonormal(psi, d)?;
    let q_s = psi.transpose() * q;
    if !(q_s.norm() > lit::<T>(1e-12) * q.norm()) {
        return Err(Error::InfeasibleSubspace);
    }
    let g_s = symmetrize(&(psi.transpose() * metric.matrix() * psi));
    let x = spd_solve(&g_s, &q_s).ok_or_else(|| Error::DegenerateMetric("restricted metric is singular".into()))?;
    let s_quad = q_s.dot(&x);
    let delta_s = psi * &x * (rho / s_quad);
    let delta_iti = psi * &q_s * (rho / q_s.norm_squared());
    let star = optimal_direction(metric, q, rho)?;

    let frame = Frame::new(metric)?;
    let full_quad = frame.inv_quad(&frame.compress(q));
    let half_rho2 = rho * rho * lit::<T>(0.5);
    let subspace_cost = half_rho2 * (T::one() / s_quad - T::one() / full_quad);
    let c_iti = second_order_cost(metric, &delta_iti);
    let c_s = second_order_cost(metric, &delta_s);
    let within_cost = c_iti - c_s;
    let total_excess = c_iti - second_order_cost(metric, &star);

    let tol = lit::<T>(EXCESS_TOL) * c_iti.max(lit(1e-300));
    if subspace_cost < -tol {
        return Err(Error::IdentityViolation { what: "subspace restriction cost sign", lhs: to_f64(subspace_cost), rhs: 0.0 });
    }
    if (subspace_cost + within_cost - total_excess).abs() > tol {
        return Err(Error::IdentityViolation {
            what: "subspace cost decomposition",
            lhs: to_f64(subspace_cost + within_cost),
            rhs: to_f64(total_excess),
        });
    }
    Ok(ItiDecomposition { subspace_cost, within_cost, total_excess })
}

#[derive(Debug, Clone)]
pub struct DiagonalFisherReport<T: Scalar> {
    pub report: CostReport<T>,
    /// `(ρ²/2) zᵀB̃z / (zᵀz)²`.
    pub cost_closed_form: T,
    /// `(zᵀB̃z)(zᵀB̃⁻¹z)/(zᵀz)²`.
    pub ratio_closed_form: T,
    /// `‖D^{-1/2} E D^{-1/2}‖₂`.
    pub eta: T,
    /// `(1+η)/(1−η)` when `η < 1`.
    pub bound: Option<T>,
    pub holds: Option<bool>,
}

/// Cost of steering with `M = diag(G)`.
pub fn diagonal_fisher_report<T: Scalar>(metric: &PullbackMetric<T>, q: &DVector<T>, rho: T) -> Result<DiagonalFisherReport<T>> {
    let g = metric.matrix();
    let diag = g.diagonal();
    if diag.iter().any(|&x| !(x > T::zero())) {
        return Err(Error::invalid("diagonal Fisher needs a strictly positive diagonal"));
    }
    let inv_sqrt = diag.map(|x| T::one() / x.sqrt());
    let dm = DMatrix::from_diagonal(&inv_sqrt);
    let b = symmetrize(&(&dm * g * &dm));
    let z = q.component_mul(&inv_sqrt);
    let zz = z.norm_squared();
    let zbz = z.dot(&(&b * &z));
    let zbiz = z.dot(&spd_solve(&b, &z).ok_or_else(|| Error::DegenerateMetric("G is singular".into()))?);
    let cost_closed_form = rho * rho * lit::<T>(0.5) * zbz / (zz * zz);
    let ratio_closed_form = zbz * zbiz / (zz * zz);
    let eta = spectral_norm(&(b - DMatrix::identity(g.nrows(), g.ncols())));
    let report = cost_ratio(metric, &ProxyMetricSpec::new(ProxyKind::Diagonal(None)), q)?;
    let bound = (eta < T::one()).then(|| (T::one() + eta) / (T::one() - eta));
    let holds = bound.map(|b| ratio_closed_form <= b * (T::one() + lit::<T>(1e-9)));
    Ok(DiagonalFisherReport { report, cost_closed_form, ratio_closed_form, eta, bound, holds })
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RankingWitness {
    pub eps: f64,
    pub k: f64,
    pub rho: f64,
    /// `‖M_A − G‖₂`
    pub norm_a: f64,
    /// `‖M_B − G‖₂`
    pub norm_b: f64,
    pub cost_a: f64,
    pub cost_b: f64,
    /// `norm_a < norm_b` and `cost_a > cost_b`.
    pub holds: bool,
}

/// `G = I₂`, `q = e₁`, `M_A = [[1, ε], [ε, 1]]`, `M_B = diag(1, K)`.
pub fn ranking_counterexample(eps: f64, k: f64, rho: f64) -> Result<RankingWitness> {
    if !(eps > 0.0 && eps < 1.0) || !(k > 1.0) {
        return Err(Error::invalid("the witness needs 0 < ε < 1 and K > 1"));
    }
    let g = PullbackMetric::from_matrix(DMatrix::<f64>::identity(2, 2))?;
    let q = DVector::from_vec(vec![1.0, 0.0]);
    let m_a = DMatrix::from_row_slice(2, 2, &[1.0, eps, eps, 1.0]);
    let m_b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, k]);
    let cost = |m: &DMatrix<f64>| -> Result<f64> {
        let delta = proxy_direction(&g, &ProxyMetricSpec::new(ProxyKind::Custom(m.clone())), &q, rho)?;
        Ok(second_order_cost(&g, &delta))
    };
    let norm_a = spectral_norm(&(&m_a - g.matrix()));
    let norm_b = spectral_norm(&(&m_b - g.matrix()));
    let (cost_a, cost_b) = (cost(&m_a)?, cost(&m_b)?);
    Ok(RankingWitness { eps, k, rho, norm_a, norm_b, cost_a, cost_b, holds: norm_a < norm_b && cost_a > cost_b })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RankingCheck {
    /// `Var_ν(B_A)/E_ν[B_A]²`
    pub cv_a: f64,
    pub cv_b: f64,
    pub cost_a: f64,
    pub cost_b: f64,
    pub consistent: bool,
}

/// Compares the cost ordering of two proxies with the ordering of their
/// squared coefficients of variation along `ν`.
pub fn correct_ranking_check<T: Scalar>(
    metric: &PullbackMetric<T>,
    m_a: &DMatrix<T>,
    m_b: &DMatrix<T>,
    q: &DVector<T>,
) -> Result<RankingCheck> {
    let ra = cost_ratio(metric, &ProxyMetricSpec::new(ProxyKind::Custom(m_a.clone())), q)?;
    let rb = cost_ratio(metric, &ProxyMetricSpec::new(ProxyKind::Custom(m_b.clone())), q)?;
    let cv = |r: &CostReport<T>| r.cv_decomposition.as_ref().expect("full proxy").squared_cv();
    let (cv_a, cv_b) = (cv(&ra), cv(&rb));
    let (cost_a, cost_b) = (to_f64(ra.cost), to_f64(rb.cost));
    let tie = (cost_a - cost_b).abs() <= 1e-9 * cost_a.max(cost_b);
    let consistent = tie || ((cost_a <= cost_b) == (cv_a <= cv_b));
    Ok(RankingCheck { cv_a, cv_b, cost_a, cost_b, consistent })
}

/// `G = [[1, ε], [ε, 1]]`, `q = (1, 1)/√2`: the diagonal proxy is exact although
/// the off-diagonal energy is `ε`. Returns `(R_D, η)`.
pub fn no_universal_lower_witness(eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("the witness needs 0 < ε < 1"));
    }
    let g = PullbackMetric::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, eps, eps, 1.0]))?;
    let q = DVector::from_element(2, std::f64::consts::FRAC_1_SQRT_2);
    let r = diagonal_fisher_report(&g, &q, 1.0)?;
    Ok((r.ratio_closed_form, r.eta))
}
