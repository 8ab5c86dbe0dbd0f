//! The pullback Fisher metric `G = JᵀHJ` and its spectral diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{is_finite_mat, rel_frobenius, singular_range, SymEigen};
use crate::transformer::{central_diff_jacobian, JacobianMethod, LayeredMap};
use crate::{lit, to_f64, Scalar};

/// Relative eigenvalue cutoff separating the positive spectrum from the kernel.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// A symmetric PSD metric with a cached, descending eigendecomposition.
#[derive(Debug, Clone)]
pub struct PullbackMetric<T: Scalar> {
    g: DMatrix<T>,
    eigvals: DVector<T>,
    eigvecs: DMatrix<T>,
    rank_tol: T,
}

impl<T: Scalar> PullbackMetric<T> {
    /// Symmetrizes `g` and decomposes it. `rank_tol = 1e-12 · λ_max`.
    pub fn from_matrix(g: DMatrix<T>) -> Result<Self> {
        Self::with_relative_tol(g, lit(DEFAULT_RANK_TOL))
    }

    pub fn with_relative_tol(g: DMatrix<T>, rel_tol: T) -> Result<Self> {
        if !g.is_square() || g.nrows() == 0 {
            return Err(Error::invalid(format!("metric must be square, got {}×{}", g.nrows(), g.ncols())));
        }
        if !is_finite_mat(&g) {
            return Err(Error::invalid("metric has non-finite entries"));
        }
        let eig = SymEigen::new(&g);
        let g = crate::linalg::symmetrize(&g);
        let top = eig.values[0].max(T::zero());
        Ok(Self { g, eigvals: eig.values, eigvecs: eig.vectors, rank_tol: rel_tol * top })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.g
    }

    /// Descending.
    pub fn eigvals(&self) -> &DVector<T> {
        &self.eigvals
    }

    pub fn eigvecs(&self) -> &DMatrix<T> {
        &self.eigvecs
    }

    pub fn rank_tol(&self) -> T {
        self.rank_tol
    }

    /// Number of eigenvalues above `rank_tol`.
    pub fn rank(&self) -> usize {
        self.eigvals.iter().filter(|&&l| l > self.rank_tol).count()
    }

    pub fn positive_eigvals(&self) -> Vec<T> {
        self.eigvals.iter().copied().filter(|&l| l > self.rank_tol).collect()
    }

    /// Orthonormal basis of the positive eigenspace, `d × rank`.
    pub fn positive_basis(&self) -> DMatrix<T> {
        self.eigvecs.columns(0, self.rank()).into_owned()
    }

    pub fn lambda_max(&self) -> T {
        self.eigvals[0]
    }

    /// Smallest eigenvalue above `rank_tol`.
    pub fn lambda_min_positive(&self) -> Option<T> {
        let r = self.rank();
        (r > 0).then(|| self.eigvals[r - 1])
    }

    /// Median of the positive spectrum.
    pub fn median_positive(&self) -> Option<T> {
        crate::linalg::median(&self.positive_eigvals())
    }

    /// `κ = λ_max / λ_min⁺`.
    pub fn condition_number(&self) -> Result<T> {
        let lo = self.lambda_min_positive().ok_or_else(|| Error::DegenerateMetric("no positive eigenvalue".into()))?;
        Ok(self.lambda_max() / lo)
    }

    /// `G⁺v` using the eigenpairs above `rank_tol`.
    pub fn pinv_apply(&self, v: &DVector<T>) -> DVector<T> {
        let tol = self.rank_tol;
        SymEigen { values: self.eigvals.clone(), vectors: self.eigvecs.clone() }
            .apply_spectral(v, |l| if l > tol { T::one() / l } else { T::zero() })
    }

    /// `‖v − Π_{Range(G)} v‖`.
    pub fn range_residual(&self, v: &DVector<T>) -> T {
        let u = self.positive_basis();
        (v - &u * (u.transpose() * v)).norm()
    }

    /// `f(G)` on the positive spectrum, zero on the kernel.
    pub fn positive_function(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        let tol = self.rank_tol;
        SymEigen { values: self.eigvals.clone(), vectors: self.eigvecs.clone() }
            .map_spectrum(|l| if l > tol { f(l) } else { T::zero() })
    }

    /// `sG`, with eigenvectors reused.
    pub fn scaled(&self, s: T) -> Result<Self> {
        if !(s > T::zero()) {
            return Err(Error::invalid("metric scale must be positive"));
        }
        Ok(Self {
            g: &self.g * s,
            eigvals: &self.eigvals * s,
            eigvecs: self.eigvecs.clone(),
            rank_tol: self.rank_tol * s,
        })
    }

    /// Relative Frobenius error of `U diag(λ) Uᵀ` against the stored matrix.
    pub fn reconstruction_error(&self) -> T {
        let back = SymEigen { values: self.eigvals.clone(), vectors: self.eigvecs.clone() }.map_spectrum(|l| l);
        rel_frobenius(&back, &self.g)
    }

    pub fn spectral_report(&self) -> Result<SpectralReport<T>> {
        spectral_report(self)
    }
}

/// Spectral summary of a metric, computed from its eigenvalues alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralReport<T: Scalar> {
    pub condition_number: T,
    pub trace_effective_rank: T,
    pub entropy_effective_rank: T,
    pub null_dim: usize,
    pub participation_ratio: T,
    pub euclidean_deviation: T,
}

impl<T: Scalar> SpectralReport<T> {
    pub const CSV_HEADER: &'static str =
        "layer,condition_number,trace_erank,entropy_erank,null_dim,participation_ratio,deviation";

    pub fn csv_row(&self, layer: usize) -> String {
        format!(
            "{layer},{:.10e},{:.10e},{:.10e},{},{:.10e},{:.10e}",
            to_f64(self.condition_number),
            to_f64(self.trace_effective_rank),
            to_f64(self.entropy_effective_rank),
            self.null_dim,
            to_f64(self.participation_ratio),
            to_f64(self.euclidean_deviation),
        )
    }
}

pub fn spectral_report<T: Scalar>(metric: &PullbackMetric<T>) -> Result<SpectralReport<T>> {
    let d = metric.dim();
    let tol = metric.rank_tol();
    let vals: Vec<T> = metric.eigvals().iter().map(|&l| l.max(T::zero())).collect();
    let lmax = vals[0];
    if !(lmax > T::zero()) {
        return Err(Error::DegenerateMetric("all-zero spectrum".into()));
    }
    let trace = vals.iter().fold(T::zero(), |a, &b| a + b);
    let sq = vals.iter().fold(T::zero(), |a, &b| a + b * b);
    let entropy = vals.iter().fold(T::zero(), |acc, &l| {
        let p = l / trace;
        if p > T::zero() {
            acc - p * p.ln()
        } else {
            acc
        }
    });
    let pr = trace * trace / sq;
    let dev = (T::one() - pr / lit::<T>(d as f64)).max(T::zero()).sqrt();
    Ok(SpectralReport {
        condition_number: metric.condition_number()?,
        trace_effective_rank: trace / lmax,
        entropy_effective_rank: entropy.exp(),
        null_dim: vals.iter().filter(|&&l| l <= tol).count(),
        participation_ratio: pr,
        euclidean_deviation: dev,
    })
}

/// `(c*, √(1 − PR/d))`: the best isotropic fit `c*I` and its relative error.
pub fn euclidean_deviation<T: Scalar>(metric: &PullbackMetric<T>) -> Result<(T, T)> {
    let d = lit::<T>(metric.dim() as f64);
    let c_star = metric.eigvals().iter().fold(T::zero(), |a, &b| a + b.max(T::zero())) / d;
    Ok((c_star, spectral_report(metric)?.euclidean_deviation))
}

/// `JᵀHJ` for a given Jacobian and Fisher matrix.
pub fn pullback_from_parts<T: Scalar>(j: &DMatrix<T>, h: &DMatrix<T>) -> Result<PullbackMetric<T>> {
    if h.nrows() != j.nrows() {
        return Err(Error::invalid("Jacobian and Fisher matrix disagree on the output dimension"));
    }
    PullbackMetric::from_matrix(j.transpose() * h * j)
}

/// `G^{(layer)}(h) = JᵀHJ` with `H` the full-vocabulary Fisher at `λ = f(h)`.
pub fn pullback_fisher<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
) -> Result<PullbackMetric<T>> {
    pullback_fisher_with(net, layer, h, JacobianMethod::Analytic, None)
}

pub fn pullback_fisher_with<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    method: JacobianMethod,
    top_k: Option<usize>,
) -> Result<PullbackMetric<T>> {
    let lambda = net.forward_from(layer, h)?;
    let fisher = net.table().fisher_matrix(&lambda, top_k)?;
    let j = net.jacobian_from(layer, h, method)?;
    pullback_from_parts(&j, &fisher)
}

/// `‖G^{(ℓ)} − A_ℓᵀ G^{(ℓ+1)} A_ℓ‖_F / ‖G^{(ℓ)}‖_F`.
pub fn verify_recursion<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    layer: usize,
    h: &DVector<T>,
    method: JacobianMethod,
) -> Result<T> {
    if layer >= net.num_layers() {
        return Err(Error::invalid(format!("recursion needs layer < {}", net.num_layers())));
    }
    net.check_input(layer, h)?;
    let next = net.apply_layer(layer, h)?;
    let a = match method {
        JacobianMethod::Analytic => net.layer_jacobian(layer, h)?,
        JacobianMethod::CentralDiff => central_diff_jacobian(h, |x| net.apply_layer(layer, x))?,
    };
    let g_here = pullback_fisher_with(net, layer, h, method, None)?;
    let g_next = pullback_fisher_with(net, layer + 1, &next, method, None)?;
    let pulled = a.transpose() * g_next.matrix() * &a;
    Ok(rel_frobenius(&pulled, g_here.matrix()))
}

/// One row of the depth-bound check.
#[derive(Debug, Clone, Serialize)]
pub struct DepthBoundRow {
    pub layer: usize,
    /// `ρ_k = ‖A_k − I‖₂` for `k = layer..L−1`.
    pub rhos: Vec<f64>,
    pub measured_condition: f64,
    /// `κ(G^{(L)}) Π ((1+ρ_k)/(1−ρ_k))²`, `None` when some `ρ_k ≥ 1`.
    pub condition_bound: Option<f64>,
    pub condition_ok: Option<bool>,
    pub trace_erank: f64,
    /// `r_tr(G^{(ℓ+1)}) / κ(A_ℓ)²`; `None` at `ℓ = L`.
    pub erank_lower_bound: Option<f64>,
    pub erank_ok: Option<bool>,
}

impl DepthBoundRow {
    pub fn vacuous(&self) -> bool {
        self.condition_bound.is_none()
    }
}

/// Measures `κ(G^{(ℓ)})` and the trace effective rank along the trajectory from
/// `h` (a layer-0 state) and compares them with the depth bounds.
pub fn depth_bound_check<T: Scalar, N: LayeredMap<T> + ?Sized>(
    net: &N,
    h: &DVector<T>,
    layers: &[usize],
) -> Result<Vec<DepthBoundRow>> {
    let depth = net.num_layers();
    let states = net.hidden_states(0, h)?;
    let mut metrics = Vec::with_capacity(depth + 1);
    for (l, s) in states.iter().enumerate() {
        metrics.push(pullback_fisher(net, l, s)?);
    }
    let mut rhos = Vec::with_capacity(depth);
    let mut kappa_a = Vec::with_capacity(depth);
    for k in 0..depth {
        let a = net.layer_jacobian(k, &states[k])?;
        let b = &a - DMatrix::identity(a.nrows(), a.ncols());
        rhos.push(to_f64(crate::linalg::spectral_norm(&b)));
        let (hi, lo) = singular_range(&a);
        kappa_a.push(to_f64(hi) / to_f64(lo));
    }
    let kappa_last = to_f64(metrics[depth].condition_number()?);
    let erank = |m: &PullbackMetric<T>| -> Result<f64> { Ok(to_f64(spectral_report(m)?.trace_effective_rank)) };

    let mut rows = Vec::with_capacity(layers.len());
    for &l in layers {
        if l > depth {
            return Err(Error::invalid(format!("layer {l} exceeds depth {depth}")));
        }
        let measured = to_f64(metrics[l].condition_number()?);
        let segment = rhos[l..].to_vec();
        let bound = segment
            .iter()
            .all(|&r| r < 1.0)
            .then(|| segment.iter().fold(kappa_last, |acc, &r| acc * ((1.0 + r) / (1.0 - r)).powi(2)));
        let tr_rank = erank(&metrics[l])?;
        let erank_bound = if l < depth { Some(erank(&metrics[l + 1])? / kappa_a[l].powi(2)) } else { None };
        rows.push(DepthBoundRow {
            layer: l,
            rhos: segment,
            measured_condition: measured,
            condition_bound: bound,
            condition_ok: bound.map(|b| measured <= b * (1.0 + 1e-9)),
            trace_erank: tr_rank,
            erank_lower_bound: erank_bound,
            erank_ok: erank_bound.map(|b| tr_rank >= b * (1.0 - 1e-9)),
        });
    }
    Ok(rows)
}
