//! Brute-force KL minimiser over the concept hyperplane.
//!
//! For an affine model `λ = W h + b` the logits move linearly in the
//! perturbation, `ℓ(h₀ + δ) = ℓ₀ + A δ` with `A = ΓW`, and a linear probe turns
//! the concept constraint into the hyperplane `qᵀδ = ρ`. The oracle searches
//! that hyperplane using nothing but exact KL evaluations: no Fisher matrix,
//! no pullback metric. The hyperplane is parameterised as
//! `δ(z) = ρq/‖q‖² + Bz` with `B` an orthonormal basis of `ker qᵀ`; the search
//! coordinates are whitened with a finite-difference Hessian of the objective.
//! Up to three free coordinates are searched on a full coarse-to-fine tensor
//! grid; beyond that, coordinate descent with coarse-to-fine grid line
//! searches (and random restarts for large `d`) is used.

use fisher_steer::{LayeredMap, ToyAffineModel64};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Grid points per axis per refinement level.
    pub points: usize,
    /// Largest number of free coordinates searched on a full tensor grid.
    pub full_grid_max_dim: usize,
    /// Stop refining once the grid spacing falls below this fraction of the
    /// initial search radius.
    pub rel_tol: f64,
    pub max_levels: usize,
    pub max_sweeps: usize,
    /// Preconditioner refreshes.
    pub rounds: usize,
    /// Random restarts used when the free dimension reaches `restart_min_dim`.
    pub restarts: usize,
    pub restart_min_dim: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            points: 11,
            full_grid_max_dim: 3,
            rel_tol: 1e-10,
            max_levels: 200,
            max_sweeps: 100,
            rounds: 6,
            restarts: 2,
            restart_min_dim: 12,
        }
    }
}

/// Exact-KL objective with logits linear in the perturbation.
#[derive(Debug, Clone)]
pub struct LinearLogitProblem {
    p0: DVector<f64>,
    a: DMatrix<f64>,
}

impl LinearLogitProblem {
    pub fn new(logits0: &DVector<f64>, a: DMatrix<f64>) -> Self {
        let max = logits0.max();
        let e = logits0.map(|x| (x - max).exp());
        let p0 = &e / e.sum();
        Self { p0, a }
    }

    pub fn for_affine(model: &ToyAffineModel64, h0: &DVector<f64>) -> fisher_steer::Result<Self> {
        let gamma = model.table().gamma();
        let lambda0 = model.forward_from(0, h0)?;
        Ok(Self::new(&(gamma * lambda0), gamma * &model.weight))
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn kl(&self, delta: &DVector<f64>) -> f64 {
        kl_from_shift(&self.p0, &(&self.a * delta))
    }
}

/// `expm1(u) − u` without cancellation near zero.
fn expm1_minus_id(u: f64) -> f64 {
    if u.abs() < 0.1 {
        let mut term = 1.0;
        for k in (3..=10).rev() {
            term = 1.0 + u / k as f64 * term;
        }
        0.5 * u * u * term
    } else {
        u.exp_m1() - u
    }
}

/// `KL(p₀ ‖ softmax(ℓ₀ + s))` written as `log1p(Σ p₀ (e^{u} − 1 − u))` with
/// `u = s − E_{p₀}[s]`; every summand is nonnegative, so small divergences keep
/// full relative precision.
pub fn kl_from_shift(p0: &DVector<f64>, s: &DVector<f64>) -> f64 {
    let m = p0.dot(s);
    let total: f64 = p0.iter().zip(s.iter()).map(|(&p, &x)| if p > 0.0 { p * expm1_minus_id(x - m) } else { 0.0 }).sum();
    total.ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub delta: DVector<f64>,
    pub kl: f64,
    pub evaluations: usize,
    pub warning: Option<String>,
}

/// Orthonormal basis of `ker qᵀ` (a `d × (d−1)` matrix).
pub fn hyperplane_basis(q: &DVector<f64>) -> DMatrix<f64> {
    let d = q.len();
    let u = q.normalize();
    let p = DMatrix::identity(d, d) - &u * u.transpose();
    let eig = SymmetricEigen::new(p);
    let cols: Vec<DVector<f64>> =
        (0..d).filter(|&i| eig.eigenvalues[i] > 0.5).map(|i| eig.eigenvectors.column(i).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

struct Search<'a> {
    p0: &'a DVector<f64>,
    /// Logit shift at the current point.
    shift: DVector<f64>,
    /// Logit shift per unit of each search coordinate.
    dirs: DMatrix<f64>,
    value: f64,
    evals: usize,
}

impl Search<'_> {
    fn eval_at(&mut self, offsets: &[(usize, f64)]) -> f64 {
        let mut s = self.shift.clone();
        for &(i, t) in offsets {
            s.axpy(t, &self.dirs.column(i), 1.0);
        }
        self.evals += 1;
        let v = kl_from_shift(self.p0, &s);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn commit(&mut self, offsets: &[(usize, f64)], value: f64) {
        for &(i, t) in offsets {
            self.shift.axpy(t, &self.dirs.column(i), 1.0);
        }
        self.value = value;
    }

    /// Coarse-to-fine grid over the given coordinates; returns the accumulated
    /// offsets and whether the level budget ran out.
    fn grid(&mut self, coords: &[usize], radius: f64, tol: f64, cfg: &OracleConfig) -> (Vec<f64>, bool) {
        let n = cfg.points.max(3);
        let k = coords.len();
        let mut moved = vec![0.0; k];
        let mut r = radius;
        for _ in 0..cfg.max_levels {
            if r < tol {
                return (moved, false);
            }
            let step = 2.0 * r / (n - 1) as f64;
            let mut best = (self.value, vec![0.0; k], false);
            let total = n.pow(k as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut off = Vec::with_capacity(k);
                let mut edge = false;
                for &c in coords {
                    let j = rem % n;
                    rem /= n;
                    edge |= j == 0 || j == n - 1;
                    off.push((c, -r + step * j as f64));
                }
                if off.iter().all(|&(_, t)| t == 0.0) {
                    continue;
                }
                let v = self.eval_at(&off);
                if v < best.0 {
                    best = (v, off.iter().map(|&(_, t)| t).collect(), edge);
                }
            }
            let (v, t, edge) = best;
            let improved = v < self.value;
            // Differences at rounding level carry no information about where
            // the minimiser is.
            let significant = v < self.value - 1e-13 * self.value.abs();
            if improved {
                let off: Vec<(usize, f64)> = coords.iter().copied().zip(t.iter().copied()).collect();
                self.commit(&off, v);
                for (m, dt) in moved.iter_mut().zip(&t) {
                    *m += dt;
                }
            }
            // A best point on the boundary means the minimiser may lie outside
            // the box: recentre without shrinking.
            if !(significant && edge) {
                r = step;
            }
        }
        (moved, true)
    }
}

/// Central-difference Hessian of `z ↦ KL(δ₀ + Bz)` at the current point, in
/// the coordinates of `dirs`.
fn fd_hessian(p0: &DVector<f64>, shift: &DVector<f64>, dirs: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let k = dirs.ncols();
    let f = |a: usize, ta: f64, b: usize, tb: f64| {
        let mut s = shift.clone();
        s.axpy(ta, &dirs.column(a), 1.0);
        s.axpy(tb, &dirs.column(b), 1.0);
        kl_from_shift(p0, &s)
    };
    let f0 = kl_from_shift(p0, shift);
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        hess[(i, i)] = (f(i, h, i, 0.0) - 2.0 * f0 + f(i, -h, i, 0.0)) / (h * h);
        for j in 0..i {
            let v = (f(i, h, j, h) - f(i, h, j, -h) - f(i, -h, j, h) + f(i, -h, j, -h)) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Search coordinates `u` with `z = P u`, `P = V Λ^{-1/2}` from the Hessian.
fn whitening(hess: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(hess.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = (top * 1e-12).max(f64::MIN_POSITIVE);
    let mut p = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = 1.0 / l.max(floor).sqrt();
        p.column_mut(j).scale_mut(s);
    }
    p
}

/// Minimise the exact KL over `{δ : qᵀδ = ρ}`.
pub fn exact_kl_minimizer(
    problem: &LinearLogitProblem,
    q: &DVector<f64>,
    rho: f64,
    cfg: &OracleConfig,
    seed: u64,
) -> fisher_steer::Result<OracleResult> {
    let d = problem.dim();
    if q.len() != d || !(q.norm() > 0.0) || !(rho.is_finite()) {
        return Err(fisher_steer::Error::invalid("oracle needs a nonzero covector of the model width and finite ρ"));
    }
    let base = q * (rho / q.norm_squared());
    if d == 1 {
        return Ok(OracleResult { kl: problem.kl(&base), delta: base, evaluations: 1, warning: None });
    }
    let b = hyperplane_basis(q);
    let k = b.ncols();
    let ab = &problem.a * &b;
    let mut z = DVector::zeros(k);
    let mut shift = &problem.a * &base;
    let f_start = kl_from_shift(&problem.p0, &shift);
    // For a quadratic with unit Hessian the minimiser lies within √(2 f(0)) of
    // the start.
    let scale = (2.0 * f_start).sqrt().max(1e-300);
    let tol = cfg.rel_tol * scale;
    let mut evals = 1;
    let mut exhausted = false;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut value = f_start;
    for round in 0..cfg.rounds.max(1) {
        // Only the last preconditioner round decides convergence.
        exhausted = false;
        let hess = fd_hessian(&problem.p0, &shift, &ab, 1e-3 * rho.abs() / q.norm());
        evals += 2 * k * k + 1;
        let p = whitening(&hess);
        let dirs = &ab * &p;
        let starts = if round == 0 && k >= cfg.restart_min_dim { 1 + cfg.restarts } else { 1 };
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        for s in 0..starts {
            let mut u0 = DVector::zeros(k);
            if s > 0 {
                u0 = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng)) * (scale / (k as f64).sqrt());
            }
            let mut search = Search { p0: &problem.p0, shift: &shift + &dirs * &u0, dirs: dirs.clone(), value: 0.0, evals: 0 };
            search.value = search.eval_at(&[]);
            let mut u = u0.clone();
            if k <= cfg.full_grid_max_dim {
                let coords: Vec<usize> = (0..k).collect();
                let (moved, out) = search.grid(&coords, 1.5 * scale, tol, cfg);
                exhausted |= out;
                for i in 0..k {
                    u[i] += moved[i];
                }
            } else {
                let mut converged = false;
                for _ in 0..cfg.max_sweeps {
                    let mut largest: f64 = 0.0;
                    for i in 0..k {
                        let (moved, out) = search.grid(&[i], 1.5 * scale, tol, cfg);
                        exhausted |= out;
                        u[i] += moved[0];
                        largest = largest.max(moved[0].abs());
                    }
                    if largest < tol {
                        converged = true;
                        break;
                    }
                }
                exhausted |= !converged;
            }
            evals += search.evals;
            if best.as_ref().is_none_or(|b| search.value < b.0) {
                best = Some((search.value, u, search.shift.clone()));
            }
        }
        let (v, u, s) = best.expect("at least one start");
        let moved = u.norm();
        z += &p * u;
        shift = s;
        value = v;
        if moved < tol * 10.0 {
            break;
        }
    }
    let delta = base + &b * z;
    let warning = exhausted.then(|| "oracle search budget exhausted before the grid converged".to_string());
    if let Some(w) = &warning {
        log::debug!("{w}");
    }
    Ok(OracleResult { kl: value, delta, evaluations: evals, warning })
}
