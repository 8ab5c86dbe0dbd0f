//! The categorical softmax head as an exponential family.
//!
//! `P_λ(y) = exp(γ_yᵀλ − A(λ))` with log-partition `A`, dual coordinate
//! `φ = ∇A = E[γ]` and Fisher matrix `H = ∇²A = Cov(γ)`. The second half of
//! the module implements the concept-decomposed evaluation metrics built on
//! counterfactual token pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::is_finite_vec;
use crate::{lit, Scalar};

/// Unembedding rows `γ_y`, one per token.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingTable<T: Scalar> {
    gamma: DMatrix<T>,
}

/// A softmax output distribution together with the parameter that produced it.
#[derive(Debug, Clone)]
pub struct OutputDistribution<T: Scalar> {
    pub lambda: DVector<T>,
    pub probs: DVector<T>,
    pub log_partition: T,
}

/// KL divergence that may be infinite on a support mismatch.
///
/// Aggregation code must handle `Infinite` explicitly; it is never folded into
/// a float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlValue<T> {
    Finite(T),
    Infinite,
}

impl<T: Scalar> KlValue<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            KlValue::Finite(v) => Some(v),
            KlValue::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, KlValue::Infinite)
    }
}

impl<T: Scalar> UnembeddingTable<T> {
    pub fn new(gamma: DMatrix<T>) -> Result<Self> {
        if gamma.nrows() < 2 {
            return Err(Error::invalid(format!(
                "vocabulary needs at least 2 tokens, got {}",
                gamma.nrows()
            )));
        }
        if gamma.ncols() == 0 {
            return Err(Error::invalid("unembedding dimension must be positive"));
        }
        if gamma.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("unembedding table has non-finite entries"));
        }
        Ok(Self { gamma })
    }

    pub fn vocab_size(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn dim(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn gamma(&self) -> &DMatrix<T> {
        &self.gamma
    }

    pub fn row(&self, y: usize) -> DVector<T> {
        self.gamma.row(y).transpose()
    }

    fn check_lambda(&self, lambda: &DVector<T>) -> Result<()> {
        if lambda.len() != self.dim() {
            return Err(Error::invalid(format!(
                "λ has length {}, table dimension is {}",
                lambda.len(),
                self.dim()
            )));
        }
        if !is_finite_vec(lambda) {
            return Err(Error::invalid("λ has non-finite entries"));
        }
        Ok(())
    }

    pub fn logits(&self, lambda: &DVector<T>) -> DVector<T> {
        &self.gamma * lambda
    }

    /// `A(λ) = log Σ_y exp(γ_yᵀλ)`, max-shifted.
    pub fn log_partition(&self, lambda: &DVector<T>) -> Result<T> {
        self.check_lambda(lambda)?;
        Ok(log_sum_exp(&self.logits(lambda)).0)
    }

    pub fn distribution(&self, lambda: &DVector<T>) -> Result<OutputDistribution<T>> {
        self.check_lambda(lambda)?;
        let (log_partition, probs) = log_sum_exp(&self.logits(lambda));
        Ok(OutputDistribution { lambda: lambda.clone(), probs, log_partition })
    }

    /// `φ(λ) = Σ_y P_λ(y) γ_y`.
    pub fn dual_coordinate(&self, lambda: &DVector<T>) -> Result<DVector<T>> {
        let dist = self.distribution(lambda)?;
        Ok(self.gamma.transpose() * &dist.probs)
    }

    /// `H(λ) = Cov_{P_λ}(γ)`.
    ///
    /// With `top_k`, only the `k` most probable tokens are kept and their
    /// probabilities renormalized over that subset.
    pub fn fisher_matrix(&self, lambda: &DVector<T>, top_k: Option<usize>) -> Result<DMatrix<T>> {
        let dist = self.distribution(lambda)?;
        match top_k {
            None => {
                let idx: Vec<usize> = (0..self.vocab_size()).collect();
                Ok(self.weighted_covariance(&idx, &dist.probs))
            }
            Some(k) => {
                if k < 2 || k > self.vocab_size() {
                    return Err(Error::invalid(format!(
                        "top_k must lie in [2, {}], got {k}",
                        self.vocab_size()
                    )));
                }
                let mut idx: Vec<usize> = (0..self.vocab_size()).collect();
                idx.sort_by(|&a, &b| {
                    dist.probs[b]
                        .partial_cmp(&dist.probs[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                idx.truncate(k);
                Ok(self.weighted_covariance(&idx, &dist.probs))
            }
        }
    }

    /// Covariance of the selected rows under `probs` renormalized over them.
    fn weighted_covariance(&self, idx: &[usize], probs: &DVector<T>) -> DMatrix<T> {
        let d = self.dim();
        let mass = idx.iter().fold(T::zero(), |acc, &y| acc + probs[y]);
        let mut mean = DVector::zeros(d);
        for &y in idx {
            mean.axpy(probs[y] / mass, &self.gamma.row(y).transpose(), T::one());
        }
        let mut cov = DMatrix::zeros(d, d);
        for &y in idx {
            let w = probs[y] / mass;
            if w == T::zero() {
                continue;
            }
            let c = self.gamma.row(y).transpose() - &mean;
            cov.ger(w, &c, &c, T::one());
        }
        crate::linalg::symmetrize(&cov)
    }

    /// Bregman form `A(λ₁) − A(λ₀) − φ(λ₀)ᵀ(λ₁ − λ₀)` of `KL(P_λ₀ ‖ P_λ₁)`.
    pub fn kl_divergence(&self, lambda0: &DVector<T>, lambda1: &DVector<T>) -> Result<T> {
        let d0 = self.distribution(lambda0)?;
        let a1 = self.log_partition(lambda1)?;
        let phi0 = self.gamma.transpose() * &d0.probs;
        Ok(a1 - d0.log_partition - phi0.dot(&(lambda1 - lambda0)))
    }

    /// `KL(P_λ₀ ‖ P_λ₁)` summed token by token.
    pub fn kl_direct(&self, lambda0: &DVector<T>, lambda1: &DVector<T>) -> Result<T> {
        self.check_lambda(lambda0)?;
        self.check_lambda(lambda1)?;
        let l0 = self.logits(lambda0);
        let l1 = self.logits(lambda1);
        let (a0, p0) = log_sum_exp(&l0);
        let (a1, _) = log_sum_exp(&l1);
        let mut acc = T::zero();
        for y in 0..self.vocab_size() {
            if p0[y] > T::zero() {
                acc += p0[y] * ((l0[y] - a0) - (l1[y] - a1));
            }
        }
        Ok(acc)
    }
}

/// Returns `(log Σ exp(x_i), softmax(x))` using a max shift.
pub fn log_sum_exp<T: Scalar>(x: &DVector<T>) -> (T, DVector<T>) {
    let m = x.iter().copied().fold(T::min_value().unwrap_or(-T::one() / T::zero()), |a, b| a.max(b));
    let shifted = x.map(|v| (v - m).exp());
    let s = shifted.sum();
    (m + s.ln(), shifted / s)
}

/// `Σ p log(p/q)`, infinite when `q` misses mass that `p` has.
pub fn kl_between<T: Scalar>(p: &[T], q: &[T]) -> KlValue<T> {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= T::zero() {
            continue;
        }
        if qi <= T::zero() {
            return KlValue::Infinite;
        }
        acc += pi * (pi / qi).ln();
    }
    KlValue::Finite(acc)
}

// ---------------------------------------------------------------------------
// Concepts
// ---------------------------------------------------------------------------

/// How the steering covector is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovectorMode {
    /// `q = Jᵀβ_W` from a linear probe on the final hidden state.
    LinearProbe,
    /// `q = ∇_h P^W(1)`.
    #[default]
    ConceptProbGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe<T: Scalar> {
    pub weight: DVector<T>,
    pub bias: T,
}

/// A binary concept defined by counterfactual `(base, target)` token pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpec<T: Scalar> {
    pairs: Vec<(usize, usize)>,
    rest: Vec<usize>,
    pub probe: Option<LinearProbe<T>>,
    pub covector_mode: CovectorMode,
}

impl<T: Scalar> ConceptSpec<T> {
    pub fn new(pairs: Vec<(usize, usize)>, vocab_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("a concept needs at least one counterfactual pair"));
        }
        let mut seen = vec![false; vocab_size];
        for &(a, b) in &pairs {
            for t in [a, b] {
                if t >= vocab_size {
                    return Err(Error::invalid(format!("token {t} outside vocabulary of {vocab_size}")));
                }
                if seen[t] {
                    return Err(Error::invalid(format!("token {t} appears in more than one pair slot")));
                }
                seen[t] = true;
            }
        }
        let rest = (0..vocab_size).filter(|&t| !seen[t]).collect();
        Ok(Self { pairs, rest, probe: None, covector_mode: CovectorMode::default() })
    }

    pub fn with_probe(mut self, weight: DVector<T>, bias: T) -> Self {
        self.probe = Some(LinearProbe { weight, bias });
        self
    }

    pub fn with_mode(mut self, mode: CovectorMode) -> Self {
        self.covector_mode = mode;
        self
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn rest(&self) -> &[usize] {
        &self.rest
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.rest.len() + 2 * self.pairs.len()
    }

    /// `d_i = γ_{y_i¹} − γ_{y_i⁰}`.
    pub fn difference_vectors(&self, table: &UnembeddingTable<T>) -> Vec<DVector<T>> {
        self.pairs.iter().map(|&(b, t)| table.row(t) - table.row(b)).collect()
    }

    fn check_len(&self, probs: &DVector<T>) -> Result<()> {
        if probs.len() != self.vocab_size() {
            return Err(Error::invalid(format!(
                "distribution over {} tokens, concept built for {}",
                probs.len(),
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// `(Σ P(y_i⁰), Σ P(y_i¹))`.
    pub fn pair_masses(&self, probs: &DVector<T>) -> (T, T) {
        self.pairs.iter().fold((T::zero(), T::zero()), |(s0, s1), &(b, t)| (s0 + probs[b], s1 + probs[t]))
    }
}

/// Threshold below which a probability is treated as exactly zero.
fn tiny<T: Scalar>() -> T {
    lit(1e-300)
}

/// `P^W(1) = Σ P(y_i¹) / (Σ P(y_i⁰) + Σ P(y_i¹))`.
pub fn concept_probability<T: Scalar>(probs: &DVector<T>, concept: &ConceptSpec<T>) -> Result<T> {
    concept.check_len(probs)?;
    let (s0, s1) = concept.pair_masses(probs);
    let den = s0 + s1;
    if den <= tiny() {
        return Err(Error::DegenerateConcept(format!(
            "counterfactual pairs carry total mass {:e}",
            crate::to_f64(den)
        )));
    }
    Ok(s1 / den)
}

/// Total probability on counterfactual tokens.
pub fn counterfactual_mass<T: Scalar>(probs: &DVector<T>, concept: &ConceptSpec<T>) -> T {
    let (s0, s1) = concept.pair_masses(probs);
    s0 + s1
}

/// Off-target distribution: one merged category per pair followed by the
/// rest tokens in vocabulary order.
pub fn off_target_distribution<T: Scalar>(probs: &DVector<T>, concept: &ConceptSpec<T>) -> Result<DVector<T>> {
    concept.check_len(probs)?;
    let merged = concept.pairs.iter().map(|&(b, t)| probs[b] + probs[t]);
    let rest = concept.rest.iter().map(|&y| probs[y]);
    Ok(DVector::from_iterator(concept.n_pairs() + concept.rest.len(), merged.chain(rest)))
}

/// `KL(P₀^Z ‖ P₁^Z)` between the off-target distributions.
pub fn off_target_kl<T: Scalar>(
    probs0: &DVector<T>,
    probs1: &DVector<T>,
    concept: &ConceptSpec<T>,
) -> Result<KlValue<T>> {
    let z0 = off_target_distribution(probs0, concept)?;
    let z1 = off_target_distribution(probs1, concept)?;
    Ok(kl_between(z0.as_slice(), z1.as_slice()))
}

/// `max_{i,j} |d_iᵀλ − d_jᵀλ|`; zero exactly when `P_λ` is decomposable.
pub fn decomposability_defect<T: Scalar>(
    table: &UnembeddingTable<T>,
    lambda: &DVector<T>,
    concept: &ConceptSpec<T>,
) -> Result<T> {
    table.check_lambda(lambda)?;
    let scores: Vec<T> = concept.difference_vectors(table).iter().map(|d| d.dot(lambda)).collect();
    let hi = scores.iter().copied().fold(scores[0], |a, b| a.max(b));
    let lo = scores.iter().copied().fold(scores[0], |a, b| a.min(b));
    Ok(hi - lo)
}

/// Split of `KL(P_λ₀ ‖ P_λ₁)` into the concept and off-target parts.
#[derive(Debug, Clone, Copy)]
pub struct KlDecomposition<T> {
    pub total: T,
    /// `(Σ_i P₀^Z(z_i)) · KL(P₀^W ‖ P₁^W)`.
    pub concept_term: T,
    /// `KL(P₀^Z ‖ P₁^Z)`.
    pub offtarget_term: T,
    /// `total − concept_term − offtarget_term`; zero under decomposability.
    pub residual: T,
}

pub fn kl_concept_decomposition<T: Scalar>(
    table: &UnembeddingTable<T>,
    lambda0: &DVector<T>,
    lambda1: &DVector<T>,
    concept: &ConceptSpec<T>,
) -> Result<KlDecomposition<T>> {
    let clamp = |p: &DVector<T>| p.map(|x| if x < tiny() { T::zero() } else { x });
    let p0 = clamp(&table.distribution(lambda0)?.probs);
    let p1 = clamp(&table.distribution(lambda1)?.probs);

    let total = kl_between(p0.as_slice(), p1.as_slice());
    let offtarget = off_target_kl(&p0, &p1, concept)?;
    let w0 = concept_probability(&p0, concept)?;
    let w1 = concept_probability(&p1, concept)?;
    let bern0 = [T::one() - w0, w0];
    let bern1 = [T::one() - w1, w1];
    let concept_kl = kl_between(&bern0, &bern1);

    match (total, offtarget, concept_kl) {
        (KlValue::Finite(total), KlValue::Finite(off), KlValue::Finite(ckl)) => {
            let concept_term = counterfactual_mass(&p0, concept) * ckl;
            Ok(KlDecomposition {
                total,
                concept_term,
                offtarget_term: off,
                residual: total - concept_term - off,
            })
        }
        _ => Err(Error::DegenerateConcept("support mismatch between the two distributions".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_table(rng: &mut ChaCha8Rng, v: usize, d: usize) -> UnembeddingTable<f64> {
        UnembeddingTable::new(DMatrix::from_fn(v, d, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    /// Direct `log Σ exp` with no shift; the oracle for small logits.
    fn naive_log_partition(t: &UnembeddingTable<f64>, l: &DVector<f64>) -> f64 {
        (0..t.vocab_size()).map(|y| t.row(y).dot(l).exp()).sum::<f64>().ln()
    }

    #[test]
    fn log_partition_identical_logits() {
        let t = UnembeddingTable::new(DMatrix::<f64>::zeros(2, 3)).unwrap();
        let a = t.log_partition(&DVector::from_vec(vec![0.3, -2.0, 5.0])).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_partition_basis_rows_at_origin() {
        let t = UnembeddingTable::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        assert!((t.log_partition(&DVector::zeros(2)).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_partition_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_table(&mut rng, 8, 4);
        for _ in 0..50 {
            let l = random_vec(&mut rng, 4);
            let a = t.log_partition(&l).unwrap();
            assert!((a - naive_log_partition(&t, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_partition_survives_huge_logits() {
        let t = UnembeddingTable::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        let a = t.log_partition(&DVector::from_vec(vec![1000.0, 0.0])).unwrap();
        assert!((a - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(UnembeddingTable::new(DMatrix::<f64>::zeros(1, 2)).is_err());
        let t = UnembeddingTable::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        assert!(t.log_partition(&DVector::from_vec(vec![f64::NAN, 0.0])).is_err());
        assert!(t.log_partition(&DVector::zeros(3)).is_err());
        assert!(t.fisher_matrix(&DVector::zeros(2), Some(1)).is_err());
        assert!(t.fisher_matrix(&DVector::zeros(2), Some(3)).is_err());
    }

    #[test]
    fn dual_coordinate_uniform_and_delta() {
        let t = UnembeddingTable::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        let phi = t.dual_coordinate(&DVector::zeros(2)).unwrap();
        assert!((phi[0] - 0.5).abs() < 1e-15 && (phi[1] - 0.5).abs() < 1e-15);
        let phi = t.dual_coordinate(&DVector::from_vec(vec![60.0, 0.0])).unwrap();
        assert!((phi[0] - 1.0).abs() < 1e-12 && phi[1].abs() < 1e-12);
    }

    #[test]
    fn dual_coordinate_is_gradient_of_log_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (v, d) in [(8, 3), (64, 16), (20, 5)] {
            let t = random_table(&mut rng, v, d);
            let l = random_vec(&mut rng, d) * 0.5;
            let phi = t.dual_coordinate(&l).unwrap();
            let eps = 1e-5;
            for i in 0..d {
                let mut lp = l.clone();
                lp[i] += eps;
                let mut lm = l.clone();
                lm[i] -= eps;
                let fd = (t.log_partition(&lp).unwrap() - t.log_partition(&lm).unwrap()) / (2.0 * eps);
                assert!((fd - phi[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", phi[i]);
            }
        }
    }

    #[test]
    fn fisher_two_token_bernoulli() {
        let t = UnembeddingTable::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        let h = t.fisher_matrix(&DVector::zeros(2), None).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((h - want).norm() < 1e-15);
    }

    #[test]
    fn fisher_vanishes_for_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        g.row_mut(0).copy_from_slice(&[100.0, 0.0, 0.0]);
        let t = UnembeddingTable::new(g).unwrap();
        let h = t.fisher_matrix(&DVector::from_vec(vec![10.0, 0.0, 0.0]), None).unwrap();
        assert!(h.norm() < 1e-100);
    }

    #[test]
    fn fisher_is_hessian_of_log_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_table(&mut rng, 10, 4);
        let l = random_vec(&mut rng, 4) * 0.5;
        let h = t.fisher_matrix(&l, None).unwrap();
        let eps = 1e-4;
        let a = |x: &DVector<f64>| t.log_partition(x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let e = |si: f64, sj: f64| {
                    let mut x = l.clone();
                    x[i] += si * eps;
                    x[j] += sj * eps;
                    a(&x)
                };
                let fd = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * eps * eps);
                assert!((fd - h[(i, j)]).abs() < 1e-5, "({i},{j}) {fd} vs {}", h[(i, j)]);
            }
        }
        let min_eig = h.symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-10);
    }

    #[test]
    fn fisher_top_k_renormalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_table(&mut rng, 12, 3);
        let l = random_vec(&mut rng, 3);
        let full = t.fisher_matrix(&l, None).unwrap();
        assert!((t.fisher_matrix(&l, Some(12)).unwrap() - &full).norm() < 1e-13);
        // top-2: Bernoulli covariance of the two retained rows.
        let p = t.distribution(&l).unwrap().probs;
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        let (a, b) = (idx[0], idx[1]);
        let w = p[a] / (p[a] + p[b]);
        let diff = t.row(a) - t.row(b);
        let want = &diff * diff.transpose() * (w * (1.0 - w));
        assert!((t.fisher_matrix(&l, Some(2)).unwrap() - want).norm() < 1e-12);
    }

    #[test]
    fn kl_identity_and_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_table(&mut rng, 8, 4);
        let l0 = random_vec(&mut rng, 4);
        assert!(t.kl_divergence(&l0, &l0).unwrap().abs() < 1e-14);
        for _ in 0..200 {
            let l0 = random_vec(&mut rng, 4);
            let l1 = random_vec(&mut rng, 4);
            let p0 = t.distribution(&l0).unwrap().probs;
            let p1 = t.distribution(&l1).unwrap().probs;
            let direct = kl_between(p0.as_slice(), p1.as_slice()).finite().unwrap();
            let bregman = t.kl_divergence(&l0, &l1).unwrap();
            assert!((direct - bregman).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_second_order_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_table(&mut rng, 8, 4);
        let l0 = random_vec(&mut rng, 4);
        let dir = random_vec(&mut rng, 4).normalize();
        let h = t.fisher_matrix(&l0, None).unwrap();
        let mut last = f64::INFINITY;
        for scale in [1e-1, 1e-2, 1e-3] {
            let dl = &dir * scale;
            let kl = t.kl_direct(&l0, &(&l0 + &dl)).unwrap();
            let quad = 0.5 * dl.dot(&(&h * &dl));
            let rel = ((kl - quad) / kl).abs();
            assert!(rel < last, "relative error should shrink: {rel} after {last}");
            last = rel;
        }
        assert!(last < 1e-2);
    }

    fn three_pair_concept() -> ConceptSpec<f64> {
        ConceptSpec::new(vec![(0, 1), (2, 3), (4, 5)], 8).unwrap()
    }

    #[test]
    fn concept_spec_validation() {
        assert!(ConceptSpec::<f64>::new(vec![], 4).is_err());
        assert!(ConceptSpec::<f64>::new(vec![(0, 1), (1, 2)], 4).is_err());
        assert!(ConceptSpec::<f64>::new(vec![(0, 0)], 4).is_err());
        assert!(ConceptSpec::<f64>::new(vec![(0, 9)], 4).is_err());
        let c = ConceptSpec::<f64>::new(vec![(0, 3)], 5).unwrap();
        assert_eq!(c.rest(), &[1, 2, 4]);
    }

    #[test]
    fn concept_probability_cases() {
        let c = three_pair_concept();
        let zero_targets = DVector::from_vec(vec![0.2, 0.0, 0.1, 0.0, 0.3, 0.0, 0.2, 0.2]);
        assert_eq!(concept_probability(&zero_targets, &c).unwrap(), 0.0);
        let sym = DVector::from_vec(vec![0.1, 0.1, 0.05, 0.05, 0.2, 0.2, 0.2, 0.1]);
        assert!((concept_probability(&sym, &c).unwrap() - 0.5).abs() < 1e-15);
        // (0.02 + 0.06 + 0.12) / (0.1 + 0.2 + 0.3 + 0.02 + 0.06 + 0.12) = 0.2 / 0.8
        let hand = DVector::from_vec(vec![0.1, 0.02, 0.2, 0.06, 0.3, 0.12, 0.1, 0.1]);
        assert!((concept_probability(&hand, &c).unwrap() - 0.25).abs() < 1e-15);
        let none = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(concept_probability(&none, &c), Err(Error::DegenerateConcept(_))));
    }

    #[test]
    fn off_target_distribution_cases() {
        let c = ConceptSpec::<f64>::new(vec![(0, 1)], 4).unwrap();
        let p = DVector::from_vec(vec![0.3, 0.2, 0.4, 0.1]);
        let z = off_target_distribution(&p, &c).unwrap();
        assert_eq!(z.as_slice(), &[0.5, 0.4, 0.1]);
        let p = DVector::from_vec(vec![0.0, 0.0, 0.7, 0.3]);
        assert_eq!(off_target_distribution(&p, &c).unwrap().as_slice(), &[0.0, 0.7, 0.3]);
    }

    #[test]
    fn off_target_kl_cases() {
        let c = three_pair_concept();
        let p = DVector::from_vec(vec![0.1, 0.02, 0.2, 0.06, 0.3, 0.12, 0.1, 0.1]);
        assert_eq!(off_target_kl(&p, &p, &c).unwrap(), KlValue::Finite(0.0));
        let mut moved = p.clone();
        moved[0] = 0.0;
        moved[1] = 0.12;
        assert!(off_target_kl(&p, &moved, &c).unwrap().finite().unwrap().abs() < 1e-15);
        let mut dead = p.clone();
        dead[6] = 0.0;
        dead[7] = 0.2;
        assert!(off_target_kl(&p, &dead, &c).unwrap().is_infinite());
    }

    #[test]
    fn decomposability_defect_cases() {
        // Two pairs sharing the difference vector (1, 0).
        let g = DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 1.0, 1.0, 0.0, -1.0, 1.0, -1.0, 0.3, 0.3]);
        let t = UnembeddingTable::new(g).unwrap();
        let c = ConceptSpec::new(vec![(0, 1), (2, 3)], 5).unwrap();
        let l = DVector::from_vec(vec![0.7, -1.3]);
        assert!(decomposability_defect::<f64>(&t, &l, &c).unwrap().abs() < 1e-15);

        // d_0 = (1, 0), d_1 = (0, 2): gap |λ_0 − 2λ_1|.
        let g = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let t = UnembeddingTable::new(g).unwrap();
        let l = DVector::from_vec(vec![0.5, 1.0]);
        assert!((decomposability_defect::<f64>(&t, &l, &c).unwrap() - 1.5).abs() < 1e-15);
        // λ orthogonal to d_0 − d_1 = (1, −2).
        let l = DVector::from_vec(vec![2.0, 1.0]);
        assert!(decomposability_defect::<f64>(&t, &l, &c).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_decomposition_exact_when_decomposable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let shared = random_vec(&mut rng, d);
        let mut g = DMatrix::from_fn(10, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for i in 0..3 {
            let base = g.row(2 * i).transpose();
            g.set_row(2 * i + 1, &(base + &shared).transpose());
        }
        let t = UnembeddingTable::new(g).unwrap();
        let c = ConceptSpec::new(vec![(0, 1), (2, 3), (4, 5)], 10).unwrap();
        let l0 = random_vec(&mut rng, d);
        let l1 = random_vec(&mut rng, d);
        let dec = kl_concept_decomposition(&t, &l0, &l1, &c).unwrap();
        assert!(dec.residual.abs() < 1e-9, "residual {}", dec.residual);
        assert!((dec.total - t.kl_divergence(&l0, &l1).unwrap()).abs() < 1e-9);

        let same = kl_concept_decomposition(&t, &l0, &l0, &c).unwrap();
        assert!(same.total.abs() < 1e-15 && same.concept_term.abs() < 1e-15 && same.offtarget_term.abs() < 1e-15);

        // Heterogeneous difference vectors: residual is reported, not an error.
        let t2 = random_table(&mut rng, 10, d);
        let dec = kl_concept_decomposition(&t2, &l0, &l1, &c).unwrap();
        assert!(decomposability_defect(&t2, &l0, &c).unwrap() > 1e-3);
        assert!(dec.residual.abs() > 1e-9);
    }
}
