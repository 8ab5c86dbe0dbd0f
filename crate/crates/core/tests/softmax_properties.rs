mod common;

use common::{normal_vec, random_table, rng, softmax};
use fisher_steer::softmax::{concept_probability, kl_between, kl_concept_decomposition, off_target_kl};
use fisher_steer::{ConceptSpec64, KlValue, UnembeddingTable64};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Second derivative of `A` by central differences, entry by entry.
fn fd_hessian(table: &UnembeddingTable64, lambda: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = lambda.len();
    let a = |l: &DVector<f64>| table.log_partition(l).unwrap();
    DMatrix::from_fn(d, d, |i, j| {
        let mut pp = lambda.clone();
        let mut pm = lambda.clone();
        let mut mp = lambda.clone();
        let mut mm = lambda.clone();
        pp[i] += h;
        pp[j] += h;
        pm[i] += h;
        pm[j] -= h;
        mp[i] -= h;
        mp[j] += h;
        mm[i] -= h;
        mm[j] -= h;
        (a(&pp) - a(&pm) - a(&mp) + a(&mm)) / (4.0 * h * h)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn probabilities_form_a_distribution(seed: u64, vocab in 2usize..64, d in 1usize..16, scale in 0.01f64..50.0) {
        let mut r = rng(seed);
        let table = random_table(&mut r, vocab, d);
        let lambda = normal_vec(&mut r, d, scale);
        let dist = table.distribution(&lambda).unwrap();
        prop_assert!(dist.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((dist.probs.sum() - 1.0).abs() <= 1e-12);
        let oracle = softmax(&(table.gamma() * &lambda));
        prop_assert!((dist.probs - oracle).amax() <= 1e-12);
    }

    #[test]
    fn dual_coordinate_is_gradient_of_log_partition(seed: u64, vocab in 2usize..32, d in 1usize..10) {
        let mut r = rng(seed);
        let table = random_table(&mut r, vocab, d);
        let lambda = normal_vec(&mut r, d, 1.0);
        let phi = table.dual_coordinate(&lambda).unwrap();
        let h = 1e-5;
        for i in 0..d {
            let mut p = lambda.clone();
            let mut m = lambda.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (table.log_partition(&p).unwrap() - table.log_partition(&m).unwrap()) / (2.0 * h);
            prop_assert!((fd - phi[i]).abs() <= 1e-6, "coordinate {}: fd {} vs φ {}", i, fd, phi[i]);
        }
    }

    #[test]
    fn fisher_is_hessian_of_log_partition_and_psd(seed: u64, vocab in 2usize..32, d in 1usize..8) {
        let mut r = rng(seed);
        let table = random_table(&mut r, vocab, d);
        let lambda = normal_vec(&mut r, d, 1.0);
        let fisher = table.fisher_matrix(&lambda, None).unwrap();
        let fd = fd_hessian(&table, &lambda, 1e-4);
        prop_assert!((&fisher - &fd).amax() <= 1e-5, "max entry error {:e}", (&fisher - &fd).amax());
        prop_assert!((&fisher - fisher.transpose()).amax() <= 1e-14);
        let min_eig = fisher.symmetric_eigenvalues().min();
        prop_assert!(min_eig >= -1e-12 * fisher.norm().max(1.0));
    }

    #[test]
    fn nll_hessian_does_not_depend_on_the_label(seed: u64) {
        let mut r = rng(seed);
        let table = random_table(&mut r, 8, 4);
        let lambda = normal_vec(&mut r, 4, 1.0);
        let fisher = table.fisher_matrix(&lambda, None).unwrap();
        let h = 1e-4;
        for y in 0..8 {
            // −log P(y | λ) = A(λ) − γ_yᵀλ, differentiated without reusing A.
            let nll = |l: &DVector<f64>| -> f64 { -softmax(&(table.gamma() * l))[y].ln() };
            let hess = DMatrix::from_fn(4, 4, |i, j| {
                let at = |si: f64, sj: f64| {
                    let mut l = lambda.clone();
                    l[i] += si * h;
                    l[j] += sj * h;
                    nll(&l)
                };
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
            });
            prop_assert!((&hess - &fisher).amax() <= 1e-5, "label {}: {:e}", y, (&hess - &fisher).amax());
        }
    }

    #[test]
    fn off_target_kl_ignores_redistribution_within_pairs(seed: u64, frac in proptest::collection::vec(0.0f64..1.0, 3)) {
        let mut r = rng(seed);
        let vocab = 9;
        let concept = ConceptSpec64::new(vec![(0, 1), (2, 3), (4, 5)], vocab).unwrap();
        let p0 = softmax(&normal_vec(&mut r, vocab, 1.0));
        let p1 = softmax(&normal_vec(&mut r, vocab, 1.0));
        let mut moved = p1.clone();
        for (k, &(b, t)) in concept.pairs().iter().enumerate() {
            let s = p1[b] + p1[t];
            moved[b] = s * frac[k];
            moved[t] = s - moved[b];
        }
        let a = off_target_kl(&p0, &p1, &concept).unwrap().finite().unwrap();
        let b = off_target_kl(&p0, &moved, &concept).unwrap().finite().unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300) + 1e-15);
    }

    #[test]
    fn decomposition_is_exact_for_a_shared_pair_difference(seed: u64) {
        let mut r = rng(seed);
        let d = 5;
        let mut gamma = common::normal_mat(&mut r, 10, d, 1.0);
        let shared = normal_vec(&mut r, d, 1.0);
        for k in 0..3 {
            let base = gamma.row(2 * k).into_owned();
            gamma.set_row(2 * k + 1, &(base + shared.transpose()));
        }
        let table = UnembeddingTable64::new(gamma).unwrap();
        let concept = ConceptSpec64::new(vec![(0, 1), (2, 3), (4, 5)], 10).unwrap();
        let l0 = normal_vec(&mut r, d, 1.0);
        let l1 = normal_vec(&mut r, d, 1.0);
        let dec = kl_concept_decomposition(&table, &l0, &l1, &concept).unwrap();
        prop_assert!(dec.residual.abs() <= 1e-10 * dec.total.max(1.0), "residual {:e}", dec.residual);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// The Bregman form `A(λ₁) − A(λ₀) − φ(λ₀)ᵀ(λ₁ − λ₀)` against `Σ p₀ log(p₀/p₁)`.
    #[test]
    fn bregman_kl_matches_direct_sum(seed: u64, vocab in 2usize..48, d in 1usize..12, step in 0.01f64..3.0) {
        let mut r = rng(seed);
        let table = random_table(&mut r, vocab, d);
        let l0 = normal_vec(&mut r, d, 1.0);
        let l1 = &l0 + normal_vec(&mut r, d, step);
        let p0 = softmax(&(table.gamma() * &l0));
        let p1 = softmax(&(table.gamma() * &l1));
        let direct = match kl_between(p0.as_slice(), p1.as_slice()) {
            KlValue::Finite(v) => v,
            KlValue::Infinite => return Ok(()),
        };
        let bregman = table.kl_divergence(&l0, &l1).unwrap();
        // Both forms lose ~ε·|A| to cancellation; the floor covers that.
        let floor = 1e-14 * (table.log_partition(&l0).unwrap().abs() + table.log_partition(&l1).unwrap().abs() + 1.0);
        prop_assert!((bregman - direct).abs() <= 1e-9 * direct + floor, "bregman {:e} direct {:e}", bregman, direct);
        prop_assert!(bregman >= -floor);
    }
}

#[test]
fn concept_probability_is_the_ratio_of_pair_masses() {
    let probs = DVector::from_vec(vec![0.1, 0.3, 0.2, 0.2, 0.2]);
    let concept = ConceptSpec64::new(vec![(0, 1), (2, 3)], 5).unwrap();
    let p = concept_probability(&probs, &concept).unwrap();
    assert!((p - 0.5 / 0.8).abs() < 1e-15);
}
