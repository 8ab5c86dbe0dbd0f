#![allow(dead_code)]

use fisher_steer::transformer::{BlockKind, NetworkSpec, Nonlinearity};
use fisher_steer::{PullbackMetric64, ToyNetwork64, UnembeddingTable64};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn random_table(rng: &mut ChaCha8Rng, vocab: usize, d: usize) -> UnembeddingTable64 {
    UnembeddingTable64::new(normal_mat(rng, vocab, d, 1.0)).unwrap()
}

/// Haar-random orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let qr = normal_mat(rng, d, d, 1.0).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `U diag(λ) Uᵀ` with `log10 λ` uniform on `[-spread/2, spread/2]` and the
/// last `d − rank` eigenvalues set to zero.
pub fn random_psd(rng: &mut ChaCha8Rng, d: usize, spread: f64, rank: usize) -> DMatrix<f64> {
    let u = orthogonal(rng, d);
    let lam = DVector::from_fn(d, |i, _| {
        if i < rank {
            10f64.powf(rng.random_range(-spread / 2.0..=spread / 2.0))
        } else {
            0.0
        }
    });
    let g = &u * DMatrix::from_diagonal(&lam) * u.transpose();
    (&g + g.transpose()) * 0.5
}

pub fn random_metric(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> PullbackMetric64 {
    PullbackMetric64::from_matrix(random_psd(rng, d, spread, d)).unwrap()
}

pub fn preln_spec(d: usize, layers: usize) -> NetworkSpec {
    NetworkSpec {
        dim: d,
        hidden: 2 * d,
        layers,
        vocab: 3 * d,
        kind: BlockKind::PreLnMlp,
        nonlinearity: Nonlinearity::GeluTanh,
        weight_scale: 0.5,
        final_ln: true,
        jitter: 0.1,
    }
}

pub fn random_net(seed: u64, d: usize, layers: usize) -> ToyNetwork64 {
    preln_spec(d, layers).build(seed).unwrap()
}

/// Softmax computed independently of the crate.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.max();
    let e = logits.map(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}
