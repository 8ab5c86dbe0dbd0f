#![allow(dead_code)]

use std::path::Path;

use fisher_steer::transformer::{BlockKind, NetworkSpec, Nonlinearity};
use fisher_steer::ToyNetwork64;
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

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.max();
    let e = logits.map(|x| (x - m).exp());
    let s = e.sum();
    e / s
}

pub fn preln_net(seed: u64, d: usize, layers: usize) -> ToyNetwork64 {
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
    .build(seed)
    .unwrap()
}

/// Sorted `(file name, bytes)` of every CSV in `dir`.
pub fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
