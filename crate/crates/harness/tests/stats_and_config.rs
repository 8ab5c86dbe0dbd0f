use fisher_steer_harness::config::{ConceptRegime, ExperimentConfig};
use fisher_steer_harness::seeds::case_seed;
use fisher_steer_harness::stats::{binomial_upper_tail, median, midranks, quantile, spearman, win_rate};
use proptest::prelude::*;

#[test]
fn type_seven_quantiles() {
    let v = [10.0, 2.0, 4.0, 1.0, 3.0];
    assert_eq!(quantile(&v, 0.25), Some(2.0));
    assert!((quantile(&v, 0.9).unwrap() - 7.6).abs() < 1e-12);
    assert_eq!(median(&v), Some(3.0));
    assert_eq!(median(&[1.0, 2.0]), Some(1.5));
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[f64::NAN, 5.0]), Some(5.0));
}

#[test]
fn exact_binomial_tail() {
    assert!((binomial_upper_tail(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
    assert!((binomial_upper_tail(8, 10) - 56.0 / 1024.0).abs() < 1e-14);
    assert_eq!(binomial_upper_tail(0, 10), 1.0);
    let (rate, p) = win_rate(&[(2.0, 1.0), (1.0, 2.0), (3.0, 1.0), (1.0, 1.0)]).unwrap();
    assert_eq!(rate, 0.5);
    assert!((p - 11.0 / 16.0).abs() < 1e-14);
}

#[test]
fn spearman_with_ties() {
    assert_eq!(midranks(&[5.0, 6.0, 7.0, 8.0, 7.0]), vec![1.0, 2.0, 3.5, 5.0, 3.5]);
    let (r, p) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
    assert!((r - 8.0 / 95f64.sqrt()).abs() < 1e-12);
    assert!((p - 0.0886).abs() < 1e-3, "p = {p}");
    assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_none());
}

proptest! {
    #[test]
    fn spearman_is_invariant_under_monotone_maps(x in proptest::collection::vec(-10.0f64..10.0, 5..40), y in proptest::collection::vec(-10.0f64..10.0, 40)) {
        let y = &y[..x.len()];
        if let (Some(a), Some(b)) = (spearman(&x, y), spearman(&x.iter().map(|v| v.exp()).collect::<Vec<_>>(), y)) {
            prop_assert!((a.0 - b.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles_are_monotone(v in proptest::collection::vec(-1e3f64..1e3, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(quantile(&v, lo).unwrap() <= quantile(&v, hi).unwrap());
    }
}

#[test]
fn case_seeds_are_sha256_prefixes() {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(b"42:toy-stability:8:17");
    let expect = u64::from_le_bytes(digest[..8].try_into().unwrap());
    assert_eq!(case_seed(42, "toy-stability", 8, 17), expect);
}

#[test]
fn config_round_trips_through_toml_and_json() {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("c.toml");
    std::fs::write(&toml_path, toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&toml_path).unwrap(), cfg);
    let json_path = dir.path().join("c.json");
    std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&json_path).unwrap(), cfg);
    assert_eq!(cfg.hash().len(), 16);
    assert_eq!(cfg.hash(), ExperimentConfig::default().hash());
    let moved = ExperimentConfig { output_dir: "elsewhere".into(), ..cfg.clone() };
    assert_eq!(moved.hash(), cfg.hash());
}

#[test]
fn partial_config_keeps_defaults_and_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 7\n[toy_stability]\nn_inputs = 12\n").unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.toy_stability.n_inputs, 12);
    assert_eq!(cfg.toy_stability.dims, vec![4, 8, 16]);
    assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "bogus = 1\n").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
    std::fs::write(&path, "format_version = \"0\"\n").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());

    let mut cfg = ExperimentConfig::default();
    cfg.steering.regimes.clear();
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::default();
    cfg.steering.targets = vec![0.5, 0.3];
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::default();
    cfg.toy_stability.dims = vec![1];
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::default();
    cfg.steering.regimes = vec![ConceptRegime::Heterogeneous];
    assert!(cfg.validate().is_ok());
}
