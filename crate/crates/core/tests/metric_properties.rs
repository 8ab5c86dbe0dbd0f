mod common;

use common::{normal_vec, preln_spec, random_net, random_psd, rng};
use fisher_steer::metric::{depth_bound_check, euclidean_deviation, pullback_fisher, verify_recursion};
use fisher_steer::transformer::JacobianMethod;
use fisher_steer::{LayeredMap, PullbackMetric64};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    /// `KL(P_h ‖ P_{h+δ}) ≈ ½ δᵀGδ` with error shrinking as `‖δ‖ → 0`.
    #[test]
    fn quadratic_form_matches_kl_to_second_order(seed: u64) {
        let d = 8;
        let net = random_net(seed, d, 3);
        let mut r = rng(seed ^ 7);
        let h = normal_vec(&mut r, d, 1.0);
        let g = pullback_fisher(&net, 0, &h).unwrap();
        let dir = normal_vec(&mut r, d, 1.0).normalize();
        let lambda0 = net.forward_from(0, &h).unwrap();
        let mut errors = Vec::new();
        for norm in [1e-3, 1e-4] {
            let delta = &dir * norm;
            let lambda1 = net.forward_from(0, &(&h + &delta)).unwrap();
            let kl = net.table().kl_divergence(&lambda0, &lambda1).unwrap();
            let quad = 0.5 * delta.dot(&(g.matrix() * &delta));
            errors.push((kl - quad).abs() / quad);
        }
        prop_assert!(errors[0] <= 0.1, "relative error {:e} at ‖δ‖ = 1e-3", errors[0]);
        prop_assert!(errors[1] <= errors[0] + 1e-6, "errors {:?} do not shrink", errors);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn pullback_recursion_is_exact(seed: u64, d in 3usize..12, layers in 1usize..5) {
        let net = random_net(seed, d, layers);
        let h = normal_vec(&mut rng(seed ^ 8), d, 1.0);
        let states = net.hidden_states(0, &h).unwrap();
        for l in 0..layers {
            let res = verify_recursion(&net, l, &states[l], JacobianMethod::Analytic).unwrap();
            prop_assert!(res <= 1e-8, "layer {}: residual {:e}", l, res);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn depth_bounds_hold_when_every_block_is_contractive(seed: u64, d in 4usize..10) {
        let mut spec = preln_spec(d, 4);
        spec.weight_scale = 0.3;
        let net = spec.build::<f64>(seed).unwrap();
        let h = normal_vec(&mut rng(seed ^ 9), d, 1.0);
        let layers: Vec<usize> = (0..=4).collect();
        for row in depth_bound_check(&net, &h, &layers).unwrap() {
            prop_assert!(row.condition_ok != Some(false), "layer {}: κ = {} above {:?}", row.layer, row.measured_condition, row.condition_bound);
            prop_assert!(row.erank_ok != Some(false), "layer {}: erank {} below {:?}", row.layer, row.trace_erank, row.erank_lower_bound);
        }
    }

    #[test]
    fn preln_metric_has_a_kernel_at_every_layer(seed: u64, d in 4usize..10) {
        let net = random_net(seed, d, 3);
        let h = normal_vec(&mut rng(seed ^ 10), d, 1.0);
        for (l, s) in net.hidden_states(0, &h).unwrap().iter().enumerate() {
            let g = pullback_fisher(&net, l, s).unwrap();
            prop_assert!(g.spectral_report().unwrap().null_dim >= 1, "layer {}", l);
            if l == net.num_layers() {
                prop_assert!((g.matrix() * s).norm() <= 1e-8 * g.lambda_max() * s.norm());
            }
        }
    }

    #[test]
    fn deviation_equals_best_isotropic_fit(seed: u64, d in 2usize..10, spread in 0.0f64..6.0) {
        let mut r = rng(seed);
        let rank = r.random_range(1..=d);
        let gm = random_psd(&mut r, d, spread, rank);
        let metric = PullbackMetric64::from_matrix(gm.clone()).unwrap();
        let (_, dev) = euclidean_deviation(&metric).unwrap();
        let fit = |c: f64| (&gm - DMatrix::identity(d, d) * c).norm() / gm.norm();
        let hi = metric.lambda_max();
        let (mut best_c, mut best) = (0.0, fit(0.0));
        for k in 0..=20_000 {
            let c = hi * k as f64 / 20_000.0;
            if fit(c) < best {
                best = fit(c);
                best_c = c;
            }
        }
        let step = hi / 20_000.0;
        for k in -200..=200 {
            let c = best_c + step * k as f64 / 100.0;
            best = best.min(fit(c));
        }
        prop_assert!((dev - best).abs() <= 1e-4, "closed form {} vs grid {}", dev, best);
    }

    #[test]
    fn spectral_report_is_internally_consistent(seed: u64, d in 2usize..12, spread in 0.0f64..8.0) {
        let mut r = rng(seed);
        let rank = r.random_range(1..=d);
        let metric = PullbackMetric64::from_matrix(random_psd(&mut r, d, spread, rank)).unwrap();
        let rep = metric.spectral_report().unwrap();
        prop_assert_eq!(rep.null_dim, d - rank);
        prop_assert!(rep.condition_number >= 1.0);
        prop_assert!(rep.trace_effective_rank >= 1.0 - 1e-12 && rep.trace_effective_rank <= rank as f64 + 1e-9);
        prop_assert!(rep.entropy_effective_rank >= 1.0 - 1e-12 && rep.entropy_effective_rank <= rank as f64 + 1e-9);
        prop_assert!(rep.participation_ratio <= rank as f64 + 1e-9);
        prop_assert!((0.0..=1.0).contains(&rep.euclidean_deviation));
        prop_assert!(metric.reconstruction_error() <= 1e-10);
    }

    #[test]
    fn scaling_the_metric_scales_its_spectrum(seed: u64, d in 2usize..8, log_s in -6.0f64..6.0) {
        let mut r = rng(seed);
        let metric = common::random_metric(&mut r, d, 3.0);
        let s = 10f64.powf(log_s);
        let scaled = metric.scaled(s).unwrap();
        let expect: DVector<f64> = metric.eigvals() * s;
        prop_assert!((scaled.eigvals() - &expect).amax() <= 1e-10 * expect.amax());
        let (a, b) = (metric.spectral_report().unwrap(), scaled.spectral_report().unwrap());
        prop_assert!((a.condition_number - b.condition_number).abs() <= 1e-8 * a.condition_number);
    }
}
