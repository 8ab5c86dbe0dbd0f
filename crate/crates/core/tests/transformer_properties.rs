mod common;

use common::{normal_vec, random_net, rel_err, rng};
use fisher_steer::transformer::{block_jacobian, central_diff_jacobian, layernorm_jacobian, JacobianMethod};
use fisher_steer::{LayeredMap, ToyAffineModel64};
use nalgebra::DVector;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_obeys_the_chain_rule(seed: u64, d in 2usize..10, layers in 1usize..5) {
        let net = random_net(seed, d, layers);
        let h = normal_vec(&mut rng(seed ^ 1), d, 1.0);
        let states = net.hidden_states(0, &h).unwrap();
        for l in 0..layers {
            let j = net.jacobian_from(l, &states[l], JacobianMethod::Analytic).unwrap();
            let next = net.jacobian_from(l + 1, &states[l + 1], JacobianMethod::Analytic).unwrap();
            let a = net.layer_jacobian(l, &states[l]).unwrap();
            prop_assert!(rel_err(&j, &(next * a)) <= 1e-8);
        }
    }

    #[test]
    fn analytic_jacobian_matches_central_differences(seed: u64, wide: bool, layers in 1usize..4) {
        let d = if wide { 8 } else { 4 };
        let net = random_net(seed, d, layers);
        let h = normal_vec(&mut rng(seed ^ 2), d, 1.0);
        for l in 0..=layers {
            let hl = &net.hidden_states(0, &h).unwrap()[l];
            let a = net.jacobian_from(l, hl, JacobianMethod::Analytic).unwrap();
            let c = net.jacobian_from(l, hl, JacobianMethod::CentralDiff).unwrap();
            prop_assert!(rel_err(&a, &c) <= 1e-4, "layer {}: {:e}", l, rel_err(&a, &c));
        }
    }

    #[test]
    fn preln_block_fixes_the_input_direction(seed: u64, d in 3usize..12) {
        let net = random_net(seed, d, 3);
        let mut r = rng(seed ^ 3);
        for block in net.blocks() {
            for _ in 0..10 {
                let h = normal_vec(&mut r, d, 2.0);
                let a = block_jacobian(block, &h).unwrap();
                prop_assert!((&a * &h - &h).norm() <= 1e-9 * h.norm());
            }
        }
    }

    #[test]
    fn layernorm_kernel_holds_mean_and_input(seed: u64, d in 2usize..16) {
        let mut r = rng(seed);
        let gain = normal_vec(&mut r, d, 0.3).add_scalar(1.0);
        let h = normal_vec(&mut r, d, 3.0);
        let j = layernorm_jacobian(&gain, &h).unwrap();
        // ‖J‖ can vanish (rank d − 2), so tolerances scale with γ/σ instead.
        let mean = h.mean();
        let sigma = (h.map(|x| x - mean).norm_squared() / d as f64).sqrt();
        let scale = gain.amax() / sigma;
        prop_assert!((&j * &h).norm() <= 1e-10 * scale * h.norm());
        prop_assert!((&j * DVector::from_element(d, 1.0)).norm() <= 1e-10 * scale * (d as f64).sqrt());
    }

    #[test]
    fn block_jacobian_matches_central_differences(seed: u64, d in 3usize..10) {
        let net = random_net(seed, d, 2);
        let h = normal_vec(&mut rng(seed ^ 4), d, 1.0);
        let block = &net.blocks()[0];
        let fd = central_diff_jacobian(&h, |x| block.apply(x)).unwrap();
        prop_assert!(rel_err(&block_jacobian(block, &h).unwrap(), &fd) <= 1e-7);
    }

    #[test]
    fn affine_model_has_constant_jacobian(seed: u64, d in 2usize..10) {
        let model: ToyAffineModel64 = fisher_steer::transformer::make_toy_affine(d, seed).unwrap();
        let mut r = rng(seed ^ 5);
        let j0 = model.jacobian_from(0, &normal_vec(&mut r, d, 1.0), JacobianMethod::Analytic).unwrap();
        let j1 = model.jacobian_from(0, &normal_vec(&mut r, d, 5.0), JacobianMethod::Analytic).unwrap();
        prop_assert_eq!(&j0, &j1);
        prop_assert_eq!(&j0, &model.weight);
    }
}
