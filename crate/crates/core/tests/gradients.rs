mod common;

use bandfuse_core::tensor::{Graph, ParamStore, Tensor};
use bandfuse_core::Error;
use common::module_checks;
use common::op_cases::op_cases;

const SEEDS: std::ops::Range<u64> = 0..5;

fn assert_fd(name: &str, seed: u64, err: f64) {
    assert!(err < common::FD_TOL, "{name} seed {seed}: rel err {err:e}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..5 {
        for case in op_cases(seed) {
            let err = common::check_inputs(&case.inputs, case.build.as_ref());
            assert!(err < common::FD_TOL, "{} seed {seed}: rel err {err:e}", case.name);
        }
    }
}

#[test]
fn sum_of_squares_gradient_is_twice_weights() {
    let mut store = ParamStore::<f64>::new();
    let w = Tensor::from_f64([4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
    let id = store.add("w", w.clone()).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, id);
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    let want: Vec<f64> = w.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(store.grad(id).unwrap().data(), &want[..]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full([3], 2.0)).unwrap();
    let b = store.add("b", Tensor::full([2], 5.0)).unwrap();
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let loss = g.sum_all(va).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.grad(b).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(store.grad(a).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros([3]), true);
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn linear_forward_with_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let w = g.input(Tensor::from_f64([2, 2], &[1.0, 3.0, 2.0, 4.0]).unwrap());
    let b = g.input(Tensor::from_f64([2], &[0.0, 1.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 12.0]);
}

#[test]
fn layer_norm_statistics() {
    let mut r = common::rng(11);
    let x = common::randn(&mut r, &[16, 32], 3.0).map(|v| v + 4.0);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x);
    let gamma = g.input(Tensor::full([32], 1.0));
    let beta = g.input(Tensor::zeros([32]));
    let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
    for row in g.value(y).data().chunks(32) {
        let mean: f64 = row.iter().sum::<f64>() / 32.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::full([5], 3.25));
    let gamma = g.input(Tensor::full([5], 1.0));
    let beta = g.input(Tensor::zeros([5]));
    let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::from_f64([2], &[-1.0, 1.0]).unwrap());
    let gamma = g.input(Tensor::full([2], 1.0));
    let beta = g.input(Tensor::zeros([2]));
    let y = g.layer_norm(c, gamma, beta, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
}

#[test]
fn finite_checks_report_numeric_failure() {
    let mut g = Graph::<f32>::new().with_finite_checks();
    let x = g.input(Tensor::full([2], f32::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
}

fn assert_module(check: common::module_checks::Check) {
    for seed in SEEDS {
        for (name, err) in check(seed) {
            assert_fd(name, seed, err);
        }
    }
}

#[test]
fn band_fusion_matches_finite_differences() {
    assert_module(module_checks::band_fusion);
}

#[test]
fn self_attention_and_mlp_match_finite_differences() {
    assert_module(module_checks::encoder_layer);
}

#[test]
fn patch_merge_matches_finite_differences() {
    assert_module(module_checks::merge);
}

#[test]
fn projection_head_and_swav_loss_match_finite_differences() {
    assert_module(module_checks::head_and_loss);
}

#[test]
fn fpn_decoder_with_bce_matches_finite_differences() {
    assert_module(module_checks::fpn_bce);
}
