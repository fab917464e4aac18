#![allow(dead_code)]

//! Shared oracles for integration tests: central finite differences and
//! seeded random tensors.

pub mod module_checks;
pub mod op_cases;

use bandfuse_core::tensor::{Graph, ParamStore, Tensor, Var};
use bandfuse_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradient norms below this are compared absolutely. Some parameters have
/// an exactly zero gradient (a key bias shifts every logit of a softmax row
/// equally), where central differences return rounding noise of ~1e-10.
pub const FD_NORM_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        // Irwin–Hall approximation keeps this independent of rand_distr.
        let s: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
        s * scale
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, FD_NORM_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(FD_NORM_FLOOR)
}

/// Compare analytic gradients of a scalar-valued graph builder against
/// central differences for every input tensor. Returns the worst relative
/// error over inputs.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check over every parameter tensor in `store`.
pub fn check_params(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> f64 {
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let out = build(&mut g, s).expect("forward");
        g.value(out).item()
    };
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = build(&mut g, &work).expect("forward");
    g.backward_into(out, &mut work).expect("backward");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        let analytic = work.grad(id).unwrap().data().to_vec();
        let n = store.value(id).numel();
        let mut numeric = vec![0.0; n];
        let mut s = store.clone();
        for j in 0..n {
            let orig = s.value(id).data()[j];
            s.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&s);
            s.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&s);
            s.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let e = rel_err(&analytic, &numeric);
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Reduce any tensor to a scalar along a fixed random direction.
pub fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let dir = randn(&mut r, &shape, 1.0);
    g.dot_const(v, dir)
}
