//! Finite-difference checks for every differentiable primitive.

use laya_core::diff::{grad_check, Graph, Tensor, Var};
use laya_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Contracts `y` with a fixed random weighting so every output entry
/// contributes a distinct amount to the scalar.
fn weighted_sum(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check(name: &str, params: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>) {
    let report = grad_check(&params, EPS, |g, p| {
        let y = f(g, p)?;
        weighted_sum(g, y, 99)
    })
    .unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{name}: max relative error {:.3e} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

#[test]
fn broadcasting_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    let c = positive_tensor(&mut rng, &[4]);
    check("add", vec![a.clone(), b.clone()], |g, p| g.add(p[0], p[1]));
    check("sub", vec![a.clone(), b.clone()], |g, p| g.sub(p[0], p[1]));
    check("mul", vec![a.clone(), b.clone()], |g, p| g.mul(p[0], p[1]));
    check("div", vec![a.clone(), c.clone()], |g, p| g.div(p[0], p[1]));
    check("scale", vec![a.clone()], |g, p| g.scale(p[0], 1.7));
    check("add_scalar", vec![a], |g, p| g.add_scalar(p[0], 0.3));
}

#[test]
fn pointwise_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let pos = positive_tensor(&mut rng, &[3, 5]);
    check("exp", vec![x.clone()], |g, p| g.exp(p[0]));
    check("log", vec![pos.clone()], |g, p| g.log(p[0]));
    check("sqrt", vec![pos], |g, p| g.sqrt(p[0]));
    check("square", vec![x.clone()], |g, p| g.square(p[0]));
    check("tanh", vec![x.clone()], |g, p| g.tanh(p[0]));
    check("gelu", vec![x.clone()], |g, p| g.gelu(p[0]));
    check("sin", vec![x.clone()], |g, p| g.sin(p[0]));
    check("cos", vec![x], |g, p| g.cos(p[0]));
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[2, 2, 4]);
    check("reshape", vec![x.clone()], |g, p| g.reshape(p[0], &[6, 4]));
    check("permute", vec![x.clone()], |g, p| g.permute(p[0], &[2, 0, 1]));
    check("transpose", vec![x.clone()], |g, p| g.transpose(p[0], 0, -1));
    check("narrow", vec![x.clone()], |g, p| g.narrow(p[0], 1, 1, 2));
    check("index_select", vec![x.clone()], |g, p| g.index_select(p[0], 1, &[2, 0, 2]));
    check("concat", vec![x.clone(), y], |g, p| g.concat(&[p[0], p[1]], 1));
    check("sum_axis", vec![x.clone()], |g, p| g.sum_axis(p[0], 1, false));
    check("mean_axis", vec![x.clone()], |g, p| g.mean_axis(p[0], -1, true));
    check("mean_all", vec![x], |g, p| g.mean_all(p[0]));
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[2, 4, 5]);
    let bt = rand_tensor(&mut rng, &[2, 5, 4]);
    let heads = rand_tensor(&mut rng, &[3, 2, 4]);
    let keys = rand_tensor(&mut rng, &[2, 3, 6, 4]);
    check("matmul 2d weight", vec![a.clone(), w], |g, p| g.matmul(p[0], p[1]));
    check("matmul batched", vec![a.clone(), b], |g, p| g.matmul(p[0], p[1]));
    check("matmul_nt batched", vec![a, bt], |g, p| g.matmul_nt(p[0], p[1]));
    check("matmul_nt broadcast lhs", vec![heads, keys], |g, p| g.matmul_nt(p[0], p[1]));
}

#[test]
fn softmax_and_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4, 5]);
    check("softmax last", vec![x.clone()], |g, p| g.softmax(p[0], -1));
    check("softmax middle", vec![x.clone()], |g, p| g.softmax(p[0], 1));
    let gamma = positive_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    check("layer_norm", vec![x, gamma.clone(), beta.clone()], |g, p| {
        g.layer_norm(p[0], p[1], p[2], 1e-5)
    });
    let rows = rand_tensor(&mut rng, &[6, 5]);
    check("batch_norm", vec![rows, gamma, beta], |g, p| {
        Ok(g.batch_norm(p[0], p[1], p[2], 1e-5)?.0)
    });
}

#[test]
fn conv_and_rope() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 20]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[4]);
    check("conv1d stride=kernel", vec![x.clone(), w.clone(), b.clone()], |g, p| {
        g.conv1d_shared(p[0], p[1], p[2], 5)
    });
    let x2 = rand_tensor(&mut rng, &[1, 2, 17]);
    check("conv1d overlapping", vec![x2, w, b], |g, p| g.conv1d_shared(p[0], p[1], p[2], 3));
    let q = rand_tensor(&mut rng, &[2, 3, 6]);
    check("rope", vec![q], |g, p| g.rope(p[0], &[0, 4, 9], 10000.0));
}

#[test]
fn stop_gradient_blocks_flow() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = g.stop_gradient(x);
    assert_eq!(*g.value(s), *g.value(x));
    // loss = sum(stop(x) * x): gradient treats the stopped copy as constant
    let prod = g.mul(s, x).unwrap();
    let loss = g.sum_all(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 0.5]);
    assert!(grads.get(s).is_none());

    // finite differences of the surrogate with a frozen copy agree
    let frozen = g.to_tensor(x);
    let report = grad_check(&[frozen.clone()], EPS, |g, p| {
        let c = g.constant(frozen.clone());
        let prod = g.mul(c, p[0])?;
        g.sum_all(prod)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-8);
}

#[test]
fn stop_gradient_only_path_gives_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(vec![4]));
    let y = g.square(x).unwrap();
    let s = g.stop_gradient(y);
    let loss = g.sum_all(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).is_none());
}

#[test]
fn non_finite_forward_is_an_error() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(vec![2], vec![-1.0, 1.0]).unwrap());
    assert!(g.sqrt(x).is_err());
    assert!(g.log(x).is_err());
}
