//! Reverse-mode gradients against central finite differences.

use kmevo_tensor::{spectral_norm, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Compares tape gradients of `f` with central differences for every input.
fn check<F>(inputs: &[Tensor], f: F, rtol: f64)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().item()
    };

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            // absolute floor covers O(eps·|f|/h) roundoff on near-zero entries
            let scale = a.abs().max(fd.abs()).max(1e-3);
            assert!(
                (a - fd).abs() <= rtol * scale,
                "input {k} elem {i}: tape {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn matmul_gradient_is_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.constant(b.clone());
    let loss = va.matmul(vb).unwrap().sum();
    let g = tape.backward(loss).unwrap().wrt(va);
    // d sum(AB)/dA[i,p] = sum_j B[p,j]
    for i in 0..3 {
        for p in 0..4 {
            let row: f64 = (0..2).map(|j| b.get(&[p, j])).sum();
            assert!((g.get(&[i, p]) - row).abs() < 1e-12);
        }
    }
    check(&[a, b], |v| v[0].matmul(v[1]).unwrap().sum(), 1e-4);
}

#[test]
fn batched_matmul_with_shared_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    check(
        &[x, w],
        |v| v[0].matmul(v[1]).unwrap().square().sum(),
        1e-4,
    );
}

#[test]
fn attention_style_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(&[2, 3, 4], &mut rng);
    let k = random(&[2, 3, 4], &mut rng);
    check(
        &[q, k],
        |v| {
            let s = v[0].matmul(v[1].transpose_last().unwrap()).unwrap();
            let a = s.softmax_last().unwrap();
            a.matmul(v[1]).unwrap().tanh().sum()
        },
        1e-4,
    );
}

#[test]
fn sigmoid_derivative_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = x.sigmoid();
    assert_eq!(y.value().item(), 0.5);
    let g = tape.backward(y.sum()).unwrap().wrt(x).item();
    assert!((g - 0.25).abs() < 1e-15);
    let fd = (kmevo_tensor::sigmoid(H) - kmevo_tensor::sigmoid(-H)) / (2.0 * H);
    assert!((g - fd).abs() < 1e-9);
    assert_eq!(Tape::new().constant(Tensor::scalar(0.0)).tanh().value().item(), 0.0);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let c = random(&[2, 1], &mut rng);
    check(
        &[a.clone(), b.clone(), c.clone()],
        |v| {
            let s = v[0].add(v[1]).unwrap().mul(v[2]).unwrap();
            let t = v[0].sub(v[2]).unwrap().sigmoid();
            let u = v[0].softplus().mul(v[1].tanh()).unwrap();
            s.add(t).unwrap().add(u).unwrap().scale(0.7).sum()
        },
        1e-4,
    );
    // division and sqrt need strictly positive denominators
    let pos = a.map(|x| x.abs() + 0.5);
    check(
        &[a, pos],
        |v| v[0].div(v[1].sqrt()).unwrap().exp().sum(),
        1e-4,
    );
}

#[test]
fn reductions_and_reshapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3, 4], &mut rng);
    check(
        &[a],
        |v| {
            let m = v[0].mean_axis(1).unwrap();
            let centered = v[0].sub(m).unwrap();
            let r = centered.reshape(&[6, 4]).unwrap();
            let s = r.slice_last(1, 2).unwrap();
            let c = Var::concat_last(&[s, r]).unwrap();
            c.square().sum_axis(0).unwrap().tanh().sum()
        },
        1e-4,
    );
}

#[test]
fn layer_norm_contract_and_gradient() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 2.0]]).unwrap());
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = x.layer_norm(g, b, 1e-5).unwrap().value();
    assert!((y.get(&[0, 0]) + 1.0).abs() < 1e-5);
    assert!((y.get(&[0, 1]) - 1.0).abs() < 1e-5);
    assert_eq!(y.get(&[1, 0]), 0.0);
    assert_eq!(y.get(&[1, 1]), 0.0);

    let one = tape.constant(Tensor::ones(&[1, 1]));
    assert!(one.layer_norm(g.slice_last(0, 1).unwrap(), b.slice_last(0, 1).unwrap(), 1e-5).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs = random(&[3, 5], &mut rng);
    let gain = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    let w = random(&[3, 5], &mut rng);
    check(
        &[xs, gain, bias, w],
        |v| v[0].layer_norm(v[1], v[2], 1e-5).unwrap().mul(v[3]).unwrap().sum(),
        1e-5,
    );
}

#[test]
fn softmax_contract() {
    let tape = Tape::new();
    let s = |v: Vec<f64>| {
        tape.constant(Tensor::vector(v))
            .softmax_last()
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    assert_eq!(s(vec![0.0, 0.0]), vec![0.5, 0.5]);
    assert_eq!(s(vec![1000.0, 1000.0]), vec![0.5, 0.5]);
    let p = s(vec![1f64.ln(), 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    let empty = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(empty.softmax_last().is_err());
}

#[test]
fn clamp_and_row_fn() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 2], &mut rng);
    check(
        &[x.clone()],
        |v| v[0].clamp(&[-1.0, -0.5], &[1.0, 0.5]).unwrap().square().sum(),
        1e-4,
    );
    // sum of squares per row, gradient supplied explicitly
    check(
        &[x],
        |v| {
            let t = v[0].value();
            let vals: Vec<f64> = t.data().chunks(2).map(|r| r[0] * r[0] + r[1] * r[1]).collect();
            let jac = t.map(|a| 2.0 * a);
            v[0].row_fn(Tensor::vector(vals), jac).unwrap().tanh().sum()
        },
        1e-4,
    );
}

#[test]
fn backward_basic_cases() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
    let g = tape.backward(w.sum()).unwrap().wrt(w);
    assert!(g.data().iter().all(|&v| v == 1.0));

    let tape = Tape::new();
    let wv = Tensor::vector(vec![1.0, -2.0, 3.5]);
    let w = tape.leaf(wv.clone());
    let g = tape.backward(w.mul(w).unwrap().sum()).unwrap().wrt(w);
    assert_eq!(g, wv.map(|v| 2.0 * v));

    let tape = Tape::new();
    let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(w).is_err());
}

#[test]
fn backward_reports_non_finite_node() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = x.sqrt(); // d/dx sqrt at 0 = inf
    let err = tape.backward(y.sum()).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

#[test]
fn unrolled_linear_recurrence() {
    // x_{k+1} = a x_k, loss = x_K  =>  dloss/da = K a^{K-1} x0
    let (a0, x0, k) = (0.9_f64, 1.7_f64, 10);
    let tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(a0));
    let mut x = tape.constant(Tensor::scalar(x0));
    for _ in 0..k {
        x = x.mul(a).unwrap();
    }
    let g = tape.backward(x.sum()).unwrap().wrt(a).item();
    let expect = k as f64 * a0.powi(k - 1) * x0;
    assert!((g - expect).abs() < 1e-12 * expect.abs());
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[4, 4], &mut rng);
        let b = random(&[4, 4], &mut rng);
        let tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.leaf(b);
        let loss = va.matmul(vb).unwrap().tanh().softmax_last().unwrap().square().sum();
        let g = tape.backward(loss).unwrap();
        (loss.value().item(), g.wrt(va), g.wrt(vb))
    };
    assert_eq!(run(), run());
}

// ---------------------------------------------------------------------------
// Spectral norm against an SVD oracle
// ---------------------------------------------------------------------------

fn svd_max(t: &Tensor) -> f64 {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let m = nalgebra::DMatrix::from_row_slice(r, c, t.data());
    m.singular_values().max()
}

#[test]
fn spectral_norm_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..5 {
        let w = random(&[8, 8], &mut rng);
        let est = spectral_norm(&w, 2000, trial);
        let exact = svd_max(&w);
        assert!((est - exact).abs() < 1e-6, "{est} vs {exact}");
    }
}

#[test]
fn spectral_norm_monotone_in_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = random(&[6, 9], &mut rng);
    let mut prev = 0.0;
    for iters in 1..40 {
        let s = spectral_norm(&w, iters, 5);
        assert!(s >= prev - 1e-12, "iters {iters}: {s} < {prev}");
        prev = s;
    }
    assert!(prev <= svd_max(&w) + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(v)).softmax_last().unwrap().value();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn squashing_activations_stay_in_open_intervals(x in -15.0f64..15.0) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::scalar(x));
        let s = v.sigmoid().value().item();
        let t = v.tanh().value().item();
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!(t > -1.0 && t < 1.0);
    }
}
