use kmevo::benchmarks::*;
use kmevo::operator::{init_params, OperatorConfig, ProposalInputs};
use kmevo::population::Population;
use kmevo::solver::*;
use kmevo::theory::{AffineOperator, AffineProposer};
use kmevo::Error;
use kmevo_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `O_evo(y) = y`.
struct Identity;

impl<'t> Proposer<'t> for Identity {
    fn evolve(&self, _: usize, y: Var<'t>, _: &ProposalInputs, _: &Bounds) -> kmevo::Result<(Var<'t>, Option<Tensor>)> {
        Ok((y, None))
    }
}

struct NanAt(f64);

impl Objective for NanAt {
    fn dim(&self) -> usize {
        2
    }
    fn bounds(&self) -> &Bounds {
        static B: std::sync::OnceLock<Bounds> = std::sync::OnceLock::new();
        B.get_or_init(|| Bounds::uniform(2, -5.0, 5.0))
    }
    fn f_opt(&self) -> f64 {
        0.0
    }
    fn value(&self, x: &[f64]) -> f64 {
        if x[0] < self.0 {
            f64::NAN
        } else {
            x.iter().map(|v| v * v).sum()
        }
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 2.0 * v).collect()
    }
}

fn sphere(shift: Vec<f64>) -> ObjectiveFunction {
    ObjectiveFunction::with_shift(Family::Sphere, shift).unwrap()
}

fn interior_pop(objs: &[&dyn Objective], n: usize, seed: u64) -> Population {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = objs[0].dim();
    let x: Vec<f64> = (0..objs.len() * n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    Population::evaluate(Tensor::new(vec![objs.len(), n, d], x).unwrap(), objs).unwrap()
}

fn cfg(k: usize) -> InnerConfig {
    InnerConfig {
        k,
        ..Default::default()
    }
}

#[test]
fn numerical_operator_examples() {
    let b = Bounds::uniform(2, -5.0, 5.0);
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 7.3, 0.5]).unwrap();
    let y = numerical_operator(&x, &b, 0.0).unwrap();
    assert_eq!(y.data(), &[1.0, -2.0, 5.0, 0.5]);
    let z = numerical_operator(&Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), &b, 0.0).unwrap();
    assert_eq!(z.data(), &[1.0, -2.0, 3.0, 0.5]);
    let s = numerical_operator(&z, &b, 0.5).unwrap();
    assert_eq!(s.data(), &[1.5, -1.375, 2.5, -0.125]);
}

#[test]
fn numerical_operator_is_non_expansive() {
    let b = Bounds::uniform(3, -5.0, 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for sigma in [0.0, 0.3, 0.9] {
        for _ in 0..1000 {
            let mut draw = || Tensor::new(vec![1, 4, 3], (0..12).map(|_| rng.random_range(-8.0..8.0)).collect()).unwrap();
            let (u, v) = (draw(), draw());
            let du = numerical_operator(&u, &b, sigma).unwrap();
            let dv = numerical_operator(&v, &b, sigma).unwrap();
            let before = u.zip_map(&v, |a, c| a - c).unwrap().norm();
            let after = du.zip_map(&dv, |a, c| a - c).unwrap().norm();
            assert!(after <= before * (1.0 + 1e-12), "sigma {sigma}: {after} > {before}");
        }
    }
}

#[test]
fn proxy_direction_examples() {
    let x = Tensor::new(vec![1, 1, 2], vec![2.0, -1.0]).unwrap();
    let ones = Tensor::ones(&[1, 1, 2]);
    let zero = Tensor::zeros(&[1, 1, 2]);
    assert_eq!(proxy_grad_direction(&x, &zero, &ones, 0.3, 4).unwrap(), x);

    let shift = vec![0.75, -2.5];
    let f = sphere(shift.clone());
    let g = f.gradient(&x).unwrap();
    let d = proxy_grad_direction(&x, &g, &ones, 0.5, 0).unwrap();
    assert_eq!(d.data(), &shift[..]);

    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 0..100_000 {
        let s = step_size(1.0, k);
        s1 += s;
        s2 += s * s;
    }
    assert!(s1 > 12.0);
    assert!(s2 < std::f64::consts::PI.powi(2) / 6.0);
}

#[test]
fn gate_examples() {
    let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
    let m = soft_gate(&one(2.0), &one(2.0), 0.7).unwrap();
    assert_eq!(m.shape(), &[1, 1, 1]);
    assert_eq!(m.data()[0], 0.5);
    let tau = 2.5;
    let m = soft_gate(&one(-tau * 3f64.ln()), &one(0.0), tau).unwrap();
    assert!((m.data()[0] - 0.75).abs() < 1e-15);
}

#[test]
fn composite_update_saturated_gates() {
    let b = Bounds::uniform(2, -1.0, 1.0);
    let d_ol = Tensor::new(vec![1, 2, 2], vec![0.5, 3.0, -0.2, 0.1]).unwrap();
    let d_il = Tensor::new(vec![1, 2, 2], vec![-0.4, 0.3, -7.0, 0.9]).unwrap();
    let ones = Tensor::ones(&[1, 2, 1]);
    let zeros = Tensor::zeros(&[1, 2, 1]);
    assert_eq!(composite_update(&d_ol, &d_il, &ones, &b).unwrap().data(), &[0.5, 1.0, -0.2, 0.1]);
    assert_eq!(composite_update(&d_ol, &d_il, &zeros, &b).unwrap().data(), &[-0.4, 0.3, -1.0, 0.9]);
}

#[test]
fn empty_unroll() {
    let f = sphere(vec![0.0, 0.0]);
    let objs: [&dyn Objective; 1] = [&f];
    let p = interior_pop(&objs, 4, 0);
    let tape = Tape::new();
    let u = unroll(&tape, &p, &objs, &Identity, &cfg(0), UnrollOptions::default(), None).unwrap();
    assert_eq!(u.states.len(), 1);
    assert_eq!(*u.states[0].value(), p.x);
    assert_eq!(u.rows(0).len(), 1);
}

#[test]
fn degenerate_composition_is_the_identity() {
    let f = sphere(vec![1.0, -1.0]);
    let objs: [&dyn Objective; 1] = [&f];
    let p = interior_pop(&objs, 6, 1);
    let tape = Tape::new();
    let c = InnerConfig {
        gate: GateMode::Fixed(0.0),
        ..cfg(5)
    };
    let u = unroll(&tape, &p, &objs, &Identity, &c, UnrollOptions::default(), None).unwrap();
    assert_eq!(*u.states[5].value(), p.x);
}

#[test]
fn zero_network_leaves_interior_points_alone() {
    let op = OperatorConfig::new(2);
    let mut store = init_params(&op, 1, 0).unwrap();
    for (_, p) in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let f = sphere(vec![0.0, 0.0]);
    let objs: [&dyn Objective; 1] = [&f];
    let p = interior_pop(&objs, 5, 2);
    for alpha in [0.2, 0.5, 1.0] {
        let c = InnerConfig {
            alpha,
            gate: GateMode::Fixed(0.0),
            ..cfg(3)
        };
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let lo = LearnedOperator::new(&bound, &op, 1, &c).unwrap();
        let u = unroll(&tape, &p, &objs, &lo, &c, UnrollOptions::default(), None).unwrap();
        let gap = u.states[3].value().zip_map(&p.x, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(gap <= 1e-15, "alpha {alpha}: {gap}");
    }
}

#[test]
fn averaging_examples() {
    let f = sphere(vec![0.0, 0.0]);
    let objs: [&dyn Objective; 1] = [&f];
    let p = interior_pop(&objs, 3, 3);
    let c = vec![0.25, -0.5];
    let constant = AffineOperator::new(c.clone(), vec![0.0; 4]).unwrap();
    let half = InnerConfig {
        alpha: 0.5,
        gate: GateMode::Fixed(0.0),
        ..cfg(1)
    };
    let tape = Tape::new();
    let u = unroll(&tape, &p, &objs, &AffineProposer { op: constant.clone() }, &half, UnrollOptions::default(), None).unwrap();
    let expect: Vec<f64> = p.x.data().chunks(2).flat_map(|r| [0.5 * r[0] + 0.5 * c[0], 0.5 * r[1] + 0.5 * c[1]]).collect();
    assert_eq!(u.states[1].value().data(), &expect[..]);

    let rot = AffineOperator::scaled_rotation(c.clone(), 0.8, 0.3);
    let full = InnerConfig { alpha: 1.0, ..half };
    let u = unroll(&tape, &p, &objs, &AffineProposer { op: rot.clone() }, &full, UnrollOptions::default(), None).unwrap();
    for (row, x) in u.states[1].value().data().chunks(2).zip(p.x.data().chunks(2)) {
        let o = rot.apply(x);
        assert!((row[0] - o[0]).abs() < 1e-15 && (row[1] - o[1]).abs() < 1e-15);
    }
}

#[test]
fn gated_sphere_run_is_projected_gradient_descent() {
    let shift = vec![1.5, -2.0];
    let f = sphere(shift.clone());
    let objs: [&dyn Objective; 1] = [&f];
    let mut p = interior_pop(&objs, 4, 4);
    p.x.data_mut()[0] = 4.9;
    p.fit = f.evaluate(&p.x).unwrap();
    let c = InnerConfig {
        k: 8,
        kappa: 1.7,
        preconditioner: Preconditioner::Identity,
        gate: GateMode::Fixed(1.0),
        ..Default::default()
    };
    let tape = Tape::new();
    let u = unroll(&tape, &p, &objs, &Identity, &c, UnrollOptions::default(), None).unwrap();
    let mut x = p.x.data().to_vec();
    for k in 0..8 {
        let s = c.kappa / (k as f64 + 1.0);
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - s * 2.0 * (*v - shift[i % 2])).clamp(-5.0, 5.0);
        }
        let got = u.states[k + 1].value();
        for (a, b) in got.data().iter().zip(&x) {
            assert!((a - b).abs() <= 1e-12, "step {k}: {a} vs {b}");
        }
    }
    assert!(u.states.iter().any(|s| s.value().data().iter().any(|v| v.abs() == 5.0)));
}

#[test]
fn logged_gate_reconstructs_each_update_bit_exactly() {
    let c = vec![0.5, -1.0, 2.0];
    let op = AffineOperator::scaled_rotation(c.clone(), 0.9, 0.7);
    let f = ObjectiveFunction::new(FunctionSpec::new(Family::Rastrigin, 3, 3)).unwrap();
    let g2 = ObjectiveFunction::new(FunctionSpec::new(Family::Ellipsoidal, 3, 4)).unwrap();
    let objs: [&dyn Objective; 2] = [&f, &g2];
    let p = interior_pop(&objs, 5, 5);
    let inner = InnerConfig {
        smoothing_sigma: 0.2,
        ..cfg(6)
    };
    let bounds = p.bounds.clone();
    let tape = Tape::new();
    let proposer = AffineProposer { op };
    let u = unroll(&tape, &p, &objs, &proposer, &inner, UnrollOptions::default(), None).unwrap();
    for k in 0..6 {
        let t = &u.trace[k];
        let x = u.states[k];
        let d_ol = proxy_grad_direction(&x.value(), &t.grad, &t.precond, inner.kappa, k).unwrap();
        let y = numerical_operator_var(x, &bounds, inner.smoothing_sigma).unwrap();
        let (o, _) = proposer.evolve(k, y, &t.inputs, &bounds).unwrap();
        let d_il = km_average(x, o, inner.alpha).unwrap().value();
        let pre = blend(&d_ol, &d_il, &t.mask).unwrap();
        let want: Vec<f64> = (0..pre.len())
            .map(|i| t.mask.data()[i / 3] * d_ol.data()[i] + (1.0 - t.mask.data()[i / 3]) * d_il.data()[i])
            .collect();
        assert_eq!(pre.data(), &want[..]);
        let next = composite_update(&d_ol, &d_il, &t.mask, &bounds).unwrap();
        assert_eq!(next, *u.states[k + 1].value(), "step {k}");
        assert!(t.mask.data().iter().all(|m| (0.0..=1.0).contains(m)));
    }
}

#[test]
fn unroll_is_deterministic_and_replayable() {
    let op = OperatorConfig::new(2);
    let store = init_params(&op, 4, 9).unwrap();
    let f = ObjectiveFunction::new(FunctionSpec::new(Family::Rosenbrock, 2, 1)).unwrap();
    let objs: [&dyn Objective; 1] = [&f];
    let p = interior_pop(&objs, 8, 6);
    let c = cfg(4);
    let run = |replay: Option<&[StepTrace]>| {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let lo = LearnedOperator::new(&bound, &op, 4, &c).unwrap();
        let u = unroll(&tape, &p, &objs, &lo, &c, UnrollOptions::default(), replay).unwrap();
        let states: Vec<Tensor> = u.states.iter().map(|s| (*s.value()).clone()).collect();
        let rows = u.rows(0);
        (states, u.trace, rows)
    };
    let (a, trace, rows_a) = run(None);
    let (b, _, rows_b) = run(None);
    let (c2, _, _) = run(Some(&trace));
    assert_eq!(a, b);
    assert_eq!(a, c2);
    let bits = |r: &[TrajectoryRow]| r.iter().map(|x| x.best_fit.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&rows_a), bits(&rows_b));
    assert!(rows_a[1..].iter().all(|r| r.lambda_ssm + r.lambda_attn > 0.999_999));
}

#[test]
fn block_count_must_match_depth() {
    let op = OperatorConfig::new(2);
    let store = init_params(&op, 3, 0).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    assert!(LearnedOperator::new(&bound, &op, 3, &cfg(3)).is_ok());
    assert!(LearnedOperator::new(&bound, &op, 1, &cfg(3)).is_ok());
    assert!(matches!(LearnedOperator::new(&bound, &op, 3, &cfg(5)), Err(Error::Contract(_))));
}

#[test]
fn unroll_spends_three_evaluations_per_individual_step() {
    let f = sphere(vec![0.5, 0.5]);
    let counted = Counted::new(&f);
    let objs: [&dyn Objective; 1] = [&counted];
    let raw: [&dyn Objective; 1] = [&f];
    let p = interior_pop(&raw, 16, 7);
    let op = OperatorConfig::new(2);
    let store = init_params(&op, 10, 1).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let c = cfg(10);
    let lo = LearnedOperator::new(&bound, &op, 10, &c).unwrap();
    unroll(&tape, &p, &objs, &lo, &c, UnrollOptions::default(), None).unwrap();
    assert_eq!(counted.count(), 480);

    let fd = ObjectiveFunction::new(FunctionSpec {
        finite_difference: true,
        ..FunctionSpec::new(Family::Sphere, 2, 0)
    })
    .unwrap();
    let counted = Counted::new(&fd);
    let objs: [&dyn Objective; 1] = [&counted];
    let tape = Tape::new();
    unroll(&tape, &p, &objs, &Identity, &cfg(10), UnrollOptions::default(), None).unwrap();
    // one gradient before each step, 2·dim evaluations apiece
    assert_eq!(counted.count(), 480 + 10 * 16 * 4);
}

#[test]
fn nan_states_report_their_step() {
    let f = NanAt(-4.5);
    let objs: [&dyn Objective; 1] = [&f];
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, -0.5, 2.0]).unwrap();
    let p = Population::evaluate(x, &objs).unwrap();
    let shove = AffineOperator::new(vec![-40.0, 0.0], vec![0.0; 4]).unwrap();
    let c = InnerConfig {
        gate: GateMode::Fixed(0.0),
        alpha: 0.1,
        ..cfg(20)
    };
    let tape = Tape::new();
    match unroll(&tape, &p, &objs, &AffineProposer { op: shove }, &c, UnrollOptions::default(), None) {
        Err(Error::Numeric { step, detail }) => {
            assert!(step > 0 && step < 20, "{step}");
            assert!(detail.contains("gate mean"));
        }
        other => panic!("expected a numeric error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn trajectory_header_is_fixed() {
    assert_eq!(
        TrajectoryRow::HEADER.join(","),
        "step,best_fit,mean_fit,gate_mean,lambda_ssm,lambda_attn,residual_norm"
    );
}

fn arb_family() -> impl Strategy<Value = Family> {
    (0usize..8).prop_map(|i| Family::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterates_stay_in_the_box(fam in arb_family(), seed in any::<u64>(), alpha in 0.05f64..=1.0, kappa in 0.01f64..5.0) {
        let f = ObjectiveFunction::new(FunctionSpec::new(fam, 3, seed)).unwrap();
        let objs: [&dyn Objective; 1] = [&f];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Population::uniform(&objs, 6, &mut rng).unwrap();
        let op = OperatorConfig::new(3);
        let store = init_params(&op, 1, seed).unwrap();
        let c = InnerConfig { alpha, kappa, ..cfg(4) };
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let lo = LearnedOperator::new(&bound, &op, 1, &c).unwrap();
        let u = unroll(&tape, &p, &objs, &lo, &c, UnrollOptions::default(), None).unwrap();
        for s in &u.states {
            prop_assert!(s.value().data().chunks(3).all(|r| p.bounds.contains(r)));
        }
        let fin = u.final_population(&p.bounds);
        prop_assert!(fin.is_feasible());
        prop_assert_eq!(fin.fit, f.evaluate(&fin.x).unwrap());
    }

    #[test]
    fn gate_is_monotone_and_open(a in -50f64..50.0, b in -50f64..50.0, tau in 0.1f64..10.0) {
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let lo = soft_gate(&t(a.min(b)), &t(0.0), tau).unwrap().data()[0];
        let hi = soft_gate(&t(a.max(b)), &t(0.0), tau).unwrap().data()[0];
        prop_assert!(lo >= hi);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        // σ rounds to exactly 1 beyond ~37 in f64
        if a.abs() / tau < 30.0 {
            let m = soft_gate(&t(a), &t(0.0), tau).unwrap().data()[0];
            prop_assert!(m > 0.0 && m < 1.0);
        }
    }

    #[test]
    fn blend_of_interior_points_is_interior(seed in any::<u64>(), m in 0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Bounds::uniform(2, -5.0, 5.0);
        let mut draw = || Tensor::new(vec![1, 3, 2], (0..6).map(|_| rng.random_range(-5.0..=5.0)).collect()).unwrap();
        let (u, v) = (draw(), draw());
        let out = blend(&u, &v, &Tensor::full(&[1, 3, 1], m)).unwrap();
        prop_assert!(out.data().chunks(2).all(|r| b.contains(r)));
    }
}
