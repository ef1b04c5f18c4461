//! Executable checks of the averaged-iteration theory on operators with
//! known fixed points.

use kmevo_tensor::{ParamStore, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{Bounds, Family, Objective, ObjectiveFunction};
use crate::error::{Error, Result};
use crate::operator::{block_map, OperatorConfig, ProposalInputs};
use crate::population::Population;
use crate::solver::{unroll, GateMode, InnerConfig, Proposer, UnrollOptions};

pub const BOUND_SLACK: f64 = 1e-9;
pub const RESIDUAL_SLACK: f64 = 1e-12;

/// Affine map `O(x) = c + Q (x − c)` on `R^n`, fixed point `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineOperator {
    pub c: Vec<f64>,
    /// Row-major `n × n`.
    pub q: Vec<f64>,
}

impl AffineOperator {
    pub fn new(c: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if q.len() != c.len() * c.len() {
            return Err(Error::Dimension(format!("Q has {} entries for dim {}", q.len(), c.len())));
        }
        Ok(Self { c, q })
    }

    pub fn scaled_identity(c: Vec<f64>, s: f64) -> Self {
        let n = c.len();
        let q = (0..n * n).map(|i| if i % (n + 1) == 0 { s } else { 0.0 }).collect();
        Self { c, q }
    }

    /// `s · R` with `R` a rotation by `theta` in consecutive coordinate pairs.
    pub fn scaled_rotation(c: Vec<f64>, s: f64, theta: f64) -> Self {
        let n = c.len();
        let mut q = vec![0.0; n * n];
        let (co, si) = (theta.cos(), theta.sin());
        let mut i = 0;
        while i + 1 < n {
            q[i * n + i] = s * co;
            q[i * n + i + 1] = -s * si;
            q[(i + 1) * n + i] = s * si;
            q[(i + 1) * n + i + 1] = s * co;
            i += 2;
        }
        if n % 2 == 1 {
            q[n * n - 1] = s;
        }
        Self { c, q }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.q)
    }

    /// ‖Q‖₂ by SVD.
    pub fn norm(&self) -> f64 {
        self.matrix().singular_values().max()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| self.c[i] + (0..n).map(|j| self.q[i * n + j] * (x[j] - self.c[j])).sum::<f64>())
            .collect()
    }

    /// One averaged step `(1 − α) x + α O(x)`.
    pub fn km(&self, x: &[f64], alpha: f64) -> Vec<f64> {
        self.apply(x)
            .iter()
            .zip(x)
            .map(|(o, xi)| (1.0 - alpha) * xi + alpha * o)
            .collect()
    }
}

fn gaussian(n: usize, m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample(StandardNormal))
}

fn orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    gaussian(n, n, rng).qr().q()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r * c).map(|k| m[(k / c, k % c)]).collect()
}

fn random_center(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Generic contraction: a Gaussian matrix rescaled to a spectral norm drawn
/// uniformly from `[0, 1]`.
pub fn random_contraction(n: usize, rng: &mut impl Rng) -> AffineOperator {
    let g = gaussian(n, n, rng);
    let s = g.singular_values().max();
    let target: f64 = rng.random_range(0.0..=1.0);
    let q = g * (target / s);
    AffineOperator {
        c: random_center(n, rng),
        q: to_rows(&q),
    }
}

/// Symmetric `Q = −V diag(q) Vᵀ` with `q_i ∈ [0, min(1, 2(1−α)/α)]`, so
/// ‖Q‖₂ ≤ 1 and every eigenvalue of `(1−α)I + αQ` lies in `[−(1−α), 1−α]`.
/// With `pin_slowest`, one `q_i` is 0 and the rate is exactly `1 − α`.
pub fn relaxation_dominated(n: usize, alpha: f64, pin_slowest: bool, rng: &mut impl Rng) -> AffineOperator {
    let qmax = (2.0 * (1.0 - alpha) / alpha).min(1.0);
    let v = orthogonal(n, rng);
    let mut qs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=qmax)).collect();
    if pin_slowest {
        qs[0] = 0.0;
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(qs.iter().map(|q| -q).collect()));
    let q = &v * d * v.transpose();
    AffineOperator {
        c: random_center(n, rng),
        q: to_rows(&q),
    }
}

fn unit_direction(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if r > 1e-12 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Terminal error of `k` averaged steps from `x0`.
pub fn km_error(op: &AffineOperator, x0: &[f64], alpha: f64, k: usize) -> f64 {
    let mut x = x0.to_vec();
    for _ in 0..k {
        x = op.km(&x, alpha);
    }
    dist(&x, &op.c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub name: String,
    pub pass: bool,
    pub alpha: f64,
    pub k: usize,
    pub trials: usize,
    pub bound: f64,
    pub worst_error: f64,
    /// Largest observed error over its bound.
    pub worst_ratio: f64,
    pub violations: usize,
    pub worst_seed: u64,
    pub max_q_norm: f64,
}

/// `‖x^K − c‖ ≤ bound(op)·D₀ + slack` over random operators and unit-distance
/// starts. `make` draws one operator from its RNG; trial `i` uses seed
/// `seed + i`.
pub fn check_contraction_bound(
    name: &str,
    alpha: f64,
    k: usize,
    trials: usize,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> AffineOperator,
    bound: impl Fn(&AffineOperator) -> f64,
) -> ContractionReport {
    let mut rep = ContractionReport {
        name: name.to_string(),
        pass: true,
        alpha,
        k,
        trials,
        bound: 0.0,
        worst_error: 0.0,
        worst_ratio: 0.0,
        violations: 0,
        worst_seed: seed,
        max_q_norm: 0.0,
    };
    for i in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + i);
        let op = make(&mut rng);
        let u = unit_direction(op.dim(), &mut rng);
        let x0: Vec<f64> = op.c.iter().zip(&u).map(|(c, d)| c + d).collect();
        let d0 = dist(&x0, &op.c);
        let b = bound(&op) * d0;
        let err = km_error(&op, &x0, alpha, k);
        let ratio = if b > 0.0 { err / b } else if err > 0.0 { f64::INFINITY } else { 0.0 };
        rep.max_q_norm = rep.max_q_norm.max(op.norm());
        rep.bound = rep.bound.max(b);
        if err > b + BOUND_SLACK {
            rep.violations += 1;
            rep.pass = false;
        }
        if ratio > rep.worst_ratio || i == 0 {
            rep.worst_ratio = ratio;
            rep.worst_error = err;
            rep.worst_seed = seed + i;
        }
    }
    rep
}

/// `(1 − α)^K`, the relaxation-only bound.
pub fn relaxation_bound(alpha: f64, k: usize) -> f64 {
    (1.0 - alpha).powi(k as i32)
}

/// `((1 − α) + α‖Q‖₂)^K`, valid for every `‖Q‖₂ ≤ 1`.
pub fn operator_bound(op: &AffineOperator, alpha: f64, k: usize) -> f64 {
    ((1.0 - alpha) + alpha * op.norm()).powi(k as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub alpha: f64,
    pub ks: Vec<usize>,
    /// Mean squared terminal error per K.
    pub sq_errors: Vec<f64>,
    pub slope: f64,
    pub expected_slope: f64,
    pub rel_dev: f64,
    pub pass: bool,
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Squared terminal error versus K, with a log-linear fit compared to
/// `2 ln(1 − α)` (tolerance 10%).
pub fn bias_vs_k(ops: &[AffineOperator], alpha: f64, ks: &[usize], seed: u64) -> BiasReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vec<f64>> = ops
        .iter()
        .map(|op| {
            let u = unit_direction(op.dim(), &mut rng);
            op.c.iter().zip(&u).map(|(c, d)| c + d).collect()
        })
        .collect();
    let sq_errors: Vec<f64> = ks
        .iter()
        .map(|&k| {
            ops.iter()
                .zip(&starts)
                .map(|(op, x0)| km_error(op, x0, alpha, k).powi(2))
                .sum::<f64>()
                / ops.len() as f64
        })
        .collect();
    let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let ys: Vec<f64> = sq_errors.iter().map(|e| e.ln()).collect();
    let slope = ls_slope(&xs, &ys);
    let expected = 2.0 * (1.0 - alpha).ln();
    let rel_dev = ((slope - expected) / expected).abs();
    BiasReport {
        alpha,
        ks: ks.to_vec(),
        sq_errors,
        slope,
        expected_slope: expected,
        rel_dev,
        pass: rel_dev <= 0.1,
    }
}

/// Maximum of `‖O(u) − O(v)‖ / ‖u − v‖` over sampled pairs.
pub fn estimate_lipschitz(
    op: impl Fn(&[f64]) -> Vec<f64>,
    mut sample_pair: impl FnMut() -> (Vec<f64>, Vec<f64>),
    pairs: usize,
) -> f64 {
    (0..pairs)
        .map(|_| {
            let (u, v) = sample_pair();
            let d = dist(&u, &v);
            if d == 0.0 {
                0.0
            } else {
                dist(&op(&u), &op(&v)) / d
            }
        })
        .fold(0.0, f64::max)
}

/// Pairs around a uniform point of the unit cube, separated by radii drawn
/// log-uniformly from `[1e-4, 1]`.
pub fn cube_pairs(n: usize, rng: &mut ChaCha8Rng) -> impl FnMut() -> (Vec<f64>, Vec<f64>) + '_ {
    move || {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = 10f64.powf(rng.random_range(-4.0..0.0));
        let dir = unit_direction(n, rng);
        let v = u.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
        (u, v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub block: usize,
    pub pairs: usize,
    pub estimate: f64,
    pub limit: f64,
    pub pass: bool,
}

/// Sampled Lipschitz constant of block `k` as a map from box-normalized
/// population coordinates to `Δ_evo`, fitness features held fixed.
pub fn learned_block_lipschitz(
    store: &ParamStore,
    k: usize,
    cfg: &OperatorConfig,
    pop: usize,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pop * cfg.dim;
    let fit = Tensor::new(vec![1, pop], (0..pop).map(|_| rng.random_range(0.0..10.0)).collect())?;
    let x0 = Tensor::new(vec![1, pop, cfg.dim], (0..n).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let inputs = ProposalInputs::compute(&x0, &fit)?;
    let map = |u: &[f64]| -> Vec<f64> {
        let x = Tensor::new(vec![1, pop, cfg.dim], u.to_vec()).expect("shape");
        match block_map(store, k, cfg, &x, &inputs) {
            Ok(t) => t.into_data(),
            Err(_) => vec![f64::NAN; u.len()],
        }
    };
    let mut pair_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let estimate = estimate_lipschitz(map, cube_pairs(n, &mut pair_rng), pairs);
    if estimate.is_nan() {
        return Err(Error::Numeric {
            step: k,
            detail: "non-finite operator output while sampling".into(),
        });
    }
    Ok(LipschitzReport {
        block: k,
        pairs,
        estimate,
        limit: 1.05,
        pass: estimate <= 1.05,
    })
}

/// Affine `O_evo` acting on every individual of a population.
pub struct AffineProposer {
    pub op: AffineOperator,
}

impl<'t> Proposer<'t> for AffineProposer {
    fn evolve(
        &self,
        _k: usize,
        y: Var<'t>,
        _inputs: &ProposalInputs,
        _bounds: &Bounds,
    ) -> Result<(Var<'t>, Option<Tensor>)> {
        let tape = y.tape();
        let n = self.op.dim();
        let c = tape.constant(Tensor::vector(self.op.c.clone()));
        let qt = Tensor::new(vec![n, n], self.op.q.clone())?.transpose_last()?;
        let out = y.sub(c)?.matmul(tape.constant(qt))?.add(c)?;
        Ok((out, None))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub name: String,
    pub steps: usize,
    /// `α ‖O(x^k) − x^k‖` for `k = 0..=steps`.
    pub residuals: Vec<f64>,
    pub monotone_violations: usize,
    pub worst_increase: f64,
    /// First `k` with residual below `1e-3`.
    pub k_star: Option<usize>,
    pub pass: bool,
}

impl ResidualReport {
    pub fn at(&self, k: usize) -> f64 {
        self.residuals[k.min(self.residuals.len() - 1)]
    }
}

/// Runs the gated composite solver with an affine `O_evo` on a Sphere
/// centred at the operator's fixed point and checks the averaged residual.
pub fn check_residual_convergence(
    name: &str,
    op: &AffineOperator,
    inner: &InnerConfig,
    pop: usize,
    seed: u64,
) -> Result<ResidualReport> {
    let n = op.dim();
    let f = ObjectiveFunction::with_shift(Family::Sphere, op.c.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // starts within distance 3 of c keep every iterate interior
    let mut x = Vec::with_capacity(pop * n);
    for _ in 0..pop {
        let r = rng.random_range(0.0..3.0);
        let u = unit_direction(n, &mut rng);
        x.extend(op.c.iter().zip(&u).map(|(c, d)| c + r * d));
    }
    let objs: [&dyn Objective; 1] = [&f];
    let p0 = Population::evaluate(Tensor::new(vec![1, pop, n], x)?, &objs)?;
    let tape = Tape::new();
    let cfg = InnerConfig {
        gate: GateMode::Soft,
        ..inner.clone()
    };
    let u = unroll(&tape, &p0, &objs, &AffineProposer { op: op.clone() }, &cfg, UnrollOptions::default(), None)?;
    let residuals: Vec<f64> = u
        .states
        .iter()
        .map(|s| {
            let v = s.value();
            v.data()
                .chunks(n)
                .map(|r| dist(&op.apply(r), r).powi(2))
                .sum::<f64>()
                .sqrt()
                * cfg.alpha
        })
        .collect();
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for w in residuals.windows(2) {
        let inc = w[1] - w[0];
        worst = worst.max(inc);
        if inc > RESIDUAL_SLACK {
            violations += 1;
        }
    }
    let k_star = residuals.iter().position(|&r| r < 1e-3);
    let steps = cfg.k;
    let mut rep = ResidualReport {
        name: name.to_string(),
        steps,
        residuals,
        monotone_violations: violations,
        worst_increase: worst,
        k_star,
        pass: false,
    };
    rep.pass = violations == 0
        && (steps < 200 || rep.at(200) <= rep.at(10))
        && (steps < 500 || rep.at(500) < 1e-3);
    Ok(rep)
}

/// Spectral norm of an affine operator's `Q` via the SVD oracle.
pub fn svd_norm(q: &[f64], n: usize) -> f64 {
    DMatrix::from_row_slice(n, n, q).singular_values().max()
}
