//! Budgeted evaluation of a trained operator: repeated warm-started unrolls
//! until the evaluation budget is spent exactly.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use kmevo_tensor::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{Bounds, Objective};
use crate::error::{Error, Result};
use crate::meta::block_count;
use crate::operator::OperatorConfig;
use crate::population::Population;
use crate::solver::{unroll, GradientMode, InnerConfig, LearnedOperator, TrajectoryRow, UnrollOptions};

/// Counts evaluations and tracks the best feasible value seen.
pub struct Tracked<'a> {
    inner: &'a dyn Objective,
    evals: AtomicUsize,
    best: Mutex<(f64, Vec<(usize, f64)>)>,
}

impl<'a> Tracked<'a> {
    pub fn new(inner: &'a dyn Objective) -> Self {
        Self {
            inner,
            evals: AtomicUsize::new(0),
            best: Mutex::new((f64::INFINITY, Vec::new())),
        }
    }

    pub fn count(&self) -> usize {
        self.evals.load(Ordering::SeqCst)
    }

    pub fn best(&self) -> f64 {
        self.best.lock().unwrap().0
    }

    /// `(evaluation count, best-so-far)` at every improvement.
    pub fn convergence(&self) -> Vec<(usize, f64)> {
        self.best.lock().unwrap().1.clone()
    }
}

impl Objective for Tracked<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn bounds(&self) -> &Bounds {
        self.inner.bounds()
    }

    fn f_opt(&self) -> f64 {
        self.inner.f_opt()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.evals.fetch_add(1, Ordering::SeqCst) + 1;
        let v = self.inner.value(x);
        if self.inner.bounds().contains(x) {
            let mut b = self.best.lock().unwrap();
            if v < b.0 {
                b.0 = v;
                b.1.push((n, v));
            }
        }
        v
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.evals.fetch_add(self.inner.gradient_cost(), Ordering::SeqCst);
        self.inner.gradient(x)
    }

    fn gradient_cost(&self) -> usize {
        self.inner.gradient_cost()
    }
}

/// Evaluations per individual per step, gradients included.
pub fn evals_per_individual_step(f: &dyn Objective, mode: GradientMode) -> usize {
    InnerConfig::EVALS_PER_STEP
        + match mode {
            GradientMode::Analytic => f.gradient_cost(),
            GradientMode::FiniteDifference => 2 * f.dim(),
        }
}

/// Initial population plus one full unroll.
pub fn min_budget(pop: usize, k: usize, per_step: usize) -> usize {
    pop + pop * k * per_step
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub best_f: f64,
    pub error: f64,
    pub evals: usize,
    pub unrolls: usize,
    pub trajectory: Vec<TrajectoryRow>,
    pub convergence: Vec<(usize, f64)>,
}

/// Runs the learned solver on `f` until exactly `budget` evaluations are
/// spent: full unrolls, then one shorter unroll, then uniform samples for
/// whatever is left.
pub fn run_learned(
    store: &ParamStore,
    op_cfg: &OperatorConfig,
    inner: &InnerConfig,
    f: &dyn Objective,
    pop: usize,
    budget: usize,
    seed: u64,
) -> Result<EvalRun> {
    inner.validate()?;
    if inner.k == 0 {
        return Err(Error::Config("evaluation needs K >= 1".into()));
    }
    let per_step = pop * evals_per_individual_step(f, inner.gradient_mode);
    let min = min_budget(pop, inner.k, per_step / pop);
    if budget < min {
        return Err(Error::Config(format!(
            "budget {budget} is below the minimum of {min} (pop {pop}, K {})",
            inner.k
        )));
    }
    let blocks = block_count(store);
    if blocks != 1 && blocks != inner.k {
        return Err(Error::Contract(format!("{blocks} parameter blocks for K = {}", inner.k)));
    }
    let tracked = Tracked::new(f);
    let objs: [&dyn Objective; 1] = [&tracked];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Population::uniform(&objs, pop, &mut rng)?;
    let mut trajectory = vec![TrajectoryRow::plain(0, p.best(0), p.mean(0), f64::NAN)];
    let mut unrolls = 0;

    loop {
        let left = budget - tracked.count();
        let steps = (left / per_step).min(inner.k);
        if steps == 0 {
            break;
        }
        let cfg = InnerConfig {
            k: steps,
            ..inner.clone()
        };
        let tape = Tape::new();
        let bound = store.bind(&tape);
        // a shorter final unroll uses the leading blocks
        let op = LearnedOperator::new(&bound, op_cfg, if blocks == 1 { 1 } else { steps }, &cfg)?;
        let u = unroll(&tape, &p, &objs, &op, &cfg, UnrollOptions::default(), None)?;
        let offset = trajectory.len() - 1;
        trajectory.extend(u.rows(0).into_iter().skip(1).map(|mut r| {
            r.step += offset;
            r
        }));
        p = u.final_population(&p.bounds);
        unrolls += 1;
    }
    while tracked.count() < budget {
        let x = f.bounds().sample(&mut rng);
        tracked.value(&x);
    }
    let evals = tracked.count();
    if evals != budget {
        return Err(Error::Contract(format!("spent {evals} evaluations of a budget of {budget}")));
    }
    let best_f = tracked.best();
    Ok(EvalRun {
        best_f,
        error: best_f - f.f_opt(),
        evals,
        unrolls,
        trajectory,
        convergence: tracked.convergence(),
    })
}
