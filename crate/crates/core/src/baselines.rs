//! Classical reference optimizers under exact evaluation budgets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{Bounds, Counted, Objective};
use crate::error::{Error, Result};
use crate::solver::TrajectoryRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    RandomSearch,
    De,
    Pso,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algorithm: Algorithm,
    pub pop: usize,
    pub budget: usize,
    pub de_f: f64,
    pub de_cr: f64,
    pub pso_w: f64,
    pub pso_c1: f64,
    pub pso_c2: f64,
    /// Velocity clamp as a fraction of the box width.
    pub pso_vclamp: f64,
}

impl BaselineConfig {
    pub fn new(algorithm: Algorithm, pop: usize, budget: usize) -> Self {
        Self {
            algorithm,
            pop,
            budget,
            de_f: 0.5,
            de_cr: 0.9,
            pso_w: 0.729,
            pso_c1: 1.49445,
            pso_c2: 1.49445,
            pso_vclamp: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        match self.algorithm {
            Algorithm::RandomSearch => Ok(()),
            Algorithm::De if self.pop < 4 => Err(Error::Config(format!(
                "DE rand/1 needs pop >= 4, got {}",
                self.pop
            ))),
            _ if self.budget < self.pop => Err(Error::Config(format!(
                "budget {} below pop size {}",
                self.budget, self.pop
            ))),
            _ if self.pop == 0 => Err(Error::Config("pop must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Outcome of one baseline run.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRun {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub evals: usize,
    pub trajectory: Vec<TrajectoryRow>,
    /// `(evaluation count, best-so-far)` at every improvement.
    pub convergence: Vec<(usize, f64)>,
}

struct Tracker<'a, O: ?Sized> {
    f: Counted<'a, O>,
    budget: usize,
    best_x: Vec<f64>,
    best_f: f64,
    convergence: Vec<(usize, f64)>,
}

impl<'a, O: Objective + ?Sized> Tracker<'a, O> {
    fn new(f: &'a O, budget: usize) -> Self {
        Self {
            f: Counted::new(f),
            budget,
            best_x: Vec::new(),
            best_f: f64::INFINITY,
            convergence: Vec::new(),
        }
    }

    fn left(&self) -> usize {
        self.budget - self.f.count()
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        debug_assert!(self.left() > 0);
        let v = self.f.value(x);
        if v < self.best_f {
            self.best_f = v;
            self.best_x = x.to_vec();
            self.convergence.push((self.f.count(), v));
        }
        v
    }

    fn finish(self, trajectory: Vec<TrajectoryRow>) -> BaselineRun {
        BaselineRun {
            best_x: self.best_x,
            best_f: self.best_f,
            evals: self.f.count(),
            trajectory,
            convergence: self.convergence,
        }
    }
}

fn row(step: usize, best: f64, fit: &[f64], moved: f64) -> TrajectoryRow {
    TrajectoryRow::plain(step, best, fit.iter().sum::<f64>() / fit.len() as f64, moved)
}

fn dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        .sqrt()
}

pub fn run(cfg: &BaselineConfig, f: &dyn Objective, seed: u64) -> Result<BaselineRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.algorithm {
        Algorithm::RandomSearch => Ok(random_search(f, cfg.budget, &mut rng)),
        Algorithm::De => Ok(de(cfg, f, &mut rng)),
        Algorithm::Pso => Ok(pso(cfg, f, &mut rng)),
    }
}

/// Uniform sampling in the box; the trajectory has one row per sample.
pub fn random_search(f: &dyn Objective, budget: usize, rng: &mut impl Rng) -> BaselineRun {
    let mut t = Tracker::new(f, budget);
    let mut rows = Vec::with_capacity(budget);
    while t.left() > 0 {
        let x = f.bounds().sample(rng);
        let v = t.eval(&x);
        rows.push(row(rows.len(), t.best_f, &[v], f64::NAN));
    }
    t.finish(rows)
}

/// rand/1/bin trial vector for `target` from the three donors.
pub fn de_trial(
    target: &[f64],
    donors: [&[f64]; 3],
    f_scale: f64,
    cr: f64,
    j_rand: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    (0..target.len())
        .map(|j| {
            if j == j_rand || rng.random::<f64>() < cr {
                donors[0][j] + f_scale * (donors[1][j] - donors[2][j])
            } else {
                target[j]
            }
        })
        .collect()
}

fn three_others(n: usize, i: usize, rng: &mut impl Rng) -> [usize; 3] {
    let mut out = [0; 3];
    let mut k = 0;
    while k < 3 {
        let r = rng.random_range(0..n);
        if r != i && !out[..k].contains(&r) {
            out[k] = r;
            k += 1;
        }
    }
    out
}

/// One DE generation with greedy selection. Stops early when `budget_left`
/// runs out; returns the number of evaluations spent.
pub fn de_step(
    xs: &mut [Vec<f64>],
    fit: &mut [f64],
    cfg: &BaselineConfig,
    eval: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &Bounds,
    budget_left: usize,
    rng: &mut impl Rng,
) -> usize {
    let (n, d) = (xs.len(), bounds.dim());
    let steps = n.min(budget_left);
    for i in 0..steps {
        let [a, b, c] = three_others(n, i, rng);
        let j_rand = rng.random_range(0..d);
        let mut u = de_trial(&xs[i], [&xs[a], &xs[b], &xs[c]], cfg.de_f, cfg.de_cr, j_rand, rng);
        bounds.project(&mut u);
        let v = eval(&u);
        if v <= fit[i] {
            xs[i] = u;
            fit[i] = v;
        }
    }
    steps
}

fn de(cfg: &BaselineConfig, f: &dyn Objective, rng: &mut ChaCha8Rng) -> BaselineRun {
    let mut t = Tracker::new(f, cfg.budget);
    let mut xs: Vec<Vec<f64>> = (0..cfg.pop).map(|_| f.bounds().sample(rng)).collect();
    let mut fit: Vec<f64> = xs.iter().map(|x| t.eval(x)).collect();
    let mut rows = vec![row(0, t.best_f, &fit, f64::NAN)];
    while t.left() > 0 {
        let before = xs.clone();
        let left = t.left();
        de_step(&mut xs, &mut fit, cfg, &mut |p| t.eval(p), f.bounds(), left, rng);
        rows.push(row(rows.len(), t.best_f, &fit, dist(&xs, &before)));
    }
    t.finish(rows)
}

/// Swarm state for PSO.
#[derive(Clone, Debug, PartialEq)]
pub struct Swarm {
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub fit: Vec<f64>,
    pub pbest: Vec<Vec<f64>>,
    pub pbest_f: Vec<f64>,
    pub gbest: Vec<f64>,
    pub gbest_f: f64,
}

impl Swarm {
    pub fn new(x: Vec<Vec<f64>>, fit: Vec<f64>) -> Self {
        let (gi, &gf) = fit
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty swarm");
        Self {
            v: x.iter().map(|r| vec![0.0; r.len()]).collect(),
            pbest: x.clone(),
            pbest_f: fit.clone(),
            gbest: x[gi].clone(),
            gbest_f: gf,
            x,
            fit,
        }
    }
}

/// One synchronous constriction-coefficient PSO step over at most
/// `budget_left` particles; returns the number of evaluations spent.
pub fn pso_step(
    s: &mut Swarm,
    cfg: &BaselineConfig,
    eval: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &Bounds,
    budget_left: usize,
    rng: &mut impl Rng,
) -> usize {
    let d = bounds.dim();
    let n = s.x.len().min(budget_left);
    for i in 0..n {
        for j in 0..d {
            let vmax = cfg.pso_vclamp * bounds.width(j);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let v = cfg.pso_w * s.v[i][j]
                + cfg.pso_c1 * r1 * (s.pbest[i][j] - s.x[i][j])
                + cfg.pso_c2 * r2 * (s.gbest[j] - s.x[i][j]);
            s.v[i][j] = v.clamp(-vmax, vmax);
            s.x[i][j] = (s.x[i][j] + s.v[i][j]).clamp(bounds.lo[j], bounds.hi[j]);
        }
        s.fit[i] = eval(&s.x[i]);
        if s.fit[i] < s.pbest_f[i] {
            s.pbest_f[i] = s.fit[i];
            s.pbest[i] = s.x[i].clone();
        }
    }
    for i in 0..n {
        if s.pbest_f[i] < s.gbest_f {
            s.gbest_f = s.pbest_f[i];
            s.gbest = s.pbest[i].clone();
        }
    }
    n
}

fn pso(cfg: &BaselineConfig, f: &dyn Objective, rng: &mut ChaCha8Rng) -> BaselineRun {
    let mut t = Tracker::new(f, cfg.budget);
    let x: Vec<Vec<f64>> = (0..cfg.pop).map(|_| f.bounds().sample(rng)).collect();
    let fit: Vec<f64> = x.iter().map(|p| t.eval(p)).collect();
    let mut s = Swarm::new(x, fit);
    let mut rows = vec![row(0, t.best_f, &s.fit, f64::NAN)];
    while t.left() > 0 {
        let before = s.x.clone();
        let left = t.left();
        pso_step(&mut s, cfg, &mut |p| t.eval(p), f.bounds(), left, rng);
        rows.push(row(rows.len(), t.best_f, &s.fit, dist(&s.x, &before)));
    }
    t.finish(rows)
}
