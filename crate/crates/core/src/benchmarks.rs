//! Synthetic black-box objectives in the style of the BBOB noiseless suite
//! (plain forms, without the asymmetry and oscillation warpings).
//!
//! Every function is `f(x) = g(R(x − shift)) + f_opt`, with `R` orthogonal
//! (or the identity) and `g` a family formula minimized at the origin.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use kmevo_tensor::Tensor;
use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Sphere,
    Ellipsoidal,
    Rastrigin,
    Rosenbrock,
    BentCigar,
    Discus,
    SharpRidge,
    LunacekBiRastrigin,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Sphere,
        Family::Ellipsoidal,
        Family::Rastrigin,
        Family::Rosenbrock,
        Family::BentCigar,
        Family::Discus,
        Family::SharpRidge,
        Family::LunacekBiRastrigin,
    ];

    /// Families with a closed-form gradient.
    pub fn has_analytic_gradient(self) -> bool {
        matches!(
            self,
            Family::Sphere
                | Family::Ellipsoidal
                | Family::Rosenbrock
                | Family::BentCigar
                | Family::Discus
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "Sphere",
            Family::Ellipsoidal => "Ellipsoidal",
            Family::Rastrigin => "Rastrigin",
            Family::Rosenbrock => "Rosenbrock",
            Family::BentCigar => "BentCigar",
            Family::Discus => "Discus",
            Family::SharpRidge => "SharpRidge",
            Family::LunacekBiRastrigin => "LunacekBiRastrigin",
        }
    }

    fn min_dim(self) -> usize {
        match self {
            Family::Rosenbrock | Family::SharpRidge => 2,
            _ => 1,
        }
    }

    /// Family formula at `z`, minimum 0 at `z = 0`.
    pub fn raw(self, z: &[f64]) -> f64 {
        let d = z.len();
        match self {
            Family::Sphere => z.iter().map(|v| v * v).sum(),
            Family::Ellipsoidal => z
                .iter()
                .enumerate()
                .map(|(i, v)| ellipsoid_coef(i, d) * v * v)
                .sum(),
            Family::Rastrigin => rastrigin(z),
            Family::Rosenbrock => (0..d.saturating_sub(1))
                .map(|i| {
                    let (a, b) = (z[i] + 1.0, z[i + 1] + 1.0);
                    100.0 * (a * a - b).powi(2) + z[i] * z[i]
                })
                .sum(),
            Family::BentCigar => z[0] * z[0] + 1e6 * z[1..].iter().map(|v| v * v).sum::<f64>(),
            Family::Discus => 1e6 * z[0] * z[0] + z[1..].iter().map(|v| v * v).sum::<f64>(),
            Family::SharpRidge => z[0] * z[0] + 100.0 * z[1..].iter().map(|v| v * v).sum::<f64>().sqrt(),
            Family::LunacekBiRastrigin => {
                let (mu0, dd) = (2.5, 1.0);
                let s = 1.0 - 1.0 / (2.0 * (d as f64 + 20.0).sqrt() - 8.2);
                let mu1 = -((mu0 * mu0 - dd) / s).sqrt();
                // first sphere centred on the optimum, second on the deceptive basin
                let a: f64 = z.iter().map(|v| v * v).sum();
                let b: f64 = z.iter().map(|v| (v + mu0 - mu1).powi(2)).sum();
                a.min(dd * d as f64 + s * b) + rastrigin(z) - z.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// Closed-form gradient of [`Family::raw`], where one exists.
    pub fn raw_gradient(self, z: &[f64]) -> Option<Vec<f64>> {
        let d = z.len();
        Some(match self {
            Family::Sphere => z.iter().map(|v| 2.0 * v).collect(),
            Family::Ellipsoidal => z
                .iter()
                .enumerate()
                .map(|(i, v)| 2.0 * ellipsoid_coef(i, d) * v)
                .collect(),
            Family::Rosenbrock => {
                let mut g = vec![0.0; d];
                for i in 0..d - 1 {
                    let (a, b) = (z[i] + 1.0, z[i + 1] + 1.0);
                    let r = a * a - b;
                    g[i] += 400.0 * r * a + 2.0 * z[i];
                    g[i + 1] -= 200.0 * r;
                }
                g
            }
            Family::BentCigar => {
                let mut g: Vec<f64> = z.iter().map(|v| 2e6 * v).collect();
                g[0] = 2.0 * z[0];
                g
            }
            Family::Discus => {
                let mut g: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
                g[0] = 2e6 * z[0];
                g
            }
            _ => return None,
        })
    }
}

fn ellipsoid_coef(i: usize, d: usize) -> f64 {
    if d == 1 {
        1.0
    } else {
        10f64.powf(6.0 * i as f64 / (d - 1) as f64)
    }
}

fn rastrigin(z: &[f64]) -> f64 {
    let tau = std::f64::consts::TAU;
    10.0 * (z.len() as f64 - z.iter().map(|v| (tau * v).cos()).sum::<f64>())
        + z.iter().map(|v| v * v).sum::<f64>()
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown function family `{s}`")))
    }
}

/// Axis-aligned feasible box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i] && v <= self.hi[i])
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim())
            .map(|i| rng.random_range(self.lo[i]..=self.hi[i]))
            .collect()
    }
}

/// Black-box access used by solvers and baselines.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn bounds(&self) -> &Bounds;
    fn f_opt(&self) -> f64;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Objective evaluations consumed by one [`Objective::gradient`] call.
    fn gradient_cost(&self) -> usize {
        0
    }
}

/// Everything needed to rebuild a function instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub family: Family,
    pub dim: usize,
    pub seed: u64,
    pub f_opt: f64,
    pub rotate: bool,
    /// Shifts are drawn from `[-shift_range, shift_range]^dim`.
    pub shift_range: f64,
    pub lo: f64,
    pub hi: f64,
    /// Adds the low-amplitude cosine field used for out-of-distribution runs.
    pub surrogate: bool,
    /// Forces central differences even for families with a closed-form gradient.
    pub finite_difference: bool,
}

impl FunctionSpec {
    pub fn new(family: Family, dim: usize, seed: u64) -> Self {
        Self {
            family,
            dim,
            seed,
            f_opt: 0.0,
            rotate: false,
            shift_range: 4.0,
            lo: -5.0,
            hi: 5.0,
            surrogate: false,
            finite_difference: false,
        }
    }

    /// Text descriptor, e.g. `family=Sphere dim=2 seed=7 f_opt=0 ...`.
    pub fn descriptor(&self) -> String {
        format!(
            "family={} dim={} seed={} f_opt={:?} rotate={} shift={:?} lo={:?} hi={:?} surrogate={} fd={}",
            self.family,
            self.dim,
            self.seed,
            self.f_opt,
            u8::from(self.rotate),
            self.shift_range,
            self.lo,
            self.hi,
            u8::from(self.surrogate),
            u8::from(self.finite_difference),
        )
    }

    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let mut spec = FunctionSpec::new(Family::Sphere, 0, 0);
        let mut seen_family = false;
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad descriptor token `{tok}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| Error::Parse(format!("{k}: {e}")));
            let flag = |v: &str| match v {
                "0" | "false" => Ok(false),
                "1" | "true" => Ok(true),
                _ => Err(Error::Parse(format!("{k}: expected 0/1, got `{v}`"))),
            };
            match k {
                "family" => {
                    spec.family = v.parse()?;
                    seen_family = true;
                }
                "dim" => spec.dim = v.parse().map_err(|e| Error::Parse(format!("dim: {e}")))?,
                "seed" => spec.seed = v.parse().map_err(|e| Error::Parse(format!("seed: {e}")))?,
                "f_opt" => spec.f_opt = num(v)?,
                "rotate" => spec.rotate = flag(v)?,
                "shift" => spec.shift_range = num(v)?,
                "lo" => spec.lo = num(v)?,
                "hi" => spec.hi = num(v)?,
                "surrogate" => spec.surrogate = flag(v)?,
                "fd" => spec.finite_difference = flag(v)?,
                _ => return Err(Error::Parse(format!("unknown descriptor key `{k}`"))),
            }
        }
        if !seen_family || spec.dim == 0 {
            return Err(Error::Parse(format!("descriptor needs family and dim: `{s}`")));
        }
        Ok(spec)
    }
}

/// A concrete benchmark instance. Immutable once built.
#[derive(Clone, Debug)]
pub struct ObjectiveFunction {
    spec: FunctionSpec,
    shift: Vec<f64>,
    /// Row-major dim × dim orthogonal matrix; `None` is the identity.
    rotation: Option<Vec<f64>>,
    bounds: Bounds,
    surrogate_amp: f64,
}

impl ObjectiveFunction {
    pub fn new(spec: FunctionSpec) -> Result<Self> {
        if spec.dim < spec.family.min_dim() {
            return Err(Error::Config(format!(
                "{} needs dim >= {}",
                spec.family,
                spec.family.min_dim()
            )));
        }
        if !(spec.lo < spec.hi) || spec.shift_range < 0.0 {
            return Err(Error::Config(format!(
                "invalid box [{}, {}] / shift range {}",
                spec.lo, spec.hi, spec.shift_range
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let shift: Vec<f64> = (0..spec.dim)
            .map(|_| {
                if spec.shift_range > 0.0 {
                    rng.random_range(-spec.shift_range..=spec.shift_range)
                } else {
                    0.0
                }
            })
            .collect();
        let rotation = spec.rotate.then(|| random_rotation(spec.dim, &mut rng));
        let bounds = Bounds::uniform(spec.dim, spec.lo, spec.hi);
        let mut f = Self {
            spec,
            shift,
            rotation,
            bounds,
            surrogate_amp: 0.0,
        };
        if f.spec.surrogate {
            f.surrogate_amp = 0.05 * f.range_estimate(&mut rng);
        }
        Ok(f)
    }

    /// Shorthand for an unrotated instance with an explicit shift.
    pub fn with_shift(family: Family, shift: Vec<f64>) -> Result<Self> {
        let mut f = Self::new(FunctionSpec {
            shift_range: 0.0,
            ..FunctionSpec::new(family, shift.len(), 0)
        })?;
        f.shift = shift;
        Ok(f)
    }

    pub fn spec(&self) -> &FunctionSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn rotation(&self) -> Option<&[f64]> {
        self.rotation.as_deref()
    }

    /// Location of the global minimum.
    pub fn optimum(&self) -> &[f64] {
        &self.shift
    }

    fn range_estimate(&self, rng: &mut ChaCha8Rng) -> f64 {
        (0..64)
            .map(|_| {
                let x = self.bounds.sample(rng);
                self.base_value(&x) - self.spec.f_opt
            })
            .fold(0.0, f64::max)
    }

    fn to_z(&self, x: &[f64]) -> Vec<f64> {
        let d = self.spec.dim;
        let y: Vec<f64> = x.iter().zip(&self.shift).map(|(a, s)| a - s).collect();
        match &self.rotation {
            None => y,
            Some(r) => (0..d)
                .map(|i| (0..d).map(|j| r[i * d + j] * y[j]).sum())
                .collect(),
        }
    }

    fn base_value(&self, x: &[f64]) -> f64 {
        self.spec.family.raw(&self.to_z(x)) + self.spec.f_opt
    }

    fn surrogate_term(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.spec.dim as f64;
        let w = std::f64::consts::PI / 5.0;
        let mut v = 0.0;
        let mut g = Vec::with_capacity(x.len());
        for (xi, si) in x.iter().zip(&self.shift) {
            let t = w * (xi - si);
            v += 1.0 - t.cos();
            g.push(self.surrogate_amp * w * t.sin() / d);
        }
        (self.surrogate_amp * v / d, g)
    }

    fn eval_point(&self, x: &[f64]) -> f64 {
        let mut v = self.base_value(x);
        if self.surrogate_amp != 0.0 {
            v += self.surrogate_term(x).0;
        }
        v
    }

    fn grad_point(&self, x: &[f64]) -> Vec<f64> {
        let analytic = if self.spec.finite_difference {
            None
        } else {
            self.spec.family.raw_gradient(&self.to_z(x))
        };
        let Some(gz) = analytic else {
            return central_difference(|p| self.eval_point(p), x);
        };
        let d = self.spec.dim;
        let mut g = match &self.rotation {
            None => gz,
            Some(r) => (0..d)
                .map(|j| (0..d).map(|i| r[i * d + j] * gz[i]).sum())
                .collect(),
        };
        if self.surrogate_amp != 0.0 {
            for (gi, si) in g.iter_mut().zip(self.surrogate_term(x).1) {
                *gi += si;
            }
        }
        g
    }

    fn check_dim(&self, t: &Tensor) -> Result<()> {
        if t.shape().last() != Some(&self.spec.dim) {
            return Err(Error::Dimension(format!(
                "population shape {:?} does not end in dim {}",
                t.shape(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    /// Fitness of every individual: shape `x.shape()[..-1]`.
    pub fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x)?;
        let vals = x.data().chunks(self.spec.dim).map(|r| self.eval_point(r)).collect();
        Ok(Tensor::new(x.shape()[..x.ndim() - 1].to_vec(), vals)?)
    }

    /// Gradient of every individual, same shape as `x`.
    pub fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x)?;
        let vals = x
            .data()
            .chunks(self.spec.dim)
            .flat_map(|r| self.grad_point(r))
            .collect();
        Ok(Tensor::new(x.shape().to_vec(), vals)?)
    }
}

impl Objective for ObjectiveFunction {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn f_opt(&self) -> f64 {
        self.spec.f_opt
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.eval_point(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.grad_point(x)
    }

    fn gradient_cost(&self) -> usize {
        if self.spec.finite_difference || !self.spec.family.has_analytic_gradient() {
            2 * self.spec.dim
        } else {
            0
        }
    }
}

/// Central differences with step `1e-6 · max(1, |x_i|)`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Orthogonal matrix from the QR factorization of a Gaussian matrix, with
/// column signs fixed so that diag(R) > 0.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = q[(i, j)];
        }
    }
    out
}

/// Wraps an objective and counts every point evaluation, including the
/// evaluations hidden inside finite-difference gradients.
pub struct Counted<'a, O: ?Sized> {
    inner: &'a O,
    evals: AtomicUsize,
}

impl<'a, O: Objective + ?Sized> Counted<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            evals: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }
}

impl<O: Objective + ?Sized> Objective for Counted<'_, O> {
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
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.value(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.evals
            .fetch_add(self.inner.gradient_cost(), Ordering::Relaxed);
        self.inner.gradient(x)
    }

    fn gradient_cost(&self) -> usize {
        self.inner.gradient_cost()
    }
}

/// Distribution over benchmark instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub families: Vec<(Family, f64)>,
    pub dims: Vec<usize>,
    pub shift_range: f64,
    pub rotate: bool,
    pub lo: f64,
    pub hi: f64,
}

impl TaskDistribution {
    pub fn new(families: Vec<(Family, f64)>, dims: Vec<usize>) -> Result<Self> {
        let d = Self {
            families,
            dims,
            shift_range: 4.0,
            rotate: false,
            lo: -5.0,
            hi: 5.0,
        };
        d.validate()?;
        Ok(d)
    }

    /// Equal weights over `families`.
    pub fn uniform(families: &[Family], dim: usize) -> Result<Self> {
        let w = 1.0 / families.len().max(1) as f64;
        Self::new(families.iter().map(|&f| (f, w)).collect(), vec![dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.dims.is_empty() {
            return Err(Error::Config("task distribution needs families and dims".into()));
        }
        if self.families.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("family weights must be non-negative".into()));
        }
        let total: f64 = self.families.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("family weights sum to {total}, expected 1")));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("dims must be positive".into()));
        }
        Ok(())
    }

    /// Draws one instance; deterministic in the RNG state.
    pub fn sample_spec(&self, rng: &mut impl Rng) -> Result<FunctionSpec> {
        let weights: Vec<f64> = self.families.iter().map(|(_, w)| *w).collect();
        let idx = WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("family weights: {e}")))?
            .sample(rng);
        let dim = self.dims[rng.random_range(0..self.dims.len())];
        Ok(FunctionSpec {
            family: self.families[idx].0,
            dim,
            seed: rng.random(),
            f_opt: 0.0,
            rotate: self.rotate,
            shift_range: self.shift_range,
            lo: self.lo,
            hi: self.hi,
            surrogate: false,
            finite_difference: false,
        })
    }
}

pub fn sample_task(dist: &TaskDistribution, rng: &mut impl Rng) -> Result<ObjectiveFunction> {
    ObjectiveFunction::new(dist.sample_spec(rng)?)
}
