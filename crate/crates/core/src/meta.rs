//! Outer loop: sample tasks, unroll, normalized-improvement loss, BPTT,
//! clipped (momentum) gradient step, spectral re-normalization.

use std::time::Instant;

use kmevo_tensor::{GradMap, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{sample_task, Objective, ObjectiveFunction, TaskDistribution};
use crate::error::{Error, Result};
use crate::operator::{init_params, max_spectral_estimate, normalize_spectra, OperatorConfig};
use crate::population::Population;
use crate::solver::{unroll, InnerConfig, LearnedOperator, StepDiagnostics, StepTrace, UnrollOptions};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 10.0;
pub const MOMENTUM: f64 = 0.9;
const MAX_HALVINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    Shared,
    Unshared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaOptimizerKind {
    PlainGd,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub tasks_per_batch: usize,
    pub pop: usize,
    pub inner: InnerConfig,
    pub operator: OperatorConfig,
    pub sharing: Sharing,
    pub optimizer: MetaOptimizerKind,
    pub seed: u64,
    pub distribution: TaskDistribution,
    pub epsilon: f64,
}

impl MetaConfig {
    pub fn new(distribution: TaskDistribution) -> Self {
        let dim = distribution.dims.first().copied().unwrap_or(1);
        Self {
            iterations: 200,
            gamma: 0.05,
            tasks_per_batch: 8,
            pop: 16,
            inner: InnerConfig::default(),
            operator: OperatorConfig::new(dim),
            sharing: Sharing::Unshared,
            optimizer: MetaOptimizerKind::Momentum,
            seed: 0,
            distribution,
            epsilon: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        self.operator.validate()?;
        self.distribution.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::Config("tasks_per_batch must be positive".into()));
        }
        if self.pop < 2 {
            return Err(Error::Config(format!("pop {} < 2", self.pop)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.distribution.dims.iter().any(|&d| d != self.operator.dim) {
            return Err(Error::Config(format!(
                "operator dim {} does not cover task dims {:?}",
                self.operator.dim, self.distribution.dims
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        match self.sharing {
            Sharing::Shared => 1,
            Sharing::Unshared => self.inner.k.max(1),
        }
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        init_params(&self.operator, self.blocks(), self.seed)
    }
}

/// Seed of meta-iteration `t`, derived from the master seed.
pub fn iteration_seed(master: u64, t: usize) -> u64 {
    let mut z = master ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Frozen task sample and initial populations for one meta-iteration.
#[derive(Clone, Debug)]
pub struct MetaBatch {
    pub objectives: Vec<ObjectiveFunction>,
    pub pop: Population,
}

impl MetaBatch {
    pub fn sample(cfg: &MetaConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objectives = (0..cfg.tasks_per_batch)
            .map(|_| sample_task(&cfg.distribution, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::with_objectives(objectives, cfg.pop, &mut rng)
    }

    pub fn with_objectives(objectives: Vec<ObjectiveFunction>, pop: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let refs: Vec<&dyn Objective> = objectives.iter().map(|o| o as &dyn Objective).collect();
        let pop = Population::uniform(&refs, pop, rng)?;
        Ok(Self { objectives, pop })
    }

    pub fn refs(&self) -> Vec<&dyn Objective> {
        self.objectives.iter().map(|o| o as &dyn Objective).collect()
    }
}

/// `−mean_b (f̄⁰_b − f̄ᴷ_b) / (|f̄⁰_b| + ε)` with `f̄` the population mean.
pub fn meta_loss<'t>(f0: &Tensor, fk: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let shape = f0.shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Contract(format!("meta-loss needs a non-empty batch, got {shape:?}")));
    }
    if fk.shape() != shape {
        return Err(Error::Dimension(format!("initial fitness {shape:?} vs final {:?}", fk.shape())));
    }
    let tape = fk.tape();
    let n = shape[1];
    let f0bar: Vec<f64> = f0.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let denom = f0bar.iter().map(|v| v.abs() + eps).collect();
    let b = shape[0];
    let f0c = tape.constant(Tensor::new(vec![b, 1], f0bar)?);
    let dc = tape.constant(Tensor::new(vec![b, 1], denom)?);
    let fkbar = fk.mean_axis(1)?;
    Ok(f0c.sub(fkbar)?.div(dc)?.mean().neg())
}

/// Loss, parameter gradients and the frozen trace of one batch.
#[derive(Debug)]
pub struct MetaEval {
    pub loss: f64,
    pub grads: GradMap,
    pub trace: Vec<StepTrace>,
    pub steps: Vec<StepDiagnostics>,
}

fn forward<'t>(
    tape: &'t Tape,
    bound: &kmevo_tensor::BoundParams<'t>,
    blocks: usize,
    batch: &MetaBatch,
    cfg: &MetaConfig,
    replay: Option<&[StepTrace]>,
) -> Result<(Var<'t>, Vec<StepTrace>, Vec<StepDiagnostics>)> {
    let op = LearnedOperator::new(bound, &cfg.operator, blocks, &cfg.inner)?;
    let opts = UnrollOptions {
        differentiable_final: true,
    };
    let u = unroll(tape, &batch.pop, &batch.refs(), &op, &cfg.inner, opts, replay)?;
    let loss = meta_loss(&batch.pop.fit, u.final_fit, cfg.epsilon)?;
    Ok((loss, u.trace, u.steps))
}

/// Number of consecutive `block{k}` prefixes present in `store`.
pub fn block_count(store: &ParamStore) -> usize {
    (0..)
        .take_while(|k| store.contains(&format!("block{k}.embed.w")))
        .count()
}

pub fn loss_and_grad(store: &ParamStore, batch: &MetaBatch, cfg: &MetaConfig) -> Result<MetaEval> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (loss, trace, steps) = forward(&tape, &bound, block_count(store), batch, cfg, None)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::Numeric {
            step: cfg.inner.k,
            detail: format!("meta-loss is {value}"),
        });
    }
    let g = tape.backward(loss)?;
    Ok(MetaEval {
        loss: value,
        grads: store.gradients(&bound, &g),
        trace,
        steps,
    })
}

/// Meta-loss without gradients; with `replay`, non-differentiable
/// quantities are taken from the trace.
pub fn evaluate_loss(
    store: &ParamStore,
    batch: &MetaBatch,
    cfg: &MetaConfig,
    replay: Option<&[StepTrace]>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (loss, _, _) = forward(&tape, &bound, block_count(store), batch, cfg, replay)?;
    let v = loss.value().item();
    Ok(v)
}

/// Central-difference meta-gradient for `(path, flat index)` entries,
/// replaying `trace` so that the perturbed runs see the same frozen inputs
/// as the tape.
pub fn finite_difference_meta_grad(
    store: &ParamStore,
    batch: &MetaBatch,
    cfg: &MetaConfig,
    trace: &[StepTrace],
    subset: &[(String, usize)],
    h: f64,
) -> Result<Vec<f64>> {
    subset
        .par_iter()
        .map(|(path, i)| {
            let at = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.get_mut(path)?.data_mut()[*i] += delta;
                evaluate_loss(&s, batch, cfg, Some(trace))
            };
            Ok((at(h)? - at(-h)?) / (2.0 * h))
        })
        .collect()
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Optimizer state carried between meta-steps.
#[derive(Clone, Debug)]
pub struct MetaOptimizer {
    pub kind: MetaOptimizerKind,
    velocity: GradMap,
}

impl MetaOptimizer {
    pub fn new(kind: MetaOptimizerKind) -> Self {
        Self {
            kind,
            velocity: GradMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Clips to global norm [`CLIP_NORM`], steps, re-normalizes spectra.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, gamma: f64) -> Result<f64> {
        for path in store.paths() {
            if store.is_trainable(path) && !grads.contains_key(path) {
                return Err(Error::Contract(format!("missing gradient for `{path}`")));
            }
        }
        if let Some((path, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFiniteGradient(path.clone()));
        }
        let norm = global_norm(grads);
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        for (path, g) in grads {
            let g = g.map(|v| v * clip);
            let update = match self.kind {
                MetaOptimizerKind::PlainGd => g,
                MetaOptimizerKind::Momentum => {
                    let v = self
                        .velocity
                        .entry(path.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    v.scale_in_place(MOMENTUM);
                    v.axpy(1.0, &g)?;
                    v.clone()
                }
            };
            store.get_mut(path)?.axpy(-gamma, &update)?;
        }
        normalize_spectra(store);
        Ok(norm)
    }
}

/// Per-iteration training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub meta_loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub wall_time: Vec<f64>,
    pub spectral_max: Vec<f64>,
    pub gamma: Vec<f64>,
    pub best_iteration: Option<usize>,
    pub checkpoint: Option<String>,
}

impl TrainRecord {
    /// Everything except wall-clock time, for determinism comparisons.
    pub fn same_run(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.meta_loss) == bits(&other.meta_loss)
            && bits(&self.grad_norm) == bits(&other.grad_norm)
            && bits(&self.spectral_max) == bits(&other.spectral_max)
            && bits(&self.gamma) == bits(&other.gamma)
            && self.best_iteration == other.best_iteration
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Parameters after the last iteration.
    pub params: ParamStore,
    /// Lowest-meta-loss parameters seen.
    pub best: ParamStore,
    pub record: TrainRecord,
}

pub fn train(cfg: &MetaConfig) -> Result<TrainResult> {
    train_from(cfg, cfg.init_params()?)
}

/// Training from given initial parameters.
pub fn train_from(cfg: &MetaConfig, init: ParamStore) -> Result<TrainResult> {
    train_with(cfg, init, loss_and_grad)
}

/// The training loop with a custom loss-and-gradient evaluator.
pub fn train_with(
    cfg: &MetaConfig,
    init: ParamStore,
    eval: impl Fn(&ParamStore, &MetaBatch, &MetaConfig) -> Result<MetaEval>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut params = init;
    let mut opt = MetaOptimizer::new(cfg.optimizer);
    let mut record = TrainRecord::default();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut gamma = cfg.gamma;
    let mut halvings = 0;

    for t in 0..cfg.iterations {
        let start = Instant::now();
        let batch = MetaBatch::sample(cfg, iteration_seed(cfg.seed, t))?;
        let outcome = eval(&params, &batch, cfg).and_then(|ev| {
            let mut next = params.clone();
            let norm = opt.step(&mut next, &ev.grads, gamma)?;
            Ok((ev.loss, norm, next))
        });
        match outcome {
            Ok((loss, norm, next)) => {
                // loss was measured at the pre-step parameters
                if loss < best_loss {
                    best_loss = loss;
                    best = params.clone();
                    record.best_iteration = Some(t);
                }
                params = next;
                record.meta_loss.push(loss);
                record.grad_norm.push(norm);
            }
            Err(e @ (Error::Numeric { .. } | Error::NonFiniteGradient(_) | Error::Tensor(_))) => {
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return Err(Error::Numeric {
                        step: t,
                        detail: format!("gave up after {MAX_HALVINGS} step-size halvings: {e}"),
                    });
                }
                params = best.clone();
                opt.reset();
                gamma *= 0.5;
                record.meta_loss.push(f64::NAN);
                record.grad_norm.push(f64::NAN);
            }
            Err(e) => return Err(e),
        }
        record.spectral_max.push(max_spectral_estimate(&params));
        record.gamma.push(gamma);
        record.wall_time.push(start.elapsed().as_secs_f64());
    }
    Ok(TrainResult {
        params,
        best,
        record,
    })
}
