//! The inner loop: K averaged, gated composite updates of a population,
//! recorded on a differentiation tape.
//!
//! One step from `x` (batch × pop × dim):
//!
//! ```text
//! y    = O_num(x)                     clamp, then smoothing toward the mean
//! O(x) = O_evo(y)                     learned proposal
//! d_IL = (1 − α) x + α O(x)
//! d_OL = x − s_k P⁻¹ ∇f(x)            s_k = κ / (k + 1)
//! M    = σ(−(f(d_OL) − f(d_IL)) / τ)  per individual, constant on the tape
//! x⁺   = clamp(M d_OL + (1 − M) d_IL)
//! ```

use kmevo_tensor::{sigmoid, BoundParams, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::benchmarks::{central_difference, Bounds, Objective};
use crate::error::{Error, Result};
use crate::operator::{propose, Block, OperatorConfig, ProposalInputs};
use crate::population::{check_objectives, dims3, evaluate_rows, Population};

const PRECOND_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preconditioner {
    Identity,
    Adagrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Whatever the objective provides (closed form where available).
    Analytic,
    /// Central differences through counted point evaluations.
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    /// `M = σ(−Δf/τ)`.
    Soft,
    /// `M` held at a constant in [0, 1].
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    pub kappa: f64,
    pub preconditioner: Preconditioner,
    pub gradient_mode: GradientMode,
    pub smoothing_sigma: f64,
    pub gate: GateMode,
    /// Length scale of the learned proposal, as a fraction of the box width.
    pub step_scale: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            k: 10,
            alpha: 0.5,
            tau: 1.0,
            kappa: 0.3,
            preconditioner: Preconditioner::Adagrad,
            gradient_mode: GradientMode::Analytic,
            smoothing_sigma: 0.0,
            gate: GateMode::Soft,
            step_scale: 0.1,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.kappa > 0.0) {
            return bad(format!("kappa {} must be positive", self.kappa));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma <= 1.0) {
            return bad(format!("smoothing_sigma {} outside [0, 1]", self.smoothing_sigma));
        }
        if let GateMode::Fixed(m) = self.gate {
            if !(0.0..=1.0).contains(&m) {
                return bad(format!("fixed gate {m} outside [0, 1]"));
            }
        }
        if !(self.step_scale >= 0.0) {
            return bad(format!("step_scale {} must be non-negative", self.step_scale));
        }
        Ok(())
    }

    /// Objective evaluations per individual per step, excluding gradients.
    pub const EVALS_PER_STEP: usize = 3;
}

/// `s_k = κ / (k + 1)`, `k` counted from 0.
pub fn step_size(kappa: f64, k: usize) -> f64 {
    kappa / (k as f64 + 1.0)
}

/// `O_evo` on a tape, specialised to one tape lifetime.
pub trait Proposer<'t> {
    /// Applies the evolutionary operator of step `k` to `y = O_num(x)`.
    /// Returns the proposed point and, for routed operators, the router
    /// weights (`batch × 2`).
    fn evolve(
        &self,
        k: usize,
        y: Var<'t>,
        inputs: &ProposalInputs,
        bounds: &Bounds,
    ) -> Result<(Var<'t>, Option<Tensor>)>;
}

/// The learned operator: `y + step_scale·(hi − lo)·Δ_evo(y)`.
pub struct LearnedOperator<'a, 't> {
    bound: &'a BoundParams<'t>,
    cfg: &'a OperatorConfig,
    blocks: usize,
    step_scale: f64,
}

impl<'a, 't> LearnedOperator<'a, 't> {
    /// `blocks` must be 1 (shared) or equal to the unroll depth.
    pub fn new(
        bound: &'a BoundParams<'t>,
        cfg: &'a OperatorConfig,
        blocks: usize,
        inner: &InnerConfig,
    ) -> Result<Self> {
        if blocks != 1 && blocks != inner.k {
            return Err(Error::Contract(format!(
                "{blocks} parameter blocks for an unroll of depth {}",
                inner.k
            )));
        }
        Ok(Self {
            bound,
            cfg,
            blocks,
            step_scale: inner.step_scale,
        })
    }
}

impl<'t> Proposer<'t> for LearnedOperator<'_, 't> {
    fn evolve(
        &self,
        k: usize,
        y: Var<'t>,
        inputs: &ProposalInputs,
        bounds: &Bounds,
    ) -> Result<(Var<'t>, Option<Tensor>)> {
        let block = Block::new(self.bound, if self.blocks == 1 { 0 } else { k });
        let p = propose(y, inputs, bounds, self.cfg, &block)?;
        let scale = y.tape().constant(Tensor::vector(
            (0..bounds.dim()).map(|i| self.step_scale * bounds.width(i)).collect(),
        ));
        Ok((y.add(p.delta.mul(scale)?)?, Some(p.lambda)))
    }
}

/// Frozen non-differentiable quantities of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub grad: Tensor,
    pub precond: Tensor,
    pub inputs: ProposalInputs,
    pub mask: Tensor,
}

/// Per-step, per-batch-row diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub best: Vec<f64>,
    pub mean: Vec<f64>,
    pub gate_mean: Vec<f64>,
    pub lambda: Vec<[f64; 2]>,
    pub residual: Vec<f64>,
}

/// One line of a trajectory CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub best_fit: f64,
    pub mean_fit: f64,
    pub gate_mean: f64,
    pub lambda_ssm: f64,
    pub lambda_attn: f64,
    pub residual_norm: f64,
}

impl TrajectoryRow {
    pub const HEADER: [&'static str; 7] = [
        "step",
        "best_fit",
        "mean_fit",
        "gate_mean",
        "lambda_ssm",
        "lambda_attn",
        "residual_norm",
    ];

    /// Row without gate or router information.
    pub fn plain(step: usize, best_fit: f64, mean_fit: f64, residual_norm: f64) -> Self {
        Self {
            step,
            best_fit,
            mean_fit,
            gate_mean: f64::NAN,
            lambda_ssm: f64::NAN,
            lambda_attn: f64::NAN,
            residual_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UnrollOptions {
    /// Put `f(x^K)` on the tape with its gradient (needed for meta-training).
    pub differentiable_final: bool,
}

pub struct Unrolled<'t> {
    /// `x^0 … x^K`.
    pub states: Vec<Var<'t>>,
    /// Fitness values of every state.
    pub fits: Vec<Tensor>,
    /// `f(x^K)`; differentiable when requested.
    pub final_fit: Var<'t>,
    pub steps: Vec<StepDiagnostics>,
    pub trace: Vec<StepTrace>,
    /// Gradient at `x^K`, when it was computed.
    pub final_grad: Option<Tensor>,
}

impl Unrolled<'_> {
    pub fn final_population(&self, bounds: &Bounds) -> Population {
        Population {
            x: (*self.states.last().unwrap().value()).clone(),
            fit: self.fits.last().unwrap().clone(),
            bounds: bounds.clone(),
        }
    }

    /// Trajectory rows for batch row `b`, starting with the initial state.
    pub fn rows(&self, b: usize) -> Vec<TrajectoryRow> {
        let n = self.fits[0].shape()[1];
        let stats = |t: &Tensor| {
            let r = &t.data()[b * n..(b + 1) * n];
            (
                r.iter().copied().fold(f64::INFINITY, f64::min),
                r.iter().sum::<f64>() / n as f64,
            )
        };
        let (best0, mean0) = stats(&self.fits[0]);
        let mut rows = vec![TrajectoryRow::plain(0, best0, mean0, f64::NAN)];
        for (k, s) in self.steps.iter().enumerate() {
            rows.push(TrajectoryRow {
                step: k + 1,
                best_fit: s.best[b],
                mean_fit: s.mean[b],
                gate_mean: s.gate_mean[b],
                lambda_ssm: s.lambda[b][0],
                lambda_attn: s.lambda[b][1],
                residual_norm: s.residual[b],
            });
        }
        rows
    }
}

/// Box projection followed by smoothing toward the population mean.
pub fn numerical_operator_var<'t>(x: Var<'t>, bounds: &Bounds, sigma: f64) -> Result<Var<'t>> {
    let y = x.clamp(&bounds.lo, &bounds.hi)?;
    if sigma == 0.0 {
        return Ok(y);
    }
    let mean = y.mean_axis(1)?;
    Ok(y.scale(1.0 - sigma).add(mean.scale(sigma))?)
}

pub fn numerical_operator(x: &Tensor, bounds: &Bounds, sigma: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let y = numerical_operator_var(tape.constant(x.clone()), bounds, sigma)?;
    let out = (*y.value()).clone();
    Ok(out)
}

/// `(1 − α) x + α o`.
pub fn km_average<'t>(x: Var<'t>, o: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if alpha == 1.0 {
        return Ok(o);
    }
    Ok(x.scale(1.0 - alpha).add(o.scale(alpha))?)
}

/// `x − s_k P⁻¹ g` with the step already folded into `step = s_k·g/P`.
fn proxy_step<'t>(x: Var<'t>, step: &Tensor) -> Result<Var<'t>> {
    Ok(x.sub(x.tape().constant(step.clone()))?)
}

/// `s_k P⁻¹ g`, element-wise.
pub fn proxy_offset(grad: &Tensor, precond: &Tensor, kappa: f64, k: usize) -> Result<Tensor> {
    let s = step_size(kappa, k);
    Ok(grad.zip_map(precond, |g, p| s * g / p)?)
}

/// Proxy-gradient candidate `d_OL = x − s_k P⁻¹ g`.
pub fn proxy_grad_direction(x: &Tensor, grad: &Tensor, precond: &Tensor, kappa: f64, k: usize) -> Result<Tensor> {
    let off = proxy_offset(grad, precond, kappa, k)?;
    Ok(x.zip_map(&off, |a, b| a - b)?)
}

/// `M = σ(−(f_OL − f_IL)/τ)`, shaped `batch × pop × 1`.
pub fn soft_gate(fit_ol: &Tensor, fit_il: &Tensor, tau: f64) -> Result<Tensor> {
    let m = fit_ol.zip_map(fit_il, |a, b| sigmoid(-(a - b) / tau))?;
    let mut shape = m.shape().to_vec();
    shape.push(1);
    Ok(m.reshape(&shape)?)
}

fn blend_var<'t>(d_ol: Var<'t>, d_il: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    let tape = d_ol.tape();
    let m = tape.constant(mask.clone());
    let one_m = tape.constant(mask.map(|v| 1.0 - v));
    Ok(d_ol.mul(m)?.add(d_il.mul(one_m)?)?)
}

/// `M ⊙ d_OL + (1 − M) ⊙ d_IL` before projection.
pub fn blend(d_ol: &Tensor, d_il: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let v = blend_var(tape.constant(d_ol.clone()), tape.constant(d_il.clone()), mask)?;
    let out = (*v.value()).clone();
    Ok(out)
}

/// Projected blend.
pub fn composite_update(d_ol: &Tensor, d_il: &Tensor, mask: &Tensor, bounds: &Bounds) -> Result<Tensor> {
    let mut out = blend(d_ol, d_il, mask)?;
    for r in out.data_mut().chunks_mut(bounds.dim()) {
        bounds.project(r);
    }
    Ok(out)
}

fn gradients(x: &Tensor, objectives: &[&dyn Objective], mode: GradientMode, step: usize) -> Result<Tensor> {
    let (_, n, d) = dims3(x)?;
    let mut data = Vec::with_capacity(x.len());
    for (rows, f) in x.data().chunks(n * d).zip(objectives) {
        for r in rows.chunks(d) {
            let g = match mode {
                GradientMode::Analytic => f.gradient(r),
                GradientMode::FiniteDifference => central_difference(|p| f.value(p), r),
            };
            data.extend(g);
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step,
            detail: "non-finite objective gradient".into(),
        });
    }
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

fn batch_reduce(t: &Tensor, rows: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let w = t.len() / rows;
    t.data().chunks(w).map(f).collect()
}

fn mean(r: &[f64]) -> f64 {
    r.iter().sum::<f64>() / r.len() as f64
}

/// Runs `cfg.k` composite steps from `pop`.
///
/// With `replay`, gradients, preconditioners, proposal inputs and gate masks
/// are taken from a previous run instead of being recomputed, so the result
/// is a smooth function of the parameters that matches what the tape
/// differentiates.
pub fn unroll<'t>(
    tape: &'t Tape,
    pop: &Population,
    objectives: &[&dyn Objective],
    proposer: &dyn Proposer<'t>,
    cfg: &InnerConfig,
    opts: UnrollOptions,
    replay: Option<&[StepTrace]>,
) -> Result<Unrolled<'t>> {
    cfg.validate()?;
    let (b, n, d) = dims3(&pop.x)?;
    check_objectives(objectives, b, d)?;
    if let Some(r) = replay {
        if r.len() != cfg.k {
            return Err(Error::Contract(format!("replay has {} steps, unroll has {}", r.len(), cfg.k)));
        }
    }
    let bounds = &pop.bounds;
    let mut x = tape.constant(pop.x.clone());
    let mut fit = pop.fit.clone();
    let mut states = vec![x];
    let mut fits = vec![fit.clone()];
    let mut steps = Vec::with_capacity(cfg.k);
    let mut trace = Vec::with_capacity(cfg.k);
    let mut sq_acc = Tensor::zeros(&[b, n, d]);
    let mut grad: Option<Tensor> = None;

    for k in 0..cfg.k {
        let frozen = replay.map(|r| &r[k]);
        let xv = x.value();

        let (g, precond) = match frozen {
            Some(t) => (t.grad.clone(), t.precond.clone()),
            None => {
                let g = match grad.take() {
                    Some(g) => g,
                    None => gradients(&xv, objectives, cfg.gradient_mode, k)?,
                };
                let p = match cfg.preconditioner {
                    Preconditioner::Identity => Tensor::ones(&[b, n, d]),
                    Preconditioner::Adagrad => {
                        sq_acc = sq_acc.zip_map(&g, |a, v| a + v * v)?;
                        sq_acc.map(|a| a.sqrt() + PRECOND_EPS)
                    }
                };
                (g, p)
            }
        };
        let inputs = match frozen {
            Some(t) => t.inputs.clone(),
            None => ProposalInputs::compute(&xv, &fit)?,
        };

        let y = numerical_operator_var(x, bounds, cfg.smoothing_sigma)?;
        let (o, lambda) = proposer.evolve(k, y, &inputs, bounds)?;
        let d_il = km_average(x, o, cfg.alpha)?;
        let d_ol = proxy_step(x, &proxy_offset(&g, &precond, cfg.kappa, k)?)?;

        let mask = match frozen {
            Some(t) => t.mask.clone(),
            None => {
                let f_ol = evaluate_rows(&d_ol.value(), objectives)?;
                let f_il = evaluate_rows(&d_il.value(), objectives)?;
                match cfg.gate {
                    GateMode::Soft => soft_gate(&f_ol, &f_il, cfg.tau)?,
                    GateMode::Fixed(m) => Tensor::full(&[b, n, 1], m),
                }
            }
        };

        let x_new = blend_var(d_ol, d_il, &mask)?.clamp(&bounds.lo, &bounds.hi)?;
        let xn = x_new.value();
        let last = k + 1 == cfg.k;
        let new_fit = evaluate_rows(&xn, objectives)?;
        if frozen.is_none() && (!last || opts.differentiable_final) {
            grad = Some(gradients(&xn, objectives, cfg.gradient_mode, k + 1)?);
        }

        let diff = xn.zip_map(&xv, |a, c| (a - c) * (a - c))?;
        let lam = match &lambda {
            Some(l) => l.data().chunks(2).map(|c| [c[0], c[1]]).collect(),
            None => vec![[f64::NAN; 2]; b],
        };
        let diag = StepDiagnostics {
            best: batch_reduce(&new_fit, b, |r| r.iter().copied().fold(f64::INFINITY, f64::min)),
            mean: batch_reduce(&new_fit, b, mean),
            gate_mean: batch_reduce(&mask, b, mean),
            lambda: lam,
            residual: batch_reduce(&diff, b, |r| r.iter().sum::<f64>().sqrt()),
        };
        if !xn.all_finite() || !new_fit.all_finite() {
            return Err(Error::Numeric {
                step: k,
                detail: format!(
                    "non-finite state; gate mean {:?}, router {:?}, max |d_IL| {}, max |d_OL| {}",
                    diag.gate_mean,
                    diag.lambda,
                    d_il.value().max_abs(),
                    d_ol.value().max_abs()
                ),
            });
        }
        steps.push(diag);
        trace.push(StepTrace {
            grad: g,
            precond,
            inputs,
            mask,
        });
        x = x_new;
        fit = new_fit;
        states.push(x);
        fits.push(fit.clone());
    }

    let final_grad = match (replay.is_some() || cfg.k == 0, opts.differentiable_final) {
        (_, false) => None,
        (false, true) => grad.clone(),
        (true, true) => Some(gradients(&x.value(), objectives, cfg.gradient_mode, cfg.k)?),
    };
    let final_fit = match &final_grad {
        Some(j) => x.row_fn(fit.clone(), j.clone())?,
        None => tape.constant(fit.clone()),
    };
    Ok(Unrolled {
        states,
        fits,
        final_fit,
        steps,
        trace,
        final_grad,
    })
}
