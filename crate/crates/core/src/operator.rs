//! Learned evolutionary proposal: population embedding, gated SSM stream,
//! self-attention stream, statistics router and bounded fusion.
//!
//! Weights are stored as `[in, out]` under `block{k}.<layer>.w` with biases
//! at `block{k}.<layer>.b`. Every 2-D weight is spectrally normalized.

use kmevo_tensor::{path_seed, spectral_norm, BoundParams, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::Bounds;
use crate::error::{Error, Result};
use crate::population::dims3;

pub const SPECTRAL_ITERS: usize = 20;
const LN_EPS: f64 = 1e-5;
const Z_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Gated SSM stream alongside attention.
    Mamba,
    /// A two-layer feed-forward map of `E` in place of the SSM stream.
    FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub router_hidden: usize,
    pub architecture: Architecture,
}

impl OperatorConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            d_model: 32,
            heads: 4,
            router_hidden: 16,
            architecture: Architecture::Mamba,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("operator dim must be positive".into()));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.router_hidden == 0 {
            return Err(Error::Config("router_hidden must be positive".into()));
        }
        Ok(())
    }

    /// `(name, fan_in, fan_out)` for every linear layer of one block.
    fn linear_layers(&self) -> Vec<(&'static str, usize, usize)> {
        let (d, dim, h) = (self.d_model, self.dim, self.router_hidden);
        let mut v = vec![("embed", dim + 1, d)];
        match self.architecture {
            Architecture::Mamba => v.extend([
                ("ssm.proj", d, 3 * d),
                ("ssm.gate_z", d, d),
                ("ssm.phi_in", d, d),
            ]),
            Architecture::FeedForward => v.extend([("ffn.l1", d, d), ("ffn.l2", d, d)]),
        }
        v.extend([
            ("attn.q", d, d),
            ("attn.k", d, d),
            ("attn.v", d, d),
            ("attn.o", d, d),
            ("router.l1", 3, h),
            ("router.l2", h, 2),
            ("head_m", d, dim),
            ("head_a", d, dim),
        ]);
        v
    }
}

pub fn block_prefix(k: usize) -> String {
    format!("block{k}")
}

/// Fresh parameters for `blocks` unrolled blocks: uniform in ±1/√fan_in,
/// then spectrally normalized.
pub fn init_params(cfg: &OperatorConfig, blocks: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for k in 0..blocks {
        let pre = block_prefix(k);
        for (name, fan_in, fan_out) in cfg.linear_layers() {
            let a = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-a..=a)).collect::<Vec<_>>();
            let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))?;
            let b = Tensor::vector(draw(fan_out));
            store.insert(format!("{pre}.{name}.w"), w, true)?;
            store.insert(format!("{pre}.{name}.b"), b, true)?;
        }
        if cfg.architecture == Architecture::Mamba {
            store.insert(format!("{pre}.ssm.ln.gain"), Tensor::ones(&[cfg.d_model]), true)?;
            store.insert(format!("{pre}.ssm.ln.bias"), Tensor::zeros(&[cfg.d_model]), true)?;
        }
    }
    normalize_spectra(&mut store);
    Ok(store)
}

fn is_weight(path: &str, t: &Tensor) -> bool {
    path.ends_with(".w") && t.ndim() == 2
}

/// Rescales every weight matrix to `W / max(1, σ̂(W))`.
pub fn normalize_spectra(store: &mut ParamStore) {
    for (path, p) in store.iter_mut() {
        if !is_weight(path, &p.value) {
            continue;
        }
        let s = spectral_norm(&p.value, SPECTRAL_ITERS, path_seed(path));
        if s > 1.0 {
            p.value.scale_in_place(1.0 / s);
        }
    }
}

/// Largest spectral-norm estimate over all weight matrices.
pub fn max_spectral_estimate(store: &ParamStore) -> f64 {
    spectral_estimates(store)
        .into_iter()
        .map(|(_, s)| s)
        .fold(0.0, f64::max)
}

pub fn spectral_estimates(store: &ParamStore) -> Vec<(String, f64)> {
    store
        .iter()
        .filter(|(path, p)| is_weight(path, &p.value))
        .map(|(path, p)| (path.to_string(), spectral_norm(&p.value, SPECTRAL_ITERS, path_seed(path))))
        .collect()
}

/// Parameter handles of one block on a tape.
pub struct Block<'a, 't> {
    bound: &'a BoundParams<'t>,
    prefix: String,
}

impl<'a, 't> Block<'a, 't> {
    pub fn new(bound: &'a BoundParams<'t>, k: usize) -> Self {
        Self {
            bound,
            prefix: block_prefix(k),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        Ok(self.bound.var(&format!("{}.{name}", self.prefix))?)
    }

    pub fn linear(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        Ok(x.matmul(w)?.add(b)?)
    }
}

/// Population summary fed to the router.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterStats {
    pub fitness_std: f64,
    pub fitness_range: f64,
    pub diversity: f64,
}

impl RouterStats {
    pub fn compute(x: &[f64], fit: &[f64], dim: usize) -> Self {
        let n = fit.len() as f64;
        let mean = fit.iter().sum::<f64>() / n;
        let var = fit.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
        let (lo, hi) = fit
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &f| (a.min(f), b.max(f)));
        let rows: Vec<&[f64]> = x.chunks(dim).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                total += rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                pairs += 1;
            }
        }
        let diversity = if pairs == 0 { 0.0 } else { total / pairs as f64 / (dim as f64).sqrt() };
        Self {
            fitness_std: var.sqrt(),
            fitness_range: hi - lo,
            diversity,
        }
    }

    /// log1p-compressed router input.
    pub fn features(&self) -> [f64; 3] {
        [
            self.fitness_std.ln_1p(),
            self.fitness_range.ln_1p(),
            self.diversity.ln_1p(),
        ]
    }
}

/// Non-differentiable inputs of one proposal: z-scored fitness
/// (`batch × pop × 1`) and router features (`batch × 3`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalInputs {
    pub fit_z: Tensor,
    pub stats: Tensor,
}

impl ProposalInputs {
    pub fn compute(x: &Tensor, fit: &Tensor) -> Result<Self> {
        let (b, n, d) = dims3(x)?;
        if fit.shape() != [b, n] {
            return Err(Error::Dimension(format!(
                "fitness shape {:?} does not match population {:?}",
                fit.shape(),
                x.shape()
            )));
        }
        if n < 2 {
            return Err(Error::Contract(format!("population size {n} < 2")));
        }
        let mut z = Vec::with_capacity(b * n);
        let mut stats = Vec::with_capacity(b * 3);
        for r in 0..b {
            let f = &fit.data()[r * n..(r + 1) * n];
            let mean = f.iter().sum::<f64>() / n as f64;
            let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            z.extend(f.iter().map(|v| (v - mean) / (std + Z_EPS)));
            let s = RouterStats::compute(&x.data()[r * n * d..(r + 1) * n * d], f, d);
            stats.extend(s.features());
        }
        Ok(Self {
            fit_z: Tensor::new(vec![b, n, 1], z)?,
            stats: Tensor::new(vec![b, 3], stats)?,
        })
    }
}

/// Box coordinates `(x − lo)/(hi − lo)` concatenated with z-scored fitness,
/// then `tanh(Linear(·))`.
pub fn embed<'t>(x: Var<'t>, fit_z: &Tensor, bounds: &Bounds, p: &Block<'_, 't>) -> Result<Var<'t>> {
    let tape = x.tape();
    let (_, n, _) = dims3(&x.value())?;
    if n < 2 {
        return Err(Error::Contract(format!("population size {n} < 2")));
    }
    let lo = tape.constant(Tensor::vector(bounds.lo.clone()));
    let inv_w = tape.constant(Tensor::vector(
        (0..bounds.dim()).map(|i| 1.0 / bounds.width(i)).collect(),
    ));
    let xn = x.sub(lo)?.mul(inv_w)?;
    let f = tape.constant(fit_z.clone());
    let h = Var::concat_last(&[xn, f])?;
    Ok(p.linear("embed", h)?.tanh())
}

/// `M_s = softplus(Δ) ⊙ tanh(B) ⊙ E`; also returns the raw `C` channel.
pub fn ssm_stream<'t>(e: Var<'t>, p: &Block<'_, 't>) -> Result<(Var<'t>, Var<'t>)> {
    let d = *e.shape().last().unwrap();
    let proj = p.linear("ssm.proj", e)?;
    let delta = proj.slice_last(0, d)?.softplus();
    let b = proj.slice_last(d, d)?.tanh();
    let c = proj.slice_last(2 * d, d)?;
    Ok((delta.mul(b)?.mul(e)?, c))
}

/// `LN(z ⊙ M_s + (1 − z) ⊙ u)` with `z = σ(Linear_z E)`, `u = φ_in(E)`.
pub fn gated_fusion<'t>(m_s: Var<'t>, e: Var<'t>, p: &Block<'_, 't>) -> Result<Var<'t>> {
    let z = p.linear("ssm.gate_z", e)?.sigmoid();
    let u = p.linear("ssm.phi_in", e)?;
    let one_minus_z = z.neg().add_scalar(1.0);
    let mixed = z.mul(m_s)?.add(one_minus_z.mul(u)?)?;
    Ok(mixed.layer_norm(p.var("ssm.ln.gain")?, p.var("ssm.ln.bias")?, LN_EPS)?)
}

/// Multi-head self-attention across the population axis, plus residual.
pub fn mhsa<'t>(e: Var<'t>, heads: usize, p: &Block<'_, 't>) -> Result<Var<'t>> {
    let d = *e.shape().last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = p.linear("attn.q", e)?;
    let k = p.linear("attn.k", e)?;
    let v = p.linear("attn.v", e)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_last(h * dh, dh)?;
        let kh = k.slice_last(h * dh, dh)?;
        let vh = v.slice_last(h * dh, dh)?;
        let a = qh.matmul(kh.transpose_last()?)?.scale(scale).softmax_last()?;
        outs.push(a.matmul(vh)?);
    }
    let cat = Var::concat_last(&outs)?;
    Ok(p.linear("attn.o", cat)?.add(e)?)
}

/// Router weights `[λ_ssm, λ_attn]`, shape `batch × 2`.
pub fn route<'t>(stats: &Tensor, tape: &'t Tape, p: &Block<'_, 't>) -> Result<Var<'t>> {
    let s = tape.constant(stats.clone());
    let h = p.linear("router.l1", s)?.tanh();
    Ok(p.linear("router.l2", h)?.softmax_last()?)
}

/// Output of one learned proposal.
pub struct Proposal<'t> {
    /// `Δ_evo`, `batch × pop × dim`, entries in (−1, 1).
    pub delta: Var<'t>,
    /// Router weights, `batch × 2`.
    pub lambda: Tensor,
}

/// `Δ_evo = λ_ssm·tanh(Ψ_m(σ(C) ⊙ H_mamba)) + λ_attn·tanh(Ψ_a(H_attn))`.
pub fn propose<'t>(
    x: Var<'t>,
    inputs: &ProposalInputs,
    bounds: &Bounds,
    cfg: &OperatorConfig,
    p: &Block<'_, 't>,
) -> Result<Proposal<'t>> {
    let tape = x.tape();
    let (b, _, d) = dims3(&x.value())?;
    if d != cfg.dim {
        return Err(Error::Dimension(format!("operator dim {} vs population dim {d}", cfg.dim)));
    }
    let e = embed(x, &inputs.fit_z, bounds, p)?;
    let local = match cfg.architecture {
        Architecture::Mamba => {
            let (m_s, c) = ssm_stream(e, p)?;
            gated_fusion(m_s, e, p)?.mul(c.sigmoid())?
        }
        Architecture::FeedForward => {
            let h = p.linear("ffn.l1", e)?.tanh();
            p.linear("ffn.l2", h)?.tanh()
        }
    };
    let attn = mhsa(e, cfg.heads, p)?;
    let lam = route(&inputs.stats, tape, p)?;
    let l_ssm = lam.slice_last(0, 1)?.reshape(&[b, 1, 1])?;
    let l_attn = lam.slice_last(1, 1)?.reshape(&[b, 1, 1])?;
    let m = p.linear("head_m", local)?.tanh().mul(l_ssm)?;
    let a = p.linear("head_a", attn)?.tanh().mul(l_attn)?;
    Ok(Proposal {
        delta: m.add(a)?,
        lambda: (*lam.value()).clone(),
    })
}

/// Value-only forward of block `k` on a population in box coordinates.
/// Fitness features and router inputs are held fixed, so this is the map
/// whose Lipschitz constant spectral normalization is meant to control.
pub fn block_map(
    store: &ParamStore,
    k: usize,
    cfg: &OperatorConfig,
    unit_x: &Tensor,
    inputs: &ProposalInputs,
) -> Result<Tensor> {
    let bounds = Bounds::uniform(cfg.dim, 0.0, 1.0);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let block = Block::new(&bound, k);
    let x = tape.constant(unit_x.clone());
    let p = propose(x, inputs, &bounds, cfg, &block)?;
    let out = (*p.delta.value()).clone();
    Ok(out)
}
