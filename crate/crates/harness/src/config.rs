//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default, but unknown or repeated keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use kmevo::benchmarks::{Family, FunctionSpec, TaskDistribution};
use kmevo::meta::{MetaConfig, MetaOptimizerKind, Sharing};
use kmevo::operator::Architecture;
use kmevo::solver::{GateMode, GradientMode, Preconditioner};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Solver {
    Learned,
    RandomSearch,
    De,
    Pso,
}

impl Solver {
    pub const ALL: [Solver; 4] = [Solver::Learned, Solver::RandomSearch, Solver::De, Solver::Pso];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Learned => "learned",
            Solver::RandomSearch => "random-search",
            Solver::De => "de",
            Solver::Pso => "pso",
        }
    }
}

impl Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Solver::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown solver `{s}`"))
    }
}

/// What to evaluate after (or without) training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub families: Vec<Family>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Function instance seed is `function_seed_offset + seed`.
    pub function_seed_offset: u64,
    pub solvers: Vec<Solver>,
    pub rotate: bool,
    pub surrogate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fams = [Family::Sphere, Family::Rastrigin];
        let dist = TaskDistribution::uniform(&fams, 2).expect("two families");
        Self {
            meta: MetaConfig::new(dist),
            eval: EvalConfig {
                families: fams.to_vec(),
                budget: 1136,
                seeds: (0..10).collect(),
                function_seed_offset: 10_000,
                solvers: vec![Solver::Learned, Solver::RandomSearch],
                rotate: false,
                surrogate: false,
            },
        }
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    let out = v
        .split(',')
        .map(|s| parse::<T>(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// `a..b` (half-open) or a comma list.
fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse(a.trim())?, parse(b.trim())?);
        if b <= a {
            return Err(format!("empty seed range {v}"));
        }
        return Ok((a..b).collect());
    }
    parse_list(v)
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_family(v: &str) -> Result<Family, String> {
    v.parse::<Family>().map_err(|e| e.to_string())
}

/// `Sphere:0.5,Rastrigin:0.5`, or bare names for equal weights.
fn parse_weighted(v: &str) -> Result<Vec<(Family, f64)>, String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.iter().all(|p| !p.contains(':')) {
        let w = 1.0 / parts.len() as f64;
        return parts.iter().map(|p| Ok((parse_family(p)?, w))).collect();
    }
    parts
        .iter()
        .map(|p| {
            let (f, w) = p.split_once(':').ok_or_else(|| format!("`{p}` lacks a weight"))?;
            Ok((parse_family(f)?, parse(w)?))
        })
        .collect()
}

fn gate_text(g: GateMode) -> String {
    match g {
        GateMode::Soft => "soft".into(),
        GateMode::Fixed(m) => format!("fixed:{m}"),
    }
}

fn parse_gate(v: &str) -> Result<GateMode, String> {
    match v.split_once(':') {
        None if v == "soft" => Ok(GateMode::Soft),
        Some(("fixed", m)) => Ok(GateMode::Fixed(parse(m)?)),
        _ => Err(format!("expected `soft` or `fixed:<m>`, got `{v}`")),
    }
}

fn choice<T: Copy>(v: &str, table: &[(&str, T)]) -> Result<T, String> {
    table
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}, got `{v}`", names.join("|"))
        })
}

fn name_of<T: PartialEq>(v: T, table: &[(&'static str, T)]) -> &'static str {
    table.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("listed")
}

const OPTIMIZERS: [(&str, MetaOptimizerKind); 2] =
    [("momentum", MetaOptimizerKind::Momentum), ("plain-gd", MetaOptimizerKind::PlainGd)];
const SHARING: [(&str, Sharing); 2] = [("unshared", Sharing::Unshared), ("shared", Sharing::Shared)];
const PRECONDITIONERS: [(&str, Preconditioner); 2] =
    [("adagrad", Preconditioner::Adagrad), ("identity", Preconditioner::Identity)];
const GRADIENTS: [(&str, GradientMode); 2] = [
    ("analytic", GradientMode::Analytic),
    ("finite-difference", GradientMode::FiniteDifference),
];
const ARCHITECTURES: [(&str, Architecture); 2] =
    [("mamba", Architecture::Mamba), ("feed-forward", Architecture::FeedForward)];

impl ExperimentConfig {
    /// Canonical `(key, value)` listing; also the accepted key set.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.meta;
        let d = &m.distribution;
        let i = &m.inner;
        let o = &m.operator;
        let e = &self.eval;
        let weighted: Vec<String> = d.families.iter().map(|(f, w)| format!("{f}:{w}")).collect();
        vec![
            ("seed", m.seed.to_string()),
            ("dim", o.dim.to_string()),
            ("train_families", weighted.join(",")),
            ("rotate", d.rotate.to_string()),
            ("shift_range", d.shift_range.to_string()),
            ("lo", d.lo.to_string()),
            ("hi", d.hi.to_string()),
            ("iterations", m.iterations.to_string()),
            ("gamma", m.gamma.to_string()),
            ("tasks_per_batch", m.tasks_per_batch.to_string()),
            ("pop", m.pop.to_string()),
            ("optimizer", name_of(m.optimizer, &OPTIMIZERS).into()),
            ("sharing", name_of(m.sharing, &SHARING).into()),
            ("epsilon", m.epsilon.to_string()),
            ("k", i.k.to_string()),
            ("alpha", i.alpha.to_string()),
            ("tau", i.tau.to_string()),
            ("kappa", i.kappa.to_string()),
            ("preconditioner", name_of(i.preconditioner, &PRECONDITIONERS).into()),
            ("gradient_mode", name_of(i.gradient_mode, &GRADIENTS).into()),
            ("smoothing_sigma", i.smoothing_sigma.to_string()),
            ("gate", gate_text(i.gate)),
            ("step_scale", i.step_scale.to_string()),
            ("d_model", o.d_model.to_string()),
            ("heads", o.heads.to_string()),
            ("router_hidden", o.router_hidden.to_string()),
            ("architecture", name_of(o.architecture, &ARCHITECTURES).into()),
            ("eval_families", join(&e.families)),
            ("budget", e.budget.to_string()),
            ("seeds", join(&e.seeds)),
            ("function_seed_offset", e.function_seed_offset.to_string()),
            ("solvers", join(&e.solvers)),
            ("eval_rotate", e.rotate.to_string()),
            ("surrogate", e.surrogate.to_string()),
        ]
    }

    /// Applies one assignment. `Ok(false)` means the key is unknown.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let m = &mut self.meta;
        match key {
            "seed" => m.seed = parse(v)?,
            "dim" => {
                let dim: usize = parse(v)?;
                m.operator.dim = dim;
                m.distribution.dims = vec![dim];
            }
            "train_families" => m.distribution.families = parse_weighted(v)?,
            "rotate" => m.distribution.rotate = parse_bool(v)?,
            "shift_range" => m.distribution.shift_range = parse(v)?,
            "lo" => m.distribution.lo = parse(v)?,
            "hi" => m.distribution.hi = parse(v)?,
            "iterations" => m.iterations = parse(v)?,
            "gamma" => m.gamma = parse(v)?,
            "tasks_per_batch" => m.tasks_per_batch = parse(v)?,
            "pop" => m.pop = parse(v)?,
            "optimizer" => m.optimizer = choice(v, &OPTIMIZERS)?,
            "sharing" => m.sharing = choice(v, &SHARING)?,
            "epsilon" => m.epsilon = parse(v)?,
            "k" => m.inner.k = parse(v)?,
            "alpha" => m.inner.alpha = parse(v)?,
            "tau" => m.inner.tau = parse(v)?,
            "kappa" => m.inner.kappa = parse(v)?,
            "preconditioner" => m.inner.preconditioner = choice(v, &PRECONDITIONERS)?,
            "gradient_mode" => m.inner.gradient_mode = choice(v, &GRADIENTS)?,
            "smoothing_sigma" => m.inner.smoothing_sigma = parse(v)?,
            "gate" => m.inner.gate = parse_gate(v)?,
            "step_scale" => m.inner.step_scale = parse(v)?,
            "d_model" => m.operator.d_model = parse(v)?,
            "heads" => m.operator.heads = parse(v)?,
            "router_hidden" => m.operator.router_hidden = parse(v)?,
            "architecture" => m.operator.architecture = choice(v, &ARCHITECTURES)?,
            "eval_families" => self.eval.families = parse_list::<Family>(v).map_err(|e| e.to_string())?,
            "budget" => self.eval.budget = parse(v)?,
            "seeds" => self.eval.seeds = parse_seeds(v)?,
            "function_seed_offset" => self.eval.function_seed_offset = parse(v)?,
            "solvers" => self.eval.solvers = parse_list(v)?,
            "eval_rotate" => self.eval.rotate = parse_bool(v)?,
            "surrogate" => self.eval.surrogate = parse_bool(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| HarnessError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(HarnessError::Syntax {
                    line,
                    msg: format!("empty key or value in `{body}`"),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Value {
                    line,
                    key: key.into(),
                    msg: "repeated key".into(),
                });
            }
            match cfg.set(key, value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(HarnessError::UnknownKey {
                        line,
                        key: key.into(),
                    })
                }
                Err(msg) => {
                    return Err(HarnessError::Value {
                        line,
                        key: key.into(),
                        msg,
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let e = &self.eval;
        let bad = |m: &str| Err(kmevo::Error::Config(m.to_string()).into());
        if e.families.is_empty() || e.seeds.is_empty() || e.solvers.is_empty() {
            return bad("eval_families, seeds and solvers must be non-empty");
        }
        if e.budget == 0 {
            return bad("budget must be positive");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.meta.operator.dim
    }

    /// Held-out instance of `family` for evaluation seed `seed`.
    pub fn eval_spec(&self, family: Family, seed: u64) -> FunctionSpec {
        let d = &self.meta.distribution;
        FunctionSpec {
            rotate: self.eval.rotate,
            surrogate: self.eval.surrogate,
            shift_range: d.shift_range,
            lo: d.lo,
            hi: d.hi,
            ..FunctionSpec::new(family, self.dim(), self.eval.function_seed_offset + seed)
        }
    }
}
