//! Evaluation jobs, meta-training runs and ablations.

use std::fmt::Display;
use std::str::FromStr;
use std::time::Instant;

use kmevo::baselines::{self, Algorithm, BaselineConfig};
use kmevo::benchmarks::{Family, FunctionSpec, Objective, ObjectiveFunction};
use kmevo::evaluate::{run_learned, Tracked};
use kmevo::meta::{self, MetaConfig, Sharing, TrainResult};
use kmevo::operator::Architecture;
use kmevo::solver::{GateMode, TrajectoryRow};
use kmevo_tensor::{checkpoint, ParamStore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Solver};
use crate::error::{HarnessError, Result};
use crate::record::{hex_digest, run_id, RunRecord, TRAJECTORY_FILE};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalJob {
    pub solver: Solver,
    pub spec: FunctionSpec,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub trajectory: Vec<TrajectoryRow>,
}

pub fn params_hash(store: &ParamStore) -> String {
    hex_digest(&checkpoint::encode(store))
}

/// Solver × eval family × seed, in that nesting order.
pub fn suite_jobs(cfg: &ExperimentConfig) -> Vec<EvalJob> {
    let mut jobs = Vec::new();
    for &solver in &cfg.eval.solvers {
        for &fam in &cfg.eval.families {
            for &seed in &cfg.eval.seeds {
                jobs.push(EvalJob {
                    solver,
                    spec: cfg.eval_spec(fam, seed),
                    seed,
                });
            }
        }
    }
    jobs
}

fn algorithm(s: Solver) -> Option<Algorithm> {
    match s {
        Solver::Learned => None,
        Solver::RandomSearch => Some(Algorithm::RandomSearch),
        Solver::De => Some(Algorithm::De),
        Solver::Pso => Some(Algorithm::Pso),
    }
}

pub fn run_job(cfg: &ExperimentConfig, store: Option<&ParamStore>, job: &EvalJob) -> Result<RunOutput> {
    let f = ObjectiveFunction::new(job.spec.clone())?;
    let budget = cfg.eval.budget;
    let start = Instant::now();
    let (best, evals, trajectory, convergence, hash) = match algorithm(job.solver) {
        None => {
            let store = store.ok_or_else(|| {
                HarnessError::Contract("the learned solver needs trained parameters".into())
            })?;
            let r = run_learned(store, &cfg.meta.operator, &cfg.meta.inner, &f, cfg.meta.pop, budget, job.seed)?;
            (r.best_f, r.evals, r.trajectory, r.convergence, Some(params_hash(store)))
        }
        Some(alg) => {
            let tracked = Tracked::new(&f);
            let bc = BaselineConfig::new(alg, cfg.meta.pop, budget);
            let r = baselines::run(&bc, &tracked, job.seed)?;
            if tracked.count() != r.evals {
                return Err(HarnessError::Contract(format!(
                    "baseline reported {} evaluations, counter saw {}",
                    r.evals,
                    tracked.count()
                )));
            }
            (r.best_f, r.evals, r.trajectory, r.convergence, None)
        }
    };
    if evals != budget {
        return Err(HarnessError::Contract(format!("spent {evals} of a budget of {budget}")));
    }
    let config = cfg.to_text();
    let function = job.spec.descriptor();
    let record = RunRecord {
        run_id: run_id(&config, job.solver, &function, job.seed, hash.as_deref()),
        solver: job.solver,
        function,
        seed: job.seed,
        config,
        params_hash: hash,
        trajectory_csv: TRAJECTORY_FILE.into(),
        budget,
        evals,
        f_opt: f.f_opt(),
        final_best: best,
        final_error: best - f.f_opt(),
        wall_time: start.elapsed().as_secs_f64(),
        convergence,
    };
    Ok(RunOutput { record, trajectory })
}

/// Runs every job in parallel; output order follows `jobs`.
pub fn run_eval(cfg: &ExperimentConfig, store: Option<&ParamStore>, jobs: &[EvalJob]) -> Result<Vec<RunOutput>> {
    if jobs.is_empty() {
        return Err(HarnessError::Contract("empty evaluation suite".into()));
    }
    jobs.par_iter().map(|j| run_job(cfg, store, j)).collect()
}

/// Re-runs a record from its own config snapshot and returns the new record.
pub fn reproduce(record: &RunRecord, store: Option<&ParamStore>) -> Result<RunRecord> {
    let cfg = ExperimentConfig::parse(&record.config)?;
    let job = EvalJob {
        solver: record.solver,
        spec: FunctionSpec::parse_descriptor(&record.function)?,
        seed: record.seed,
    };
    if let (Some(s), Some(h)) = (store, &record.params_hash) {
        if &params_hash(s) != h {
            return Err(HarnessError::Contract(format!("parameters do not match hash {h}")));
        }
    }
    Ok(run_job(&cfg, store, &job)?.record)
}

pub fn train(cfg: &MetaConfig) -> Result<TrainResult> {
    Ok(meta::train(cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoProxyGrad,
    NoSoftGate,
    NoMamba,
    Shared,
    Unshared,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoProxyGrad,
        Variant::NoSoftGate,
        Variant::NoMamba,
        Variant::Shared,
        Variant::Unshared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoProxyGrad => "no-proxygrad",
            Variant::NoSoftGate => "no-softgate",
            Variant::NoMamba => "no-mamba",
            Variant::Shared => "shared",
            Variant::Unshared => "unshared",
        }
    }

    /// The config patch this variant stands for.
    pub fn apply(self, base: &MetaConfig) -> MetaConfig {
        let mut m = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoProxyGrad => m.inner.gate = GateMode::Fixed(0.0),
            Variant::NoSoftGate => m.inner.gate = GateMode::Fixed(0.5),
            Variant::NoMamba => m.operator.architecture = Architecture::FeedForward,
            Variant::Shared => m.sharing = Sharing::Shared,
            Variant::Unshared => m.sharing = Sharing::Unshared,
        }
        m
    }
}

impl Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyErrors {
    pub family: Family,
    /// Final error per evaluation seed, in config seed order.
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub trainable_params: usize,
    pub final_meta_loss: f64,
    pub families: Vec<FamilyErrors>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Trains the variant and evaluates the learned solver on the eval suite.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant) -> Result<VariantResult> {
    let meta = variant.apply(&cfg.meta);
    let trained = meta::train(&meta)?;
    let vcfg = ExperimentConfig {
        meta,
        eval: crate::config::EvalConfig {
            solvers: vec![Solver::Learned],
            ..cfg.eval.clone()
        },
    };
    let jobs = suite_jobs(&vcfg);
    let runs = run_eval(&vcfg, Some(&trained.params), &jobs)?;
    let n = vcfg.eval.seeds.len();
    let families: Vec<FamilyErrors> = vcfg
        .eval
        .families
        .iter()
        .zip(runs.chunks(n))
        .map(|(&family, chunk)| {
            let errors: Vec<f64> = chunk.iter().map(|r| r.record.final_error).collect();
            let (mean, std) = mean_std(&errors);
            FamilyErrors {
                family,
                errors,
                mean,
                std,
            }
        })
        .collect();
    let all: Vec<f64> = families.iter().flat_map(|f| f.errors.iter().copied()).collect();
    let (mean, std) = mean_std(&all);
    Ok(VariantResult {
        variant,
        trainable_params: trained.params.trainable_count(),
        final_meta_loss: trained.record.meta_loss.last().copied().unwrap_or(f64::NAN),
        families,
        mean,
        std,
    })
}

/// Two-sided exact sign test p-value for `wins` against `losses` (ties dropped).
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // P(X ≤ k) for X ~ Bin(n, 1/2), via log-space binomial terms
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: Variant,
    /// Functions where the full model's mean error is ≤ the variant's.
    pub functions_full_not_worse: usize,
    pub functions: usize,
    /// Paired (function, seed) outcomes.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn compare(full: &VariantResult, other: &VariantResult) -> Result<Comparison> {
    if full.families.len() != other.families.len() {
        return Err(HarnessError::Contract("variants were evaluated on different suites".into()));
    }
    let (mut wins, mut losses, mut ties, mut better) = (0, 0, 0, 0);
    for (a, b) in full.families.iter().zip(&other.families) {
        if a.family != b.family || a.errors.len() != b.errors.len() {
            return Err(HarnessError::Contract(format!("unpaired results for {}", a.family)));
        }
        if a.mean <= b.mean {
            better += 1;
        }
        for (x, y) in a.errors.iter().zip(&b.errors) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Less => wins += 1,
                std::cmp::Ordering::Greater => losses += 1,
                std::cmp::Ordering::Equal => ties += 1,
            }
        }
    }
    Ok(Comparison {
        variant: other.variant,
        functions_full_not_worse: better,
        functions: full.families.len(),
        wins,
        losses,
        ties,
        p_value: sign_test(wins, losses),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<VariantResult>,
    /// Each non-full variant against `full`.
    pub comparisons: Vec<Comparison>,
    /// Unshared against shared, with the unshared model in the `full` role.
    pub sharing: Option<Comparison>,
}

/// Runs `variants` (plus `full` when absent) under identical seeds and
/// budgets, in parallel.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<AblationTable> {
    let mut vs = variants.to_vec();
    if !vs.contains(&Variant::Full) {
        vs.insert(0, Variant::Full);
    }
    vs.dedup();
    let results: Vec<VariantResult> = vs.par_iter().map(|&v| run_variant(cfg, v)).collect::<Result<_>>()?;
    let find = |v: Variant| results.iter().find(|r| r.variant == v);
    let full = find(Variant::Full).expect("full is always run");
    let comparisons = results
        .iter()
        .filter(|r| r.variant != Variant::Full)
        .map(|r| compare(full, r))
        .collect::<Result<Vec<_>>>()?;
    let sharing = match (find(Variant::Unshared), find(Variant::Shared)) {
        (Some(u), Some(s)) => Some(compare(u, s)?),
        _ => None,
    };
    Ok(AblationTable {
        results,
        comparisons,
        sharing,
    })
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::from("variant        params   mean ± std final error\n");
        for r in &self.results {
            out += &format!("{:<14} {:>7}   {:.4e} ± {:.4e}\n", r.variant.name(), r.trainable_params, r.mean, r.std);
            for f in &r.families {
                out += &format!("    {:<12} {:.4e} ± {:.4e}\n", f.family.name(), f.mean, f.std);
            }
        }
        let line = |a: &str, c: &Comparison| {
            format!(
                "{a} vs {}: not worse on {}/{} functions, paired {}-{}-{} (p = {:.3})\n",
                c.variant, c.functions_full_not_worse, c.functions, c.wins, c.losses, c.ties, c.p_value
            )
        };
        for c in &self.comparisons {
            out += &line("full", c);
        }
        if let Some(c) = &self.sharing {
            out += &line("unshared", c);
        }
        out
    }
}
