//! Executable theory checks behind `verify-theory` and the acceptance suite.

use kmevo::meta::block_count;
use kmevo::solver::InnerConfig;
use kmevo::theory::{self, AffineOperator};
use kmevo_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// 100 operators, α = 0.5, K = 10, unit start distance.
pub fn contraction(seed: u64) -> Check {
    let (alpha, k) = (0.5, 10);
    let stated = theory::relaxation_bound(alpha, k);
    let dominated = theory::check_contraction_bound(
        "relaxation-dominated",
        alpha,
        k,
        100,
        seed,
        |rng| theory::relaxation_dominated(4, alpha, false, rng),
        |_| stated,
    );
    let generic = theory::check_contraction_bound(
        "generic",
        alpha,
        k,
        100,
        seed,
        |rng| theory::random_contraction(4, rng),
        |op| theory::operator_bound(op, alpha, k),
    );
    let generic_vs_stated = theory::check_contraction_bound(
        "generic-vs-stated",
        alpha,
        k,
        100,
        seed,
        |rng| theory::random_contraction(4, rng),
        |_| stated,
    );
    let norms_ok = dominated.max_q_norm <= 1.0 + 1e-12 && generic.max_q_norm <= 1.0 + 1e-12;
    Check::new(
        "contraction bound",
        dominated.pass && generic.pass && norms_ok,
        format!(
            "worst error {:.3e} vs {stated:.7e} (+1e-9); generic class within ((1-a)+a|Q|)^K: {} violations; \
             generic class against (1-a)^K: {}/100 (info)",
            dominated.worst_error, generic.violations, generic_vs_stated.violations
        ),
    )
}

pub fn bias_decay(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = true;
    let mut parts = Vec::new();
    for alpha in [0.3, 0.5, 0.7] {
        let ops: Vec<AffineOperator> = (0..50)
            .map(|_| theory::relaxation_dominated(4, alpha, true, &mut rng))
            .collect();
        let rep = theory::bias_vs_k(&ops, alpha, &[5, 10, 15, 20, 25], seed);
        pass &= rep.pass;
        parts.push(format!(
            "a={alpha}: slope {:.4} vs {:.4} ({:.2}%)",
            rep.slope,
            rep.expected_slope,
            100.0 * rep.rel_dev
        ));
    }
    Check::new("bias decay", pass, parts.join("; "))
}

pub fn residual(inner: &InnerConfig, seed: u64) -> Result<Check> {
    let cfg = InnerConfig {
        k: 500,
        ..inner.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..4).map(|i| (i as f64 - 1.5) * 0.8).collect();
    let ops = [
        ("rotation", AffineOperator::scaled_rotation(c.clone(), 1.0, 0.9)),
        ("symmetric", theory::relaxation_dominated(4, cfg.alpha, false, &mut rng)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, op) in &ops {
        let rep = theory::check_residual_convergence(name, op, &cfg, 16, seed)?;
        pass &= rep.pass;
        parts.push(format!(
            "{name}: {} increases > 1e-12, r(500) = {:.2e}",
            rep.monotone_violations,
            rep.at(500)
        ));
    }
    Ok(Check::new("residual convergence", pass, parts.join("; ")))
}

/// Sampled Lipschitz constant of every block of `store`.
pub fn lipschitz(store: &ParamStore, cfg: &ExperimentConfig, seed: u64) -> Result<Check> {
    let blocks = block_count(store);
    let mut worst: f64 = 0.0;
    for k in 0..blocks {
        let rep = theory::learned_block_lipschitz(store, k, &cfg.meta.operator, cfg.meta.pop, 300, seed + k as u64)?;
        worst = worst.max(rep.estimate);
    }
    Ok(Check::new(
        "operator lipschitz",
        worst <= 1.05,
        format!("max over {blocks} blocks {worst:.4} (limit 1.05)"),
    ))
}

/// Every theory check; the operator check uses `store` or fresh parameters.
pub fn verify_theory(cfg: &ExperimentConfig, store: Option<&ParamStore>) -> Result<Vec<Check>> {
    let seed = cfg.meta.seed;
    let fresh;
    let params = match store {
        Some(s) => s,
        None => {
            fresh = cfg.meta.init_params()?;
            &fresh
        }
    };
    Ok(vec![
        contraction(seed),
        bias_decay(seed),
        residual(&cfg.meta.inner, seed)?,
        lipschitz(params, cfg, seed)?,
    ])
}
