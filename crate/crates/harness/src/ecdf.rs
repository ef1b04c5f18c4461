//! Data-profile ECDF over (run, target) pairs.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::record::RunRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcdfCurve {
    pub targets: Vec<f64>,
    pub budget: usize,
    /// Evaluation counts where the curve steps up.
    pub evals: Vec<usize>,
    /// Fraction of (run, target) pairs solved by `evals[i]`.
    pub values: Vec<f64>,
}

impl EcdfCurve {
    /// Curve value after `n` evaluations.
    pub fn at(&self, n: usize) -> f64 {
        match self.evals.partition_point(|&e| e <= n) {
            0 => 0.0,
            i => self.values[i - 1],
        }
    }

    /// Curve value at a fraction of the shared budget.
    pub fn at_fraction(&self, frac: f64) -> f64 {
        self.at((frac * self.budget as f64).floor() as usize)
    }
}

/// `10^2, 10^1.5, …, 10^-8`.
pub fn default_targets() -> Vec<f64> {
    (0..=20).map(|i| 10f64.powf(2.0 - 0.5 * i as f64)).collect()
}

/// First evaluation at which `record` reached an error ≤ `target`.
pub fn hitting_time(record: &RunRecord, target: f64) -> Option<usize> {
    record
        .convergence
        .iter()
        .find(|(_, f)| f - record.f_opt <= target)
        .map(|(n, _)| *n)
}

pub fn compute_ecdf(records: &[RunRecord], targets: &[f64]) -> Result<EcdfCurve> {
    let first = records
        .first()
        .ok_or_else(|| HarnessError::Contract("ECDF of no records".into()))?;
    if targets.is_empty() {
        return Err(HarnessError::Contract("ECDF needs at least one target".into()));
    }
    if let Some(r) = records.iter().find(|r| r.budget != first.budget) {
        return Err(HarnessError::Contract(format!(
            "records mix budgets {} and {}",
            first.budget, r.budget
        )));
    }
    let mut hits: Vec<usize> = records
        .iter()
        .flat_map(|r| targets.iter().filter_map(move |&t| hitting_time(r, t)))
        .collect();
    hits.sort_unstable();
    let total = (records.len() * targets.len()) as f64;
    let (mut evals, mut values) = (Vec::new(), Vec::new());
    for (i, &n) in hits.iter().enumerate() {
        if hits.get(i + 1) == Some(&n) {
            continue;
        }
        evals.push(n);
        values.push((i + 1) as f64 / total);
    }
    Ok(EcdfCurve {
        targets: targets.to_vec(),
        budget: first.budget,
        evals,
        values,
    })
}
