use kmevo_tensor::Tensor;
use rand::Rng;

use crate::benchmarks::{Bounds, Objective};
use crate::error::{Error, Result};

/// A batch of populations, `batch × pop × dim`, with fitness `batch × pop`.
/// Batch row `b` belongs to objective `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub x: Tensor,
    pub fit: Tensor,
    pub bounds: Bounds,
}

impl Population {
    /// Evaluates `x` row-by-row against `objectives` (one per batch row).
    pub fn evaluate(x: Tensor, objectives: &[&dyn Objective]) -> Result<Self> {
        let (b, n, d) = dims3(&x)?;
        check_objectives(objectives, b, d)?;
        let bounds = objectives[0].bounds().clone();
        let fit = evaluate_rows(&x, objectives)?;
        debug_assert_eq!(fit.shape(), &[b, n]);
        Ok(Self { x, fit, bounds })
    }

    /// Uniform initial populations in each objective's box.
    pub fn uniform(objectives: &[&dyn Objective], pop: usize, rng: &mut impl Rng) -> Result<Self> {
        let x = uniform_tensor(objectives, pop, rng)?;
        Self::evaluate(x, objectives)
    }

    pub fn batch(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn best(&self, b: usize) -> f64 {
        let n = self.size();
        self.fit.data()[b * n..(b + 1) * n]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self, b: usize) -> f64 {
        let n = self.size();
        self.fit.data()[b * n..(b + 1) * n].iter().sum::<f64>() / n as f64
    }

    pub fn is_feasible(&self) -> bool {
        self.x
            .data()
            .chunks(self.dim())
            .all(|r| self.bounds.contains(r))
    }
}

pub(crate) fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(Error::Dimension(format!(
            "population must be batch × pop × dim, got {s:?}"
        ))),
    }
}

pub(crate) fn check_objectives(objectives: &[&dyn Objective], batch: usize, dim: usize) -> Result<()> {
    if objectives.len() != batch {
        return Err(Error::Dimension(format!(
            "{} objectives for a batch of {batch}",
            objectives.len()
        )));
    }
    if let Some(o) = objectives.iter().find(|o| o.dim() != dim) {
        return Err(Error::Dimension(format!(
            "objective dim {} does not match population dim {dim}",
            o.dim()
        )));
    }
    Ok(())
}

pub(crate) fn evaluate_rows(x: &Tensor, objectives: &[&dyn Objective]) -> Result<Tensor> {
    let (b, n, d) = dims3(x)?;
    let vals = x
        .data()
        .chunks(n * d)
        .zip(objectives)
        .flat_map(|(rows, f)| rows.chunks(d).map(|r| f.value(r)).collect::<Vec<_>>())
        .collect();
    Ok(Tensor::new(vec![b, n], vals)?)
}

pub fn uniform_tensor(objectives: &[&dyn Objective], pop: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let d = objectives
        .first()
        .map(|o| o.dim())
        .ok_or_else(|| Error::Contract("empty objective batch".into()))?;
    let mut data = Vec::with_capacity(objectives.len() * pop * d);
    for f in objectives {
        if f.dim() != d {
            return Err(Error::Dimension("objectives in one batch must share dim".into()));
        }
        for _ in 0..pop {
            data.extend(f.bounds().sample(rng));
        }
    }
    Ok(Tensor::new(vec![objectives.len(), pop, d], data)?)
}
