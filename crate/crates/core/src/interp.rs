//! Linear paths between checkpoints and their barrier heights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerKind, ModelConfig, ParamSet};
use crate::objective::Objective;
use crate::Scalar;

/// `points` uniform values `βᵢ = i / (points − 1)` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaGrid {
    pub points: usize,
}

impl Default for BetaGrid {
    fn default() -> Self {
        Self { points: 11 }
    }
}

impl BetaGrid {
    pub fn new(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidInput(format!("β grid needs ≥ 2 points, got {points}")));
        }
        Ok(Self { points })
    }

    pub fn fine() -> Self {
        Self { points: 21 }
    }

    pub fn betas(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.weights(i).1).collect()
    }

    /// `(1 − βᵢ, βᵢ)` from integer ratios, so index `i` of the reversed path
    /// uses exactly the swapped weights of index `points − 1 − i`.
    pub fn weights(&self, i: usize) -> (f64, f64) {
        let n = (self.points - 1) as f64;
        ((self.points - 1 - i) as f64 / n, i as f64 / n)
    }
}

/// `(1 − β)·θ_A + β·θ_B` at grid index `i`; endpoints are returned exactly.
pub fn interpolate(a: &ParamSet, b: &ParamSet, grid: &BetaGrid, i: usize) -> Result<ParamSet> {
    if i == 0 {
        return Ok(a.clone());
    }
    if i == grid.points - 1 {
        return Ok(b.clone());
    }
    let (wa, wb) = grid.weights(i);
    let mut out = a.clone();
    for ((ka, ta), (kb, tb)) in out.iter_mut().zip(b.iter()) {
        if ka != kb || ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("cannot interpolate `{ka}` {:?} with `{kb}` {:?}", ta.shape(), tb.shape())));
        }
        let mixed: Vec<f64> = ta.as_slice().iter().zip(tb.as_slice()).map(|(&x, &y)| if x == y { x } else { wa * x + wb * y }).collect();
        *ta = Matrix::new(ta.rows(), ta.cols(), mixed)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpCurve {
    pub betas: Vec<f64>,
    pub losses: Vec<f64>,
    pub from: String,
    pub to: String,
}

/// Loss at every β; divergent points are recorded as `+∞`.
pub fn interp_losses(objective: &dyn Objective, a: &ParamSet, b: &ParamSet, grid: &BetaGrid) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape("endpoints have different tensor counts".into()));
    }
    (0..grid.points)
        .into_par_iter()
        .map(|i| match objective.loss(&interpolate(a, b, grid, i)?) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::Numerical { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect()
}

/// `BH = max_{0<β<1} 𝓛(β) − ½(𝓛(0) + 𝓛(1))` and the arg-max index.
/// Negative values are returned as-is.
pub fn barrier_height<T: Scalar>(losses: &[T]) -> Result<(T, usize)> {
    if losses.len() < 3 {
        return Err(Error::InvalidInput(format!("barrier height needs ≥ 3 points, got {}", losses.len())));
    }
    let last = losses.len() - 1;
    let mut best = 1;
    for i in 2..last {
        if losses[i] > losses[best] {
            best = i;
        }
    }
    let mid = T::lit(0.5) * (losses[0] + losses[last]);
    Ok((losses[best] - mid, best))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierResult {
    pub curve: InterpCurve,
    pub height: f64,
    pub argmax_beta: f64,
}

pub fn barrier(
    objective: &dyn Objective,
    a: (&str, &ParamSet),
    b: (&str, &ParamSet),
    grid: &BetaGrid,
) -> Result<BarrierResult> {
    let losses = interp_losses(objective, a.1, b.1, grid)?;
    let (height, idx) = barrier_height(&losses)?;
    let betas = grid.betas();
    Ok(BarrierResult {
        argmax_beta: betas[idx],
        curve: InterpCurve { betas, losses, from: a.0.to_string(), to: b.0.to_string() },
        height,
    })
}

/// Space in which a run is interpolated: the dense view where one exists,
/// otherwise (CoLA) the native parameterisation.
pub fn interpolation_space(run: &[Checkpoint]) -> Result<(ModelConfig, Vec<(u64, ParamSet)>)> {
    let Some(first) = run.first() else {
        return Err(Error::InvalidInput("empty run".into()));
    };
    if first.meta.model.layer_kind == LayerKind::Cola {
        return Ok((first.meta.model.clone(), run.iter().map(|c| (c.meta.step, c.params.clone())).collect()));
    }
    let points = run
        .iter()
        .map(|c| Ok((c.meta.step, c.materialize_dense()?.params)))
        .collect::<Result<Vec<_>>>()?;
    Ok((first.meta.model.with_kind(LayerKind::Dense), points))
}

/// Consecutive-checkpoint barriers: one result per adjacent `(step_t, step_{t+1})`.
pub fn ccbh(objective: &dyn Objective, run: &[(u64, ParamSet)], grid: &BetaGrid) -> Result<Vec<(u64, u64, BarrierResult)>> {
    run.windows(2)
        .map(|w| {
            let ((sa, a), (sb, b)) = (&w[0], &w[1]);
            let r = barrier(objective, (&format!("step-{sa}"), a), (&format!("step-{sb}"), b), grid)?;
            Ok((*sa, *sb, r))
        })
        .collect()
}

/// Inter-method barriers at every shared step, in dense space.
///
/// `objective` must evaluate dense-schema parameters of the common size.
pub fn imbh(
    objective: &dyn Objective,
    run_a: &[Checkpoint],
    run_b: &[Checkpoint],
    grid: &BetaGrid,
) -> Result<Vec<(u64, BarrierResult)>> {
    let mut out = Vec::new();
    for a in run_a {
        let Some(b) = run_b.iter().find(|b| b.meta.step == a.meta.step) else {
            continue;
        };
        let (da, db) = (a.materialize_dense()?, b.materialize_dense()?);
        // Init seeds may differ; only the architecture has to agree.
        let unseeded = |m: &ModelConfig| ModelConfig { seed: 0, ..m.clone() };
        if unseeded(&da.model) != unseeded(&db.model) {
            return Err(Error::Shape(format!("runs have different dense configs at step {}", a.meta.step)));
        }
        let r = barrier(objective, (a.meta.method.name(), &da.params), (b.meta.method.name(), &db.params), grid)?;
        out.push((a.meta.step, r));
    }
    if out.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(out)
}
