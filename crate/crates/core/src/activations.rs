//! Hidden-state comparison against a reference model on identical inputs:
//! mean per-position L2 distance, mean cosine, and linear CKA per layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{Batch, ParamSet, TinyLm};
use crate::Scalar;

/// Default denominator guard for [`act_cos`].
pub const COS_EPS: f64 = 1e-8;

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("activations {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::Shape("activations have no rows".into()));
    }
    Ok(())
}

/// `(1/N) Σᵢ ‖h_{A,i} − h_{B,i}‖₂`.
pub fn act_l2<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    same_shape(a, b)?;
    let total: T = (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt())
        .sum();
    Ok(total / T::from_count(a.rows()))
}

/// `(1/N) Σᵢ ⟨h_{A,i}, h_{B,i}⟩ / (‖h_{A,i}‖ ‖h_{B,i}‖ + ε)`.
pub fn act_cos<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, eps: T) -> Result<T> {
    same_shape(a, b)?;
    let total: T = (0..a.rows())
        .map(|i| {
            let (ra, rb) = (a.row(i), b.row(i));
            dot(ra, rb) / (dot(ra, ra).sqrt() * dot(rb, rb).sqrt() + eps)
        })
        .sum();
    Ok(total / T::from_count(a.rows()))
}

fn center_columns<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let n = T::from_count(m.rows());
    let means: Vec<T> = (0..m.cols()).map(|j| m.col(j).into_iter().sum::<T>() / n).collect();
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) - means[j])
}

/// `‖G_AB‖²_F / (‖G_AA‖_F ‖G_BB‖_F)` with `G_XY = H̃_Yᵀ H̃_X` on column-centred inputs.
pub fn linear_cka<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    if a.rows() != b.rows() || a.rows() == 0 {
        return Err(Error::Shape(format!("CKA needs equal row counts, got {} and {}", a.rows(), b.rows())));
    }
    let (ca, cb) = (center_columns(a), center_columns(b));
    if ca.max_abs() == T::zero() || cb.max_abs() == T::zero() {
        return Err(Error::DegenerateInput("activations have zero variance".into()));
    }
    let gab = cb.matmul_tn(&ca)?;
    let gaa = ca.matmul_tn(&ca)?;
    let gbb = cb.matmul_tn(&cb)?;
    Ok(gab.frobenius_norm_sq() / (gaa.frobenius_norm() * gbb.frobenius_norm()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub layer: usize,
    pub d_l2: f64,
    pub cos: f64,
    pub cka: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActReport {
    pub layers: Vec<LayerComparison>,
}

/// Hidden states `H⁽ℓ⁾`, `ℓ = 0..=L`, stacked over all validation positions.
pub fn capture(model: &TinyLm, params: &ParamSet, batches: &[Batch]) -> Result<Vec<Matrix<f64>>> {
    let per_batch = batches
        .iter()
        .map(|b| model.capture_hidden_states(params, b))
        .collect::<Result<Vec<_>>>()?;
    let layers = per_batch.first().map_or(0, Vec::len);
    (0..layers)
        .map(|l| {
            let cols = per_batch[0][l].cols();
            let data: Vec<f64> = per_batch.iter().flat_map(|hs| hs[l].as_slice().iter().copied()).collect();
            Matrix::new(data.len() / cols, cols, data)
        })
        .collect()
}

/// Per-layer comparison of `target` against `reference` activations.
pub fn compare(reference: &[Matrix<f64>], target: &[Matrix<f64>]) -> Result<ActReport> {
    if reference.len() != target.len() {
        return Err(Error::Schema(format!("{} reference layers vs {} target layers", reference.len(), target.len())));
    }
    let layers = reference
        .par_iter()
        .zip(target)
        .enumerate()
        .map(|(layer, (r, t))| {
            Ok(LayerComparison { layer, d_l2: act_l2(r, t)?, cos: act_cos(r, t, COS_EPS)?, cka: linear_cka(r, t)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActReport { layers })
}

/// Combined deviation `z = d_L2 / mean_methods(d_L2) + (1 − cos) + (1 − CKA)`
/// per layer, averaged over layers and at the last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedDeviation {
    pub label: String,
    pub per_layer: Vec<f64>,
    pub layer_mean: f64,
    pub last_layer: f64,
}

/// Stacked deviation for a group of reports at one grouping (e.g. one step).
/// The L2 term is normalised by its mean over the group at each layer.
pub fn stacked_deviation(reports: &[(String, ActReport)]) -> Result<Vec<StackedDeviation>> {
    let Some((_, first)) = reports.first() else {
        return Ok(Vec::new());
    };
    let layers = first.layers.len();
    if reports.iter().any(|(_, r)| r.layers.len() != layers) || layers == 0 {
        return Err(Error::Schema("reports have different layer counts".into()));
    }
    let l2_mean: Vec<f64> = (0..layers)
        .map(|l| reports.iter().map(|(_, r)| r.layers[l].d_l2).sum::<f64>() / reports.len() as f64)
        .collect();
    Ok(reports
        .iter()
        .map(|(label, r)| {
            let per_layer: Vec<f64> = r
                .layers
                .iter()
                .zip(&l2_mean)
                .map(|(c, &m)| {
                    let norm = if m > 0.0 { c.d_l2 / m } else { 0.0 };
                    norm + (1.0 - c.cos) + (1.0 - c.cka)
                })
                .collect();
            StackedDeviation {
                label: label.clone(),
                layer_mean: per_layer.iter().sum::<f64>() / layers as f64,
                last_layer: per_layer[layers - 1],
                per_layer,
            }
        })
        .collect())
}
