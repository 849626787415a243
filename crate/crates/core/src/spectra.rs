//! Singular-value analytics: effective, stable, spectral-gap and threshold
//! rank of weights and of checkpoint-to-checkpoint updates.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{materialize_dense, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::{singular_values, Matrix};
use crate::model::{LayerKind, ModelConfig, ParamKey, ParamSet, Part, Role};
use crate::Scalar;

/// Default cutoff for [`threshold_rank`].
pub const DEFAULT_TAU: f64 = 0.1;
/// Singular values below this fraction of `σ₁` are zeroed before the entropy.
pub const ENTROPY_CUTOFF: f64 = 1e-12;

fn leading<T: Scalar>(sigma: &[T]) -> Result<T> {
    match sigma.first() {
        Some(&s) if s > T::zero() && s.is_finite() => Ok(s),
        _ => Err(Error::DegenerateSpectrum("leading singular value is zero".into())),
    }
}

/// `exp(−Σ pᵢ ln pᵢ)` with `pᵢ = σᵢ / Σσⱼ` and `0·ln 0 = 0`.
pub fn effective_rank<T: Scalar>(sigma: &[T]) -> Result<T> {
    let s1 = leading(sigma)?;
    let cutoff = s1 * T::lit(ENTROPY_CUTOFF);
    let kept: Vec<T> = sigma.iter().map(|&s| if s < cutoff { T::zero() } else { s }).collect();
    let total: T = kept.iter().copied().sum();
    let entropy: T = kept
        .iter()
        .filter(|&&s| s > T::zero())
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// `Σσᵢ² / σ₁²`.
pub fn stable_rank<T: Scalar>(sigma: &[T]) -> Result<T> {
    let s1 = leading(sigma)?;
    Ok(sigma.iter().map(|&s| s * s).sum::<T>() / (s1 * s1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap<T> {
    pub value: T,
    /// Set when the spectrum has a single value and the gap is 1 by convention.
    pub single: bool,
}

/// `(σ₁ − σ₂) / σ₁`; a one-value spectrum has gap 1 with `single` set.
pub fn spectral_gap<T: Scalar>(sigma: &[T]) -> Result<Gap<T>> {
    let s1 = leading(sigma)?;
    match sigma.get(1) {
        Some(&s2) => Ok(Gap { value: (s1 - s2) / s1, single: false }),
        None => Ok(Gap { value: T::one(), single: true }),
    }
}

/// `#{i : σᵢ > τ}`.
pub fn threshold_rank<T: Scalar>(sigma: &[T], tau: T) -> usize {
    sigma.iter().filter(|&&s| s > tau).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralMetrics {
    pub eff_rank: f64,
    pub stable_rank: f64,
    pub spectral_gap: f64,
    pub gap_single: bool,
    pub threshold_rank: usize,
}

impl SpectralMetrics {
    pub fn from_singular_values(sigma: &[f64], tau: f64) -> Result<Self> {
        let gap = spectral_gap(sigma)?;
        Ok(Self {
            eff_rank: effective_rank(sigma)?,
            stable_rank: stable_rank(sigma)?,
            spectral_gap: gap.value,
            gap_single: gap.single,
            threshold_rank: threshold_rank(sigma, tau),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpectrum {
    pub key: String,
    pub role: String,
    pub singular_values: Vec<f64>,
    /// `None` when the matrix is zero.
    pub metrics: Option<SpectralMetrics>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub eff_rank: f64,
    pub stable_rank: f64,
    pub spectral_gap: f64,
    pub threshold_rank: f64,
    /// Tensors that contributed; zero matrices are skipped.
    pub count: usize,
}

impl MetricMeans {
    fn of<'a>(metrics: impl Iterator<Item = &'a SpectralMetrics>) -> Option<Self> {
        let mut m = MetricMeans::default();
        for x in metrics {
            m.eff_rank += x.eff_rank;
            m.stable_rank += x.stable_rank;
            m.spectral_gap += x.spectral_gap;
            m.threshold_rank += x.threshold_rank as f64;
            m.count += 1;
        }
        (m.count > 0).then(|| {
            let n = m.count as f64;
            MetricMeans {
                eff_rank: m.eff_rank / n,
                stable_rank: m.stable_rank / n,
                spectral_gap: m.spectral_gap / n,
                threshold_rank: m.threshold_rank / n,
                count: m.count,
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub tau: f64,
    pub tensors: Vec<TensorSpectrum>,
    pub by_role: BTreeMap<String, MetricMeans>,
    /// Layer- and role-averaged metrics; `None` if every matrix is zero.
    pub mean: Option<MetricMeans>,
}

impl SpectralReport {
    pub fn degenerate_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.metrics.is_none()).count()
    }
}

/// A labelled matrix in the spectral scope.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMatrix {
    pub key: String,
    pub role: String,
    pub matrix: Matrix<f64>,
}

/// Attention and MLP matrices in the space spectra are computed in:
/// composed dense weights for dense, adapter and SLTrain layers, and the
/// `A` and `B` factors separately for CoLA.
pub fn spectral_matrices(model: &ModelConfig, params: &ParamSet) -> Result<Vec<SpectralMatrix>> {
    let (source, parts): (ParamSet, &[Part]) = match model.layer_kind {
        LayerKind::Cola => (params.clone(), &[Part::A, Part::B]),
        _ => (materialize_dense(model, params)?.params, &[Part::Weight]),
    };
    let mut out = Vec::new();
    for l in 0..model.n_layers {
        for role in Role::PROJECTIONS {
            for &part in parts {
                let key = ParamKey::layer(l, role, part);
                let role_label = match part {
                    Part::Weight => role.name().to_string(),
                    _ => format!("{}.{}", role.name(), part_suffix(part)),
                };
                out.push(SpectralMatrix { key: key.to_string(), role: role_label, matrix: source.tensor(&key)?.clone() });
            }
        }
    }
    Ok(out)
}

fn part_suffix(part: Part) -> &'static str {
    match part {
        Part::A => "a",
        Part::B => "b",
        Part::Sparse => "s",
        Part::Weight => "w",
    }
}

/// Metrics for every matrix, in input order, plus role and global means.
pub fn spectral_report(matrices: &[SpectralMatrix], tau: f64) -> Result<SpectralReport> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("threshold τ must be > 0, got {tau}")));
    }
    let tensors = matrices
        .par_iter()
        .map(|m| {
            let sv = singular_values(&m.matrix)?;
            let metrics = match SpectralMetrics::from_singular_values(&sv, tau) {
                Ok(x) => Some(x),
                Err(Error::DegenerateSpectrum(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(TensorSpectrum { key: m.key.clone(), role: m.role.clone(), singular_values: sv, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut roles: BTreeMap<String, Vec<&SpectralMetrics>> = BTreeMap::new();
    for t in &tensors {
        let entry = roles.entry(t.role.clone()).or_default();
        if let Some(m) = &t.metrics {
            entry.push(m);
        }
    }
    let by_role = roles
        .into_iter()
        .filter_map(|(role, ms)| MetricMeans::of(ms.into_iter()).map(|m| (role, m)))
        .collect();
    let mean = MetricMeans::of(tensors.iter().filter_map(|t| t.metrics.as_ref()));
    Ok(SpectralReport { tau, tensors, by_role, mean })
}

fn subtract(later: &[SpectralMatrix], earlier: &[SpectralMatrix]) -> Result<Vec<SpectralMatrix>> {
    if later.len() != earlier.len() {
        return Err(Error::Shape("checkpoints have different spectral scopes".into()));
    }
    later
        .iter()
        .zip(earlier)
        .map(|(b, a)| {
            if a.key != b.key {
                return Err(Error::Shape(format!("`{}` does not match `{}`", a.key, b.key)));
            }
            Ok(SpectralMatrix { key: b.key.clone(), role: b.role.clone(), matrix: b.matrix.sub(&a.matrix)? })
        })
        .collect()
}

/// One report per checkpoint on the weights themselves.
pub fn weights_sweep(run: &[Checkpoint], tau: f64) -> Result<Vec<(u64, SpectralReport)>> {
    run.iter()
        .map(|c| Ok((c.meta.step, spectral_report(&spectral_matrices(&c.meta.model, &c.params)?, tau)?)))
        .collect()
}

/// One report per adjacent pair on `ΔW = W_{t+1} − W_t`.
pub fn deltas_sweep(run: &[Checkpoint], tau: f64) -> Result<Vec<(u64, u64, SpectralReport)>> {
    let mats = run
        .iter()
        .map(|c| spectral_matrices(&c.meta.model, &c.params))
        .collect::<Result<Vec<_>>>()?;
    run.windows(2)
        .zip(mats.windows(2))
        .map(|(c, m)| Ok((c[0].meta.step, c[1].meta.step, spectral_report(&subtract(&m[1], &m[0])?, tau)?)))
        .collect()
}

/// Singular values of `W_last − W_first` pooled per projection role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleSpectrum {
    pub role: String,
    /// All singular values across layers, descending.
    pub singular_values: Vec<f64>,
    pub above_tau: usize,
}

/// Whole-run update spectra for the requested roles (all roles if empty).
pub fn whole_run_spectra(run: &[Checkpoint], roles: &[String], tau: f64) -> Result<Vec<RoleSpectrum>> {
    let (Some(first), Some(last)) = (run.first(), run.last()) else {
        return Err(Error::InvalidInput("empty run".into()));
    };
    let delta = subtract(
        &spectral_matrices(&last.meta.model, &last.params)?,
        &spectral_matrices(&first.meta.model, &first.params)?,
    )?;
    let report = spectral_report(&delta, tau)?;
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &report.tensors {
        let base = t.role.split('.').next().unwrap_or(&t.role);
        if roles.is_empty() || roles.iter().any(|r| r == base || r == &t.role) {
            pooled.entry(t.role.clone()).or_default().extend(&t.singular_values);
        }
    }
    Ok(pooled
        .into_iter()
        .map(|(role, mut sv)| {
            sv.sort_by(|a, b| b.total_cmp(a));
            let above_tau = threshold_rank(&sv, tau);
            RoleSpectrum { role, singular_values: sv, above_tau }
        })
        .collect())
}
