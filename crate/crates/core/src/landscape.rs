//! One-dimensional loss slices `𝓛(θ + α·δ)` along random Gaussian and
//! singular-vector directions, and their sharpness / direction-variance
//! reductions.
//!
//! Directions perturb every projection tensor in the checkpoint's native
//! parameterisation with an independent `δ` per tensor and one shared `α`.
//! Embeddings and norms are left untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_direction, svd, SeededRng};
use crate::model::{ParamKey, ParamSet};
use crate::objective::Objective;
use crate::Scalar;

/// Symmetric uniform grid `{−α_max·j/N} ∪ {0} ∪ {+α_max·j/N}`, `j = 1..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbGrid {
    pub alpha_max: f64,
    pub num_offsets: usize,
}

impl Default for PerturbGrid {
    fn default() -> Self {
        Self { alpha_max: 0.5, num_offsets: 10 }
    }
}

impl PerturbGrid {
    pub fn new(alpha_max: f64, num_offsets: usize) -> Result<Self> {
        if !(alpha_max.is_finite() && alpha_max > 0.0) || num_offsets == 0 {
            return Err(Error::InvalidInput(format!(
                "grid needs α_max > 0 and N ≥ 1, got α_max = {alpha_max}, N = {num_offsets}"
            )));
        }
        Ok(Self { alpha_max, num_offsets })
    }

    /// All `2N + 1` offsets in ascending order; `alphas()[N] == 0`.
    pub fn alphas(&self) -> Vec<f64> {
        let n = self.num_offsets as i64;
        (-n..=n).map(|k| self.alpha_max * k as f64 / n as f64).collect()
    }

    pub fn zero_index(&self) -> usize {
        self.num_offsets
    }
}

/// A scalar reduction that is `+∞` when any probe diverged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction<T> {
    pub value: T,
    pub divergent: bool,
}

/// Per-α mean and population variance across directions (rows).
///
/// A column containing `+∞` has mean and variance `+∞`.
pub fn mean_and_variance<T: Scalar>(losses: &[Vec<T>]) -> (Vec<T>, Vec<T>) {
    let Some(first) = losses.first() else {
        return (Vec::new(), Vec::new());
    };
    let d = T::from_count(losses.len());
    (0..first.len())
        .map(|j| {
            if losses.iter().any(|row| !row[j].is_finite()) {
                return (T::infinity(), T::infinity());
            }
            let mean = losses.iter().map(|row| row[j]).sum::<T>() / d;
            let var = losses.iter().map(|row| (row[j] - mean).powi(2)).sum::<T>() / d;
            (mean, var)
        })
        .unzip()
}

/// `S = (1/2ND) Σᵢ Σⱼ [Δ(δᵢ,+αⱼ) + Δ(δᵢ,−αⱼ)]` with `Δ(δ,α) = 𝓛(δ,α) − 𝓛(δ,0)`.
/// Rows are directions over a symmetric grid whose centre is column `zero`.
pub fn sharpness<T: Scalar>(losses: &[Vec<T>], zero: usize) -> Reduction<T> {
    if losses.iter().flatten().any(|v| !v.is_finite()) {
        return Reduction { value: T::infinity(), divergent: true };
    }
    let mut total = T::zero();
    for row in losses {
        let base = row[zero];
        for j in 1..=zero {
            total += (row[zero + j] - base) + (row[zero - j] - base);
        }
    }
    let denom = T::from_count(2 * zero * losses.len().max(1));
    Reduction { value: total / denom, divergent: false }
}

/// `DV = (1/2N) Σⱼ [σ²(+αⱼ) + σ²(−αⱼ)]` from the per-α variance.
pub fn direction_variance<T: Scalar>(variance: &[T], zero: usize) -> Reduction<T> {
    if variance.iter().any(|v| !v.is_finite()) {
        return Reduction { value: T::infinity(), divergent: true };
    }
    let total: T = (1..=zero).map(|j| variance[zero + j] + variance[zero - j]).sum();
    Reduction { value: total / T::from_count(2 * zero), divergent: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCurve {
    pub grid: PerturbGrid,
    pub alphas: Vec<f64>,
    /// `losses[i][j] = 𝓛(θ + alphas[j]·δᵢ)`, with `+∞` for divergent probes.
    #[serde(with = "sentinel_rows")]
    pub losses: Vec<Vec<f64>>,
    #[serde(with = "sentinel_vec")]
    pub mean: Vec<f64>,
    #[serde(with = "sentinel_vec")]
    pub variance: Vec<f64>,
    /// Seed of each direction's stream (random curves) or the component index `k` (PCA curves).
    pub direction_seeds: Vec<u64>,
    pub normalized: bool,
}

impl LandscapeCurve {
    pub fn from_losses(grid: PerturbGrid, losses: Vec<Vec<f64>>, direction_seeds: Vec<u64>, normalized: bool) -> Result<Self> {
        let width = 2 * grid.num_offsets + 1;
        if losses.is_empty() || losses.iter().any(|r| r.len() != width) || direction_seeds.len() != losses.len() {
            return Err(Error::Shape(format!("landscape needs D ≥ 1 rows of {width} losses")));
        }
        let (mean, variance) = mean_and_variance(&losses);
        Ok(Self { grid, alphas: grid.alphas(), losses, mean, variance, direction_seeds, normalized })
    }

    pub fn num_directions(&self) -> usize {
        self.losses.len()
    }

    pub fn sharpness(&self) -> Reduction<f64> {
        sharpness(&self.losses, self.grid.zero_index())
    }

    pub fn direction_variance(&self) -> Reduction<f64> {
        direction_variance(&self.variance, self.grid.zero_index())
    }

    /// Mean curve relative to its value at `α = 0`.
    pub fn centered_mean(&self) -> Vec<f64> {
        let base = self.mean[self.grid.zero_index()];
        self.mean.iter().map(|m| m - base).collect()
    }
}

/// JSON has no infinity; divergent entries are written as `null`.
mod sentinel_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

mod sentinel_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|r| r.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Ok(Vec::<Vec<Option<f64>>>::deserialize(d)?
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
            .collect())
    }
}

/// Keys of the tensors a direction perturbs.
pub fn eligible_keys(params: &ParamSet) -> Vec<ParamKey> {
    params.keys().filter(|k| k.is_projection()).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomOptions {
    pub grid: PerturbGrid,
    pub directions: usize,
    pub seed: u64,
    /// Rescale each tensor's `δ` to the Frobenius norm of the tensor it perturbs.
    pub normalize: bool,
}

impl Default for RandomOptions {
    fn default() -> Self {
        Self { grid: PerturbGrid::default(), directions: 100, seed: 0, normalize: false }
    }
}

/// Direction `i` of a random landscape: one `N(0, I)` tensor per eligible key.
pub fn random_direction(params: &ParamSet, seed: u64, index: usize, normalize: bool) -> ParamSet {
    let stream = SeededRng::new(seed).child(index as u64);
    eligible_keys(params)
        .into_iter()
        .map(|k| {
            let t = params.get(&k).expect("eligible keys come from params");
            let mut rng = stream.child_named(&k.to_string());
            let mut d = gaussian_direction::<f64>(t.rows(), t.cols(), &mut rng);
            if normalize {
                let (dn, tn) = (d.frobenius_norm(), t.frobenius_norm());
                if dn > 0.0 {
                    d = d.scale(tn / dn);
                }
            }
            (k, d)
        })
        .collect()
}

/// Loss at `θ + α·δ`; non-finite results become the `+∞` sentinel.
fn probe(objective: &dyn Objective, params: &ParamSet, direction: &ParamSet, alpha: f64, base: f64) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(base);
    }
    match objective.loss(&params.perturbed(direction, alpha)?) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) | Err(Error::Numerical { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn sweep(objective: &dyn Objective, params: &ParamSet, directions: &[ParamSet], grid: &PerturbGrid) -> Result<Vec<Vec<f64>>> {
    let base = objective.loss(params)?;
    let alphas = grid.alphas();
    let jobs: Vec<(usize, usize)> = (0..directions.len()).flat_map(|i| (0..alphas.len()).map(move |j| (i, j))).collect();
    let values = jobs
        .par_iter()
        .map(|&(i, j)| probe(objective, params, &directions[i], alphas[j], base))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.chunks(alphas.len()).map(<[f64]>::to_vec).collect())
}

/// Loss slices along `D` random Gaussian directions. `params` is not modified.
pub fn landscape_random(objective: &dyn Objective, params: &ParamSet, opts: &RandomOptions) -> Result<LandscapeCurve> {
    if opts.directions == 0 {
        return Err(Error::InvalidInput("landscape needs at least one direction".into()));
    }
    if eligible_keys(params).is_empty() {
        return Err(Error::Schema("no projection tensors to perturb".into()));
    }
    let directions: Vec<ParamSet> =
        (0..opts.directions).map(|i| random_direction(params, opts.seed, i, opts.normalize)).collect();
    let losses = sweep(objective, params, &directions, &opts.grid)?;
    let root = SeededRng::new(opts.seed);
    let seeds = (0..opts.directions).map(|i| root.child(i as u64).seed()).collect();
    LandscapeCurve::from_losses(opts.grid, losses, seeds, opts.normalize)
}

/// `δ⁽ᵏ⁾ = σ_k · u_k v_kᵀ` for every eligible tensor (1-based `k`), with each
/// tensor's `σ_k` and `σ₁`.
pub fn pca_direction(params: &ParamSet, k: usize) -> Result<(ParamSet, Vec<PcaTensor>)> {
    if k == 0 {
        return Err(Error::InvalidInput("PCA component index is 1-based".into()));
    }
    let keys = eligible_keys(params);
    let parts = keys
        .par_iter()
        .map(|key| {
            let t = params.get(key).expect("eligible keys come from params");
            if k > t.rows().min(t.cols()) {
                return Err(Error::InvalidInput(format!("k = {k} exceeds min dimension of `{key}` {:?}", t.shape())));
            }
            let dec = svd(t)?;
            let info = PcaTensor { key: *key, sigma_k: dec.singular_values[k - 1], sigma_1: dec.singular_values[0] };
            Ok(((*key, dec.rank_one_component(k - 1)), info))
        })
        .collect::<Result<Vec<_>>>()?;
    let (dirs, infos): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok((dirs.into_iter().collect(), infos))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaTensor {
    pub key: ParamKey,
    pub sigma_k: f64,
    pub sigma_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaLandscape {
    /// One row per requested `k`, in request order.
    pub curve: LandscapeCurve,
    pub components: Vec<usize>,
    pub tensors: Vec<Vec<PcaTensor>>,
    /// Largest `σ₁` over eligible tensors.
    pub top_sigma: f64,
}

/// Loss slices along the top-`k` singular directions, one row per `k`.
pub fn landscape_pca(objective: &dyn Objective, params: &ParamSet, grid: &PerturbGrid, ks: &[usize]) -> Result<PcaLandscape> {
    if ks.is_empty() {
        return Err(Error::InvalidInput("no PCA components requested".into()));
    }
    let mut directions = Vec::with_capacity(ks.len());
    let mut tensors = Vec::with_capacity(ks.len());
    for &k in ks {
        let (d, info) = pca_direction(params, k)?;
        directions.push(d);
        tensors.push(info);
    }
    let losses = sweep(objective, params, &directions, grid)?;
    let top_sigma = tensors[0].iter().map(|t| t.sigma_1).fold(0.0, f64::max);
    let curve = LandscapeCurve::from_losses(*grid, losses, ks.iter().map(|&k| k as u64).collect(), false)?;
    Ok(PcaLandscape { curve, components: ks.to_vec(), tensors, top_sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_symmetric_with_exact_zero() {
        let g = PerturbGrid::new(0.5, 4).unwrap();
        let a = g.alphas();
        assert_eq!(a.len(), 9);
        assert_eq!(a[4], 0.0);
        for j in 1..=4 {
            assert_eq!(a[4 + j], -a[4 - j]);
        }
        assert_eq!(a[8], 0.5);
        assert!(PerturbGrid::new(0.0, 3).is_err());
        assert!(PerturbGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn single_offset_sharpness() {
        let losses = vec![vec![1.5, 1.0, 1.5]];
        let s = sharpness(&losses, 1);
        assert_eq!(s.value, 0.5);
        assert!(!s.divergent);
    }

    #[test]
    fn constant_surface_is_flat() {
        let losses = vec![vec![2.0; 7]; 3];
        assert_eq!(sharpness(&losses, 3).value, 0.0);
        let (_, var) = mean_and_variance(&losses);
        assert_eq!(direction_variance(&var, 3).value, 0.0);
    }

    #[test]
    fn offset_directions_give_quarter_square_variance() {
        let c: f64 = 0.3;
        let losses: Vec<Vec<f64>> = vec![vec![1.0, 0.5, 2.0, 0.7, 1.1], vec![1.0 + c, 0.5 + c, 2.0 + c, 0.7 + c, 1.1 + c]];
        let (_, var) = mean_and_variance(&losses);
        for v in &var {
            assert!((v - c * c / 4.0).abs() < 1e-15);
        }
        assert!((direction_variance(&var, 2).value - c * c / 4.0).abs() < 1e-15);
    }

    #[test]
    fn divergence_propagates() {
        let losses = vec![vec![1.0, 0.5, f64::INFINITY]];
        let s = sharpness(&losses, 1);
        assert!(s.divergent && s.value.is_infinite());
        let (mean, var) = mean_and_variance(&losses);
        assert!(mean[2].is_infinite() && var[2].is_infinite());
        assert!(direction_variance(&var, 1).divergent);
    }

    #[test]
    fn reductions_work_in_f32() {
        let losses = vec![vec![1.5f32, 1.0, 1.5]];
        assert_eq!(sharpness(&losses, 1).value, 0.5f32);
    }

    #[test]
    fn curve_json_encodes_sentinels_as_null() {
        let g = PerturbGrid::new(1.0, 1).unwrap();
        let c = LandscapeCurve::from_losses(g, vec![vec![f64::INFINITY, 1.0, 2.0]], vec![7], false).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("null"));
        let back: LandscapeCurve = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
