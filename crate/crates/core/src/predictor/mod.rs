//! Linear prediction of a downstream score from per-checkpoint features,
//! with grouped cross-validation and a sign-consistency feature screen.

mod fit;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use fit::{fit_linear, LinearFit, RIDGE_FALLBACK};
pub use stats::{average_ranks, median, pearson, spearman};

use crate::error::{Error, Result};
use crate::linalg::SeededRng;

/// Predictor features in column order: validation loss followed by the
/// eight geometry features.
pub const FEATURES: [&str; 9] = [
    "val_loss",
    "barrier_consec",
    "act_cka_mean",
    "act_l2_mean",
    "stable_rank_dW",
    "eff_rank_dW",
    "threshold_rank_W",
    "spectral_gap_dW",
    "stable_rank_W",
];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowLabel {
    pub method: String,
    pub size: String,
    pub step: u64,
}

impl RowLabel {
    pub fn new(method: impl Into<String>, size: impl Into<String>, step: u64) -> Self {
        Self { method: method.into(), size: size.into(), step }
    }
}

impl std::fmt::Display for RowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/step-{}", self.method, self.size, self.step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub labels: Vec<RowLabel>,
    pub x: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl FeatureMatrix {
    /// Assembles the selected columns; any absent cell is an error naming the checkpoint.
    pub fn build(
        names: &[&str],
        rows: &BTreeMap<RowLabel, BTreeMap<String, f64>>,
        targets: &BTreeMap<RowLabel, f64>,
    ) -> Result<Self> {
        let mut labels = Vec::new();
        let mut x = Vec::new();
        let mut target = Vec::new();
        for (label, metrics) in rows {
            let row = names
                .iter()
                .map(|&n| {
                    metrics.get(n).copied().filter(|v| v.is_finite()).ok_or_else(|| Error::MissingFeature {
                        feature: n.to_string(),
                        checkpoint: label.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let t = targets
                .get(label)
                .copied()
                .ok_or_else(|| Error::MissingFeature { feature: "target".into(), checkpoint: label.to_string() })?;
            labels.push(label.clone());
            x.push(row);
            target.push(t);
        }
        Ok(Self { names: names.iter().map(|s| s.to_string()).collect(), labels, x, target })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.x.iter().map(|r| r[j]).collect()
    }

    /// Columns with zero variance over all rows.
    pub fn degenerate_columns(&self) -> Vec<String> {
        (0..self.names.len())
            .filter(|&j| {
                let c = self.column(j);
                c.iter().all(|&v| v == c[0])
            })
            .map(|j| self.names[j].clone())
            .collect()
    }

    /// Fails with [`Error::DegenerateFeature`] on the first constant column.
    pub fn check_nondegenerate(&self) -> Result<()> {
        match self.degenerate_columns().into_iter().next() {
            Some(name) => Err(Error::DegenerateFeature(name)),
            None => Ok(()),
        }
    }

    /// Copy restricted to the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| Error::InvalidInput(format!("no feature column `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: names.to_vec(),
            labels: self.labels.clone(),
            x: self.x.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
            target: self.target.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvScheme {
    /// Leave one size group out.
    Loso,
    /// Leave one method out.
    Lomo,
}

impl CvScheme {
    pub fn group<'a>(&self, label: &'a RowLabel) -> &'a str {
        match self {
            CvScheme::Loso => &label.size,
            CvScheme::Lomo => &label.method,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CvScheme::Loso => "loso",
            CvScheme::Lomo => "lomo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out_group: String,
    pub held_out: Vec<usize>,
    pub fit: LinearFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub scheme: CvScheme,
    pub features: Vec<String>,
    /// Fit on all rows with all-row standardisation.
    pub full: LinearFit,
    pub folds: Vec<Fold>,
    /// Held-out prediction for every row.
    pub predictions: Vec<f64>,
    pub pearson: f64,
    pub spearman: f64,
}

/// Column means and standard deviations of `rows` of `x`.
fn standardizer(x: &[Vec<f64>], rows: &[usize], names: &[String]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len() as f64;
    (0..names.len())
        .map(|j| {
            let mean = rows.iter().map(|&i| x[i][j]).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (x[i][j] - mean).powi(2)).sum::<f64>() / n;
            if var == 0.0 {
                return Err(Error::DegenerateFeature(names[j].clone()));
            }
            Ok((mean, var.sqrt()))
        })
        .collect()
}

fn standardize(row: &[f64], stats: &[(f64, f64)]) -> Vec<f64> {
    row.iter().zip(stats).map(|(v, (m, s))| (v - m) / s).collect()
}

/// Fits on every fold's training rows (z-scored with training statistics
/// only) and predicts its held-out group.
pub fn cross_validate(fm: &FeatureMatrix, scheme: CvScheme) -> Result<FitResult> {
    let groups: BTreeSet<&str> = fm.labels.iter().map(|l| scheme.group(l)).collect();
    if groups.len() < 2 {
        return Err(Error::InsufficientGroups(groups.len()));
    }
    let all: Vec<usize> = (0..fm.len()).collect();
    let full_stats = standardizer(&fm.x, &all, &fm.names)?;
    let full_x: Vec<Vec<f64>> = fm.x.iter().map(|r| standardize(r, &full_stats)).collect();
    let full = fit_linear(&full_x, &fm.target)?;

    let mut predictions = vec![f64::NAN; fm.len()];
    let mut folds = Vec::with_capacity(groups.len());
    for g in groups {
        let (test, train): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| scheme.group(&fm.labels[i]) == g);
        let stats = standardizer(&fm.x, &train, &fm.names)?;
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| standardize(&fm.x[i], &stats)).collect();
        let ys: Vec<f64> = train.iter().map(|&i| fm.target[i]).collect();
        let fit = fit_linear(&xs, &ys)?;
        for &i in &test {
            predictions[i] = fit.predict(&standardize(&fm.x[i], &stats));
        }
        folds.push(Fold { held_out_group: g.to_string(), held_out: test, fit });
    }
    Ok(FitResult {
        scheme,
        features: fm.names.clone(),
        full,
        pearson: pearson(&predictions, &fm.target)?,
        spearman: spearman(&predictions, &fm.target)?,
        folds,
        predictions,
    })
}

/// One feature's Spearman correlation with the target in each group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCorrelations {
    pub feature: String,
    pub groups: Vec<String>,
    pub rho: Vec<f64>,
}

/// Per-size-group Spearman correlation of every feature with the target.
/// A constant feature within a group yields `NaN` there.
pub fn per_group_spearman(fm: &FeatureMatrix) -> Result<Vec<GroupCorrelations>> {
    let groups: BTreeSet<&str> = fm.labels.iter().map(|l| l.size.as_str()).collect();
    let rows: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| (0..fm.len()).filter(|&i| fm.labels[i].size == *g).collect())
        .collect();
    fm.names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let rho = rows
                .iter()
                .map(|idx| {
                    let x: Vec<f64> = idx.iter().map(|&i| fm.x[i][j]).collect();
                    let y: Vec<f64> = idx.iter().map(|&i| fm.target[i]).collect();
                    match spearman(&x, &y) {
                        Ok(r) => Ok(r),
                        Err(Error::DegenerateInput(_)) => Ok(f64::NAN),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupCorrelations { feature: name.clone(), groups: groups.iter().map(|g| g.to_string()).collect(), rho })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenedFeature {
    pub feature: String,
    pub median_abs_rho: f64,
    pub sign: i8,
}

/// Keeps features whose correlation has the same strict sign in every group,
/// ordered by `|median ρ|` descending; ties keep input order.
pub fn sign_consistency_screen(table: &[GroupCorrelations]) -> Vec<ScreenedFeature> {
    let mut kept: Vec<ScreenedFeature> = table
        .iter()
        .filter_map(|row| {
            let positive = row.rho.iter().all(|&r| r > 0.0);
            let negative = row.rho.iter().all(|&r| r < 0.0);
            if row.rho.is_empty() || !(positive || negative) {
                return None;
            }
            let m = median(&row.rho)?;
            Some(ScreenedFeature { feature: row.feature.clone(), median_abs_rho: m.abs(), sign: if positive { 1 } else { -1 } })
        })
        .collect();
    kept.sort_by(|a, b| b.median_abs_rho.total_cmp(&a.median_abs_rho));
    kept
}

/// Synthetic checkpoints with a planted linear target: features are
/// standard normal, `y = X·w + ε` with `std(ε) = noise · std(X·w)`.
/// Rows cycle through `methods × sizes` group labels.
pub fn planted_linear(n: usize, noise: f64, methods: usize, sizes: usize, seed: u64) -> FeatureMatrix {
    let mut rng = SeededRng::new(seed).child_named("planted-linear");
    let p = FEATURES.len();
    let w: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.normal()).collect()).collect();
    let signal: Vec<f64> = x.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let sd = (signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let target = signal.iter().map(|s| s + noise * sd * rng.normal()).collect();
    let labels = (0..n)
        .map(|i| RowLabel::new(format!("m{}", i % methods), format!("s{}", (i / methods) % sizes), i as u64))
        .collect();
    FeatureMatrix { names: FEATURES.iter().map(|s| s.to_string()).collect(), labels, x, target }
}
