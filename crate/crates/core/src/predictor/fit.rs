use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to the Gram diagonal when the plain normal equations are singular.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    /// Set when the ridge fallback was needed.
    pub ridge: bool,
}

impl LinearFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, w)| x * w).sum::<f64>()
    }
}

/// In-place Cholesky of a symmetric positive-definite matrix; `None` if a
/// pivot is not clearly positive.
fn cholesky(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if !(d > 1e-13 * scale) {
            return None;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    Some(a)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

/// Ordinary least squares with intercept via the normal equations; on a
/// singular Gram the solve is retried with `RIDGE_FALLBACK` on the
/// non-intercept diagonal.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n != y.len() || x.iter().any(|r| r.len() != p) {
        return Err(Error::Shape(format!("design of {n} rows vs {} targets", y.len())));
    }
    if n <= p + 1 {
        return Err(Error::InvalidInput(format!("need more rows ({n}) than parameters ({})", p + 1)));
    }
    let row = |i: usize| std::iter::once(1.0).chain(x[i].iter().copied());
    let q = p + 1;
    let mut gram = vec![vec![0.0; q]; q];
    let mut rhs = vec![0.0; q];
    for i in 0..n {
        let r: Vec<f64> = row(i).collect();
        for a in 0..q {
            rhs[a] += r[a] * y[i];
            for b in 0..=a {
                gram[a][b] += r[a] * r[b];
            }
        }
    }
    for a in 0..q {
        for b in a + 1..q {
            gram[a][b] = gram[b][a];
        }
    }
    let (l, ridge) = match cholesky(gram.clone()) {
        Some(l) => (l, false),
        None => {
            for (a, g) in gram.iter_mut().enumerate().skip(1) {
                g[a] += RIDGE_FALLBACK;
            }
            (cholesky(gram).ok_or(Error::SingularDesign)?, true)
        }
    };
    let beta = cholesky_solve(&l, &rhs);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::SingularDesign);
    }
    let fit = LinearFit { intercept: beta[0], coefficients: beta[1..].to_vec(), r2: 0.0, ridge };
    let my = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = (0..n).map(|i| (y[i] - fit.predict(&x[i])).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit { r2, ..fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_feature_line() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| 2.0 * i as f64 + 1.0).collect();
        let f = fit_linear(&x, &y).unwrap();
        assert!((f.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(!f.ridge);
    }

    #[test]
    fn duplicated_column_uses_ridge() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| 3.0 * i as f64).collect();
        let f = fit_linear(&x, &y).unwrap();
        assert!(f.ridge);
        assert!((f.coefficients[0] + f.coefficients[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_rows() {
        let x = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![0.0, 0.0]];
        assert!(matches!(fit_linear(&x, &[1.0, 2.0, 3.0]), Err(Error::InvalidInput(_))));
    }
}
