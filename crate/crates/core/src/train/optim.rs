//! Adam and the projected (GaLore / Fira) update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

type M = Matrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of one update space plus its step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: M,
    pub v: M,
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { m: M::zeros(rows, cols), v: M::zeros(rows, cols), t: 0 }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.m.shape()
    }

    /// Updates the moments with `grad` and returns the bias-corrected
    /// direction `m̂ / (√v̂ + ε)`.
    pub fn direction(&mut self, grad: &M, hp: &AdamHyper) -> Result<M> {
        if grad.shape() != self.m.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match moments {:?}",
                grad.shape(),
                self.m.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numerical { layer: "gradient".into() });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        let mut out = M::zeros(grad.rows(), grad.cols());
        let (m, v) = (self.m.as_mut_slice(), self.v.as_mut_slice());
        for (i, (o, &g)) in out.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *o = m_hat / (v_hat.sqrt() + hp.eps);
        }
        Ok(out)
    }

    /// `lr · m̂ / (√v̂ + ε)`: the Adam update magnitude in this space.
    pub fn update(&mut self, grad: &M, lr: f64, hp: &AdamHyper) -> Result<M> {
        Ok(self.direction(grad, hp)?.scale(lr))
    }
}

/// One full-rank Adam step applied in place: `θ ← θ − lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(state: &mut AdamMoments, param: &mut M, grad: &M, lr: f64, hp: &AdamHyper) -> Result<()> {
    let upd = state.update(grad, lr, hp)?;
    param.axpy(-1.0, &upd)
}

/// Which side of `G` (m × n) the basis projects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSide {
    /// `P` is `m × r` and `R = Pᵀ G` (used when `m ≤ n`).
    Left,
    /// `Q` is `n × r` and `R = G Q` (used when `m > n`).
    Right,
}

impl ProjectionSide {
    pub fn for_shape(rows: usize, cols: usize) -> Self {
        if rows <= cols {
            ProjectionSide::Left
        } else {
            ProjectionSide::Right
        }
    }
}

/// How the component of `G` outside the projected subspace is treated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Residual {
    /// Dropped (GaLore).
    Discard,
    /// Added back scaled by `‖AdamUpdate(R)‖_F / (‖R‖_F + ε)` (Fira).
    NormScaled,
    /// Added back with a fixed scale; zero reproduces GaLore exactly.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub rank: usize,
    pub refresh_every: u64,
    pub scale: f64,
    pub residual: Residual,
}

/// Optimizer state of one projected tensor: basis plus low-rank moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedState {
    pub side: ProjectionSide,
    pub rank: usize,
    pub basis: Option<M>,
    pub refreshed_at: u64,
    pub moments: AdamMoments,
}

impl ProjectedState {
    /// State for a `rows × cols` tensor; the basis is taken from the first gradient.
    pub fn new(rows: usize, cols: usize, rank: usize) -> Self {
        let side = ProjectionSide::for_shape(rows, cols);
        let rank = rank.clamp(1, rows.min(cols));
        let moments = match side {
            ProjectionSide::Left => AdamMoments::zeros(rank, cols),
            ProjectionSide::Right => AdamMoments::zeros(rows, rank),
        };
        Self { side, rank, basis: None, refreshed_at: 0, moments }
    }

    /// State with a fixed initial basis (m × r for `Left`, n × r for `Right`).
    pub fn with_basis(rows: usize, cols: usize, basis: M) -> Result<Self> {
        let side = ProjectionSide::for_shape(rows, cols);
        let expected = match side {
            ProjectionSide::Left => rows,
            ProjectionSide::Right => cols,
        };
        if basis.rows() != expected || basis.cols() == 0 || basis.cols() > rows.min(cols) {
            return Err(Error::Shape(format!("basis {:?} for a {rows}x{cols} tensor", basis.shape())));
        }
        let mut s = Self::new(rows, cols, basis.cols());
        s.basis = Some(basis);
        Ok(s)
    }

    /// Number of scalars held: both moments plus the basis.
    pub fn num_scalars(&self) -> usize {
        2 * self.moments.m.len() + self.basis.as_ref().map_or(0, Matrix::len)
    }

    fn refresh(&mut self, grad: &M) -> Result<()> {
        let dec = svd(grad)?;
        let k = self.rank;
        let src = match self.side {
            ProjectionSide::Left => &dec.u,
            ProjectionSide::Right => &dec.v,
        };
        self.basis = Some(M::from_fn(src.rows(), k, |i, j| src.get(i, j)));
        self.refreshed_at = self.moments.t;
        Ok(())
    }

    fn project(&self, g: &M) -> Result<M> {
        let p = self.basis.as_ref().expect("basis set before projection");
        match self.side {
            ProjectionSide::Left => p.matmul_tn(g),
            ProjectionSide::Right => g.matmul(p),
        }
    }

    fn back_project(&self, r: &M) -> Result<M> {
        let p = self.basis.as_ref().expect("basis set before projection");
        match self.side {
            ProjectionSide::Left => p.matmul(r),
            ProjectionSide::Right => r.matmul_nt(p),
        }
    }
}

/// Projected update for gradient `G`; the caller applies `θ ← θ − update`.
///
/// `update = α · P · AdamUpdate(R) [+ s · (G − P Pᵀ G)]` with `R = Pᵀ G`
/// (or the right-sided analogue). The basis is recomputed from the top
/// singular vectors of `G` on the first call and every `refresh_every` steps.
pub fn projected_update(
    state: &mut ProjectedState,
    grad: &M,
    lr: f64,
    hp: &AdamHyper,
    cfg: &ProjectionConfig,
) -> Result<M> {
    if !grad.is_finite() {
        return Err(Error::Numerical { layer: "gradient".into() });
    }
    let t = state.moments.t;
    if state.basis.is_none() || (t > 0 && cfg.refresh_every > 0 && t % cfg.refresh_every == 0) {
        state.refresh(grad)?;
    }
    let r = state.project(grad)?;
    let low = state.moments.update(&r, lr, hp)?;
    let mut update = state.back_project(&low)?.scale(cfg.scale);
    let s = match cfg.residual {
        Residual::Discard => 0.0,
        Residual::Fixed(s) => s,
        Residual::NormScaled => low.frobenius_norm() / (r.frobenius_norm() + hp.eps),
    };
    if s != 0.0 {
        let inside = state.back_project(&r)?;
        let residual = grad.sub(&inside)?;
        update.axpy(s, &residual)?;
    }
    Ok(update)
}
