use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::model::{LayerKind, ModelConfig};

/// Role of a tensor inside the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Embed,
    AttnNorm,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpNorm,
    Wgate,
    Wup,
    Wdown,
    FinalNorm,
    Head,
}

impl Role {
    pub const PROJECTIONS: [Role; 7] =
        [Role::Wq, Role::Wk, Role::Wv, Role::Wo, Role::Wgate, Role::Wup, Role::Wdown];

    pub fn name(self) -> &'static str {
        match self {
            Role::Embed => "embed",
            Role::AttnNorm => "attn_norm",
            Role::Wq => "wq",
            Role::Wk => "wk",
            Role::Wv => "wv",
            Role::Wo => "wo",
            Role::MlpNorm => "mlp_norm",
            Role::Wgate => "wgate",
            Role::Wup => "wup",
            Role::Wdown => "wdown",
            Role::FinalNorm => "final_norm",
            Role::Head => "head",
        }
    }

    /// Attention or MLP projection matrix (the tensors low-rank methods act on).
    pub fn is_projection(self) -> bool {
        Self::PROJECTIONS.contains(&self)
    }

    /// `(out, in)` dimensions of a projection.
    pub fn projection_dims(self, cfg: &ModelConfig) -> Option<(usize, usize)> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        match self {
            Role::Wq | Role::Wk | Role::Wv | Role::Wo => Some((d, d)),
            Role::Wgate | Role::Wup => Some((f, d)),
            Role::Wdown => Some((d, f)),
            _ => None,
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        const ALL: [Role; 12] = [
            Role::Embed,
            Role::AttnNorm,
            Role::Wq,
            Role::Wk,
            Role::Wv,
            Role::Wo,
            Role::MlpNorm,
            Role::Wgate,
            Role::Wup,
            Role::Wdown,
            Role::FinalNorm,
            Role::Head,
        ];
        ALL.into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown tensor role `{s}`")))
    }
}

/// Which factor of a (possibly factored) projection a tensor holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    /// Dense weight, or the frozen base of an adapter layer.
    Weight,
    /// Down factor, `r × in`.
    A,
    /// Up factor, `out × r`.
    B,
    /// Sparse component on a fixed support, `out × in`.
    Sparse,
}

impl Part {
    fn suffix(self) -> Option<&'static str> {
        match self {
            Part::Weight => None,
            Part::A => Some("a"),
            Part::B => Some("b"),
            Part::Sparse => Some("s"),
        }
    }
}

/// Tensor name: `embed`, `head`, `final_norm`, `layers.{i}.{role}[.a|.b|.s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub role: Role,
    pub part: Part,
}

impl ParamKey {
    pub const fn global(role: Role) -> Self {
        Self { layer: None, role, part: Part::Weight }
    }

    pub const fn layer(layer: usize, role: Role, part: Part) -> Self {
        Self { layer: Some(layer), role, part }
    }

    pub fn is_projection(&self) -> bool {
        self.role.is_projection()
    }

    /// The dense-schema key this tensor contributes to.
    pub fn dense_key(&self) -> Self {
        Self { part: Part::Weight, ..*self }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "layers.{l}.")?;
        }
        f.write_str(self.role.name())?;
        if let Some(s) = self.part.suffix() {
            write!(f, ".{s}")?;
        }
        Ok(())
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed tensor name `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let (layer, rest) = if parts[0] == "layers" {
            let l = parts.get(1).and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            (Some(l), &parts[2..])
        } else {
            (None, &parts[..])
        };
        let role: Role = rest.first().ok_or_else(bad)?.parse()?;
        let part = match rest.get(1) {
            None => Part::Weight,
            Some(&"a") => Part::A,
            Some(&"b") => Part::B,
            Some(&"s") => Part::Sparse,
            Some(_) => return Err(bad()),
        };
        if rest.len() > 2 || layer.is_some() == matches!(role, Role::Embed | Role::Head | Role::FinalNorm) {
            return Err(bad());
        }
        Ok(Self { layer, role, part })
    }
}

impl Serialize for ParamKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tensor names and shapes required by a configuration, in key order.
pub fn schema(cfg: &ModelConfig) -> Vec<(ParamKey, (usize, usize))> {
    let (v, d, r) = (cfg.vocab_size, cfg.d_model, cfg.rank);
    let mut out = vec![
        (ParamKey::global(Role::Embed), (v, d)),
        (ParamKey::global(Role::FinalNorm), (1, d)),
        (ParamKey::global(Role::Head), (v, d)),
    ];
    for l in 0..cfg.n_layers {
        out.push((ParamKey::layer(l, Role::AttnNorm, Part::Weight), (1, d)));
        out.push((ParamKey::layer(l, Role::MlpNorm, Part::Weight), (1, d)));
        for role in Role::PROJECTIONS {
            let (o, i) = role.projection_dims(cfg).expect("projection role");
            let key = |part| ParamKey::layer(l, role, part);
            match cfg.layer_kind {
                LayerKind::Dense => out.push((key(Part::Weight), (o, i))),
                LayerKind::Adapter => {
                    out.push((key(Part::Weight), (o, i)));
                    out.push((key(Part::A), (r, i)));
                    out.push((key(Part::B), (o, r)));
                }
                LayerKind::Cola => {
                    out.push((key(Part::A), (r, i)));
                    out.push((key(Part::B), (o, r)));
                }
                LayerKind::Sltrain => {
                    out.push((key(Part::A), (r, i)));
                    out.push((key(Part::B), (o, r)));
                    out.push((key(Part::Sparse), (o, i)));
                }
            }
        }
    }
    out.sort_by_key(|(k, _)| *k);
    out
}

/// Named collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<ParamKey, Matrix<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, value: Matrix<f64>) -> Option<Matrix<f64>> {
        self.tensors.insert(key, value)
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Matrix<f64>> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Matrix<f64>> {
        self.tensors.get_mut(key)
    }

    /// Tensor lookup that reports a schema error when absent.
    pub fn tensor(&self, key: &ParamKey) -> Result<&Matrix<f64>> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{key}`")))
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.tensors.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Matrix<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Matrix<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, m)| (*k, Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    fn check_same_schema(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape("parameter sets have different tensor counts".into()));
        }
        for ((ka, a), (kb, b)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{ka}` {:?} does not match `{kb}` {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// `(1 − β)·self + β·other` over every tensor.
    pub fn lerp(&self, other: &Self, beta: f64) -> Result<Self> {
        self.check_same_schema(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|((k, a), (_, b))| Ok((*k, a.lerp(b, beta)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    /// `other − self` over every tensor.
    pub fn delta_to(&self, other: &Self) -> Result<Self> {
        self.check_same_schema(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|((k, a), (_, b))| Ok((*k, b.sub(a)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    /// Adds `alpha · direction[k]` to every tensor named in `direction`.
    pub fn perturbed(&self, direction: &Self, alpha: f64) -> Result<Self> {
        let mut out = self.clone();
        for (k, d) in &direction.tensors {
            let t = out
                .tensors
                .get_mut(k)
                .ok_or_else(|| Error::Schema(format!("direction names unknown tensor `{k}`")))?;
            t.axpy(alpha, d)?;
        }
        Ok(out)
    }

    /// Checks that exactly the tensors of `cfg`'s schema are present with the right shapes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = schema(cfg);
        let mut problems = Vec::new();
        for (k, shape) in &expected {
            match self.tensors.get(k) {
                None => problems.push(format!("missing `{k}`")),
                Some(m) if m.shape() != *shape => {
                    problems.push(format!("`{k}` has shape {:?}, expected {shape:?}", m.shape()))
                }
                Some(m) if !m.is_finite() => problems.push(format!("`{k}` has non-finite entries")),
                _ => {}
            }
        }
        for k in self.tensors.keys() {
            if !expected.iter().any(|(e, _)| e == k) {
                problems.push(format!("unexpected `{k}` for {} layers", cfg.layer_kind.name()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(problems.join("; ")))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_schema(other)?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.sub(b).map(|d| d.max_abs()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max))
    }
}

impl FromIterator<(ParamKey, Matrix<f64>)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (ParamKey, Matrix<f64>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

impl IntoIterator for ParamSet {
    type Item = (ParamKey, Matrix<f64>);
    type IntoIter = std::collections::btree_map::IntoIter<ParamKey, Matrix<f64>>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

pub(crate) const INIT_STD: f64 = 0.02;

/// Deterministic initialisation. Each tensor draws from a child stream keyed by
/// its name, so shared tensors (embeddings, dense bases) coincide across layer
/// kinds with the same seed.
pub fn init_params(cfg: &ModelConfig) -> ParamSet {
    let root = SeededRng::new(cfg.seed);
    let mut out = ParamSet::new();
    for (key, (rows, cols)) in schema(cfg) {
        let stream_name = match key.part {
            Part::Weight => key.to_string(),
            _ => format!("{key}@{}", cfg.layer_kind.name()),
        };
        let mut rng = root.child_named(&stream_name);
        let m = match (key.role, key.part) {
            (Role::AttnNorm | Role::MlpNorm | Role::FinalNorm, _) => Matrix::from_fn(rows, cols, |_, _| 1.0),
            (_, Part::Weight) => Matrix::from_fn(rows, cols, |_, _| rng.truncated_normal(INIT_STD)),
            (_, Part::A) => init_down_factor(cfg, rows, cols, &mut rng),
            (_, Part::B) => init_up_factor(cfg, rows, cols, &mut rng),
            (_, Part::Sparse) => Matrix::from_fn(rows, cols, |_, _| rng.truncated_normal(INIT_STD)),
        };
        out.insert(key, m);
    }
    out
}

/// Std of each factor so that `B·A` has entry variance `INIT_STD²`.
fn factor_std(rank: usize) -> f64 {
    (INIT_STD / (rank as f64).sqrt()).sqrt()
}

pub(crate) fn init_down_factor(cfg: &ModelConfig, rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix<f64> {
    let std = match cfg.layer_kind {
        // Kaiming-style scale; paired with a zero up factor.
        LayerKind::Adapter => 1.0 / (cols as f64).sqrt(),
        _ => factor_std(cfg.rank),
    };
    Matrix::from_fn(rows, cols, |_, _| rng.truncated_normal(std))
}

fn init_up_factor(cfg: &ModelConfig, rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix<f64> {
    match cfg.layer_kind {
        LayerKind::Adapter => Matrix::zeros(rows, cols),
        // SiLU halves small pre-activations, so the CoLA up factor is doubled.
        LayerKind::Cola => Matrix::from_fn(rows, cols, |_, _| 2.0 * rng.truncated_normal(factor_std(cfg.rank))),
        _ => Matrix::from_fn(rows, cols, |_, _| rng.truncated_normal(factor_std(cfg.rank))),
    }
}
