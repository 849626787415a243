//! The six pre-training regimes and the checkpointing training loop.

mod data;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use data::{Dataset, VALIDATION_FRACTION};
pub use optim::{
    adam_step, projected_update, AdamHyper, AdamMoments, ProjectedState, ProjectionConfig, ProjectionSide, Residual,
};
pub use schedule::LrSchedule;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::model::{init_down_factor, LayerKind, ModelConfig, ParamKey, ParamSet, Part, Role, TinyLm};
use crate::objective::{Objective, ValidationLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullRank,
    Galore,
    Fira,
    Cola,
    Sltrain,
    Relora,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::FullRank, Method::Galore, Method::Fira, Method::Cola, Method::Sltrain, Method::Relora];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullRank => "full_rank",
            Method::Galore => "galore",
            Method::Fira => "fira",
            Method::Cola => "cola",
            Method::Sltrain => "sltrain",
            Method::Relora => "relora",
        }
    }

    /// Layer parameterisation the method trains.
    pub fn layer_kind(self) -> LayerKind {
        match self {
            Method::FullRank | Method::Galore | Method::Fira => LayerKind::Dense,
            Method::Cola => LayerKind::Cola,
            Method::Sltrain => LayerKind::Sltrain,
            Method::Relora => LayerKind::Adapter,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Projection rank for GaLore / Fira.
    pub rank: usize,
    #[serde(default = "default_galore_refresh")]
    pub galore_refresh: u64,
    #[serde(default = "default_galore_scale")]
    pub galore_scale: f64,
    #[serde(default = "default_relora_reset")]
    pub relora_reset: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_final_lr_frac")]
    pub final_lr_frac: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_galore_refresh() -> u64 {
    200
}
fn default_galore_scale() -> f64 {
    0.25
}
fn default_relora_reset() -> u64 {
    500
}
fn default_warmup_frac() -> f64 {
    0.1
}
fn default_final_lr_frac() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::FullRank,
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            rank: 16,
            galore_refresh: default_galore_refresh(),
            galore_scale: default_galore_scale(),
            relora_reset: default_relora_reset(),
            checkpoint_every: 500,
            seed: 0,
            warmup_frac: default_warmup_frac(),
            final_lr_frac: default_final_lr_frac(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push("train.steps must be > 0".to_string());
        }
        if self.checkpoint_every == 0 || (self.steps > 0 && self.steps % self.checkpoint_every != 0) {
            v.push(format!(
                "train.checkpoint_every ({}) must divide train.steps ({})",
                self.checkpoint_every, self.steps
            ));
        }
        if self.rank == 0 {
            v.push("train.rank must be ≥ 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be ≥ 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            v.push(format!("train.lr must be finite and ≥ 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("train.beta1 and train.beta2 must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            v.push("train.eps must be > 0".to_string());
        }
        if self.galore_refresh == 0 || self.relora_reset == 0 {
            v.push("train.galore_refresh and train.relora_reset must be ≥ 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            v.push("train.warmup_frac and train.final_lr_frac must lie in [0, 1]".to_string());
        }
        v
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak: self.lr, steps: self.steps, warmup_frac: self.warmup_frac, final_frac: self.final_lr_frac }
    }

    pub fn projection(&self) -> Option<ProjectionConfig> {
        let residual = match self.method {
            Method::Galore => Residual::Discard,
            Method::Fira => Residual::NormScaled,
            _ => return None,
        };
        Some(ProjectionConfig {
            rank: self.rank,
            refresh_every: self.galore_refresh,
            scale: self.galore_scale,
            residual,
        })
    }

    /// Steps at which checkpoints are written: 0, every interval, and the last.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let every = self.checkpoint_every.max(1);
        (0..=self.steps / every).map(|i| i * every).collect()
    }
}

/// Per-tensor optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorState {
    Adam(AdamMoments),
    Projected(ProjectedState),
    /// Not updated (ReLoRA base weights between merges).
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    hyper: AdamHyper,
    projection: Option<ProjectionConfig>,
    tensors: BTreeMap<ParamKey, TensorState>,
}

impl OptimizerState {
    /// Fresh state for every tensor of `params` under `method`.
    pub fn new(method: Method, params: &ParamSet, cfg: &TrainConfig) -> Self {
        let projection = cfg.projection();
        let tensors = params
            .iter()
            .map(|(key, m)| {
                let (rows, cols) = m.shape();
                let state = match (method, key.part) {
                    (Method::Galore | Method::Fira, Part::Weight) if key.role.is_projection() => {
                        TensorState::Projected(ProjectedState::new(rows, cols, cfg.rank))
                    }
                    (Method::Relora, Part::Weight) if key.role.is_projection() => TensorState::Frozen,
                    _ => TensorState::Adam(AdamMoments::zeros(rows, cols)),
                };
                (*key, state)
            })
            .collect();
        Self { hyper: cfg.hyper(), projection, tensors }
    }

    pub fn get(&self, key: &ParamKey) -> Option<&TensorState> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut TensorState> {
        self.tensors.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &TensorState)> {
        self.tensors.iter()
    }

    /// Scalars held across all moments and bases.
    pub fn num_scalars(&self) -> usize {
        self.tensors
            .values()
            .map(|s| match s {
                TensorState::Adam(m) => 2 * m.m.len(),
                TensorState::Projected(p) => p.num_scalars(),
                TensorState::Frozen => 0,
            })
            .sum()
    }

    /// Applies one update to every tensor. Gradients are checked for
    /// finiteness first so a failed step leaves `params` untouched.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        for (key, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Numerical { layer: key.to_string() });
            }
        }
        for (key, state) in self.tensors.iter_mut() {
            let g = grads.tensor(key)?;
            let p = params
                .get_mut(key)
                .ok_or_else(|| Error::Schema(format!("optimizer tensor `{key}` missing from params")))?;
            match state {
                TensorState::Adam(m) => adam_step(m, p, g, lr, &self.hyper)?,
                TensorState::Projected(s) => {
                    let cfg = self.projection.as_ref().expect("projected state implies a projection config");
                    let upd = projected_update(s, g, lr, &self.hyper, cfg)?;
                    p.axpy(-1.0, &upd)?;
                }
                TensorState::Frozen => {}
            }
        }
        Ok(())
    }
}

/// Merges every adapter into its base weight (`W ← W + B·A`), redraws `A`
/// from the `cycle`-th reset stream, zeroes `B`, and zeroes the adapter moments.
pub fn relora_merge(params: &mut ParamSet, state: &mut OptimizerState, cfg: &ModelConfig, cycle: u64) -> Result<()> {
    if cfg.layer_kind != LayerKind::Adapter {
        return Err(Error::InvalidInput(format!("ReLoRA merge on a `{}` model", cfg.layer_kind.name())));
    }
    let root = SeededRng::new(cfg.seed);
    for l in 0..cfg.n_layers {
        for role in Role::PROJECTIONS {
            let (wk, ak, bk) = (
                ParamKey::layer(l, role, Part::Weight),
                ParamKey::layer(l, role, Part::A),
                ParamKey::layer(l, role, Part::B),
            );
            let ba = params.tensor(&bk)?.matmul(params.tensor(&ak)?)?;
            params.get_mut(&wk).ok_or_else(|| Error::Schema(format!("missing `{wk}`")))?.axpy(1.0, &ba)?;
            let (ar, ac) = params.tensor(&ak)?.shape();
            let (br, bc) = params.tensor(&bk)?.shape();
            let mut rng = root.child_named(&format!("{ak}@relora/{cycle}"));
            params.insert(ak, init_down_factor(cfg, ar, ac, &mut rng));
            params.insert(bk, Matrix::zeros(br, bc));
            for (key, rows, cols) in [(ak, ar, ac), (bk, br, bc)] {
                if let Some(s) = state.get_mut(&key) {
                    *s = TensorState::Adam(AdamMoments::zeros(rows, cols));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub id: String,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoints: Vec<CheckpointEntry>,
    /// Set when the run stopped early; holds the error message.
    #[serde(default)]
    pub aborted: Option<String>,
}

/// Receives checkpoints as they are produced.
pub trait RunSink {
    /// Stores the parameters at `step` and returns the checkpoint id.
    fn checkpoint(&mut self, step: u64, params: &ParamSet) -> Result<String>;

    /// Called once with the final (possibly partial) record.
    fn finish(&mut self, _record: &RunRecord) -> Result<()> {
        Ok(())
    }
}

/// Keeps checkpoints in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub checkpoints: Vec<(u64, ParamSet)>,
    pub record: Option<RunRecord>,
}

impl RunSink for MemorySink {
    fn checkpoint(&mut self, step: u64, params: &ParamSet) -> Result<String> {
        self.checkpoints.push((step, params.clone()));
        Ok(format!("step-{step:06}"))
    }

    fn finish(&mut self, record: &RunRecord) -> Result<()> {
        self.record = Some(record.clone());
        Ok(())
    }
}

/// Trains `model_cfg` under `cfg.method` and reports checkpoints to `sink`.
///
/// The initial weights depend only on `model_cfg.seed` and the batch order
/// only on `cfg.seed`, so runs that share seeds see identical data.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset, sink: &mut dyn RunSink) -> Result<RunRecord> {
    let mut problems = cfg.violations();
    if model_cfg.layer_kind != cfg.method.layer_kind() {
        problems.push(format!(
            "method `{}` trains `{}` layers but the model config has `{}`",
            cfg.method,
            cfg.method.layer_kind().name(),
            model_cfg.layer_kind.name()
        ));
    }
    if data.seq_len() > model_cfg.max_seq_len {
        problems.push(format!("seq_len {} exceeds model.max_seq_len {}", data.seq_len(), model_cfg.max_seq_len));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let model = TinyLm::new(model_cfg.clone())?;
    let val = ValidationLoss::new(model.clone(), data.validation().to_vec());
    let mut params = model.init_params();
    let mut opt = OptimizerState::new(cfg.method, &params, cfg);
    let schedule = cfg.schedule();
    let mut record = RunRecord {
        method: cfg.method,
        model: model_cfg.clone(),
        train: cfg.clone(),
        checkpoints: Vec::new(),
        aborted: None,
    };

    let mut emit = |record: &mut RunRecord, step: u64, train_loss: f64, params: &ParamSet| -> Result<()> {
        let val_loss = val.loss(params)?;
        let id = sink.checkpoint(step, params)?;
        record.checkpoints.push(CheckpointEntry { step, id, train_loss, val_loss });
        Ok(())
    };

    let outcome = (|| -> Result<()> {
        let first = data.train_batch(cfg.seed, 0, cfg.batch_size)?;
        let initial = model.forward_loss(&params, &first)?;
        emit(&mut record, 0, initial, &params)?;
        let (mut window, mut window_n) = (0.0, 0u64);
        for t in 0..cfg.steps {
            let batch = data.train_batch(cfg.seed, t, cfg.batch_size)?;
            let (loss, grads) = model.forward_grads(&params, &batch)?;
            opt.apply(&mut params, &grads, schedule.lr(t))?;
            window += loss;
            window_n += 1;
            let done = t + 1;
            if cfg.method == Method::Relora && done % cfg.relora_reset == 0 && done < cfg.steps {
                relora_merge(&mut params, &mut opt, model_cfg, done / cfg.relora_reset)?;
            }
            if done % cfg.checkpoint_every == 0 {
                emit(&mut record, done, window / window_n as f64, &params)?;
                (window, window_n) = (0.0, 0);
            }
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        record.aborted = Some(e.to_string());
        sink.finish(&record)?;
        return Err(e);
    }
    sink.finish(&record)?;
    Ok(record)
}
