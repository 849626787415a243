use serde::{Deserialize, Serialize};

/// How the attention and MLP projections of every decoder block are parameterised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Plain weight matrix `W`.
    Dense,
    /// `B · σ(A · x)` with a pointwise nonlinearity between the factors.
    Cola,
    /// `(B · A + S) · x` with `S` restricted to a fixed sparse support.
    Sltrain,
    /// Frozen base plus low-rank adapter: `(W + B · A) · x`.
    Adapter,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Cola => "cola",
            LayerKind::Sltrain => "sltrain",
            LayerKind::Adapter => "adapter",
        }
    }
}

/// Nonlinearity between the two factors of a CoLA projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColaActivation {
    #[default]
    Silu,
    /// Test hook: makes the layer a plain low-rank product.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub layer_kind: LayerKind,
    pub rank: usize,
    pub seed: u64,
    #[serde(default = "default_density")]
    pub sltrain_density: f64,
    #[serde(default)]
    pub cola_activation: ColaActivation,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_density() -> f64 {
    0.03
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            layer_kind: LayerKind::Dense,
            rank: 16,
            seed: 0,
            sltrain_density: default_density(),
            cola_activation: ColaActivation::Silu,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Same configuration with a different layer parameterisation.
    pub fn with_kind(&self, kind: LayerKind) -> Self {
        Self { layer_kind: kind, ..self.clone() }
    }

    /// Lists every violated constraint; empty when the configuration is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_size < 2 {
            v.push(format!("model.vocab_size must be ≥ 2 (got {})", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            v.push("model.d_model, n_heads, d_ff and n_layers must be positive".into());
        } else {
            if self.d_model % self.n_heads != 0 {
                v.push(format!(
                    "model.d_model ({}) must be divisible by n_heads ({})",
                    self.d_model, self.n_heads
                ));
            } else if self.head_dim() % 2 != 0 {
                v.push(format!("head dimension {} must be even for rotary encoding", self.head_dim()));
            }
        }
        if self.max_seq_len == 0 {
            v.push("model.max_seq_len must be positive".into());
        }
        if self.layer_kind != LayerKind::Dense {
            let limit = self.d_model.min(self.d_ff);
            if self.rank == 0 || self.rank > limit {
                v.push(format!(
                    "model.rank must lie in 1..={limit} for {} layers (got {})",
                    self.layer_kind.name(),
                    self.rank
                ));
            }
        }
        if !(self.sltrain_density > 0.0 && self.sltrain_density <= 1.0) {
            v.push(format!("model.sltrain_density must lie in (0, 1] (got {})", self.sltrain_density));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 1.0) {
            v.push("model.norm_eps must be > 0 and model.rope_base > 1".into());
        }
        v
    }
}
