//! Desk-scale LLaMA-style decoder: RMSNorm, rotary causal attention, SwiGLU
//! MLP, untied output head, with hand-derived reverse-mode gradients.

mod config;
mod forward;
mod params;
mod tokenizer;

pub use config::{ColaActivation, LayerKind, ModelConfig};
pub use forward::TinyLm;
pub use params::{init_params, schema, ParamKey, ParamSet, Part, Role};
pub(crate) use params::init_down_factor;
pub use tokenizer::Tokenizer;

use crate::error::{Error, Result};

/// Token grid of `rows × seq_len`; targets are the inputs shifted by one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    rows: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl Batch {
    pub fn new(rows: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != rows * seq_len || rows == 0 || seq_len < 2 {
            return Err(Error::Shape(format!(
                "batch of {rows}x{seq_len} (seq_len ≥ 2) cannot hold {} tokens",
                tokens.len()
            )));
        }
        Ok(Self { rows, seq_len, tokens })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::Shape("ragged batch rows".into()));
        }
        Self::new(rows.len(), seq_len, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// Number of positions that carry a next-token target.
    pub fn num_targets(&self) -> usize {
        self.rows * (self.seq_len - 1)
    }

    /// Rows concatenated with another batch of the same sequence length.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.seq_len != other.seq_len {
            return Err(Error::Shape("cannot concatenate batches of different length".into()));
        }
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        Batch::new(self.rows + other.rows, self.seq_len, tokens)
    }
}
