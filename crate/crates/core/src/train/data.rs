use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::model::Batch;

/// Token stream split into a training region and a fixed validation subset.
#[derive(Clone, Debug)]
pub struct Dataset {
    train: Vec<u32>,
    validation: Vec<Batch>,
    seq_len: usize,
}

/// Fraction of the token stream reserved for validation windows.
pub const VALIDATION_FRACTION: f64 = 0.1;
const VALIDATION_BATCH_ROWS: usize = 16;

impl Dataset {
    /// Splits `tokens` and draws `val_sequences` windows of `seq_len` tokens
    /// from the held-out tail using `seed`.
    pub fn new(tokens: Vec<u32>, seq_len: usize, val_sequences: usize, seed: u64) -> Result<Self> {
        if seq_len < 2 || val_sequences == 0 {
            return Err(Error::InvalidInput("seq_len must be ≥ 2 and val_sequences ≥ 1".into()));
        }
        let split = tokens.len() - (tokens.len() as f64 * VALIDATION_FRACTION).round() as usize;
        if split < seq_len + 1 || tokens.len() - split < seq_len + 1 {
            return Err(Error::InvalidInput(format!(
                "corpus of {} tokens is too short for windows of {seq_len}",
                tokens.len()
            )));
        }
        let (train, held) = tokens.split_at(split);
        let mut rng = SeededRng::new(seed).child_named("validation");
        let windows: Vec<Vec<u32>> = (0..val_sequences)
            .map(|_| {
                let start = rng.below(held.len() - seq_len + 1);
                held[start..start + seq_len].to_vec()
            })
            .collect();
        let validation = windows
            .chunks(VALIDATION_BATCH_ROWS)
            .map(Batch::from_rows)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train: train.to_vec(), validation, seq_len })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn train_tokens(&self) -> usize {
        self.train.len()
    }

    pub fn validation(&self) -> &[Batch] {
        &self.validation
    }

    /// Training batch for update `step`; depends only on `(seed, step)`.
    pub fn train_batch(&self, seed: u64, step: u64, rows: usize) -> Result<Batch> {
        let mut rng = SeededRng::new(seed).child_named("train-batches").child(step);
        let mut tokens = Vec::with_capacity(rows * self.seq_len);
        for _ in 0..rows {
            let start = rng.below(self.train.len() - self.seq_len + 1);
            tokens.extend_from_slice(&self.train[start..start + self.seq_len]);
        }
        Batch::new(rows, self.seq_len, tokens)
    }
}
