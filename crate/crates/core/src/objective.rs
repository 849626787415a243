//! Scalar objectives over a parameter set.

use crate::error::Result;
use crate::model::{Batch, ParamSet, TinyLm};

/// A loss surface over parameter space.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamSet) -> Result<f64>;
}

/// Mean next-token cross-entropy over a fixed validation subset.
#[derive(Clone, Debug)]
pub struct ValidationLoss {
    model: TinyLm,
    batches: Vec<Batch>,
}

impl ValidationLoss {
    pub fn new(model: TinyLm, batches: Vec<Batch>) -> Self {
        Self { model, batches }
    }

    pub fn model(&self) -> &TinyLm {
        &self.model
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }
}

impl Objective for ValidationLoss {
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for b in &self.batches {
            total += self.model.forward_loss(params, b)? * b.num_targets() as f64;
            count += b.num_targets();
        }
        Ok(total / count.max(1) as f64)
    }
}
