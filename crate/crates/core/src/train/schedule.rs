/// Linear warmup over the first `warmup_frac` of training, then cosine decay
/// to `final_frac · peak` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub steps: u64,
    pub warmup_frac: f64,
    pub final_frac: f64,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> u64 {
        ((self.steps as f64 * self.warmup_frac).ceil() as u64).min(self.steps)
    }

    /// Learning rate for update index `t` (0-based).
    pub fn lr(&self, t: u64) -> f64 {
        let w = self.warmup_steps();
        if t < w {
            return self.peak * (t + 1) as f64 / w as f64;
        }
        let span = self.steps.saturating_sub(w).max(1);
        let progress = ((t - w) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.final_frac;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
