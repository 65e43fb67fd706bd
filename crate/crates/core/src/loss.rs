//! Training objective: per-stage cross-entropy plus a truncated temporal
//! smoothing term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub clamp_floor: f64,
    /// Treat the previous-sample log-probability as a constant.
    pub detach_prev: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.15,
            tau: 4.0,
            clamp_floor: 1e-8,
            detach_prev: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.clamp_floor > 0.0 && self.clamp_floor < 1.0) {
            return Err(Error::Config(format!("clamp_floor must lie in (0, 1), got {}", self.clamp_floor)));
        }
        Ok(())
    }
}

/// Mean negative log-probability of the true class.
pub fn ce_loss(tape: &mut Tape, probs: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    tape.cross_entropy(probs, labels, cfg.clamp_floor)
}

/// Truncated mean squared difference of consecutive log-probabilities.
pub fn tmse_loss(tape: &mut Tape, probs: Var, cfg: &LossConfig) -> Result<Var> {
    tape.tmse(probs, cfg.tau, cfg.clamp_floor, cfg.detach_prev)
}

/// `Σ_s ce_s + λ·tmse_s` over all stages.
pub fn combined_loss(tape: &mut Tape, stages: &[Var], labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in stages {
        let ce = ce_loss(tape, p, labels, cfg)?;
        let tm = tmse_loss(tape, p, cfg)?;
        let tm = tape.scale(tm, cfg.lambda);
        let stage = tape.add(ce, tm)?;
        total = Some(match total {
            None => stage,
            Some(t) => tape.add(t, stage)?,
        });
    }
    total.ok_or_else(|| Error::Config("combined loss needs at least one stage".into()))
}
