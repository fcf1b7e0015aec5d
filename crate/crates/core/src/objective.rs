//! Classification objective: asymmetric loss over label probabilities,
//! knowledge-to-context regularization, and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing exponent for positive labels.
    pub gamma_pos: f64,
    /// Focusing exponent for negative labels.
    pub gamma_neg: f64,
    /// Weight of the KCR term in the composite loss.
    pub lambda_kcr: f64,
    /// Clamp for log arguments.
    pub prob_clip_eps: f64,
    /// When false the KCR term is dropped from the graph entirely; a
    /// `lambda_kcr = 0` run with the term included is bit-identical.
    #[serde(default = "default_true")]
    pub include_kcr: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 2.0,
            lambda_kcr: 4.0,
            prob_clip_eps: 1e-8,
            include_kcr: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::Config("focusing exponents must be >= 0".into()));
        }
        if self.lambda_kcr < 0.0 {
            return Err(Error::Config("lambda_kcr must be >= 0".into()));
        }
        if !(self.prob_clip_eps > 0.0 && self.prob_clip_eps < 0.5) {
            return Err(Error::Config("prob_clip_eps must be in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Asymmetric loss, mean over labels (nonnegative).
pub fn asl_loss(tape: &Tape, probs: &Tensor, targets: &[f64], cfg: &LossConfig) -> Result<Tensor> {
    tape.asl_loss(probs, targets, cfg.gamma_pos, cfg.gamma_neg, cfg.prob_clip_eps)
}

/// `(1/C) sum_j (1 - cos(t_j_ka, t_j_ca))`; value in `[0, 2]`.
pub fn kcr_loss(tape: &Tape, t_ka: &Tensor, t_ca: &Tensor) -> Result<Tensor> {
    let cos = tape.cosine_rows(t_ka, t_ca)?;
    let mean = tape.mean_vec(&cos)?;
    let neg = tape.scale(&mean, -1.0);
    Ok(tape.add_const(&neg, 1.0))
}

/// `cls + lambda * kcr`.
pub fn total_loss(tape: &Tape, cls: &Tensor, kcr: Option<&Tensor>, cfg: &LossConfig) -> Result<Tensor> {
    match kcr {
        Some(kcr) if cfg.include_kcr => {
            let weighted = tape.scale(kcr, cfg.lambda_kcr);
            tape.add(cls, &weighted)
        }
        _ => Ok(cls.clone()),
    }
}
