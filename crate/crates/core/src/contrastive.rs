//! Contrastive CTC: `L = CTC(truth, x') - gamma * CTC(noisy_decode, x')`.
//!
//! `x'` is an augmented input and the noisy decode is the greedy output of
//! a perturbed forward pass on it. Subtracting the second term pushes down
//! the tokens the perturbed model would wrongly emit while keeping the
//! shared tokens on the CTC direction (scaled by `1 - gamma`).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::confidence::{greedy_decode, ConfidenceMode};
use crate::ctc::{ctc_loss, LabelSeq, LossOutput};
use crate::error::{ConfigError, FstError};
use crate::fst::Emissions;
use crate::model::{Features, ModelError, Perturb, SequenceModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub gamma: f64,
    /// Dropout rate of the perturbed pass that produces the noisy decode.
    pub noise_strength: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            noise_strength: 0.3,
        }
    }
}

impl ContrastiveConfig {
    pub fn new(gamma: f64, noise_strength: f64) -> Result<Self, ConfigError> {
        let cfg = Self { gamma, noise_strength };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ConfigError::OutOfRange {
                name: "gamma",
                value: self.gamma,
                range: "(0, 1)",
            });
        }
        if !(0.0..1.0).contains(&self.noise_strength) {
            return Err(ConfigError::OutOfRange {
                name: "noise_strength",
                value: self.noise_strength,
                range: "[0, 1)",
            });
        }
        Ok(())
    }
}

/// Loss and emission gradient of the contrastive objective.
///
/// `gamma` is taken as given so that `gamma = 0` (plain CTC) can be
/// evaluated. If the decoded label cannot be aligned to the emissions the
/// second term is dropped.
pub fn contrastive_ctc_loss(
    truth: &LabelSeq,
    emissions_aug: &Emissions,
    decoded: &LabelSeq,
    gamma: f64,
) -> Result<LossOutput, FstError> {
    let mut out = ctc_loss(truth, emissions_aug)?;
    if gamma == 0.0 {
        return Ok(out);
    }
    let negative = ctc_loss(decoded, emissions_aug)?;
    if !negative.is_feasible() {
        warn!(
            "noisy decode of length {} is infeasible for {} frames, dropping contrastive term",
            decoded.len(),
            emissions_aug.frames()
        );
        return Ok(out);
    }
    out.loss -= gamma * negative.loss;
    out.grad.add_scaled(&negative.grad, -gamma);
    Ok(out)
}

/// Greedy decode of a dropout-perturbed forward pass, seeded by `seed`.
pub fn generate_noisy_decode(
    model: &SequenceModel,
    input: &Features,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<LabelSeq, ModelError> {
    let perturb = if cfg.noise_strength > 0.0 {
        Perturb::Dropout {
            rate: cfg.noise_strength,
            seed,
        }
    } else {
        Perturb::Off
    };
    let emissions = model.emissions(input, perturb)?;
    Ok(greedy_decode(&emissions, ConfidenceMode::Average).tokens)
}
