//! Automatic confidence threshold.
//!
//! Three exponential moving averages are tracked: the mean confidence of
//! incorrectly decoded labeled tokens (`t_e`), the mean confidence of all
//! labeled tokens (`t_l`) and of all unlabeled tokens (`t_u`). The threshold
//! is `t_e`, optionally rescaled by `t_u / t_l` to follow the confidence
//! level of the unlabeled domain.
//!
//! Each average is seeded with its first observed batch value instead of
//! starting from zero.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::AlignmentVerdict;
use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("threshold accumulators have not seen enough data yet")]
pub struct NotReady;

/// One moving average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    value: Option<f64>,
}

impl Ema {
    pub fn get(&self) -> Option<f64> {
        self.value
    }

    /// `value <- (1 - decay) * x + decay * value`; the first sample is taken
    /// as is.
    pub fn update(&mut self, x: f64, decay: f64) {
        self.value = Some(match self.value {
            None => x,
            Some(prev) => (1.0 - decay) * x + decay * prev,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    decay: f64,
    pub t_e: Ema,
    pub t_l: Ema,
    pub t_u: Ema,
}

impl ThresholdState {
    pub fn new(decay: f64) -> Result<Self, ConfigError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(ConfigError::OutOfRange {
                name: "lambda",
                value: decay,
                range: "[0, 1)",
            });
        }
        Ok(Self {
            decay,
            t_e: Ema::default(),
            t_l: Ema::default(),
            t_u: Ema::default(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Folds in one labeled batch: `verdicts[k]` judges the tokens scored
    /// by `confidences[k]`. Batches without incorrect tokens leave `t_e`
    /// alone; an empty batch changes nothing.
    pub fn update_labeled(&mut self, verdicts: &[AlignmentVerdict], confidences: &[Vec<f64>]) {
        assert_eq!(verdicts.len(), confidences.len());
        let (mut all_sum, mut all_n, mut err_sum, mut err_n) = (0.0, 0usize, 0.0, 0usize);
        for (v, c) in verdicts.iter().zip(confidences) {
            assert_eq!(v.correct.len(), c.len());
            for (&conf, &ok) in c.iter().zip(&v.correct) {
                all_sum += conf;
                all_n += 1;
                if !ok {
                    err_sum += conf;
                    err_n += 1;
                }
            }
        }
        if all_n > 0 {
            self.t_l.update(all_sum / all_n as f64, self.decay);
        }
        if err_n > 0 {
            self.t_e.update(err_sum / err_n as f64, self.decay);
        }
    }

    /// Folds in the confidences of one unlabeled batch.
    pub fn update_unlabeled(&mut self, confidences: &[Vec<f64>]) {
        let (sum, n) = confidences
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), &c| (s + c, n + 1));
        if n > 0 {
            self.t_u.update(sum / n as f64, self.decay);
        }
    }

    /// `t_e`, or `(t_u / t_l) * t_e` with relative correction, clamped to
    /// `[0, 1]`.
    pub fn current_threshold(&self, relative_correction: bool) -> Result<f64, NotReady> {
        let t_e = self.t_e.get().ok_or(NotReady)?;
        let raw = if relative_correction {
            let (t_l, t_u) = match (self.t_l.get(), self.t_u.get()) {
                (Some(l), Some(u)) if l > 0.0 => (l, u),
                _ => return Err(NotReady),
            };
            t_u / t_l * t_e
        } else {
            t_e
        };
        if raw > 1.0 {
            warn!("corrected threshold {raw:.4} exceeds 1, clamping");
        }
        Ok(raw.clamp(0.0, 1.0))
    }
}
