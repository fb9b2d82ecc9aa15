//! Alternative temporal classification.
//!
//! ATC starts from the CTC topology of a pseudo-label and, at positions
//! flagged as incorrect, scores a `Star` alternative (the summed probability
//! of every non-blank token) scaled by `eta`:
//!
//! - [`AtcVariant::Replace`] swaps the token arcs for `Star` arcs with weight
//!   `ln(eta)`.
//! - [`AtcVariant::Add`] keeps the token arcs at `ln(eta * (1 - psi))` and
//!   adds parallel `Star` arcs at `ln(eta * psi)`, so each frame of a flagged
//!   position is scored `eta * (psi * y_star + (1 - psi) * y_token)`.
//!
//! With an all-false mask both variants build the plain CTC graph.

use serde::{Deserialize, Serialize};

use crate::ctc::{build_label_graph, graph_loss, Alternatives, LabelSeq, LossOutput};
use crate::error::{ConfigError, FstError, LabelError};
use crate::fst::{Emissions, Label, Wfsa};

/// A pseudo-label with a per-token "detected incorrect" flag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedLabel {
    tokens: LabelSeq,
    mask: Vec<bool>,
}

impl MaskedLabel {
    pub fn new(tokens: LabelSeq, mask: Vec<bool>) -> Result<Self, LabelError> {
        if mask.len() != tokens.len() {
            return Err(LabelError::MaskLength {
                tokens: tokens.len(),
                mask: mask.len(),
            });
        }
        Ok(Self { tokens, mask })
    }

    /// Nothing flagged: ATC on this label is CTC.
    pub fn trusted(tokens: LabelSeq) -> Self {
        let mask = vec![false; tokens.len()];
        Self { tokens, mask }
    }

    pub fn tokens(&self) -> &LabelSeq {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn flagged(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtcVariant {
    /// ATC-R.
    #[serde(alias = "r")]
    Replace,
    /// ATC-A.
    #[serde(alias = "a")]
    Add,
}

/// How the "no skip between equal neighbours" rule treats flagged tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepeatRule {
    /// A flagged token never counts as equal to its neighbours, so skips
    /// into and out of it are always allowed.
    #[default]
    Distrust,
    /// Compare token identities as in CTC, flagged or not.
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtcConfig {
    pub variant: AtcVariant,
    pub eta: f64,
    pub psi: f64,
    #[serde(default)]
    pub repeat_rule: RepeatRule,
}

impl Default for AtcConfig {
    fn default() -> Self {
        Self {
            variant: AtcVariant::Replace,
            eta: 0.3,
            psi: 0.5,
            repeat_rule: RepeatRule::Distrust,
        }
    }
}

impl AtcConfig {
    pub fn new(variant: AtcVariant, eta: f64, psi: f64) -> Result<Self, ConfigError> {
        let cfg = Self {
            variant,
            eta,
            psi,
            repeat_rule: RepeatRule::Distrust,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_repeat_rule(mut self, rule: RepeatRule) -> Self {
        self.repeat_rule = rule;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(ConfigError::OutOfRange {
                name: "eta",
                value: self.eta,
                range: "(0, 1]",
            });
        }
        if !(self.psi > 0.0 && self.psi < 1.0) {
            return Err(ConfigError::OutOfRange {
                name: "psi",
                value: self.psi,
                range: "(0, 1)",
            });
        }
        Ok(())
    }
}

/// ATC label graph for `masked` under `cfg`.
pub fn build_atc_graph(masked: &MaskedLabel, cfg: &AtcConfig) -> Wfsa {
    let tokens = masked.tokens.tokens();
    let mask = &masked.mask;
    let entering = |i: usize| -> Alternatives {
        let tok = Label::Token(tokens[i]);
        if !mask[i] {
            return vec![(tok, 0.0)];
        }
        match cfg.variant {
            AtcVariant::Replace => vec![(Label::Star, cfg.eta.ln())],
            AtcVariant::Add => vec![
                (tok, (cfg.eta * (1.0 - cfg.psi)).ln()),
                (Label::Star, (cfg.eta * cfg.psi).ln()),
            ],
        }
    };
    let skip_allowed = |i: usize| match cfg.repeat_rule {
        RepeatRule::Distrust if mask[i] || mask[i - 1] => true,
        _ => tokens[i - 1] != tokens[i],
    };
    build_label_graph(tokens, entering, skip_allowed)
}

/// `-log` of the total ATC score and its emission gradient.
pub fn atc_loss(masked: &MaskedLabel, emissions: &Emissions, cfg: &AtcConfig) -> Result<LossOutput, FstError> {
    graph_loss(&build_atc_graph(masked, cfg), emissions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{build_ctc_graph, ctc_loss};

    const A: u32 = 1;
    const B: u32 = 2;
    const C: u32 = 3;
    const D: u32 = 4;

    fn masked(tokens: &[u32], mask: &[bool]) -> MaskedLabel {
        MaskedLabel::new(LabelSeq::new(tokens.to_vec()).unwrap(), mask.to_vec()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AtcConfig::new(AtcVariant::Replace, 0.0, 0.5).is_err());
        assert!(AtcConfig::new(AtcVariant::Replace, 1.2, 0.5).is_err());
        assert!(AtcConfig::new(AtcVariant::Add, 0.3, 1.0).is_err());
        assert!(AtcConfig::new(AtcVariant::Add, 0.3, 0.0).is_err());
        assert!(AtcConfig::new(AtcVariant::Add, 1.0, 0.5).is_ok());
        let d = AtcConfig::default();
        assert_eq!((d.eta, d.psi), (0.3, 0.5));
    }

    #[test]
    fn mask_length_checked() {
        let l = LabelSeq::new(vec![A, B]).unwrap();
        assert!(MaskedLabel::new(l, vec![true]).is_err());
    }

    #[test]
    fn unmasked_is_ctc_graph() {
        for variant in [AtcVariant::Replace, AtcVariant::Add] {
            let cfg = AtcConfig::new(variant, 0.3, 0.5).unwrap();
            let m = masked(&[A, A, B], &[false; 3]);
            assert_eq!(build_atc_graph(&m, &cfg), build_ctc_graph(m.tokens()));
        }
    }

    #[test]
    fn replace_turns_token_arcs_into_star() {
        let eta: f64 = 0.3;
        let cfg = AtcConfig::new(AtcVariant::Replace, eta, 0.5).unwrap();
        let m = masked(&[A, D, C], &[false, true, false]);
        let g = build_atc_graph(&m, &cfg);
        let ctc = build_ctc_graph(m.tokens());
        assert_eq!(g.count_arcs(|l| l == Label::Token(D)), 0);
        assert_eq!(g.star_arcs(), ctc.count_arcs(|l| l == Label::Token(D)));
        // entering from blank 2, from token 1 (skip), and the self-loop
        let mut star: Vec<(usize, usize)> = g
            .arcs()
            .iter()
            .filter(|a| a.label == Label::Star)
            .map(|a| {
                assert_eq!(a.weight, eta.ln());
                (a.src, a.dst)
            })
            .collect();
        star.sort();
        assert_eq!(star, vec![(1, 3), (2, 3), (3, 3)]);
        assert_eq!(g.num_states(), ctc.num_states());
    }

    #[test]
    fn add_keeps_token_arcs_in_parallel() {
        let cfg = AtcConfig::new(AtcVariant::Add, 0.3, 0.5).unwrap();
        let m = masked(&[A, D, C], &[false, true, false]);
        let g = build_atc_graph(&m, &cfg);
        let half = (0.3f64 / 2.0).ln();
        let d_arcs: Vec<_> = g.arcs().iter().filter(|a| a.label == Label::Token(D)).collect();
        let s_arcs: Vec<_> = g.arcs().iter().filter(|a| a.label == Label::Star).collect();
        assert_eq!(d_arcs.len(), 3);
        assert_eq!(s_arcs.len(), 3);
        for (d, s) in d_arcs.iter().zip(&s_arcs) {
            assert_eq!((d.src, d.dst), (s.src, s.dst));
            assert!((d.weight - half).abs() < 1e-15);
            assert!((s.weight - half).abs() < 1e-15);
        }
    }

    #[test]
    fn repeat_rule_controls_skips() {
        let m = masked(&[A, A], &[false, true]);
        let distrust = AtcConfig::default();
        let strict = distrust.with_repeat_rule(RepeatRule::Strict);
        let has_skip = |g: &Wfsa| g.arcs().iter().any(|a| a.src == 1 && a.dst == 3);
        assert!(has_skip(&build_atc_graph(&m, &distrust)));
        assert!(!has_skip(&build_atc_graph(&m, &strict)));
    }

    #[test]
    fn single_star_frame_loss() {
        let e = Emissions::from_probs(1, 3, &[0.2, 0.5, 0.3]).unwrap();
        let cfg = AtcConfig::new(AtcVariant::Replace, 1.0, 0.5).unwrap();
        let out = atc_loss(&masked(&[A], &[true]), &e, &cfg).unwrap();
        assert!((out.loss + (0.5f64 + 0.3).ln()).abs() < 1e-12);
    }

    #[test]
    fn unmasked_loss_matches_ctc_exactly() {
        let e = Emissions::from_probs(4, 3, &[0.1, 0.6, 0.3, 0.3, 0.3, 0.4, 0.5, 0.2, 0.3, 0.2, 0.2, 0.6]).unwrap();
        let m = masked(&[A, B], &[false, false]);
        let a = atc_loss(&m, &e, &AtcConfig::default()).unwrap();
        let c = ctc_loss(m.tokens(), &e).unwrap();
        assert_eq!(a, c);
    }
}
