//! Greedy decoding with token-level confidences, and the metrics used to
//! judge confidence-based error detection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::atc::MaskedLabel;
use crate::ctc::LabelSeq;
use crate::fst::{Emissions, BLANK};

/// How the framewise probabilities of a token's run become one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    #[default]
    Average,
    Max,
}

/// A decoded label with per-token confidence and source frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub tokens: LabelSeq,
    pub confidences: Vec<f64>,
    /// Half-open `(start, end)` frame range of each token's run.
    pub frame_spans: Vec<(usize, usize)>,
}

impl PseudoLabel {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Framewise argmax, merge runs, drop blanks. Each surviving token's
/// confidence is the mean (or max) argmax probability over its run.
///
/// Ties in the argmax go to the lowest token id.
pub fn greedy_decode(emissions: &Emissions, mode: ConfidenceMode) -> PseudoLabel {
    let frames = emissions.frames();
    let best: Vec<(u32, f64)> = (0..frames)
        .map(|t| {
            let row = emissions.row(t);
            let (v, &x) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (v, x)| if *x > *acc.1 { (v, x) } else { acc });
            (v as u32, x.exp())
        })
        .collect();

    let mut tokens = Vec::new();
    let mut confidences = Vec::new();
    let mut frame_spans = Vec::new();
    let mut t = 0;
    while t < frames {
        let tok = best[t].0;
        let start = t;
        while t < frames && best[t].0 == tok {
            t += 1;
        }
        if tok == BLANK {
            continue;
        }
        let probs = best[start..t].iter().map(|&(_, p)| p);
        let conf = match mode {
            ConfidenceMode::Average => probs.sum::<f64>() / (t - start) as f64,
            ConfidenceMode::Max => probs.fold(0.0, f64::max),
        };
        tokens.push(tok);
        confidences.push(conf.clamp(0.0, 1.0));
        frame_spans.push((start, t));
    }
    PseudoLabel {
        tokens: LabelSeq::new(tokens).expect("blank runs are dropped"),
        confidences,
        frame_spans,
    }
}

/// Tokens with confidence strictly below `threshold` are flagged.
pub fn detect_errors(predicted: &PseudoLabel, threshold: f64) -> MaskedLabel {
    let mask = predicted.confidences.iter().map(|&c| c < threshold).collect();
    MaskedLabel::new(predicted.tokens.clone(), mask).expect("one confidence per token")
}

/// Levenshtein edit counts against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors over reference length. With an empty reference the rate is
    /// the number of inserted tokens.
    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            self.errors() as f64
        } else {
            self.errors() as f64 / self.reference_len as f64
        }
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }
}

/// Per-predicted-token correctness from an edit-distance alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentVerdict {
    /// `true` where the predicted token is aligned as a match.
    pub correct: Vec<bool>,
    pub counts: EditCounts,
}

impl AlignmentVerdict {
    pub fn incorrect(&self) -> usize {
        self.correct.iter().filter(|&&c| !c).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Edit {
    Match,
    Substitute,
    Insert,
    Delete,
}

/// Unit-cost alignment of `predicted` against `reference`, traced back
/// with preference match > substitution > insertion > deletion.
fn align(predicted: &[u32], reference: &[u32]) -> Vec<Edit> {
    let (n, m) = (predicted.len(), reference.len());
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dist[(i - 1) * w + j - 1] + usize::from(predicted[i - 1] != reference[j - 1]);
            let ins = dist[(i - 1) * w + j] + 1;
            let del = dist[i * w + j - 1] + 1;
            dist[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut edits = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let same = predicted[i - 1] == reference[j - 1];
            if here == dist[(i - 1) * w + j - 1] + usize::from(!same) {
                edits.push(if same { Edit::Match } else { Edit::Substitute });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dist[(i - 1) * w + j] + 1 {
            edits.push(Edit::Insert);
            i -= 1;
        } else {
            edits.push(Edit::Delete);
            j -= 1;
        }
    }
    edits.reverse();
    edits
}

/// Edit counts of `predicted` against `reference`.
pub fn edit_counts(predicted: &[u32], reference: &[u32]) -> EditCounts {
    verdict_from_edits(&align(predicted, reference), reference.len()).counts
}

fn verdict_from_edits(edits: &[Edit], reference_len: usize) -> AlignmentVerdict {
    let mut counts = EditCounts {
        reference_len,
        ..EditCounts::default()
    };
    let mut correct = Vec::new();
    for e in edits {
        match e {
            Edit::Match => correct.push(true),
            Edit::Substitute => {
                counts.substitutions += 1;
                correct.push(false);
            }
            Edit::Insert => {
                counts.insertions += 1;
                correct.push(false);
            }
            Edit::Delete => counts.deletions += 1,
        }
    }
    AlignmentVerdict { correct, counts }
}

/// Marks each predicted token correct (aligned as a match) or incorrect
/// (substituted or inserted).
pub fn align_verdict(predicted: &PseudoLabel, reference: &LabelSeq) -> AlignmentVerdict {
    let edits = align(predicted.tokens.tokens(), reference.tokens());
    verdict_from_edits(&edits, reference.len())
}

/// `(S + D + I) / |reference|`.
pub fn token_error_rate(predicted: &LabelSeq, reference: &LabelSeq) -> f64 {
    edit_counts(predicted.tokens(), reference.tokens()).rate()
}

/// Average precision of flagging incorrect tokens, ranking by
/// `1 - confidence`.
///
/// `confidences[k]` holds the scores for the tokens judged by
/// `verdicts[k]`. Tied scores are one operating point. Returns `None` when
/// there is no incorrect token to find.
pub fn pr_auc(verdicts: &[AlignmentVerdict], confidences: &[Vec<f64>]) -> Option<f64> {
    assert_eq!(verdicts.len(), confidences.len(), "one confidence list per verdict");
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (v, c) in verdicts.iter().zip(confidences) {
        assert_eq!(v.correct.len(), c.len(), "one confidence per token");
        scored.extend(c.iter().zip(&v.correct).map(|(&conf, &ok)| (1.0 - conf, !ok)));
    }
    average_precision(&mut scored)
}

/// Step-integrated area under the precision/recall curve of
/// `(score, is_positive)` pairs, higher score = more likely positive.
pub fn average_precision(scored: &mut [(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        while i < scored.len() && scored[i].0 == score {
            tp += usize::from(scored[i].1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}
