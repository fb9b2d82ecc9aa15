//! CTC label graphs and loss.
//!
//! The loss is computed two ways: by composing the label graph with the
//! emissions ([`ctc_loss`]) and by the classic alpha/beta recursion over the
//! blank-extended label ([`ctc_loss_recursive`]). Both return identical
//! quantities up to floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::error::{FstError, LabelError};
use crate::fst::{intersect_dense, Arc, Emissions, GradientMatrix, Label, Wfsa, BLANK};
use crate::semiring::log_add;

/// A token sequence without blanks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct LabelSeq(Vec<u32>);

impl LabelSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self, LabelError> {
        if let Some(i) = tokens.iter().position(|&t| t == BLANK) {
            return Err(LabelError::ContainsBlank(i));
        }
        Ok(Self(tokens))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal token pairs; each needs a blank in between.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames any alignment of this label can use.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }
}

impl TryFrom<Vec<u32>> for LabelSeq {
    type Error = LabelError;

    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        LabelSeq::new(v)
    }
}

impl From<LabelSeq> for Vec<u32> {
    fn from(l: LabelSeq) -> Self {
        l.0
    }
}

/// Result of a sequence loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// `+inf` when the label cannot be aligned to the emissions.
    pub loss: f64,
    /// `d loss / d emissions`; all zeros when infeasible.
    pub grad: GradientMatrix,
}

impl LossOutput {
    pub(crate) fn from_total(total: f64, grad: GradientMatrix) -> Self {
        Self {
            loss: -total,
            grad: grad.scale(-1.0),
        }
    }

    /// False when the loss should be skipped by a training loop.
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Per-position arc alternatives used by [`build_label_graph`].
pub(crate) type Alternatives = Vec<(Label, f64)>;

/// CTC topology over `tokens`.
///
/// State `2i` is the blank before token `i`, state `2i + 1` is token `i`,
/// state `2U + 1` is the super-final state reached by `Final` arcs from the
/// last blank and the last token. Every arc entering a token state uses the
/// alternatives returned by `entering(i)`; `skip_allowed(i)` says whether
/// token `i - 1` may move straight to token `i`.
pub(crate) fn build_label_graph(
    tokens: &[u32],
    entering: impl Fn(usize) -> Alternatives,
    skip_allowed: impl Fn(usize) -> bool,
) -> Wfsa {
    let u = tokens.len();
    let final_state = 2 * u + 1;
    let mut arcs = Vec::with_capacity(6 * u + 3);
    let push_alts = |arcs: &mut Vec<Arc>, src: usize, dst: usize, alts: &Alternatives| {
        for &(label, w) in alts {
            arcs.push(Arc::new(src, dst, label, w));
        }
    };
    for s in 0..=2 * u {
        if s % 2 == 0 {
            arcs.push(Arc::new(s, s, Label::BLANK, 0.0));
            if s < 2 * u {
                push_alts(&mut arcs, s, s + 1, &entering(s / 2));
            }
        } else {
            let i = s / 2;
            let alts = entering(i);
            push_alts(&mut arcs, s, s, &alts);
            arcs.push(Arc::new(s, s + 1, Label::BLANK, 0.0));
            if i + 1 < u && skip_allowed(i + 1) {
                push_alts(&mut arcs, s, s + 2, &entering(i + 1));
            }
        }
        if s + 2 >= 2 * u + 1 {
            arcs.push(Arc::new(s, final_state, Label::Final, 0.0));
        }
    }
    Wfsa::new(2 * u + 2, arcs, vec![final_state])
        .and_then(|g| g.trim())
        .expect("CTC topology is always well-formed and trim")
}

/// Label graph accepting exactly the frame paths that collapse to `label`.
pub fn build_ctc_graph(label: &LabelSeq) -> Wfsa {
    let t = label.tokens();
    build_label_graph(
        t,
        |i| vec![(Label::Token(t[i]), 0.0)],
        |i| t[i - 1] != t[i],
    )
}

/// Negative log-likelihood of `label` under `emissions`, via the label
/// graph.
pub fn ctc_loss(label: &LabelSeq, emissions: &Emissions) -> Result<LossOutput, FstError> {
    graph_loss(&build_ctc_graph(label), emissions)
}

/// `-total` and `-d total / d emissions` of any label graph.
pub fn graph_loss(graph: &Wfsa, emissions: &Emissions) -> Result<LossOutput, FstError> {
    let lattice = intersect_dense(graph, emissions)?;
    Ok(LossOutput::from_total(lattice.total(), lattice.backward()))
}

/// Forward and backward variables of the CTC recursion, in log space, over
/// the blank-extended label.
#[derive(Clone, Debug)]
pub struct AlphaBeta {
    extended: Vec<u32>,
    frames: usize,
    /// `frames × extended.len()`.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    emission_at: Vec<f64>,
}

impl AlphaBeta {
    /// Runs both recursions.
    pub fn compute(label: &LabelSeq, emissions: &Emissions) -> Result<Self, FstError> {
        if let Some(&max) = label.tokens().iter().max() {
            if max as usize >= emissions.vocab() {
                return Err(FstError::LabelOutOfVocab {
                    token: max,
                    vocab: emissions.vocab(),
                });
            }
        }
        let mut extended = Vec::with_capacity(2 * label.len() + 1);
        extended.push(BLANK);
        for &tok in label.tokens() {
            extended.push(tok);
            extended.push(BLANK);
        }
        let s_len = extended.len();
        let frames = emissions.frames();
        let y = |t: usize, s: usize| emissions.get(t, extended[s] as usize);
        let skip = |s: usize| s >= 2 && extended[s] != BLANK && extended[s - 2] != extended[s];

        let mut emission_at = vec![0.0; frames * s_len];
        for t in 0..frames {
            for s in 0..s_len {
                emission_at[t * s_len + s] = y(t, s);
            }
        }

        let neg = f64::NEG_INFINITY;
        let mut alpha = vec![neg; frames * s_len];
        alpha[0] = y(0, 0);
        if s_len > 1 {
            alpha[1] = y(0, 1);
        }
        for t in 1..frames {
            for s in 0..s_len {
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut a = prev[s];
                if s >= 1 {
                    a = log_add(a, prev[s - 1]);
                }
                if skip(s) {
                    a = log_add(a, prev[s - 2]);
                }
                alpha[t * s_len + s] = if a == neg { neg } else { a + y(t, s) };
            }
        }

        let mut beta = vec![neg; frames * s_len];
        let last = (frames - 1) * s_len;
        beta[last + s_len - 1] = y(frames - 1, s_len - 1);
        if s_len > 1 {
            beta[last + s_len - 2] = y(frames - 1, s_len - 2);
        }
        for t in (0..frames - 1).rev() {
            for s in 0..s_len {
                let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
                let mut b = next[s];
                if s + 1 < s_len {
                    b = log_add(b, next[s + 1]);
                }
                if s + 2 < s_len && skip(s + 2) {
                    b = log_add(b, next[s + 2]);
                }
                beta[t * s_len + s] = if b == neg { neg } else { b + y(t, s) };
            }
        }

        Ok(Self {
            extended,
            frames,
            alpha,
            beta,
            emission_at,
        })
    }

    pub fn extended_label(&self) -> &[u32] {
        &self.extended
    }

    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.extended.len() + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.extended.len() + s]
    }

    /// `log P(l|x)` from the forward variables at the last frame.
    pub fn log_likelihood(&self) -> f64 {
        let s_len = self.extended.len();
        let t = self.frames - 1;
        let mut total = self.alpha(t, s_len - 1);
        if s_len > 1 {
            total = log_add(total, self.alpha(t, s_len - 2));
        }
        total
    }

    /// `log P(l|x)` spliced at frame `t`:
    /// `log sum_s alpha_t(s) beta_t(s) / y^t_{l'_s}`. Every frame gives the
    /// same value.
    pub fn spliced_log_likelihood(&self, t: usize) -> f64 {
        (0..self.extended.len()).fold(f64::NEG_INFINITY, |acc, s| log_add(acc, self.occupancy(t, s)))
    }

    fn occupancy(&self, t: usize, s: usize) -> f64 {
        let a = self.alpha(t, s);
        let b = self.beta(t, s);
        if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        a + b - self.emission_at[t * self.extended.len() + s]
    }

    /// `d log P / d emissions[t][v]`.
    pub fn gradient(&self, vocab: usize) -> GradientMatrix {
        let total = self.log_likelihood();
        let mut values = vec![0.0; self.frames * vocab];
        if total > f64::NEG_INFINITY {
            for t in 0..self.frames {
                for (s, &tok) in self.extended.iter().enumerate() {
                    let occ = self.occupancy(t, s);
                    if occ > f64::NEG_INFINITY {
                        values[t * vocab + tok as usize] += (occ - total).exp();
                    }
                }
            }
        }
        GradientMatrix::from_raw(self.frames, vocab, values)
    }
}

/// CTC loss through the alpha/beta recursion; no graph is built.
pub fn ctc_loss_recursive(label: &LabelSeq, emissions: &Emissions) -> Result<LossOutput, FstError> {
    let ab = AlphaBeta::compute(label, emissions)?;
    let total = ab.log_likelihood();
    Ok(LossOutput::from_total(total, ab.gradient(emissions.vocab())))
}
