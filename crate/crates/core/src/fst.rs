//! Log-semiring weighted finite-state acceptors over a token alphabet.
//!
//! A [`Wfsa`] is a label graph whose arcs consume one emission frame each,
//! except for [`Label::Final`] arcs which consume nothing and may only be
//! taken once all frames have been consumed. [`intersect_dense`] composes a
//! graph with a dense [`Emissions`] matrix and returns a [`Lattice`] holding
//! the forward scores; [`Lattice::backward`] turns those into the gradient of
//! the total log-score with respect to every emission entry.
//!
//! State `0` is always the start state.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::FstError;
use crate::semiring::{log_add, log_sum_exp};

/// Token id reserved for the blank symbol.
pub const BLANK: u32 = 0;

/// Tolerance used when checking that emission rows are normalized.
pub const ROW_NORM_TOL: f64 = 1e-6;

/// Arc label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// A vocabulary token; `Token(BLANK)` is the blank.
    Token(u32),
    /// Matches any non-blank token at a frame.
    Star,
    /// Epsilon-like arc into a final state, taken after the last frame.
    Final,
}

impl Label {
    pub const BLANK: Label = Label::Token(BLANK);

    /// Integer code used by the text format.
    pub fn code(self) -> i64 {
        match self {
            Label::Token(t) => i64::from(t),
            Label::Star => -2,
            Label::Final => -1,
        }
    }

    pub fn from_code(code: i64) -> Option<Label> {
        match code {
            -2 => Some(Label::Star),
            -1 => Some(Label::Final),
            c if c >= 0 => u32::try_from(c).ok().map(Label::Token),
            _ => None,
        }
    }

    pub fn consumes_frame(self) -> bool {
        !matches!(self, Label::Final)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub label: Label,
    /// Log-space weight added to the path score when the arc is taken.
    pub weight: f64,
}

impl Arc {
    pub fn new(src: usize, dst: usize, label: Label, weight: f64) -> Self {
        Self {
            src,
            dst,
            label,
            weight,
        }
    }
}

/// Weighted finite-state acceptor in the log semiring.
#[derive(Clone, Debug, PartialEq)]
pub struct Wfsa {
    num_states: usize,
    arcs: Vec<Arc>,
    finals: Vec<usize>,
}

impl Wfsa {
    /// Validates and builds a graph. The result is not trimmed; call
    /// [`Wfsa::trim`] for that.
    pub fn new(num_states: usize, arcs: Vec<Arc>, finals: Vec<usize>) -> Result<Self, FstError> {
        if num_states == 0 {
            return Err(FstError::EmptyGraph);
        }
        for (i, arc) in arcs.iter().enumerate() {
            if arc.src >= num_states || arc.dst >= num_states {
                return Err(FstError::StateOutOfRange {
                    arc: i,
                    num_states,
                });
            }
            if !arc.weight.is_finite() {
                return Err(FstError::NonFiniteWeight { arc: i });
            }
        }
        let mut finals = finals;
        finals.sort_unstable();
        finals.dedup();
        if finals.is_empty() {
            return Err(FstError::NoFinalState);
        }
        if let Some(&f) = finals.iter().find(|&&f| f >= num_states) {
            return Err(FstError::FinalOutOfRange { state: f, num_states });
        }
        let graph = Self {
            num_states,
            arcs,
            finals,
        };
        if graph.final_arc_order().is_none() {
            return Err(FstError::FinalArcCycle);
        }
        Ok(graph)
    }

    /// A single straight path: one frame-consuming arc per entry, then a
    /// `Final` arc into the last state.
    pub fn chain(labels: &[(Label, f64)]) -> Result<Self, FstError> {
        let n = labels.len();
        let mut arcs: Vec<Arc> = labels
            .iter()
            .enumerate()
            .map(|(i, &(label, w))| Arc::new(i, i + 1, label, w))
            .collect();
        arcs.push(Arc::new(n, n + 1, Label::Final, 0.0));
        Wfsa::new(n + 2, arcs, vec![n + 1])
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn finals(&self) -> &[usize] {
        &self.finals
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.finals.binary_search(&state).is_ok()
    }

    /// Number of arcs whose label satisfies `pred`.
    pub fn count_arcs(&self, pred: impl Fn(Label) -> bool) -> usize {
        self.arcs.iter().filter(|a| pred(a.label)).count()
    }

    pub fn star_arcs(&self) -> usize {
        self.count_arcs(|l| l == Label::Star)
    }

    /// Largest token id referenced by any arc.
    pub fn max_token(&self) -> Option<u32> {
        self.arcs
            .iter()
            .filter_map(|a| match a.label {
                Label::Token(t) => Some(t),
                _ => None,
            })
            .max()
    }

    /// Topological order of states over `Final` arcs only, or `None` if
    /// those arcs form a cycle.
    fn final_arc_order(&self) -> Option<Vec<usize>> {
        let mut indegree = vec![0usize; self.num_states];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.num_states];
        for (i, arc) in self.arcs.iter().enumerate() {
            if arc.label == Label::Final {
                indegree[arc.dst] += 1;
                out[arc.src].push(i);
            }
        }
        let mut queue: VecDeque<usize> = (0..self.num_states).filter(|&s| indegree[s] == 0).collect();
        let mut order = Vec::with_capacity(self.num_states);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            for &i in &out[s] {
                let d = self.arcs[i].dst;
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    queue.push_back(d);
                }
            }
        }
        (order.len() == self.num_states).then_some(order)
    }

    /// Log-weight of leaving each state into acceptance once all frames are
    /// consumed: `0` for a final state, plus every `Final`-arc continuation.
    pub fn final_weights(&self) -> Vec<f64> {
        let order = self
            .final_arc_order()
            .expect("validated at construction: final arcs are acyclic");
        let mut out: Vec<Vec<&Arc>> = vec![Vec::new(); self.num_states];
        for arc in self.arcs.iter().filter(|a| a.label == Label::Final) {
            out[arc.src].push(arc);
        }
        let mut weights = vec![f64::NEG_INFINITY; self.num_states];
        for &s in order.iter().rev() {
            let mut w = if self.is_final(s) { 0.0 } else { f64::NEG_INFINITY };
            for arc in &out[s] {
                w = log_add(w, arc.weight + weights[arc.dst]);
            }
            weights[s] = w;
        }
        weights
    }

    /// Keeps only states lying on some start-to-final path. States keep
    /// their relative order, so the start stays at `0`. Idempotent.
    pub fn trim(&self) -> Result<Wfsa, FstError> {
        let n = self.num_states;
        let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut rev: Vec<Vec<usize>> = vec![Vec::new(); n];
        for arc in &self.arcs {
            fwd[arc.src].push(arc.dst);
            rev[arc.dst].push(arc.src);
        }
        let accessible = reach(&fwd, [0]);
        let coaccessible = reach(&rev, self.finals.iter().copied());
        let keep: Vec<bool> = (0..n).map(|s| accessible[s] && coaccessible[s]).collect();
        if !keep[0] {
            return Err(FstError::EmptyGraph);
        }
        let mut remap = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if keep[s] {
                remap[s] = next;
                next += 1;
            }
        }
        let arcs = self
            .arcs
            .iter()
            .filter(|a| keep[a.src] && keep[a.dst])
            .map(|a| Arc::new(remap[a.src], remap[a.dst], a.label, a.weight))
            .collect();
        let finals = self
            .finals
            .iter()
            .filter(|&&f| keep[f])
            .map(|&f| remap[f])
            .collect();
        Wfsa::new(next, arcs, finals)
    }

    /// Same graph with `delta` added to every frame-consuming arc.
    pub fn shift_frame_weights(&self, delta: f64) -> Wfsa {
        let mut g = self.clone();
        for arc in g.arcs.iter_mut().filter(|a| a.label.consumes_frame()) {
            arc.weight += delta;
        }
        g
    }
}

fn reach(adj: &[Vec<usize>], seeds: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack: Vec<usize> = seeds.into_iter().collect();
    for &s in &stack {
        seen[s] = true;
    }
    while let Some(s) = stack.pop() {
        for &d in &adj[s] {
            if !seen[d] {
                seen[d] = true;
                stack.push(d);
            }
        }
    }
    seen
}

/// Text form: one `src dst label weight` line per arc, then a line of final
/// states. Blank is `0`, `Star` is `-2`, `Final` is `-1`.
impl fmt::Display for Wfsa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for arc in &self.arcs {
            writeln!(f, "{} {} {} {}", arc.src, arc.dst, arc.label.code(), arc.weight)?;
        }
        let finals: Vec<String> = self.finals.iter().map(|s| s.to_string()).collect();
        writeln!(f, "{}", finals.join(" "))
    }
}

impl FromStr for Wfsa {
    type Err = FstError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lines: Vec<(usize, &str)> = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let Some((&(final_line, last), arc_lines)) = lines.split_last() else {
            return Err(FstError::Parse {
                line: 0,
                msg: "empty input".into(),
            });
        };
        let parse_err = |line: usize, msg: &str| FstError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut arcs = Vec::with_capacity(arc_lines.len());
        let mut max_state = 0;
        for &(line, text) in arc_lines {
            let fields: Vec<&str> = text.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(parse_err(line, "expected `src dst label weight`"));
            }
            let src: usize = fields[0].parse().map_err(|_| parse_err(line, "bad src"))?;
            let dst: usize = fields[1].parse().map_err(|_| parse_err(line, "bad dst"))?;
            let code: i64 = fields[2].parse().map_err(|_| parse_err(line, "bad label"))?;
            let label = Label::from_code(code).ok_or_else(|| parse_err(line, "unknown label code"))?;
            let weight: f64 = fields[3].parse().map_err(|_| parse_err(line, "bad weight"))?;
            max_state = max_state.max(src).max(dst);
            arcs.push(Arc::new(src, dst, label, weight));
        }
        let finals = last
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| parse_err(final_line, "bad final state")))
            .collect::<Result<Vec<_>, _>>()?;
        let num_states = finals.iter().copied().fold(max_state, usize::max) + 1;
        Wfsa::new(num_states, arcs, finals)
    }
}

/// A `frames × vocab` matrix of per-frame log-scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Emissions {
    frames: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl Emissions {
    /// Normalized log-probabilities: every row must log-sum-exp to zero.
    pub fn new(frames: usize, vocab: usize, values: Vec<f64>) -> Result<Self, FstError> {
        let e = Self::from_scores(frames, vocab, values)?;
        for t in 0..frames {
            let z = log_sum_exp(e.row(t));
            if z.abs() > ROW_NORM_TOL {
                return Err(FstError::UnnormalizedRow { frame: t, log_sum: z });
            }
        }
        Ok(e)
    }

    /// Arbitrary finite log-scores. The intersection kernel does not rely on
    /// normalization; this is what finite-difference checks perturb.
    pub fn from_scores(frames: usize, vocab: usize, values: Vec<f64>) -> Result<Self, FstError> {
        if frames == 0 || vocab < 2 || values.len() != frames * vocab {
            return Err(FstError::EmissionShape {
                frames,
                vocab,
                len: values.len(),
            });
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(FstError::NonFiniteEmission);
        }
        Ok(Self {
            frames,
            vocab,
            values,
        })
    }

    /// Row-wise log-softmax of raw logits.
    pub fn log_softmax(frames: usize, vocab: usize, logits: &[f64]) -> Result<Self, FstError> {
        let mut values = logits.to_vec();
        if values.len() == frames * vocab && vocab > 0 {
            for row in values.chunks_mut(vocab) {
                let z = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= z);
            }
        }
        Self::from_scores(frames, vocab, values)
    }

    /// Log of row-normalized probabilities.
    pub fn from_probs(frames: usize, vocab: usize, probs: &[f64]) -> Result<Self, FstError> {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Self::log_softmax(frames, vocab, &logits)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.vocab + v]
    }

    pub fn prob(&self, t: usize, v: usize) -> f64 {
        self.get(t, v).exp()
    }

    /// Copy with one entry replaced.
    pub fn with_value(&self, t: usize, v: usize, value: f64) -> Emissions {
        let mut e = self.clone();
        e.values[t * self.vocab + v] = value;
        e
    }

    /// Per-frame log-sum of all non-blank scores.
    pub fn star_scores(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let non_blank: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .filter(|&(v, _)| v != BLANK as usize)
                    .map(|(_, &x)| x)
                    .collect();
                log_sum_exp(&non_blank)
            })
            .collect()
    }
}

/// Dense `frames × vocab` gradient, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    frames: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl GradientMatrix {
    pub fn zeros(frames: usize, vocab: usize) -> Self {
        Self {
            frames,
            vocab,
            values: vec![0.0; frames * vocab],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.vocab + v]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub(crate) fn from_raw(frames: usize, vocab: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), frames * vocab);
        Self {
            frames,
            vocab,
            values,
        }
    }

    pub(crate) fn add(&mut self, t: usize, v: usize, x: f64) {
        self.values[t * self.vocab + v] += x;
    }

    pub fn scale(mut self, k: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= k);
        self
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &GradientMatrix, k: f64) {
        assert_eq!((self.frames, self.vocab), (other.frames, other.vocab));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Forward scores of a graph composed with dense emissions.
///
/// Keeps references to its inputs so [`Lattice::backward`] can run the
/// backward sweep without copying them.
#[derive(Debug)]
pub struct Lattice<'a> {
    graph: &'a Wfsa,
    emissions: &'a Emissions,
    star: Vec<f64>,
    final_weights: Vec<f64>,
    /// `(frames + 1) × num_states`, row `t` = scores after `t` frames.
    alpha: Vec<f64>,
    total: f64,
}

/// Composes `graph` with `emissions` and runs the forward pass.
///
/// A graph with no path of exactly `frames` arcs yields a lattice whose
/// total is `-inf`; only a label outside the emission vocabulary is an
/// error.
pub fn intersect_dense<'a>(graph: &'a Wfsa, emissions: &'a Emissions) -> Result<Lattice<'a>, FstError> {
    if let Some(max) = graph.max_token() {
        if max as usize >= emissions.vocab() {
            return Err(FstError::LabelOutOfVocab {
                token: max,
                vocab: emissions.vocab(),
            });
        }
    }
    let n = graph.num_states();
    let frames = emissions.frames();
    let star = if graph.star_arcs() > 0 {
        emissions.star_scores()
    } else {
        vec![f64::NEG_INFINITY; frames]
    };
    let mut alpha = vec![f64::NEG_INFINITY; (frames + 1) * n];
    alpha[0] = 0.0;
    for t in 0..frames {
        let (done, rest) = alpha.split_at_mut((t + 1) * n);
        let cur = &done[t * n..];
        let next = &mut rest[..n];
        for arc in graph.arcs() {
            let from = cur[arc.src];
            if from == f64::NEG_INFINITY {
                continue;
            }
            let Some(score) = arc_score(arc.label, emissions, &star, t) else {
                continue;
            };
            next[arc.dst] = log_add(next[arc.dst], from + arc.weight + score);
        }
    }
    let final_weights = graph.final_weights();
    let last = &alpha[frames * n..];
    let mut total = f64::NEG_INFINITY;
    for s in 0..n {
        total = log_add(total, last[s] + final_weights[s]);
    }
    Ok(Lattice {
        graph,
        emissions,
        star,
        final_weights,
        alpha,
        total,
    })
}

#[inline]
fn arc_score(label: Label, emissions: &Emissions, star: &[f64], t: usize) -> Option<f64> {
    match label {
        Label::Token(v) => Some(emissions.get(t, v as usize)),
        Label::Star => Some(star[t]),
        Label::Final => None,
    }
}

impl Lattice<'_> {
    /// Total log-score over all accepted `frames`-length paths.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn is_feasible(&self) -> bool {
        self.total > f64::NEG_INFINITY
    }

    /// Forward score of `state` after `t` frames.
    pub fn alpha(&self, t: usize, state: usize) -> f64 {
        self.alpha[t * self.graph.num_states() + state]
    }

    /// `d total / d emissions[t][v]` for every entry. All zeros when the
    /// lattice is infeasible.
    pub fn backward(&self) -> GradientMatrix {
        let frames = self.emissions.frames();
        let vocab = self.emissions.vocab();
        let mut grad = GradientMatrix::zeros(frames, vocab);
        if !self.is_feasible() {
            return grad;
        }
        let n = self.graph.num_states();
        let mut beta_next = self.final_weights.clone();
        let mut beta_cur = vec![f64::NEG_INFINITY; n];
        for t in (0..frames).rev() {
            beta_cur.fill(f64::NEG_INFINITY);
            let mut star_mass = 0.0;
            for arc in self.graph.arcs() {
                let Some(score) = arc_score(arc.label, self.emissions, &self.star, t) else {
                    continue;
                };
                let through = arc.weight + score + beta_next[arc.dst];
                beta_cur[arc.src] = log_add(beta_cur[arc.src], through);
                let from = self.alpha(t, arc.src);
                if from == f64::NEG_INFINITY || through == f64::NEG_INFINITY {
                    continue;
                }
                let posterior = (from + through - self.total).exp();
                match arc.label {
                    Label::Token(v) => grad.add(t, v as usize, posterior),
                    Label::Star => star_mass += posterior,
                    Label::Final => {}
                }
            }
            if star_mass > 0.0 {
                let row = self.emissions.row(t);
                for (v, &x) in row.iter().enumerate() {
                    if v != BLANK as usize {
                        grad.add(t, v, star_mass * (x - self.star[t]).exp());
                    }
                }
            }
            std::mem::swap(&mut beta_cur, &mut beta_next);
        }
        grad
    }
}
