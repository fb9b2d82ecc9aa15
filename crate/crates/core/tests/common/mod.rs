#![allow(dead_code)]

use atc_core::ctc::LabelSeq;
use atc_core::fst::{Arc, Label};
use atc_core::{Emissions, Wfsa};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn lse(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized log-probabilities from random logits.
pub fn random_emissions(rng: &mut ChaCha8Rng, frames: usize, vocab: usize, spread: f64) -> Emissions {
    let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-spread..spread)).collect();
    Emissions::log_softmax(frames, vocab, &logits).unwrap()
}

/// Random label of length `0..=max_len` over tokens `1..vocab`.
pub fn random_label(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> LabelSeq {
    let len = rng.random_range(0..=max_len);
    LabelSeq::new((0..len).map(|_| rng.random_range(1..vocab as u32)).collect()).unwrap()
}

/// Label whose neighbours always differ.
pub fn random_label_no_repeats(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> LabelSeq {
    let mut toks: Vec<u32> = Vec::with_capacity(len);
    while toks.len() < len {
        let t = rng.random_range(1..vocab as u32);
        if toks.last() != Some(&t) {
            toks.push(t);
        }
    }
    LabelSeq::new(toks).unwrap()
}

/// CTC collapse: merge runs, drop blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Calls `f` on every sequence in `{0..vocab}^frames`.
pub fn for_each_path(frames: usize, vocab: usize, mut f: impl FnMut(&[u32])) {
    let mut path = vec![0u32; frames];
    loop {
        f(&path);
        let mut i = 0;
        loop {
            if i == frames {
                return;
            }
            path[i] += 1;
            if (path[i] as usize) < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// `log P(label | x)` by summing over every frame sequence that collapses
/// to the label.
pub fn brute_force_ctc(label: &LabelSeq, e: &Emissions) -> f64 {
    let mut terms = Vec::new();
    for_each_path(e.frames(), e.vocab(), |p| {
        if collapse(p) == label.tokens() {
            terms.push(p.iter().enumerate().map(|(t, &v)| e.get(t, v as usize)).sum());
        }
    });
    lse(terms)
}

/// Per-frame factor of a masked position.
#[derive(Clone, Copy)]
pub enum MaskedScore {
    /// `eta * y_star`.
    Replace { eta: f64 },
    /// `eta * (psi * y_star + (1 - psi) * y_token)`.
    Add { eta: f64, psi: f64 },
    /// `eta * y_token`: CTC with a per-frame penalty.
    Penalized { eta: f64 },
}

/// Sum over monotone alignments to the blank-extended label, written
/// directly from the per-frame definitions: blank positions score `y_blank`,
/// trusted tokens `y_token`, masked tokens per `masked`. Skips over a blank
/// are allowed when the neighbouring tokens differ or either is masked.
pub fn brute_force_masked(tokens: &[u32], mask: &[bool], e: &Emissions, masked: MaskedScore) -> f64 {
    let u = tokens.len();
    let ext: Vec<Option<usize>> = (0..2 * u + 1).map(|s| (s % 2 == 1).then_some(s / 2)).collect();
    let frames = e.frames();
    let star = |t: usize| lse((1..e.vocab()).map(|v| e.get(t, v)));
    let score = |t: usize, s: usize| -> f64 {
        match ext[s] {
            None => e.get(t, 0),
            Some(i) => {
                let y = e.get(t, tokens[i] as usize);
                if !mask[i] {
                    return y;
                }
                match masked {
                    MaskedScore::Replace { eta } => eta.ln() + star(t),
                    MaskedScore::Add { eta, psi } => {
                        eta.ln() + lse([psi.ln() + star(t), (1.0 - psi).ln() + y])
                    }
                    MaskedScore::Penalized { eta } => eta.ln() + y,
                }
            }
        }
    };
    let can_skip = |from: usize, to: usize| -> bool {
        match (ext[from], ext[to]) {
            (Some(a), Some(b)) => tokens[a] != tokens[b] || mask[a] || mask[b],
            _ => false,
        }
    };
    let mut terms = Vec::new();
    let mut states = Vec::with_capacity(frames);
    fn rec(
        t: usize,
        frames: usize,
        n: usize,
        states: &mut Vec<usize>,
        acc: f64,
        terms: &mut Vec<f64>,
        score: &dyn Fn(usize, usize) -> f64,
        can_skip: &dyn Fn(usize, usize) -> bool,
    ) {
        if t == frames {
            let last = *states.last().unwrap();
            if last + 1 == n || last + 2 == n {
                terms.push(acc);
            }
            return;
        }
        let nexts: Vec<usize> = match states.last() {
            None => vec![0, 1],
            Some(&s) => {
                let mut v = vec![s, s + 1];
                if s + 2 < n && can_skip(s, s + 2) {
                    v.push(s + 2);
                }
                v
            }
        };
        for s in nexts.into_iter().filter(|&s| s < n) {
            states.push(s);
            rec(t + 1, frames, n, states, acc + score(t, s), terms, score, can_skip);
            states.pop();
        }
    }
    if frames == 0 {
        return if u == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    rec(0, frames, 2 * u + 1, &mut states, 0.0, &mut terms, &score, &can_skip);
    lse(terms)
}

/// Every accepted path of exactly `frames` frame-consuming arcs from the
/// start state, followed by any chain of `Final` arcs into a final state.
pub fn brute_force_wfsa(g: &Wfsa, e: &Emissions) -> f64 {
    let star: Vec<f64> = (0..e.frames()).map(|t| lse((1..e.vocab()).map(|v| e.get(t, v)))).collect();
    let mut terms = Vec::new();
    fn finish(g: &Wfsa, s: usize, acc: f64, terms: &mut Vec<f64>) {
        if g.is_final(s) {
            terms.push(acc);
        }
        for a in g.arcs().iter().filter(|a| a.src == s && a.label == Label::Final) {
            finish(g, a.dst, acc + a.weight, terms);
        }
    }
    fn walk(g: &Wfsa, e: &Emissions, star: &[f64], t: usize, s: usize, acc: f64, terms: &mut Vec<f64>) {
        if t == e.frames() {
            finish(g, s, acc, terms);
            return;
        }
        for a in g.arcs().iter().filter(|a| a.src == s) {
            let score = match a.label {
                Label::Token(v) => e.get(t, v as usize),
                Label::Star => star[t],
                Label::Final => continue,
            };
            walk(g, e, star, t + 1, a.dst, acc + a.weight + score, terms);
        }
    }
    walk(g, e, &star, 0, 0, 0.0, &mut terms);
    lse(terms)
}

/// Random graph with acyclic `Final` arcs (they only go to higher states).
pub fn random_wfsa(rng: &mut ChaCha8Rng, vocab: usize, max_states: usize) -> Wfsa {
    loop {
        let n = rng.random_range(2..=max_states);
        let mut arcs = Vec::new();
        let n_arcs = rng.random_range(n..=3 * n);
        for _ in 0..n_arcs {
            let src = rng.random_range(0..n);
            let dst = rng.random_range(0..n);
            let label = match rng.random_range(0..10) {
                0 => Label::Star,
                1 if dst > src => Label::Final,
                _ => Label::Token(rng.random_range(0..vocab as u32)),
            };
            let label = if label == Label::Final && dst <= src {
                Label::Token(0)
            } else {
                label
            };
            arcs.push(Arc::new(src, dst, label, rng.random_range(-1.0..0.5)));
        }
        let k = rng.random_range(1..=2);
        let finals: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
        if let Ok(g) = Wfsa::new(n, arcs, finals).and_then(|g| g.trim()) {
            return g;
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Relative error of two vectors in the L2 norm.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central finite differences of `f` with respect to every emission entry.
pub fn finite_diff(e: &Emissions, h: f64, f: impl Fn(&Emissions) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.frames() * e.vocab());
    for t in 0..e.frames() {
        for v in 0..e.vocab() {
            let x = e.get(t, v);
            let plus = f(&e.with_value(t, v, x + h));
            let minus = f(&e.with_value(t, v, x - h));
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}
