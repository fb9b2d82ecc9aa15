//! Loss values checked against independent computations: explicit path
//! enumeration and the textbook alpha/beta recursion.

mod common;

use atc_core::ctc::{build_ctc_graph, ctc_loss, ctc_loss_recursive, AlphaBeta, LabelSeq};
use atc_core::fst::{Arc, Label};
use atc_core::{intersect_dense, Emissions, Wfsa};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn wfsa_matches_enumeration_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut feasible = 0;
    for _ in 0..300 {
        let vocab = rng.random_range(2..=4);
        let frames = rng.random_range(1..=6);
        let g = random_wfsa(&mut rng, vocab, 12);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let got = intersect_dense(&g, &e).unwrap().total();
        let want = brute_force_wfsa(&g, &e);
        if want == f64::NEG_INFINITY {
            assert_eq!(got, f64::NEG_INFINITY);
            continue;
        }
        feasible += 1;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}\n{g}");
    }
    assert!(feasible > 100, "only {feasible} feasible instances");
}

#[test]
fn ctc_graph_matches_full_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let vocab = rng.random_range(2..=4);
        let frames = rng.random_range(1..=8);
        let label = random_label(&mut rng, vocab, 3);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let wfst = -ctc_loss(&label, &e).unwrap().loss;
        let brute = brute_force_ctc(&label, &e);
        if brute == f64::NEG_INFINITY {
            assert_eq!(wfst, f64::NEG_INFINITY);
        } else {
            assert!((wfst - brute).abs() < 1e-6, "{label:?}: {wfst} vs {brute}");
        }
    }
}

#[test]
fn recursion_and_splice_agree_with_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..250 {
        let vocab = rng.random_range(2..=4);
        let frames = rng.random_range(1..=8);
        let label = random_label(&mut rng, vocab, 3);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let graph = ctc_loss(&label, &e).unwrap();
        let rec = ctc_loss_recursive(&label, &e).unwrap();
        if !graph.is_feasible() {
            assert!(!rec.is_feasible());
            continue;
        }
        assert!((graph.loss - rec.loss).abs() < 1e-6);
        let ab = AlphaBeta::compute(&label, &e).unwrap();
        for t in 0..frames {
            assert!((ab.spliced_log_likelihood(t) + graph.loss).abs() < 1e-6, "t={t}");
        }
        let gap = graph
            .grad
            .values()
            .iter()
            .zip(rec.grad.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-9);
    }
}

#[test]
fn two_frame_single_token_closed_form() {
    let e = Emissions::from_probs(2, 2, &[0.3, 0.7, 0.6, 0.4]).unwrap();
    let label = LabelSeq::new(vec![1]).unwrap();
    let (b1, a1, b2, a2): (f64, f64, f64, f64) = (0.3, 0.7, 0.6, 0.4);
    let want = -(a1 * a2 + b1 * a2 + a1 * b2).ln();
    assert!((ctc_loss(&label, &e).unwrap().loss - want).abs() < 1e-12);
}

#[test]
fn worked_example_paths_are_accepted() {
    let aab = LabelSeq::new(vec![1, 1, 2]).unwrap();
    let g = build_ctc_graph(&aab);
    // a∅ab∅ and ∅aa∅∅abb: one-hot emissions on the path give probability 1
    for path in [vec![1, 0, 1, 2, 0], vec![0, 1, 1, 0, 0, 1, 2, 2]] {
        let probs: Vec<f64> = path
            .iter()
            .flat_map(|&p| (0..3).map(move |v| if v == p { 1.0 } else { 1e-300 }))
            .collect();
        let e = Emissions::from_probs(path.len(), 3, &probs).unwrap();
        let total = intersect_dense(&g, &e).unwrap().total();
        assert!(total.abs() < 1e-9, "{path:?} -> {total}");
    }
}

#[test]
fn two_frame_label_ab_accepts_only_ab() {
    let ab = LabelSeq::new(vec![1, 2]).unwrap();
    let g = build_ctc_graph(&ab);
    let mut accepted = Vec::new();
    for_each_path(2, 3, |p| {
        let probs: Vec<f64> = p
            .iter()
            .flat_map(|&q| (0..3).map(move |v| if v == q { 1.0 } else { 0.0 }))
            .collect();
        let e = Emissions::from_probs(2, 3, &probs).unwrap();
        if intersect_dense(&g, &e).unwrap().is_feasible() {
            accepted.push(p.to_vec());
        }
    });
    assert_eq!(accepted, vec![vec![1, 2]]);
}

#[test]
fn constant_on_frame_arcs_shifts_total_by_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let vocab = rng.random_range(2..=4);
        let frames = rng.random_range(1..=8);
        let g = random_wfsa(&mut rng, vocab, 10);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let base = intersect_dense(&g, &e).unwrap().total();
        if base == f64::NEG_INFINITY {
            continue;
        }
        let c = rng.random_range(-2.0..2.0);
        let shifted = intersect_dense(&g.shift_frame_weights(c), &e).unwrap().total();
        assert!((shifted - base - frames as f64 * c).abs() < 1e-9);
    }
}

#[test]
fn occupation_sums_to_one_per_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let vocab = rng.random_range(2..=5);
        let frames = rng.random_range(1..=10);
        let label = random_label(&mut rng, vocab, 4);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let out = ctc_loss(&label, &e).unwrap();
        if !out.is_feasible() {
            continue;
        }
        for t in 0..frames {
            let mass: f64 = out.grad.row(t).iter().sum();
            assert!((mass + 1.0).abs() < 1e-6, "frame {t}: {mass}");
        }
    }
}

#[test]
fn gradient_zero_for_tokens_without_arcs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let label = LabelSeq::new(vec![1, 3]).unwrap();
    let e = random_emissions(&mut rng, 6, 5, 2.0);
    let out = ctc_loss(&label, &e).unwrap();
    for t in 0..6 {
        assert_eq!(out.grad.get(t, 2), 0.0);
        assert_eq!(out.grad.get(t, 4), 0.0);
    }
}

/// Gradient with respect to the logits of `e` (rows are log-softmax
/// outputs), i.e. the descent direction that keeps rows normalized.
fn logit_gradient(e: &Emissions, g: &[f64]) -> Vec<f64> {
    let v = e.vocab();
    let mut out = g.to_vec();
    for t in 0..e.frames() {
        let sum: f64 = g[t * v..(t + 1) * v].iter().sum();
        for k in 0..v {
            out[t * v + k] -= e.prob(t, k) * sum;
        }
    }
    out
}

#[test]
fn small_descent_step_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for _ in 0..100 {
        let vocab = rng.random_range(2..=5);
        let frames = rng.random_range(2..=10);
        let label = random_label(&mut rng, vocab, 3);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let out = ctc_loss(&label, &e).unwrap();
        if !out.is_feasible() || out.loss < 1e-9 {
            continue;
        }
        let dir = logit_gradient(&e, out.grad.values());
        for step in [1e-2, 1e-3] {
            let moved: Vec<f64> = e.values().iter().zip(&dir).map(|(x, g)| x - step * g).collect();
            let next = Emissions::log_softmax(frames, vocab, &moved).unwrap();
            assert!(ctc_loss(&label, &next).unwrap().loss < out.loss, "step {step}");
        }
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn vocabulary_permutation_leaves_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let vocab = 5;
        let frames = rng.random_range(1..=8);
        let label = random_label(&mut rng, vocab, 3);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        // permute non-blank ids
        let mut perm: Vec<u32> = (1..vocab as u32).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let map = |v: u32| if v == 0 { 0 } else { perm[v as usize - 1] };
        let relabeled = LabelSeq::new(label.tokens().iter().map(|&v| map(v)).collect()).unwrap();
        let mut values = vec![0.0; frames * vocab];
        for t in 0..frames {
            for v in 0..vocab {
                values[t * vocab + map(v as u32) as usize] = e.get(t, v);
            }
        }
        let permuted = Emissions::from_scores(frames, vocab, values).unwrap();
        let a = ctc_loss(&label, &e).unwrap().loss;
        let b = ctc_loss(&relabeled, &permuted).unwrap().loss;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn star_graph_gradient_is_softmax_share() {
    let g = Wfsa::new(2, vec![Arc::new(0, 1, Label::Star, 0.0)], vec![1]).unwrap();
    let e = Emissions::from_probs(1, 3, &[0.5, 0.2, 0.3]).unwrap();
    let lat = intersect_dense(&g, &e).unwrap();
    assert!((lat.total() - 0.5f64.ln()).abs() < 1e-12);
    let grad = lat.backward();
    assert!((grad.get(0, 1) - 0.4).abs() < 1e-12);
    assert!((grad.get(0, 2) - 0.6).abs() < 1e-12);
    assert_eq!(grad.get(0, 0), 0.0);
}
