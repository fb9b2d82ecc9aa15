mod common;

use atc_core::contrastive::{contrastive_ctc_loss, generate_noisy_decode, ContrastiveConfig};
use atc_core::ctc::{ctc_loss, LabelSeq};
use atc_core::data::{generate, CorpusSpec, SplitSizes};
use atc_core::confidence::{greedy_decode, token_error_rate, ConfidenceMode};
use atc_core::model::{ModelConfig, Perturb, SequenceModel, TrainState};
use atc_core::Emissions;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_decode_scales_ctc() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let vocab = rng.random_range(2..=5);
        let frames = rng.random_range(1..=10);
        let label = random_label(&mut rng, vocab, 4);
        let e = random_emissions(&mut rng, frames, vocab, 2.0);
        let ctc = ctc_loss(&label, &e).unwrap();
        if !ctc.is_feasible() {
            continue;
        }
        let gamma = rng.random_range(0.01..0.99);
        let out = contrastive_ctc_loss(&label, &e, &label, gamma).unwrap();
        assert!((out.loss - (1.0 - gamma) * ctc.loss).abs() <= 1e-12);
        for (a, b) in out.grad.values().iter().zip(ctc.grad.values()) {
            assert!((a - (1.0 - gamma) * b).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_gamma_is_ctc() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let e = random_emissions(&mut rng, 6, 4, 2.0);
    let truth = LabelSeq::new(vec![1, 2]).unwrap();
    let other = LabelSeq::new(vec![3]).unwrap();
    let out = contrastive_ctc_loss(&truth, &e, &other, 0.0).unwrap();
    assert_eq!(out, ctc_loss(&truth, &e).unwrap());
}

/// Truth "abc", decode "adc", nine frames leaning towards ∅aa∅bbcc∅ with
/// b and d tied on frames 5 and 6.
#[test]
fn substituted_token_moves_apart() {
    const A: usize = 1;
    const B: usize = 2;
    const C: usize = 3;
    const D: usize = 4;
    let vocab = 5;
    let path = [0, A, A, 0, B, B, C, C, 0];
    let mut probs = Vec::new();
    for (t, &p) in path.iter().enumerate() {
        let mut row = vec![0.1 / 3.0; vocab];
        if t == 4 || t == 5 {
            row = vec![0.1; vocab];
            row[B] = 0.35;
            row[D] = 0.35;
        } else {
            row[p] = 0.9;
        }
        probs.extend(row);
    }
    let e = Emissions::from_probs(9, vocab, &probs).unwrap();
    let truth = LabelSeq::new(vec![A as u32, B as u32, C as u32]).unwrap();
    let decoded = LabelSeq::new(vec![A as u32, D as u32, C as u32]).unwrap();
    let out = contrastive_ctc_loss(&truth, &e, &decoded, 0.5).unwrap();
    // one small step on the logits
    let step = 0.05;
    let mut logits = e.values().to_vec();
    for t in 0..9 {
        let sum: f64 = out.grad.row(t).iter().sum();
        for v in 0..vocab {
            logits[t * vocab + v] -= step * (out.grad.get(t, v) - e.prob(t, v) * sum);
        }
    }
    let next = Emissions::log_softmax(9, vocab, &logits).unwrap();
    for t in [4, 5] {
        assert!(next.prob(t, B) > e.prob(t, B), "y_b at frame {}", t + 1);
        assert!(next.prob(t, D) < e.prob(t, D), "y_d at frame {}", t + 1);
    }
}

fn small_corpus() -> (atc_core::data::Corpus, SequenceModel) {
    let spec = CorpusSpec {
        sizes: SplitSizes {
            labeled: 120,
            unlabeled: 0,
            dev: 0,
            test: 0,
            source_dev: 0,
        },
        ..CorpusSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let cfg = ModelConfig {
        feature_dim: spec.feature_dim,
        vocab: spec.vocab,
        ..ModelConfig::default()
    };
    (corpus, SequenceModel::new(cfg, 3).unwrap())
}

#[test]
fn noisy_decode_is_seeded_and_degrades() {
    let (corpus, mut model) = small_corpus();
    // a briefly trained model so that clean decodes are non-trivial
    let mut state = TrainState::new(model.clone(), Default::default(), 0.0);
    for _ in 0..15 {
        for u in &corpus.labeled {
            let cache = state.student.forward(&u.features, Perturb::Off).unwrap();
            let out = ctc_loss(&u.label, cache.emissions()).unwrap();
            let g = state.student.backward(&cache, &out.grad);
            state.sgd_step(&g).unwrap();
        }
    }
    model = state.student;
    let cfg = ContrastiveConfig::default();
    let (mut clean_err, mut noisy_err) = (0.0, 0.0);
    for (i, u) in corpus.labeled.iter().enumerate() {
        let a = generate_noisy_decode(&model, &u.features, &cfg, i as u64).unwrap();
        let b = generate_noisy_decode(&model, &u.features, &cfg, i as u64).unwrap();
        assert_eq!(a, b);
        let off = ContrastiveConfig {
            noise_strength: 0.0,
            ..cfg
        };
        let clean = greedy_decode(&model.emissions(&u.features, Perturb::Off).unwrap(), ConfidenceMode::Average);
        let clean = clean.tokens;
        assert_eq!(generate_noisy_decode(&model, &u.features, &off, i as u64).unwrap(), clean);
        clean_err += token_error_rate(&clean, &u.label);
        noisy_err += token_error_rate(&a, &u.label);
    }
    assert!(noisy_err > clean_err, "noisy {noisy_err} vs clean {clean_err}");
}
