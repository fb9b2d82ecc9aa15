//! Synthetic corpus statistics and augmentation.

use atc_core::confidence::{greedy_decode, token_error_rate, ConfidenceMode};
use atc_core::ctc::ctc_loss;
use atc_core::data::{augment, generate, prototypes, AugmentConfig, CorpusSpec, SplitSizes};
use atc_core::model::{Features, ModelConfig, OptimConfig, Perturb, SequenceModel, TrainState};
use atc_core::pipeline::{evaluate, run_seeding, RunConfig, SeedLoss, Which};

fn sizes(labeled: usize, test: usize) -> SplitSizes {
    SplitSizes {
        labeled,
        unlabeled: 0,
        dev: 0,
        test,
        source_dev: test,
    }
}

#[test]
fn augmentation_masks_the_expected_fraction() {
    let x = Features::new(400, 16, vec![1.0; 400 * 16]);
    let cfg = AugmentConfig {
        noise_std: 0.0,
        ..AugmentConfig::default()
    };
    for strength in [0.25, 0.5, 1.0] {
        let mut zeroed = 0usize;
        let trials = 50;
        for seed in 0..trials {
            let y = atc_core::data::augment_with(&x, strength, &cfg, seed);
            zeroed += y.values.iter().filter(|&&v| v == 0.0).count();
        }
        let got = zeroed as f64 / (trials as usize * x.values.len()) as f64;
        let want = cfg.masked_fraction(strength);
        assert!((got - want).abs() <= 0.2 * want, "strength {strength}: {got} vs {want}");
    }
    assert_eq!(augment(&x, 0.0, 3), x);
    assert_eq!(augment(&x, 0.5, 3), augment(&x, 0.5, 3));
}

#[test]
fn token_marginal_is_uniform() {
    let spec = CorpusSpec {
        sizes: sizes(2000, 0),
        ..CorpusSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let mut counts = vec![0usize; spec.vocab];
    for u in &corpus.labeled {
        for &t in u.label.tokens() {
            counts[t as usize] += 1;
        }
    }
    assert_eq!(counts[0], 0);
    let n: usize = counts.iter().sum();
    let k = (spec.vocab - 1) as f64;
    let (mean, sd) = (n as f64 / k, (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt());
    for (tok, &c) in counts.iter().enumerate().skip(1) {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "token {tok}: {c} vs {mean}±{sd}");
    }
}

#[test]
fn noiseless_frames_are_separable() {
    let spec = CorpusSpec {
        noise: 0.0,
        ..CorpusSpec::default()
    };
    let protos = prototypes(&spec);
    // every pair of distinct prototypes (silence included) is well apart
    for i in 0..protos.len() {
        for j in 0..i {
            let d: f64 = protos[i].iter().zip(&protos[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.5, "prototypes {i} and {j} are {d} apart");
        }
    }
    // and a nearest-prototype decoder reads noiseless utterances exactly
    let corpus = generate(&CorpusSpec {
        sizes: sizes(100, 0),
        ..spec.clone()
    })
    .unwrap();
    for u in &corpus.labeled {
        let mut path = Vec::new();
        for t in 0..u.features.frames {
            let row = u.features.row(t);
            let nearest = (0..protos.len())
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&protos[a]).map(|(x, p)| (x - p).powi(2)).sum();
                    let db: f64 = row.iter().zip(&protos[b]).map(|(x, p)| (x - p).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            path.push(nearest as u32);
        }
        let mut collapsed: Vec<u32> = Vec::new();
        let mut prev = 0;
        for &p in &path {
            if p != 0 && p != prev {
                collapsed.push(p);
            }
            prev = p;
        }
        assert_eq!(collapsed, u.label.tokens(), "{}", u.id);
    }
}

#[test]
fn every_label_fits_its_frames() {
    for seed in 0..3 {
        let spec = CorpusSpec {
            seed,
            gap_prob: 0.0,
            sizes: sizes(200, 0),
            ..CorpusSpec::default()
        };
        let corpus = generate(&spec).unwrap();
        for u in &corpus.labeled {
            assert!(u.label.min_frames() <= u.features.frames, "{}", u.id);
        }
    }
}

#[test]
fn shifted_condition_is_harder() {
    let mut cfg = RunConfig::default();
    cfg.seeding.loss = SeedLoss::Ctc;
    cfg.seeding.updates = 150;
    cfg.data.sizes = sizes(100, 200);
    cfg.data.shift = 0.5;
    let corpus = generate(&cfg.data).unwrap();
    let (state, _) = run_seeding(&cfg, &corpus).unwrap();
    let source = evaluate(&state, &corpus.source_dev, Which::Student).unwrap();
    let target = evaluate(&state, &corpus.test, Which::Student).unwrap();
    assert!(
        target.token_error_rate > source.token_error_rate,
        "target {} vs source {}",
        target.token_error_rate,
        source.token_error_rate
    );
}

#[test]
fn trained_model_beats_untrained() {
    let spec = CorpusSpec {
        sizes: sizes(64, 64),
        noise: 0.3,
        ..CorpusSpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let model = SequenceModel::new(ModelConfig::default(), 2).unwrap();
    let ter = |m: &SequenceModel| -> f64 {
        corpus
            .test
            .iter()
            .map(|u| {
                let p = greedy_decode(&m.emissions(&u.features, Perturb::Off).unwrap(), ConfidenceMode::Average);
                token_error_rate(&p.tokens, &u.label)
            })
            .sum::<f64>()
            / corpus.test.len() as f64
    };
    let before = ter(&model);
    assert!(before > 0.5, "untrained TER {before}");
    let mut state = TrainState::new(model, OptimConfig::default(), 0.0);
    for _ in 0..20 {
        for u in &corpus.labeled {
            let cache = state.student.forward(&u.features, Perturb::Off).unwrap();
            let out = ctc_loss(&u.label, cache.emissions()).unwrap();
            let g = state.student.backward(&cache, &out.grad);
            state.sgd_step(&g).unwrap();
        }
    }
    let after = ter(&state.student);
    assert!(after < before / 2.0, "{after} vs {before}");
}
