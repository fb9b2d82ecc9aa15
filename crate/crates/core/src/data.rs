//! Synthetic labeled/unlabeled sequence corpora.
//!
//! Every non-blank token owns a prototype feature vector. An utterance is a
//! random token sequence where each token is held for a random number of
//! frames, each frame being the prototype plus Gaussian noise. Prototypes
//! come in pairs with a tunable correlation so that substitutions between
//! partner tokens dominate the errors. The target domain (unlabeled, dev,
//! test) can be shifted by a mean offset and inflated noise.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::LabelSeq;
use crate::model::Features;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
    /// Held-out utterances from the labeled domain.
    pub source_dev: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Classes including blank; tokens are `1..vocab`.
    pub vocab: usize,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Probability of a one-frame silence gap after a token; a gap is
    /// always inserted between repeated tokens.
    pub gap_prob: f64,
    pub feature_dim: usize,
    /// Scale of the prototype vectors.
    pub prototype_scale: f64,
    /// Correlation between the prototypes of partner tokens, in `[0, 1)`.
    pub confusion: f64,
    /// Each token instance is blended toward its partner's prototype by a
    /// weight drawn uniformly from `[0, ambiguity]`.
    pub ambiguity: f64,
    /// Per-dimension Gaussian noise on every frame.
    pub noise: f64,
    /// Target-domain shift: mean offset scale and relative noise increase.
    pub shift: f64,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 9,
            min_label_len: 3,
            max_label_len: 8,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            gap_prob: 0.5,
            feature_dim: 16,
            prototype_scale: 1.0,
            confusion: 0.7,
            ambiguity: 0.5,
            noise: 0.6,
            shift: 0.0,
            sizes: SplitSizes {
                labeled: 100,
                unlabeled: 2000,
                dev: 200,
                test: 600,
                source_dev: 200,
            },
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.vocab < 2 {
            return bad("vocab must be >= 2");
        }
        if self.min_label_len > self.max_label_len {
            return bad("min_label_len > max_label_len");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("frames per token range must be 1 <= min <= max");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be > 0");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad("ambiguity must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gap_prob) {
            return bad("gap_prob must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.confusion) {
            return bad("confusion must be in [0, 1)");
        }
        if self.noise < 0.0 || self.shift < 0.0 || self.prototype_scale <= 0.0 {
            return bad("noise and shift must be >= 0, prototype_scale > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub features: Features,
    pub label: LabelSeq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Dev,
    Test,
    SourceDev,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Labeled, Split::Unlabeled, Split::Dev, Split::Test, Split::SourceDev];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::SourceDev => "source_dev",
        }
    }

    fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }

    fn shifted(self) -> bool {
        matches!(self, Split::Unlabeled | Split::Dev | Split::Test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub feature_dim: usize,
    pub vocab: usize,
    pub labeled: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub source_dev: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
            Split::SourceDev => &self.source_dev,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Labeled => &mut self.labeled,
            Split::Unlabeled => &mut self.unlabeled,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
            Split::SourceDev => &mut self.source_dev,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Prototype per token id; row 0 is the zero vector used for silence frames.
pub fn prototypes(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1));
    let f = spec.feature_dim;
    let shared = spec.confusion.sqrt();
    let own = (1.0 - spec.confusion).sqrt();
    let mut protos = vec![vec![0.0; f]];
    let mut partner: Vec<f64> = Vec::new();
    for tok in 1..spec.vocab {
        if tok % 2 == 1 {
            partner = gaussian_vec(&mut rng, f);
        }
        let e = gaussian_vec(&mut rng, f);
        protos.push(
            partner
                .iter()
                .zip(&e)
                .map(|(g, e)| spec.prototype_scale * (shared * g + own * e))
                .collect(),
        );
    }
    protos
}

/// Token sharing a prototype component with `tok` (itself when unpaired).
pub fn partner(tok: u32, vocab: usize) -> u32 {
    let p = if tok % 2 == 1 { tok + 1 } else { tok - 1 };
    if (p as usize) < vocab {
        p
    } else {
        tok
    }
}

fn domain_offset(spec: &CorpusSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 2));
    gaussian_vec(&mut rng, spec.feature_dim)
        .into_iter()
        .map(|g| g * spec.shift * spec.prototype_scale)
        .collect()
}

fn utterance(spec: &CorpusSpec, protos: &[Vec<f64>], offset: Option<&[f64]>, seed: u64, id: String) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(spec.min_label_len..=spec.max_label_len);
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(1..spec.vocab as u32)).collect();
    let durations: Vec<usize> = (0..len)
        .map(|_| rng.random_range(spec.min_frames_per_token..=spec.max_frames_per_token))
        .collect();
    // silence after token i; repeats always get one so they stay separable
    let blends: Vec<f64> = (0..len).map(|_| spec.ambiguity * rng.random::<f64>()).collect();
    let gaps: Vec<usize> = (0..len)
        .map(|i| {
            let repeat = i + 1 < len && tokens[i] == tokens[i + 1];
            usize::from(rng.random_bool(spec.gap_prob) || repeat)
        })
        .collect();
    let label = LabelSeq::new(tokens).expect("tokens drawn from 1..vocab");
    let tokens = label.tokens();
    let frames: usize = (durations.iter().sum::<usize>() + gaps.iter().sum::<usize>()).max(1);
    let sigma = if offset.is_some() {
        spec.noise * (1.0 + spec.shift)
    } else {
        spec.noise
    };
    let f = spec.feature_dim;
    let mut values = Vec::with_capacity(frames * f);
    for (i, &tok) in tokens.iter().enumerate() {
        let own = &protos[tok as usize];
        let other = &protos[partner(tok, spec.vocab) as usize];
        let m = blends[i];
        let blended: Vec<f64> = own.iter().zip(other).map(|(a, b)| (1.0 - m) * a + m * b).collect();
        for k in 0..durations[i] + gaps[i] {
            let proto = if k < durations[i] { &blended } else { &protos[0] };
            for (j, p) in proto.iter().enumerate() {
                let n: f64 = rng.sample(StandardNormal);
                let shift = offset.map_or(0.0, |o| o[j]);
                values.push(p + shift + sigma * n);
            }
        }
    }
    if values.is_empty() {
        values = vec![0.0; f];
    }
    Utterance {
        id,
        features: Features::new(frames, f, values),
        label,
    }
}

/// Builds every split of the corpus; a pure function of `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let protos = prototypes(spec);
    let offset = domain_offset(spec);
    let mut corpus = Corpus {
        feature_dim: spec.feature_dim,
        vocab: spec.vocab,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        source_dev: Vec::new(),
    };
    let sizes = spec.sizes;
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let n = match split {
            Split::Labeled => sizes.labeled,
            Split::Unlabeled => sizes.unlabeled,
            Split::Dev => sizes.dev,
            Split::Test => sizes.test,
            Split::SourceDev => sizes.source_dev,
        };
        let shift = (split.shifted() && spec.shift > 0.0).then_some(offset.as_slice());
        let split_seed = mix_seed(spec.seed, 100 + k as u64);
        *corpus.split_mut(split) = (0..n)
            .map(|i| {
                let id = format!("{}-{i:05}", split.name());
                utterance(spec, &protos, shift, mix_seed(split_seed, i as u64), id)
            })
            .collect();
    }
    Ok(corpus)
}

/// SpecAugment-style perturbation strengths at `strength = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Expected fraction of frames zeroed by time masks.
    pub time_mask_rate: f64,
    pub time_mask_width: usize,
    /// Probability that a feature channel is zeroed for the whole utterance.
    pub channel_mask_rate: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            time_mask_rate: 0.15,
            time_mask_width: 2,
            channel_mask_rate: 0.1,
            noise_std: 0.3,
        }
    }
}

impl AugmentConfig {
    /// Expected fraction of entries zeroed at `strength`.
    pub fn masked_fraction(&self, strength: f64) -> f64 {
        let pt = (strength * self.time_mask_rate).clamp(0.0, 1.0);
        let pc = (strength * self.channel_mask_rate).clamp(0.0, 1.0);
        1.0 - (1.0 - pt) * (1.0 - pc)
    }
}

/// [`augment_with`] under the default [`AugmentConfig`].
pub fn augment(features: &Features, strength: f64, seed: u64) -> Features {
    augment_with(features, strength, &AugmentConfig::default(), seed)
}

/// Adds noise, then zeroes random time spans and whole channels.
///
/// Span starts are drawn so that each frame is covered with probability
/// `strength * time_mask_rate`, edges included.
pub fn augment_with(features: &Features, strength: f64, cfg: &AugmentConfig, seed: u64) -> Features {
    if strength <= 0.0 {
        return features.clone();
    }
    let strength = strength.min(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (frames, dim) = (features.frames, features.dim);
    let mut values = features.values.clone();
    let noise_std = strength * cfg.noise_std;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("positive std");
        values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let cover = (strength * cfg.time_mask_rate).clamp(0.0, 1.0);
    let width = cfg.time_mask_width.max(1);
    let start_p = 1.0 - (1.0 - cover).powf(1.0 / width as f64);
    let mut frame_masked = vec![false; frames];
    for start in 0..frames + width - 1 {
        if rng.random::<f64>() < start_p {
            let lo = start.saturating_sub(width - 1);
            frame_masked[lo..=start.min(frames - 1)].fill(true);
        }
    }
    let pc = (strength * cfg.channel_mask_rate).clamp(0.0, 1.0);
    let chan_masked: Vec<bool> = (0..dim).map(|_| rng.random::<f64>() < pc).collect();
    for t in 0..frames {
        for k in 0..dim {
            if frame_masked[t] || chan_masked[k] {
                values[t * dim + k] = 0.0;
            }
        }
    }
    Features::new(frames, dim, values)
}

/// Shuffled index order over `n` items, reshuffled each epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const MANIFEST: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "#atc-corpus v1";

/// Writes `dir/manifest.tsv` and one little-endian `f64` row-major feature
/// file per utterance under `dir/feats/`.
///
/// Manifest header: `#atc-corpus v1 feature_dim=F vocab=V dtype=f64le`.
/// Records: `split id path frames tokens` (tab-separated, tokens
/// space-separated).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(io_err(&feats))?;
    let manifest_path = dir.join(MANIFEST);
    let mut out = io::BufWriter::new(fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    let mut text = format!(
        "{MANIFEST_MAGIC} feature_dim={} vocab={} dtype=f64le\n",
        corpus.feature_dim, corpus.vocab
    );
    for split in Split::ALL {
        for utt in corpus.split(split) {
            let rel = format!("feats/{}.bin", utt.id);
            let path = dir.join(&rel);
            let bytes: Vec<u8> = utt.features.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(io_err(&path))?;
            let toks: Vec<String> = utt.label.tokens().iter().map(|t| t.to_string()).collect();
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                split.name(),
                utt.id,
                rel,
                utt.features.frames,
                toks.join(" ")
            ));
        }
    }
    out.write_all(text.as_bytes()).map_err(io_err(&manifest_path))?;
    out.flush().map_err(io_err(&manifest_path))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, msg: &str| DataError::Manifest {
        line,
        msg: msg.to_string(),
    };
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "empty manifest"))?
        .map_err(io_err(&manifest_path))?;
    if !header.starts_with(MANIFEST_MAGIC) {
        return Err(bad(1, "missing #atc-corpus v1 header"));
    }
    let field = |key: &str| -> Option<usize> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .and_then(|v| v.parse().ok())
    };
    let feature_dim = field("feature_dim").ok_or_else(|| bad(1, "missing feature_dim"))?;
    let vocab = field("vocab").ok_or_else(|| bad(1, "missing vocab"))?;
    let mut corpus = Corpus {
        feature_dim,
        vocab,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        source_dev: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(n, "expected 5 tab-separated columns"));
        }
        let split = Split::from_name(cols[0]).ok_or_else(|| bad(n, "unknown split"))?;
        let frames: usize = cols[3].parse().map_err(|_| bad(n, "bad frame count"))?;
        let tokens = cols[4]
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(n, "bad token"))?;
        let label = LabelSeq::new(tokens).map_err(|e| bad(n, &e.to_string()))?;
        let path = dir.join(cols[2]);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != frames * feature_dim * 8 {
            return Err(bad(n, "feature file size does not match declared dims"));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        corpus.split_mut(split).push(Utterance {
            id: cols[1].to_string(),
            features: Features::new(frames, feature_dim, values),
            label,
        });
    }
    Ok(corpus)
}
