//! Two-stage semi-supervised training.
//!
//! Stage one trains a seed model on labeled data (CTC or contrastive CTC).
//! Stage two alternates a labeled CTC batch with an unlabeled batch whose
//! targets come from the teacher: plain CTC on the pseudo-labels (`pl`,
//! `mpl`) or ATC with low-confidence tokens flagged (`apl`). The teacher is
//! an exponential moving average of the student.
//!
//! A run directory holds `config.toml` (the resolved config),
//! `metrics.csv`, `checkpoints/` and `summary.json`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atc::{build_atc_graph, AtcConfig, AtcVariant, MaskedLabel, RepeatRule};
use crate::confidence::{
    align_verdict, detect_errors, greedy_decode, pr_auc, AlignmentVerdict, ConfidenceMode, EditCounts, PseudoLabel,
};
use crate::contrastive::{contrastive_ctc_loss, generate_noisy_decode, ContrastiveConfig};
use crate::ctc::{build_ctc_graph, ctc_loss, graph_loss, LabelSeq};
use crate::data::{augment, generate, mix_seed, BatchSampler, Corpus, CorpusSpec, DataError, Split, Utterance};
use crate::error::{ConfigError, FstError};
use crate::fst::Wfsa;
use crate::model::{ModelConfig, ModelError, OptimConfig, Perturb, SequenceModel, TrainState};
use crate::thresholding::ThresholdState;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fst(#[from] FstError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at update {update}: {reason}")]
    Diverged { update: u64, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("cannot parse {path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Labeled data only.
    Supervised,
    /// Pseudo-labels from the frozen seed model, made once.
    Pl,
    /// Pseudo-labels from the EMA teacher every update, trained with CTC.
    Mpl,
    /// As `mpl`, trained with ATC on low-confidence tokens.
    Apl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Pl => "pl",
            Mode::Mpl => "mpl",
            Mode::Apl => "apl",
        }
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "pl" => Ok(Mode::Pl),
            "mpl" => Ok(Mode::Mpl),
            "apl" => Ok(Mode::Apl),
            _ => Err(ConfigError::Invalid(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedLoss {
    Ctc,
    Contrastive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// ATC for the whole stage.
    OneStep,
    /// ATC until the switch fraction, CTC on pseudo-labels afterwards.
    TwoStep,
}

impl FromStr for Schedule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_step" | "one-step" => Ok(Schedule::OneStep),
            "two_step" | "two-step" => Ok(Schedule::TwoStep),
            _ => Err(ConfigError::Invalid(format!("unknown schedule `{s}`"))),
        }
    }
}

/// `auto` or a fixed value in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdSource {
    Auto,
    Fixed(f64),
}

impl FromStr for ThresholdSource {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(ThresholdSource::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("threshold must be `auto` or a number, got `{s}`")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(ConfigError::OutOfRange {
                name: "threshold",
                value: v,
                range: "[0, 1]",
            });
        }
        Ok(ThresholdSource::Fixed(v))
    }
}

impl TryFrom<String> for ThresholdSource {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ThresholdSource> for String {
    fn from(t: ThresholdSource) -> Self {
        t.to_string()
    }
}

impl fmt::Display for ThresholdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdSource::Auto => write!(f, "auto"),
            ThresholdSource::Fixed(v) => write!(f, "{v}"),
        }
    }
}

/// Which model decodes the labeled batch for threshold statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsModel {
    /// Reuse the student's training forward pass.
    #[default]
    Student,
    /// Decode the clean labeled input with the teacher.
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub mode: Mode,
    pub seed: u64,
    /// EMA decay shared by the teacher and the threshold accumulators.
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedingConfig {
    pub loss: SeedLoss,
    pub updates: u64,
    pub gamma: f64,
    pub noise_strength: f64,
    pub augment: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub updates: u64,
    pub schedule: Schedule,
    pub switch_fraction: f64,
    pub threshold: ThresholdSource,
    pub relative_correction: bool,
    pub variant: AtcVariant,
    /// `0` deletes flagged arcs, which drops every utterance with a flag.
    pub eta: f64,
    pub psi: f64,
    #[serde(default)]
    pub repeat_rule: RepeatRule,
    #[serde(default)]
    pub confidence: ConfidenceMode,
    #[serde(default)]
    pub stats_model: StatsModel,
    pub augment: f64,
    /// Weight of the unlabeled loss relative to the labeled one.
    pub unlabeled_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate the teacher on dev every this many updates (0 = never).
    pub cadence: u64,
    /// Write a checkpoint at every evaluation.
    pub checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seeding: SeedingConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub batch: BatchConfig,
    pub eval: EvalConfig,
    pub data: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = CorpusSpec::default();
        Self {
            run: RunSection {
                mode: Mode::Apl,
                seed: 0,
                lambda: 0.99,
            },
            model: ModelConfig {
                feature_dim: data.feature_dim,
                vocab: data.vocab,
                ..ModelConfig::default()
            },
            optim: OptimConfig::default(),
            seeding: SeedingConfig {
                loss: SeedLoss::Contrastive,
                updates: 150,
                gamma: 0.5,
                noise_strength: 0.3,
                augment: 0.5,
            },
            pseudo_label: PseudoLabelConfig {
                updates: 1500,
                schedule: Schedule::TwoStep,
                switch_fraction: 0.5,
                threshold: ThresholdSource::Auto,
                relative_correction: true,
                variant: AtcVariant::Replace,
                eta: 0.3,
                psi: 0.5,
                repeat_rule: RepeatRule::Distrust,
                confidence: ConfidenceMode::Average,
                stats_model: StatsModel::Student,
                augment: 0.5,
                unlabeled_weight: 1.0,
            },
            batch: BatchConfig {
                labeled: 8,
                unlabeled: 8,
            },
            eval: EvalConfig {
                cadence: 100,
                checkpoints: false,
            },
            data,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |name: &'static str, value: f64, ok: bool, range: &'static str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { name, value, range })
            }
        };
        let l = self.run.lambda;
        range("lambda", l, (0.0..=1.0).contains(&l), "[0, 1]")?;
        let p = &self.pseudo_label;
        range(
            "switch_fraction",
            p.switch_fraction,
            p.switch_fraction > 0.0 && p.switch_fraction < 1.0,
            "(0, 1)",
        )?;
        if p.eta != 0.0 {
            AtcConfig::new(p.variant, p.eta, p.psi)?;
        }
        if self.seeding.loss == SeedLoss::Contrastive {
            ContrastiveConfig::new(self.seeding.gamma, self.seeding.noise_strength)?;
        }
        if self.model.feature_dim != self.data.feature_dim || self.model.vocab != self.data.vocab {
            return Err(ConfigError::Invalid(
                "model feature_dim/vocab must match the data section".into(),
            ));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch.labeled == 0 {
            return Err(ConfigError::Invalid("labeled batch size must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Update index at which a two-step schedule leaves ATC.
    pub fn switch_update(&self) -> u64 {
        (self.pseudo_label.switch_fraction * self.pseudo_label.updates as f64).round() as u64
    }

    fn atc(&self) -> Option<AtcConfig> {
        let p = &self.pseudo_label;
        (p.eta > 0.0).then(|| AtcConfig {
            variant: p.variant,
            eta: p.eta,
            psi: p.psi,
            repeat_rule: p.repeat_rule,
        })
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: u64,
    pub split: String,
    pub mode: String,
    pub loss: Option<f64>,
    pub token_error_rate: Option<f64>,
    pub auc: Option<f64>,
    pub mean_conf_correct: Option<f64>,
    pub mean_conf_incorrect: Option<f64>,
    pub threshold: Option<f64>,
    #[serde(rename = "T_e")]
    pub t_e: Option<f64>,
    #[serde(rename = "T_l")]
    pub t_l: Option<f64>,
    #[serde(rename = "T_u")]
    pub t_u: Option<f64>,
}

impl MetricsRow {
    fn new(update: u64, split: &str, mode: &str) -> Self {
        Self {
            update,
            split: split.to_string(),
            mode: mode.to_string(),
            loss: None,
            token_error_rate: None,
            auc: None,
            mean_conf_correct: None,
            mean_conf_incorrect: None,
            threshold: None,
            t_e: None,
            t_l: None,
            t_u: None,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    for row in rows {
        w.serialize(row).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, PipelineError> {
    let fmt_err = |e: csv::Error| PipelineError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(fmt_err)?;
    r.deserialize().collect::<Result<Vec<MetricsRow>, _>>().map_err(fmt_err)
}

/// Which copy of the model to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Student,
    Teacher,
}

/// Decodes, per-token verdicts and confidences of one model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeDump {
    pub verdicts: Vec<AlignmentVerdict>,
    pub confidences: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub token_error_rate: f64,
    pub auc: Option<f64>,
    pub mean_conf_correct: Option<f64>,
    pub mean_conf_incorrect: Option<f64>,
    pub counts: EditCounts,
}

pub fn decode_split(
    model: &SequenceModel,
    utts: &[Utterance],
    mode: ConfidenceMode,
) -> Result<DecodeDump, PipelineError> {
    let decoded = utts
        .par_iter()
        .map(|u| {
            let e = model.emissions(&u.features, Perturb::Off)?;
            let p = greedy_decode(&e, mode);
            Ok((align_verdict(&p, &u.label), p.confidences))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let (verdicts, confidences) = decoded.into_iter().unzip();
    Ok(DecodeDump { verdicts, confidences })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl DecodeDump {
    pub fn summarize(&self) -> EvalResult {
        let mut counts = EditCounts::default();
        for v in &self.verdicts {
            counts.merge(&v.counts);
        }
        let pairs = || {
            self.verdicts
                .iter()
                .zip(&self.confidences)
                .flat_map(|(v, c)| v.correct.iter().copied().zip(c.iter().copied()))
        };
        EvalResult {
            token_error_rate: counts.rate(),
            auc: pr_auc(&self.verdicts, &self.confidences),
            mean_conf_correct: mean(pairs().filter(|p| p.0).map(|p| p.1)),
            mean_conf_incorrect: mean(pairs().filter(|p| !p.0).map(|p| p.1)),
            counts,
        }
    }
}

/// Token error rate, error-detection AUC and mean confidences of the chosen
/// model on `utts`.
pub fn evaluate(state: &TrainState, utts: &[Utterance], which: Which) -> Result<EvalResult, PipelineError> {
    let model = match which {
        Which::Student => &state.student,
        Which::Teacher => &state.teacher,
    };
    Ok(decode_split(model, utts, ConfidenceMode::Average)?.summarize())
}

/// Everything a run produces besides files.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    /// Final teacher metrics on the test split.
    pub test: EvalResult,
    /// Teacher metrics on dev when the two-step switch point is reached.
    pub at_switch: Option<EvalResult>,
    /// `Star` arcs in label graphs built at or after the switch update.
    pub star_arcs_after_switch: usize,
    /// `Star` arcs in all label graphs of the pseudo-labeling stage.
    pub star_arcs_total: usize,
    /// Unlabeled utterances dropped (infeasible or deleted by `eta = 0`).
    pub skipped_unlabeled: usize,
    /// Digest of the student parameters after every update.
    pub trajectory: Vec<u64>,
}

/// FNV-1a over the bit patterns of `params`.
pub fn param_digest(params: &[f64]) -> u64 {
    params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
        p.to_bits()
            .to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
    })
}

/// Saved training state; loading restores every bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub update: u64,
    pub state: TrainState,
    pub threshold: ThresholdState,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string(self).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        if ck.version != Self::VERSION {
            return Err(PipelineError::Format {
                path: path.display().to_string(),
                msg: format!("unsupported checkpoint version {}", ck.version),
            });
        }
        Ok(ck)
    }
}

/// What the loss of one utterance is computed against.
enum Target<'a> {
    Ctc(&'a LabelSeq),
    Contrastive { truth: &'a LabelSeq, cfg: ContrastiveConfig },
    Graph(Wfsa),
}

struct UttResult {
    loss: f64,
    grads: Vec<f64>,
    /// Greedy decode of the student's training pass.
    decode: PseudoLabel,
}

/// Student forward on the augmented input, loss, and parameter gradient.
/// `None` when the target is infeasible.
fn utterance_step(
    model: &SequenceModel,
    utt: &Utterance,
    target: &Target<'_>,
    augment_strength: f64,
    conf_mode: ConfidenceMode,
    seed: u64,
) -> Result<Option<UttResult>, PipelineError> {
    let x = augment(&utt.features, augment_strength, mix_seed(seed, 0));
    let cache = model.forward(&x, Perturb::Off)?;
    let em = cache.emissions();
    let out = match target {
        Target::Ctc(label) => ctc_loss(label, em)?,
        Target::Contrastive { truth, cfg } => {
            let decoded = generate_noisy_decode(model, &x, cfg, mix_seed(seed, 1))?;
            contrastive_ctc_loss(truth, em, &decoded, cfg.gamma)?
        }
        Target::Graph(g) => graph_loss(g, em)?,
    };
    if !out.is_feasible() {
        return Ok(None);
    }
    let grads = model.backward(&cache, &out.grad);
    Ok(Some(UttResult {
        loss: out.loss,
        grads,
        decode: greedy_decode(em, conf_mode),
    }))
}

/// Sums in batch order so results do not depend on thread scheduling.
fn reduce_mean(results: &[Option<UttResult>], n_params: usize) -> Option<(f64, Vec<f64>)> {
    let ok: Vec<&UttResult> = results.iter().flatten().collect();
    if ok.is_empty() {
        return None;
    }
    let k = ok.len() as f64;
    let mut grads = vec![0.0; n_params];
    let mut loss = 0.0;
    for r in &ok {
        loss += r.loss;
        for (g, x) in grads.iter_mut().zip(&r.grads) {
            *g += x;
        }
    }
    grads.iter_mut().for_each(|g| *g /= k);
    Some((loss / k, grads))
}

fn check_finite(update: u64, loss: f64) -> Result<(), PipelineError> {
    if loss.is_nan() {
        return Err(PipelineError::Diverged {
            update,
            reason: "loss is NaN".into(),
        });
    }
    Ok(())
}

/// Trains the seed model on labeled data; the returned teacher equals the
/// student.
pub fn run_seeding(cfg: &RunConfig, corpus: &Corpus) -> Result<(TrainState, Vec<MetricsRow>), PipelineError> {
    cfg.validate()?;
    let student = SequenceModel::new(cfg.model, mix_seed(cfg.run.seed, 10))?;
    let mut state = TrainState::new(student, cfg.optim, cfg.run.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.run.seed, 11));
    let mut sampler = BatchSampler::new(corpus.labeled.len(), &mut rng);
    let s = &cfg.seeding;
    let contrastive = ContrastiveConfig {
        gamma: s.gamma,
        noise_strength: s.noise_strength,
    };
    let mut rows = Vec::new();
    for update in 0..s.updates {
        let batch = sampler.next_batch(cfg.batch.labeled, &mut rng);
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let results = batch
            .par_iter()
            .zip(&seeds)
            .map(|(&i, &seed)| {
                let utt = &corpus.labeled[i];
                let target = match s.loss {
                    SeedLoss::Ctc => Target::Ctc(&utt.label),
                    SeedLoss::Contrastive => Target::Contrastive {
                        truth: &utt.label,
                        cfg: contrastive,
                    },
                };
                utterance_step(&state.student, utt, &target, s.augment, ConfidenceMode::Average, seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let Some((loss, grads)) = reduce_mean(&results, state.student.params().len()) else {
            warn!("seeding update {update}: no feasible utterance in batch");
            continue;
        };
        check_finite(update, loss)?;
        state.sgd_step(&grads).map_err(|e| PipelineError::Diverged {
            update,
            reason: e.to_string(),
        })?;
        let mut row = MetricsRow::new(update, "seed", seed_mode_name(s.loss));
        row.loss = Some(loss);
        rows.push(row);
    }
    state.sync_teacher();
    state.step = 0;
    Ok((state, rows))
}

fn seed_mode_name(loss: SeedLoss) -> &'static str {
    match loss {
        SeedLoss::Ctc => "seed-ctc",
        SeedLoss::Contrastive => "seed-contrastive",
    }
}

fn eval_row(update: u64, split: Split, mode: Mode, r: &EvalResult) -> MetricsRow {
    let mut row = MetricsRow::new(update, split.name(), mode.name());
    row.token_error_rate = Some(r.token_error_rate);
    row.auc = r.auc;
    row.mean_conf_correct = r.mean_conf_correct;
    row.mean_conf_incorrect = r.mean_conf_incorrect;
    row
}

/// Stage two. `out_dir`, when given, receives checkpoints at every
/// evaluation.
pub fn run_pseudo_labeling(
    cfg: &RunConfig,
    mut state: TrainState,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let p = &cfg.pseudo_label;
    let mode = cfg.run.mode;
    let atc = cfg.atc();
    state.ema_decay = cfg.run.lambda;
    let mut threshold = ThresholdState::new(cfg.run.lambda.min(1.0 - 1e-12))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.run.seed, 12));
    let mut lab_sampler = BatchSampler::new(corpus.labeled.len(), &mut rng);
    let mut unl_sampler = BatchSampler::new(corpus.unlabeled.len(), &mut rng);
    let n_params = state.student.params().len();
    let switch = cfg.switch_update();

    let frozen_labels: Vec<PseudoLabel> = if mode == Mode::Pl {
        corpus
            .unlabeled
            .par_iter()
            .map(|u| Ok(greedy_decode(&state.teacher.emissions(&u.features, Perturb::Off)?, p.confidence)))
            .collect::<Result<_, ModelError>>()?
    } else {
        Vec::new()
    };

    let mut rows = Vec::new();
    let mut trajectory = Vec::with_capacity(p.updates as usize);
    let mut at_switch = None;
    let (mut star_after, mut star_total, mut skipped) = (0usize, 0usize, 0usize);

    for update in 0..p.updates {
        let atc_phase = mode == Mode::Apl && (p.schedule == Schedule::OneStep || update < switch);

        let lab_batch = lab_sampler.next_batch(cfg.batch.labeled, &mut rng);
        let lab_seeds: Vec<u64> = lab_batch.iter().map(|_| rng.random()).collect();
        let lab_results = lab_batch
            .par_iter()
            .zip(&lab_seeds)
            .map(|(&i, &seed)| {
                let utt = &corpus.labeled[i];
                utterance_step(&state.student, utt, &Target::Ctc(&utt.label), p.augment, p.confidence, seed)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let (unl_batch, unl_seeds) = if mode == Mode::Supervised {
            (Vec::new(), Vec::new())
        } else {
            let b = unl_sampler.next_batch(cfg.batch.unlabeled, &mut rng);
            let s: Vec<u64> = b.iter().map(|_| rng.random()).collect();
            (b, s)
        };

        // labeled statistics
        let (lab_verdicts, lab_confs): (Vec<AlignmentVerdict>, Vec<Vec<f64>>) = match p.stats_model {
            StatsModel::Student => lab_batch
                .iter()
                .zip(&lab_results)
                .filter_map(|(&i, r)| r.as_ref().map(|r| (i, r)))
                .map(|(i, r)| (align_verdict(&r.decode, &corpus.labeled[i].label), r.decode.confidences.clone()))
                .unzip(),
            StatsModel::Teacher => {
                let utts: Vec<Utterance> = lab_batch.iter().map(|&i| corpus.labeled[i].clone()).collect();
                let dump = decode_split(&state.teacher, &utts, p.confidence)?;
                (dump.verdicts, dump.confidences)
            }
        };
        threshold.update_labeled(&lab_verdicts, &lab_confs);

        let pseudo: Vec<PseudoLabel> = match mode {
            Mode::Supervised => Vec::new(),
            Mode::Pl => unl_batch.iter().map(|&i| frozen_labels[i].clone()).collect(),
            Mode::Mpl | Mode::Apl => unl_batch
                .par_iter()
                .map(|&i| {
                    let e = state.teacher.emissions(&corpus.unlabeled[i].features, Perturb::Off)?;
                    Ok(greedy_decode(&e, p.confidence))
                })
                .collect::<Result<_, ModelError>>()?,
        };
        if !pseudo.is_empty() {
            let confs: Vec<Vec<f64>> = pseudo.iter().map(|pl| pl.confidences.clone()).collect();
            threshold.update_unlabeled(&confs);
        }
        let thr = match p.threshold {
            ThresholdSource::Fixed(v) => Some(v),
            ThresholdSource::Auto => threshold.current_threshold(p.relative_correction).ok(),
        };

        let mut targets: Vec<Option<Wfsa>> = Vec::with_capacity(pseudo.len());
        for pl in &pseudo {
            let masked = match (atc_phase, thr) {
                (true, Some(t)) => detect_errors(pl, t),
                _ => MaskedLabel::trusted(pl.tokens.clone()),
            };
            let graph = match atc {
                _ if !atc_phase => build_ctc_graph(masked.tokens()),
                Some(ref a) => build_atc_graph(&masked, a),
                None if masked.flagged() > 0 => {
                    targets.push(None);
                    continue;
                }
                None => build_ctc_graph(masked.tokens()),
            };
            let stars = graph.star_arcs();
            star_total += stars;
            if update >= switch {
                star_after += stars;
            }
            targets.push(Some(graph));
        }
        let unl_results = unl_batch
            .par_iter()
            .zip(&unl_seeds)
            .zip(targets)
            .map(|((&i, &seed), graph)| match graph {
                Some(g) => utterance_step(
                    &state.student,
                    &corpus.unlabeled[i],
                    &Target::Graph(g),
                    p.augment,
                    p.confidence,
                    seed,
                ),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>, _>>()?;
        skipped += unl_results.iter().filter(|r| r.is_none()).count();
        if !unl_batch.is_empty() && unl_results.iter().all(|r| r.is_none()) {
            warn!("update {update}: every unlabeled utterance skipped, labeled-only step");
        }

        let lab = reduce_mean(&lab_results, n_params);
        let unl = reduce_mean(&unl_results, n_params);
        let mut grads = vec![0.0; n_params];
        let mut loss = 0.0;
        if let Some((l, g)) = &lab {
            loss += l;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if let Some((l, g)) = &unl {
            loss += p.unlabeled_weight * l;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += p.unlabeled_weight * b);
        }
        check_finite(update, loss)?;
        state.sgd_step(&grads).map_err(|e| PipelineError::Diverged {
            update,
            reason: e.to_string(),
        })?;
        state.ema_update();
        trajectory.push(param_digest(state.student.params()));

        let mut row = MetricsRow::new(update, "train", mode.name());
        row.loss = (lab.is_some() || unl.is_some()).then_some(loss);
        row.threshold = thr;
        row.t_e = threshold.t_e.get();
        row.t_l = threshold.t_l.get();
        row.t_u = threshold.t_u.get();
        rows.push(row);

        let done = update + 1;
        let at_cadence = cfg.eval.cadence > 0 && done % cfg.eval.cadence == 0;
        if at_cadence || done == switch {
            let r = evaluate(&state, &corpus.dev, Which::Teacher)?;
            debug!(
                "update {done}: dev TER {:.4} AUC {:?} threshold {:?}",
                r.token_error_rate, r.auc, thr
            );
            rows.push(eval_row(done, Split::Dev, mode, &r));
            if done == switch {
                at_switch = Some(r);
            }
            if let (Some(dir), true) = (out_dir, cfg.eval.checkpoints) {
                let ck = Checkpoint {
                    version: Checkpoint::VERSION,
                    update: done,
                    state: state.clone(),
                    threshold: threshold.clone(),
                    rng: rng.clone(),
                };
                let ck_dir = dir.join("checkpoints");
                fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
                ck.save(&ck_dir.join(format!("ckpt-{done:06}.json")))?;
            }
        }
    }

    let test = evaluate(&state, &corpus.test, Which::Teacher)?;
    rows.push(eval_row(p.updates, Split::Test, mode, &test));
    info!(
        "{} finished: test TER {:.4}, AUC {:?}",
        mode.name(),
        test.token_error_rate,
        test.auc
    );
    if let Some(dir) = out_dir {
        let ck = Checkpoint {
            version: Checkpoint::VERSION,
            update: p.updates,
            state: state.clone(),
            threshold,
            rng,
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        ck.save(&dir.join("final.ckpt.json"))?;
    }
    Ok(RunOutcome {
        state,
        rows,
        test,
        at_switch,
        star_arcs_after_switch: star_after,
        star_arcs_total: star_total,
        skipped_unlabeled: skipped,
        trajectory,
    })
}

/// Summary written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub seed_test: EvalResult,
    pub final_test: EvalResult,
    pub star_arcs_after_switch: usize,
    pub skipped_unlabeled: usize,
}

/// Seeding plus pseudo-labeling, from an already generated corpus.
pub fn run_with_corpus(
    cfg: &RunConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<(RunOutcome, RunSummary), PipelineError> {
    let (seeded, mut rows) = run_seeding(cfg, corpus)?;
    let seed_test = evaluate(&seeded, &corpus.test, Which::Teacher)?;
    let mut outcome = run_pseudo_labeling(cfg, seeded, corpus, out_dir)?;
    rows.append(&mut outcome.rows);
    outcome.rows = rows;
    let summary = RunSummary {
        mode: cfg.run.mode,
        seed: cfg.run.seed,
        seed_test,
        final_test: outcome.test.clone(),
        star_arcs_after_switch: outcome.star_arcs_after_switch,
        skipped_unlabeled: outcome.skipped_unlabeled,
    };
    Ok((outcome, summary))
}

/// Full run writing `config.toml`, `metrics.csv` and `summary.json` into
/// `out_dir`.
pub fn run_to_dir(cfg: &RunConfig, corpus: &Corpus, out_dir: &Path) -> Result<RunSummary, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let (outcome, summary) = run_with_corpus(cfg, corpus, Some(out_dir))?;
    write_metrics(&out_dir.join("metrics.csv"), &outcome.rows)?;
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
    Ok(summary)
}

/// Generates the corpus described by `cfg.data`.
pub fn corpus_for(cfg: &RunConfig) -> Result<Corpus, PipelineError> {
    Ok(generate(&cfg.data)?)
}

/// Paths inside a run directory.
pub fn run_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("config.toml"), dir.join("metrics.csv"), dir.join("summary.json"))
}
