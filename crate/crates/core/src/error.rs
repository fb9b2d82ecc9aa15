use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FstError {
    #[error("graph has no start-to-final path")]
    EmptyGraph,
    #[error("graph has no final state")]
    NoFinalState,
    #[error("arc {arc} references a state outside 0..{num_states}")]
    StateOutOfRange { arc: usize, num_states: usize },
    #[error("final state {state} outside 0..{num_states}")]
    FinalOutOfRange { state: usize, num_states: usize },
    #[error("arc {arc} has a non-finite weight")]
    NonFiniteWeight { arc: usize },
    #[error("final-marker arcs form a cycle")]
    FinalArcCycle,
    #[error("token {token} is outside the emission vocabulary of size {vocab}")]
    LabelOutOfVocab { token: u32, vocab: usize },
    #[error("emission shape {frames}x{vocab} does not match {len} values (need frames >= 1, vocab >= 2)")]
    EmissionShape { frames: usize, vocab: usize, len: usize },
    #[error("emission contains NaN or +inf")]
    NonFiniteEmission,
    #[error("emission row {frame} log-sums to {log_sum}, expected 0")]
    UnnormalizedRow { frame: usize, log_sum: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("label contains the blank token at position {0}")]
    ContainsBlank(usize),
    #[error("mask length {mask} does not match label length {tokens}")]
    MaskLength { tokens: usize, mask: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
}
