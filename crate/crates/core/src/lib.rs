//! Label-graph sequence losses and a pseudo-labeling training pipeline.
//!
//! The loss side is a small log-semiring WFSA toolkit ([`fst`]) on top of
//! which CTC ([`ctc`]), alternative temporal classification ([`atc`]) and
//! contrastive CTC ([`contrastive`]) are expressed as label graphs. The
//! training side ([`model`], [`data`], [`pipeline`]) runs a teacher/student
//! pseudo-labeling loop on synthetic sequence data, using token confidences
//! ([`confidence`]) and an adaptive threshold ([`thresholding`]) to decide
//! which pseudo-label tokens to distrust.

pub mod atc;
pub mod confidence;
pub mod contrastive;
pub mod ctc;
pub mod data;
pub mod error;
pub mod fst;
pub mod model;
pub mod pipeline;
pub mod semiring;
pub mod thresholding;

pub use error::{ConfigError, FstError, LabelError};
pub use fst::{intersect_dense, Emissions, GradientMatrix, Label, Lattice, Wfsa, BLANK};
