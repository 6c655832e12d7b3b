//! Label structure transfer for cross-domain sequence labeling.
//!
//! Label graphs are built from a source tagger's probability outputs, fused
//! into token representations with label attention and graph convolution,
//! and transferred to the target model by minimising a Gromov-Wasserstein
//! matching loss during fine-tuning.

pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod gw;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ConditionalTable, LabelGraph, ProbabilisticTagger};
pub use gw::{GwResult, GwSettings, TransportPlan};
pub use pipeline::{Checkpoint, Tagger, TrainConfig};
pub use tape::{grad_check, GradCheckReport, Gradients, Tape, Var};
pub use tensor::Matrix;
