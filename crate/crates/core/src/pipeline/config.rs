use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::gw::GwSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Frozen per-token vectors from an embedding file.
    File,
    /// Trainable embedding table plus window-3 mixing layer.
    #[default]
    Toy,
}

/// Training hyperparameters; the JSON config file mirrors it field for
/// field, and absent fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub edge_threshold: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub inner_iter: usize,
    pub outer_iter: usize,
    pub gw_tol: f64,
    /// Extra matching restarts from single-correspondence couplings.
    pub gw_restarts: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_h: usize,
    pub d_p: usize,
    pub seed: u64,
    pub ablate_aux: bool,
    pub ablate_gw: bool,
    pub encoder_mode: EncoderMode,
    /// JSON Lines embedding file, required when `encoder_mode` is `file`.
    pub embedding_file: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            edge_threshold: 1.5,
            lambda1: 0.1,
            lambda2: 0.01,
            epsilon: 0.05,
            inner_iter: 200,
            outer_iter: 20,
            gw_tol: 1e-6,
            gw_restarts: true,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 8,
            d_h: 32,
            d_p: 32,
            seed: 0,
            ablate_aux: false,
            ablate_gw: false,
            encoder_mode: EncoderMode::Toy,
            embedding_file: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return input_err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.edge_threshold > 0.0) {
            return input_err(format!("edge threshold must be positive, got {}", self.edge_threshold));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return input_err("loss weights must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.gw_tol > 0.0 && self.learning_rate > 0.0) {
            return input_err("epsilon, gw_tol and learning_rate must be positive");
        }
        if self.batch_size == 0 || self.d_h == 0 || self.d_p == 0 {
            return input_err("batch_size, d_h and d_p must be at least 1");
        }
        if self.encoder_mode == EncoderMode::File && self.embedding_file.is_none() {
            return input_err("file encoder mode needs embedding_file");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn gw_settings(&self) -> GwSettings {
        GwSettings {
            epsilon: self.epsilon,
            outer_iter: self.outer_iter,
            inner_iter: self.inner_iter,
            tol: self.gw_tol,
            anchored_restarts: self.gw_restarts,
        }
    }

    /// Whether the auxiliary term enters the objective.
    pub fn uses_aux(&self) -> bool {
        !self.ablate_aux && self.lambda1 > 0.0
    }

    /// Whether the graph-matching term enters the objective.
    pub fn uses_gw(&self) -> bool {
        !self.ablate_gw && self.lambda2 > 0.0
    }
}
