use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::config::TrainConfig;
use super::eval::{aggregate, evaluate};
use super::model::Tagger;
use super::train::finetune;
use crate::data::TaggedCorpus;
use crate::error::{Error, Result};

/// Hyperparameters that can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Temperature,
    EdgeThreshold,
    Lambda1,
    Lambda2,
}

impl SweepParam {
    pub fn apply(self, config: &mut TrainConfig, value: f64) {
        match self {
            Self::Temperature => config.temperature = value,
            Self::EdgeThreshold => config.edge_threshold = value,
            Self::Lambda1 => config.lambda1 = value,
            Self::Lambda2 => config.lambda2 = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" | "T" => Ok(Self::Temperature),
            "edge_threshold" | "delta" => Ok(Self::EdgeThreshold),
            "lambda1" => Ok(Self::Lambda1),
            "lambda2" => Ok(Self::Lambda2),
            other => Err(Error::Input(format!("unknown sweep parameter {other}"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Temperature => "temperature",
            Self::EdgeThreshold => "edge_threshold",
            Self::Lambda1 => "lambda1",
            Self::Lambda2 => "lambda2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub source_edges: usize,
    pub f1: Vec<f64>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "param,value,mean_f1,std_f1,source_edges";

    pub fn to_csv(&self, param: SweepParam) -> String {
        format!(
            "{param},{},{:.6},{:.6},{}",
            self.value, self.mean_f1, self.std_f1, self.source_edges
        )
    }
}

/// Fine-tunes and evaluates once per value and seed; seed `i` runs with
/// `base.seed + i`.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    base: &TrainConfig,
    source: &Tagger,
    train: &TaggedCorpus,
    test: &TaggedCorpus,
    seeds: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut f1 = Vec::with_capacity(seeds);
        let mut edges = 0;
        for i in 0..seeds.max(1) {
            let mut config = base.clone();
            param.apply(&mut config, value);
            config.seed = base.seed + i as u64;
            let out = finetune(source, train, &config)?;
            edges = out
                .checkpoint
                .tagger
                .source_graph
                .as_ref()
                .map_or(0, |g| g.edge_count());
            f1.push(evaluate(&out.checkpoint.tagger, test)?.f1);
        }
        let agg = aggregate(&f1);
        rows.push(SweepRow {
            value,
            mean_f1: agg.mean,
            std_f1: agg.std,
            source_edges: edges,
            f1,
        });
    }
    Ok(rows)
}
