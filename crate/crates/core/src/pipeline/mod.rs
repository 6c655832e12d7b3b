//! Source training, source-graph freezing, fine-tuning with the combined
//! objective, evaluation and hyperparameter sweeps.

mod checkpoint;
mod config;
mod eval;
mod model;
mod sweep;
mod train;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EncoderMode, TrainConfig};
pub use eval::{aggregate, evaluate, evaluate_many, predict_tags, Aggregate, Metrics};
pub use model::{EmbeddingStore, Tagger, Vocab, UNK};
pub use sweep::{sweep, SweepParam, SweepRow};
pub use train::{
    batch_objective, build_source_graph, finetune, train_source, BatchLoss, BatchRecord,
    EpochRecord, FinetuneOutcome, GwPlanMode, TrainLog,
};
