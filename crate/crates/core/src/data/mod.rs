//! Tagged corpora: CoNLL ingestion, span extraction, micro-F1, few-shot
//! sampling and a synthetic cross-domain generator.

mod conll;
mod metrics;
mod sample;
mod synth;

pub use conll::{parse_conll, Sentence, TagSet, TaggedCorpus};
pub(crate) use conll::repair_tags;
pub use metrics::{extract_spans, micro_f1, spans_of, EntitySpan, Prf};
pub use sample::{entity_counts, greedy_sample};
pub use synth::{generate, SynthCorpora, SynthSpec, TargetLabelSpec};
