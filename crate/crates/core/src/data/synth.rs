use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conll::{Sentence, TaggedCorpus};
use crate::error::{input_err, Result};

/// A fine-grained target label refining one coarse source label. Its cue
/// words precede its entities in generated text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLabelSpec {
    pub name: String,
    pub parent: String,
    pub cues: Vec<String>,
}

/// Generator settings for a source/target pair of tagged corpora.
///
/// Both domains draw sentences from one process: filler words, one or more
/// entities whose surface names come from a per-source-label pool, each
/// preceded (within `cue_distance` filler words) by a cue of its target
/// label. Source text is tagged with the coarse parent label, target text
/// with the refined label. Decoy cues are cue words placed with no entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub source_labels: Vec<String>,
    pub target_labels: Vec<TargetLabelSpec>,
    pub names_per_source_label: usize,
    pub multi_token_prob: f64,
    pub filler_vocab: usize,
    /// Inclusive range of filler words per sentence.
    pub sentence_len: [usize; 2],
    pub max_entities: usize,
    pub cue_distance: usize,
    pub decoy_cue_prob: f64,
    pub source_sentences: usize,
    pub target_train_sentences: usize,
    pub target_dev_sentences: usize,
    pub target_test_sentences: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let t = |name: &str, parent: &str, cues: &[&str]| TargetLabelSpec {
            name: name.into(),
            parent: parent.into(),
            cues: cues.iter().map(|c| c.to_string()).collect(),
        };
        Self {
            seed: 0,
            source_labels: vec!["PER".into(), "ORG".into()],
            target_labels: vec![
                t("RESEARCHER", "PER", &["professor", "dr"]),
                t("MUSICIAN", "PER", &["singer", "drummer"]),
                t("CONFERENCE", "ORG", &["proceedings", "venue"]),
                t("BAND", "ORG", &["concert", "tour"]),
            ],
            names_per_source_label: 60,
            multi_token_prob: 0.3,
            filler_vocab: 60,
            sentence_len: [3, 8],
            max_entities: 2,
            cue_distance: 1,
            decoy_cue_prob: 0.3,
            source_sentences: 600,
            target_train_sentences: 400,
            target_dev_sentences: 150,
            target_test_sentences: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpora {
    pub source_train: TaggedCorpus,
    pub target_train: TaggedCorpus,
    pub target_dev: TaggedCorpus,
    pub target_test: TaggedCorpus,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.source_labels.is_empty() || self.target_labels.is_empty() {
            return input_err("synthetic spec needs source and target labels");
        }
        for t in &self.target_labels {
            if !self.source_labels.contains(&t.parent) {
                return input_err(format!("{} refines unknown source label {}", t.name, t.parent));
            }
            if t.cues.is_empty() {
                return input_err(format!("{} has no cue words", t.name));
            }
        }
        if self.sentence_len[0] > self.sentence_len[1] || self.max_entities == 0 {
            return input_err("bad sentence length or entity count range");
        }
        if self.names_per_source_label == 0 || self.filler_vocab == 0 {
            return input_err("name and filler vocabularies must be non-empty");
        }
        Ok(())
    }

    fn name_pool(&self, source: &str) -> Vec<String> {
        (0..self.names_per_source_label)
            .map(|i| format!("{}{i}", source.to_lowercase()))
            .collect()
    }

    fn sentence<R: Rng>(&self, rng: &mut R, coarse: bool) -> Sentence {
        let n_filler = rng.gen_range(self.sentence_len[0]..=self.sentence_len[1]);
        let mut chunks: Vec<Vec<(String, String)>> = (0..n_filler)
            .map(|_| vec![(format!("w{}", rng.gen_range(0..self.filler_vocab)), "O".to_string())])
            .collect();

        let n_entities = rng.gen_range(1..=self.max_entities);
        for _ in 0..n_entities {
            let label = self.target_labels.choose(rng).expect("validated non-empty");
            let tag = if coarse { &label.parent } else { &label.name };
            let pool = self.name_pool(&label.parent);
            let n_tokens = if rng.gen_bool(self.multi_token_prob) { 2 } else { 1 };
            let mut chunk = vec![(label.cues.choose(rng).unwrap().clone(), "O".to_string())];
            for _ in 0..rng.gen_range(0..=self.cue_distance) {
                chunk.push((format!("w{}", rng.gen_range(0..self.filler_vocab)), "O".into()));
            }
            for k in 0..n_tokens {
                let prefix = if k == 0 { "B" } else { "I" };
                chunk.push((pool.choose(rng).unwrap().clone(), format!("{prefix}-{tag}")));
            }
            let at = rng.gen_range(0..=chunks.len());
            chunks.insert(at, chunk);
        }
        if rng.gen_bool(self.decoy_cue_prob) {
            let label = self.target_labels.choose(rng).unwrap();
            let decoy = vec![(label.cues.choose(rng).unwrap().clone(), "O".to_string())];
            let at = rng.gen_range(0..=chunks.len());
            chunks.insert(at, decoy);
        }
        let (tokens, tags) = chunks.into_iter().flatten().unzip();
        Sentence { tokens, tags }
    }

    fn corpus<R: Rng>(&self, rng: &mut R, n: usize, coarse: bool) -> TaggedCorpus {
        let sentences = (0..n).map(|_| self.sentence(rng, coarse)).collect();
        TaggedCorpus::from_sentences(sentences).expect("generated tags are valid")
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpora> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(SynthCorpora {
        source_train: spec.corpus(&mut rng, spec.source_sentences, true),
        target_train: spec.corpus(&mut rng, spec.target_train_sentences, false),
        target_dev: spec.corpus(&mut rng, spec.target_dev_sentences, false),
        target_test: spec.corpus(&mut rng, spec.target_test_sentences, false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_corpora_use_the_right_label_sets() {
        let c = generate(&SynthSpec::default()).unwrap();
        assert_eq!(c.source_train.label_set, vec!["ORG", "PER"]);
        assert_eq!(c.target_test.label_set, vec!["BAND", "CONFERENCE", "MUSICIAN", "RESEARCHER"]);
        assert_eq!(c.target_train.repairs, 0);
        assert_eq!(c.source_train.len(), 600);
    }

    #[test]
    fn same_seed_same_corpora() {
        let spec = SynthSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn unknown_parent_is_rejected() {
        let mut spec = SynthSpec::default();
        spec.target_labels[0].parent = "LOC".into();
        assert!(generate(&spec).is_err());
    }
}
