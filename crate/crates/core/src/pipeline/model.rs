use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::config::{EncoderMode, TrainConfig};
use crate::data::{Sentence, TagSet};
use crate::error::{input_err, Error, Result};
use crate::fusion::{forward_sentence, EncoderInput, ModelParams};
use crate::graph::{LabelGraph, ProbabilisticTagger};
use crate::tape::Tape;
use crate::tensor::Matrix;

pub const UNK: &str = "<unk>";

/// Token vocabulary with `<unk>` at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocab {
    /// Builds a vocabulary from `tokens`, prepending `<unk>` when absent.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNK);
        for t in tokens {
            v.insert(&t);
        }
        v
    }

    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut v = Self::default();
        v.extend(sentences);
        v
    }

    pub fn extend<'a>(&mut self, sentences: impl IntoIterator<Item = &'a Sentence>) {
        for s in sentences {
            for t in &s.tokens {
                self.insert(t);
            }
        }
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

/// Frozen contextual vectors keyed by the sentence's token sequence.
///
/// The file is JSON Lines, one `{"tokens": [...], "vectors": [[...], ...]}`
/// object per sentence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<Vec<String>, Matrix>,
}

impl EmbeddingStore {
    pub fn parse(text: &str) -> Result<Self> {
        let mut store = Self::default();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
            if parsed.tokens.len() != parsed.vectors.len() {
                return Err(Error::Parse {
                    line: k + 1,
                    message: "one vector per token expected".into(),
                });
            }
            let m = Matrix::from_rows(&parsed.vectors).map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
            if store.dim == 0 {
                store.dim = m.cols();
            } else if m.cols() != store.dim {
                return Err(Error::Parse {
                    line: k + 1,
                    message: format!("vector width {} differs from {}", m.cols(), store.dim),
                });
            }
            store.vectors.insert(parsed.tokens, m);
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, tokens: &[String]) -> Result<&Matrix> {
        self.vectors
            .get(tokens)
            .ok_or_else(|| Error::Input(format!("no embeddings for sentence {:?}", tokens.join(" "))))
    }
}

/// A tagger: parameters plus everything needed to run them on raw tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub config: TrainConfig,
    pub tag_set: TagSet,
    pub vocab: Vocab,
    pub params: ModelParams,
    /// Frozen source label graph over `tag_set.labels()`; fine-tuned taggers only.
    pub source_graph: Option<LabelGraph>,
    /// Attached in file encoder mode; never serialised.
    pub embeddings: Option<EmbeddingStore>,
    class_types: Vec<Option<usize>>,
}

impl Tagger {
    pub fn new(
        config: TrainConfig,
        tag_set: TagSet,
        vocab: Vocab,
        params: ModelParams,
        source_graph: Option<LabelGraph>,
    ) -> Self {
        let class_types = tag_set.class_types();
        Self {
            config,
            tag_set,
            vocab,
            params,
            source_graph,
            embeddings: None,
            class_types,
        }
    }

    pub fn labels(&self) -> &[String] {
        self.tag_set.labels()
    }

    /// Loads the embedding file named by the config when in file mode.
    pub fn attach_embeddings_from_config(&mut self) -> Result<()> {
        if self.config.encoder_mode == EncoderMode::File && self.embeddings.is_none() {
            let Some(path) = &self.config.embedding_file else {
                return input_err("file encoder mode needs embedding_file");
            };
            self.embeddings = Some(EmbeddingStore::load(path)?);
        }
        Ok(())
    }

    pub fn encoder_input(&self, tokens: &[String]) -> Result<EncoderInput> {
        if tokens.is_empty() {
            return input_err("empty sentence");
        }
        if self.params.encoder.is_some() {
            return Ok(EncoderInput::Ids(self.vocab.ids(tokens)));
        }
        match &self.embeddings {
            Some(store) => Ok(EncoderInput::Vectors(store.get(tokens)?.clone())),
            None => input_err("file-mode tagger has no embeddings attached"),
        }
    }

    /// Normalised adjacency of the frozen source graph, if the model fuses.
    pub fn fusion_adjacency(&self) -> Result<Option<Matrix>> {
        match (&self.params.fusion, &self.source_graph) {
            (None, _) => Ok(None),
            (Some(_), Some(g)) => Ok(Some(crate::fusion::normalized_adjacency(g, self.labels())?)),
            (Some(_), None) => input_err("fusion layers need a source graph"),
        }
    }

    /// Tag logits for one sentence, `n x |tags|`.
    pub fn logits(&self, tokens: &[String], adjacency: Option<&Matrix>) -> Result<Matrix> {
        let input = self.encoder_input(tokens)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fwd = forward_sentence(&mut tape, &bound, &input, adjacency)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

impl ProbabilisticTagger for Tagger {
    fn output_types(&self) -> &[String] {
        self.tag_set.labels()
    }

    fn class_types(&self) -> &[Option<usize>] {
        &self.class_types
    }

    fn token_logits(&self, tokens: &[String]) -> Result<Matrix> {
        let adjacency = self.fusion_adjacency()?;
        self.logits(tokens, adjacency.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_unknown() {
        let v = Vocab::from_tokens(vec!["a".into(), "b".into(), "a".into()]);
        assert_eq!(v.tokens(), &["<unk>", "a", "b"]);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(v.id("b"), 2);
    }

    #[test]
    fn embedding_file_parsing() {
        let text = "{\"tokens\":[\"a\",\"b\"],\"vectors\":[[1,2],[3,4]]}\n\n";
        let s = EmbeddingStore::parse(text).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.get(&["a".into(), "b".into()]).unwrap().get(1, 0), 3.0);
        assert!(s.get(&["c".into()]).is_err());

        let bad = "{\"tokens\":[\"a\"],\"vectors\":[[1,2]]}\n{\"tokens\":[\"b\"],\"vectors\":[[1]]}";
        assert!(matches!(EmbeddingStore::parse(bad), Err(Error::Parse { line: 2, .. })));
    }
}
