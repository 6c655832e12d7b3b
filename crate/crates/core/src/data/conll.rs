use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl Sentence {
    /// Entity type of each token (`None` for `O`).
    pub fn token_types(&self) -> Vec<Option<String>> {
        self.tags.iter().map(|t| entity_type(t).map(str::to_string)).collect()
    }
}

/// Entity type carried by a BIO tag, `None` for `O`.
pub(crate) fn entity_type(tag: &str) -> Option<&str> {
    tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))
}

fn check_tag(tag: &str) -> std::result::Result<(), String> {
    if tag == "O" {
        return Ok(());
    }
    match entity_type(tag) {
        Some(t) if !t.is_empty() => Ok(()),
        _ => Err(format!("tag {tag:?} is not O, B-X or I-X")),
    }
}

/// Rewrites every `I-X` that does not continue an `X` entity to `B-X`;
/// returns the number of rewrites.
pub(crate) fn repair_tags(tags: &mut [String]) -> usize {
    let mut repairs = 0;
    for j in 0..tags.len() {
        let Some(ty) = tags[j].strip_prefix("I-") else {
            continue;
        };
        let continues = j > 0 && entity_type(&tags[j - 1]) == Some(ty);
        if !continues {
            tags[j] = format!("B-{ty}");
            repairs += 1;
        }
    }
    repairs
}

/// Sentences with BIO tags over a derived, sorted label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedCorpus {
    pub sentences: Vec<Sentence>,
    pub label_set: Vec<String>,
    /// Orphan `I-X` tags rewritten to `B-X` while loading.
    pub repairs: usize,
}

impl TaggedCorpus {
    /// Validates and repairs the tags of `sentences`.
    pub fn from_sentences(mut sentences: Vec<Sentence>) -> Result<Self> {
        let mut repairs = 0;
        let mut labels = BTreeSet::new();
        for (s, sent) in sentences.iter_mut().enumerate() {
            if sent.tokens.len() != sent.tags.len() {
                return Err(Error::Input(format!(
                    "sentence {s} has {} tokens and {} tags",
                    sent.tokens.len(),
                    sent.tags.len()
                )));
            }
            for tag in &sent.tags {
                check_tag(tag).map_err(|m| Error::Input(format!("sentence {s}: {m}")))?;
                if let Some(t) = entity_type(tag) {
                    labels.insert(t.to_string());
                }
            }
            repairs += repair_tags(&mut sent.tags);
        }
        Ok(Self {
            sentences,
            label_set: labels.into_iter().collect(),
            repairs,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// One `token<space>tag` line per token, a blank line after each sentence.
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                out.push_str(tok);
                out.push(' ');
                out.push_str(tag);
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let sentences: Vec<Sentence> = indices.iter().map(|&i| self.sentences[i].clone()).collect();
        let mut corpus = Self::from_sentences(sentences).expect("subset of a valid corpus");
        corpus.repairs = 0;
        corpus
    }
}

/// Parses whitespace-separated `token tag` lines; blank lines end sentences.
pub fn parse_conll(text: &str) -> Result<TaggedCorpus> {
    let mut sentences = Vec::new();
    let mut current = Sentence {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !current.tokens.is_empty() {
                sentences.push(std::mem::replace(
                    &mut current,
                    Sentence {
                        tokens: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        check_tag(fields[1]).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        current.tokens.push(fields[0].to_string());
        current.tags.push(fields[1].to_string());
    }
    if !current.tokens.is_empty() {
        sentences.push(current);
    }
    TaggedCorpus::from_sentences(sentences)
}

/// Tag inventory: `O` first, then `B-X`, `I-X` for each label in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    labels: Vec<String>,
    tags: Vec<String>,
}

impl TagSet {
    pub fn new(labels: &[String]) -> Self {
        let mut tags = vec!["O".to_string()];
        for l in labels {
            tags.push(format!("B-{l}"));
            tags.push(format!("I-{l}"));
        }
        Self {
            labels: labels.to_vec(),
            tags,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index(&self, tag: &str) -> Result<usize> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::Input(format!("tag {tag} outside the tag set")))
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn encode(&self, tags: &[String]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.index(t)).collect()
    }

    /// Label index of each tag column (`None` for `O`).
    pub fn class_types(&self) -> Vec<Option<usize>> {
        std::iter::once(None)
            .chain((0..self.labels.len()).flat_map(|l| [Some(l), Some(l)]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_file() {
        let c = parse_conll("ACL B-CONF\n\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.label_set, vec!["CONF".to_string()]);
        let spans = crate::data::extract_spans(&c);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end, spans[0].entity_type.as_str()), (0, 1, "CONF"));
    }

    #[test]
    fn orphan_inside_tag_is_repaired() {
        let c = parse_conll("Ann I-PER\nsmiles O\n").unwrap();
        assert_eq!(c.sentences[0].tags, vec!["B-PER", "O"]);
        assert_eq!(c.repairs, 1);
        let c = parse_conll("a B-ORG\nb I-PER\nc I-PER\n").unwrap();
        assert_eq!(c.sentences[0].tags, vec!["B-ORG", "B-PER", "I-PER"]);
        assert_eq!(c.repairs, 1);
    }

    #[test]
    fn empty_file() {
        let c = parse_conll("").unwrap();
        assert!(c.is_empty());
        assert!(c.label_set.is_empty());
    }

    #[test]
    fn bad_lines_report_line_number() {
        match parse_conll("a O\nb c d\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_conll("a O\n\nb X-PER\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tag_set_layout() {
        let ts = TagSet::new(&["A".into(), "B".into()]);
        assert_eq!(ts.tags(), &["O", "B-A", "I-A", "B-B", "I-B"]);
        assert_eq!(ts.class_types(), vec![None, Some(0), Some(0), Some(1), Some(1)]);
        assert!(ts.index("B-C").is_err());
    }

    fn tag_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("O".to_string()),
            Just("B-PER".to_string()),
            Just("I-PER".to_string()),
            Just("B-LOC".to_string()),
            Just("I-LOC".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn serialise_then_parse_round_trips(
            sents in prop::collection::vec(
                prop::collection::vec(("[a-z]{1,6}", tag_strategy()), 1..8), 0..6)
        ) {
            let sentences: Vec<Sentence> = sents
                .into_iter()
                .map(|toks| Sentence {
                    tokens: toks.iter().map(|(t, _)| t.clone()).collect(),
                    tags: toks.iter().map(|(_, g)| g.clone()).collect(),
                })
                .collect();
            let corpus = TaggedCorpus::from_sentences(sentences).unwrap();
            let again = parse_conll(&corpus.to_conll()).unwrap();
            prop_assert_eq!(&again.sentences, &corpus.sentences);
            prop_assert_eq!(again.repairs, 0);
        }
    }
}
