use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::conll::{entity_type, TaggedCorpus};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub sentence_index: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub entity_type: String,
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue an `X` run
/// opens a new span, matching the lenient repair rule.
pub fn spans_of(tags: &[String], sentence_index: usize) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (j, tag) in tags.iter().enumerate() {
        let continues = match (open, tag.strip_prefix("I-")) {
            (Some((_, ty)), Some(t)) => ty == t,
            _ => false,
        };
        if continues {
            continue;
        }
        if let Some((start, ty)) = open.take() {
            spans.push(EntitySpan {
                sentence_index,
                start,
                end: j,
                entity_type: ty.to_string(),
            });
        }
        if let Some(ty) = entity_type(tag) {
            open = Some((j, ty));
        }
    }
    if let Some((start, ty)) = open {
        spans.push(EntitySpan {
            sentence_index,
            start,
            end: tags.len(),
            entity_type: ty.to_string(),
        });
    }
    spans
}

pub fn extract_spans(corpus: &TaggedCorpus) -> Vec<EntitySpan> {
    corpus
        .sentences
        .iter()
        .enumerate()
        .flat_map(|(i, s)| spans_of(&s.tags, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Exact-match (type and boundaries) precision, recall and F1 pooled over
/// all sentences.
pub fn micro_f1(gold: &[EntitySpan], pred: &[EntitySpan]) -> Prf {
    let gold_set: BTreeSet<&EntitySpan> = gold.iter().collect();
    let pred_set: BTreeSet<&EntitySpan> = pred.iter().collect();
    let tp = pred_set.intersection(&gold_set).count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, pred_set.len());
    let recall = ratio(tp, gold_set.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: pred_set.len(),
        gold: gold_set.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn span(s: usize, a: usize, b: usize, t: &str) -> EntitySpan {
        EntitySpan {
            sentence_index: s,
            start: a,
            end: b,
            entity_type: t.into(),
        }
    }

    #[test]
    fn span_examples() {
        assert_eq!(spans_of(&tags(&["B-PER", "I-PER", "O"]), 0), vec![span(0, 0, 2, "PER")]);
        assert_eq!(
            spans_of(&tags(&["B-PER", "B-PER"]), 0),
            vec![span(0, 0, 1, "PER"), span(0, 1, 2, "PER")]
        );
        assert!(spans_of(&tags(&["O", "O"]), 0).is_empty());
        assert_eq!(
            spans_of(&tags(&["B-PER", "I-LOC"]), 3),
            vec![span(3, 0, 1, "PER"), span(3, 1, 2, "LOC")]
        );
    }

    #[test]
    fn f1_examples() {
        let gold = vec![span(0, 0, 1, "A"), span(1, 2, 4, "B")];
        let p = micro_f1(&gold, &gold);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));

        let pred = vec![span(0, 0, 1, "A"), span(1, 2, 3, "B")];
        let p = micro_f1(&gold, &pred);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));

        let p = micro_f1(&gold, &[]);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn swapping_gold_and_pred_swaps_p_and_r() {
        let gold = vec![span(0, 0, 1, "A"), span(1, 2, 4, "B"), span(2, 0, 1, "A")];
        let pred = vec![span(0, 0, 1, "A")];
        let a = micro_f1(&gold, &pred);
        let b = micro_f1(&pred, &gold);
        assert_eq!((a.precision, a.recall), (b.recall, b.precision));
        assert_eq!(a.f1, b.f1);
    }
}
