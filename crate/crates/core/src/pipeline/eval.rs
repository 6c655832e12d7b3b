use serde::Serialize;

use super::model::Tagger;
use crate::data::{extract_spans, micro_f1, Sentence, TaggedCorpus};
use crate::error::{input_err, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            n,
            mean: 0.0,
            std: 0.0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Aggregate { n, mean, std }
}

/// Argmax tag per token, with orphan `I-X` rewritten to `B-X`.
pub fn predict_tags(tagger: &Tagger, tokens: &[String], adjacency: Option<&Matrix>) -> Result<Vec<String>> {
    let logits = tagger.logits(tokens, adjacency)?;
    let tags = tagger.tag_set.tags();
    let mut out: Vec<String> = (0..logits.rows())
        .map(|j| tags[logits.argmax_row(j)].clone())
        .collect();
    crate::data::repair_tags(&mut out);
    Ok(out)
}

/// Exact-match micro scores of `tagger` on `corpus`.
pub fn evaluate(tagger: &Tagger, corpus: &TaggedCorpus) -> Result<Metrics> {
    if let Some(l) = corpus.label_set.iter().find(|l| tagger.tag_set.label_index(l).is_none()) {
        return input_err(format!("test label {l} is unknown to the model"));
    }
    let adjacency = tagger.fusion_adjacency()?;
    let mut predicted = Vec::with_capacity(corpus.len());
    for s in &corpus.sentences {
        predicted.push(Sentence {
            tokens: s.tokens.clone(),
            tags: predict_tags(tagger, &s.tokens, adjacency.as_ref())?,
        });
    }
    let pred = TaggedCorpus {
        sentences: predicted,
        label_set: tagger.labels().to_vec(),
        repairs: 0,
    };
    let p = micro_f1(&extract_spans(corpus), &extract_spans(&pred));
    Ok(Metrics {
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        true_positives: p.true_positives,
        predicted: p.predicted,
        gold: p.gold,
    })
}

/// Scores several taggers (typically one per seed) and aggregates their F1.
pub fn evaluate_many(taggers: &[Tagger], corpus: &TaggedCorpus) -> Result<(Vec<Metrics>, Aggregate)> {
    let metrics = taggers
        .iter()
        .map(|t| evaluate(t, corpus))
        .collect::<Result<Vec<_>>>()?;
    let f1: Vec<f64> = metrics.iter().map(|m| m.f1).collect();
    Ok((metrics, aggregate(&f1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_of_constants_has_zero_spread() {
        let a = aggregate(&[0.5; 5]);
        assert_eq!((a.mean, a.std, a.n), (0.5, 0.0, 5));
        let b = aggregate(&[1.0, 3.0]);
        assert_eq!(b.mean, 2.0);
        assert!((b.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
