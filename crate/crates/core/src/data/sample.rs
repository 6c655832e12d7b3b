use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conll::TaggedCorpus;
use super::metrics::spans_of;

/// Entity spans per type over the whole corpus.
pub fn entity_counts(corpus: &TaggedCorpus) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> =
        corpus.label_set.iter().map(|l| (l.clone(), 0)).collect();
    for s in &corpus.sentences {
        for span in spans_of(&s.tags, 0) {
            *counts.entry(span.entity_type).or_default() += 1;
        }
    }
    counts
}

/// Greedy few-shot selection of at least `k` entities per type.
///
/// Types are visited from rarest to most frequent (ties by name). For each
/// type still under `k`, sentences containing it are shuffled with the
/// seeded generator and added until the pooled count reaches `k` or the
/// candidates run out. A sentence counts toward every type it contains.
/// Returned sentences keep their original corpus order.
pub fn greedy_sample(corpus: &TaggedCorpus, k: usize, seed: u64) -> TaggedCorpus {
    let k = k.max(1);
    let per_sentence: Vec<BTreeMap<String, usize>> = corpus
        .sentences
        .iter()
        .map(|s| {
            let mut m = BTreeMap::new();
            for span in spans_of(&s.tags, 0) {
                *m.entry(span.entity_type).or_insert(0) += 1;
            }
            m
        })
        .collect();

    let totals = entity_counts(corpus);
    let mut order: Vec<(&String, &usize)> = totals.iter().collect();
    order.sort_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut sampled: BTreeMap<&str, usize> = BTreeMap::new();
    for (ty, _) in order {
        if sampled.get(ty.as_str()).copied().unwrap_or(0) >= k {
            continue;
        }
        let mut candidates: Vec<usize> = (0..corpus.len())
            .filter(|i| !chosen.contains(i) && per_sentence[*i].contains_key(ty))
            .collect();
        candidates.shuffle(&mut rng);
        for i in candidates {
            if sampled.get(ty.as_str()).copied().unwrap_or(0) >= k {
                break;
            }
            chosen.insert(i);
            for (t, c) in &per_sentence[i] {
                *sampled.entry(t.as_str()).or_insert(0) += c;
            }
        }
    }
    let indices: Vec<usize> = chosen.into_iter().collect();
    corpus.subset(&indices)
}
