//! Label graphs built from probability outputs.
//!
//! Each node is a target entity type represented by the averaged,
//! temperature-smoothed prediction of a tagger over that type's tokens. Nodes
//! are rescaled so the mean ordered-pair l2 distance is one, and two nodes
//! are joined when their distance falls under a threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{pairwise_distances, softmax_rows, Matrix};

/// A tagger whose logit columns map onto entity types.
///
/// `class_types()[c]` is the entity type of logit column `c`, or `None` for
/// columns (such as `O`) that do not belong to any type. B- and I- columns of
/// one type share an index.
pub trait ProbabilisticTagger {
    fn output_types(&self) -> &[String];
    fn class_types(&self) -> &[Option<usize>];
    fn token_logits(&self, tokens: &[String]) -> Result<Matrix>;
}

/// Per-token distribution over entity types: softmax of the entity-class
/// logits at `temperature`, summed over the classes of each type.
pub fn type_distribution(
    logits: &Matrix,
    class_types: &[Option<usize>],
    n_types: usize,
    temperature: f64,
) -> Result<Matrix> {
    let (select, aggregate) = type_projection(class_types, n_types)?;
    let entity_logits = logits.matmul(&select)?;
    softmax_rows(&entity_logits, temperature)?.matmul(&aggregate)
}

/// Column selection (classes -> entity classes) and aggregation (entity
/// classes -> types) matrices.
pub(crate) fn type_projection(
    class_types: &[Option<usize>],
    n_types: usize,
) -> Result<(Matrix, Matrix)> {
    let entity: Vec<(usize, usize)> = class_types
        .iter()
        .enumerate()
        .filter_map(|(c, t)| t.map(|t| (c, t)))
        .collect();
    if entity.is_empty() {
        return input_err("tagger has no entity classes");
    }
    let mut select = Matrix::zeros(class_types.len(), entity.len());
    let mut aggregate = Matrix::zeros(entity.len(), n_types);
    for (k, &(c, t)) in entity.iter().enumerate() {
        if t >= n_types {
            return input_err(format!("class {c} maps to type {t} of {n_types}"));
        }
        select.set(c, k, 1.0);
        aggregate.set(k, t, 1.0);
    }
    Ok((select, aggregate))
}

/// Rows are `p(source type | target type = y)`, one per included target label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    pub labels: Vec<String>,
    pub source_types: Vec<String>,
    pub rows: Matrix,
    pub support_counts: Vec<usize>,
    /// Requested labels with no token in the corpus.
    pub excluded: Vec<String>,
}

/// Averages the tagger's smoothed type distribution over every token whose
/// gold entity type is `y`, for each `y` in `label_set`.
///
/// `gold_types[s][j]` is the gold entity type of token `j` in sentence `s`
/// (`None` for `O`).
pub fn estimate_conditionals<M: ProbabilisticTagger + ?Sized>(
    model: &M,
    sentences: &[Vec<String>],
    gold_types: &[Vec<Option<String>>],
    temperature: f64,
    label_set: &[String],
) -> Result<ConditionalTable> {
    if sentences.is_empty() {
        return input_err("empty corpus");
    }
    if sentences.len() != gold_types.len() {
        return input_err("sentences and gold labels differ in length");
    }
    let n_source = model.output_types().len();
    let index: BTreeMap<&str, usize> = label_set
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut sums = Matrix::zeros(label_set.len(), n_source);
    let mut counts = vec![0usize; label_set.len()];

    for (tokens, gold) in sentences.iter().zip(gold_types) {
        if tokens.len() != gold.len() {
            return input_err("token and label counts differ");
        }
        if !gold.iter().flatten().any(|g| index.contains_key(g.as_str())) {
            continue;
        }
        let logits = model.token_logits(tokens)?;
        let probs = type_distribution(&logits, model.class_types(), n_source, temperature)?;
        for (j, g) in gold.iter().enumerate() {
            let Some(&y) = g.as_ref().and_then(|g| index.get(g.as_str())) else {
                continue;
            };
            counts[y] += 1;
            for (s, p) in sums.row_mut(y).iter_mut().zip(probs.row(j)) {
                *s += p;
            }
        }
    }

    let keep: Vec<usize> = (0..label_set.len()).filter(|&y| counts[y] > 0).collect();
    let excluded = (0..label_set.len())
        .filter(|&y| counts[y] == 0)
        .map(|y| label_set[y].clone())
        .collect();
    let mut rows = sums.select_rows(&keep);
    for (r, &y) in keep.iter().enumerate() {
        let n = counts[y] as f64;
        rows.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    Ok(ConditionalTable {
        labels: keep.iter().map(|&y| label_set[y].clone()).collect(),
        source_types: model.output_types().to_vec(),
        rows,
        support_counts: keep.iter().map(|&y| counts[y]).collect(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedNodes {
    pub nodes: Matrix,
    /// Set when every row is identical; rows are then returned unscaled.
    pub degenerate: bool,
}

/// Scales every row by `n^2 / sum of l2 distances over all ordered pairs`.
pub fn normalize_nodes(raw: &Matrix) -> NormalizedNodes {
    let n = raw.rows() as f64;
    let total = pairwise_distances(raw).sum();
    if total == 0.0 {
        return NormalizedNodes {
            nodes: raw.clone(),
            degenerate: true,
        };
    }
    NormalizedNodes {
        nodes: raw.scale(n * n / total),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGraph {
    labels: Vec<String>,
    nodes: Matrix,
    distances: Matrix,
    threshold: f64,
    /// Keyed by `(i, j)` with `i < j`.
    edges: BTreeMap<(usize, usize), f64>,
    degenerate: bool,
}

impl LabelGraph {
    /// Normalises probability rows and thresholds their pairwise distances.
    pub fn build(labels: Vec<String>, rows: &Matrix, threshold: f64) -> Result<Self> {
        if rows.rows() == 0 {
            return input_err("label graph needs at least one node");
        }
        if labels.len() != rows.rows() {
            return input_err(format!(
                "{} labels for {} node rows",
                labels.len(),
                rows.rows()
            ));
        }
        if !(threshold > 0.0) {
            return input_err(format!("edge threshold must be positive, got {threshold}"));
        }
        let normalized = normalize_nodes(rows);
        Ok(Self::from_normalized(
            labels,
            normalized.nodes,
            normalized.degenerate,
            threshold,
        ))
    }

    pub fn from_table(table: &ConditionalTable, threshold: f64) -> Result<Self> {
        Self::build(table.labels.clone(), &table.rows, threshold)
    }

    /// Graph over node rows that are already normalised.
    pub fn from_normalized(
        labels: Vec<String>,
        nodes: Matrix,
        degenerate: bool,
        threshold: f64,
    ) -> Self {
        let distances = pairwise_distances(&nodes);
        let mut edges = BTreeMap::new();
        for i in 0..nodes.rows() {
            for j in (i + 1)..nodes.rows() {
                let d = distances.get(i, j);
                if d < threshold {
                    edges.insert((i, j), d);
                }
            }
        }
        Self {
            labels,
            nodes,
            distances,
            threshold,
            edges,
            degenerate,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn nodes(&self) -> &Matrix {
        &self.nodes
    }

    pub fn distances(&self) -> &Matrix {
        &self.distances
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<f64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges.get(&key).copied()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Binary adjacency (edges only, no self-loops).
    pub fn adjacency(&self) -> Matrix {
        let n = self.len();
        let mut a = Matrix::zeros(n, n);
        for (i, j, _) in self.edges() {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// Subgraph over the listed labels, renormalised and re-thresholded from
    /// the stored node rows.
    pub fn restrict(&self, labels: &[String]) -> Result<Self> {
        let idx = labels
            .iter()
            .map(|l| {
                self.label_index(l)
                    .ok_or_else(|| Error::Input(format!("label {l} not in graph")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(labels.to_vec(), &self.nodes.select_rows(&idx), self.threshold)
    }

    /// Mean over all ordered node pairs (self-pairs included) of l2 distance.
    pub fn mean_pair_distance(&self) -> f64 {
        let n = self.len() as f64;
        self.distances.sum() / (n * n)
    }

    /// JSON export: `{labels, nodes, edges: [{i, j, w}]}` with six-decimal
    /// numbers; absent edges are omitted.
    pub fn to_export_json(&self) -> String {
        let mut out = String::from("{\"labels\":");
        out.push_str(&serde_json::to_string(&self.labels).expect("strings serialize"));
        out.push_str(",\"nodes\":[");
        for r in 0..self.nodes.rows() {
            if r > 0 {
                out.push(',');
            }
            out.push('[');
            for (c, x) in self.nodes.row(r).iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x:.6}");
            }
            out.push(']');
        }
        out.push_str("],\"edges\":[");
        for (k, (i, j, w)) in self.edges().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{{\"i\":{i},\"j\":{j},\"w\":{w:.6}}}");
        }
        out.push_str("]}");
        out
    }

    /// Dense edge table as CSV; absent edges and the diagonal are `inf`.
    pub fn edge_matrix_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for j in 0..self.len() {
                match self.edge(i, j).filter(|_| i != j) {
                    Some(w) => {
                        let _ = write!(out, ",{w:.6}");
                    }
                    None => out.push_str(",inf"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Parsed form of [`LabelGraph::to_export_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub labels: Vec<String>,
    pub nodes: Vec<Vec<f64>>,
    pub edges: Vec<ExportEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Target graph recorded on a tape, so node rows stay differentiable in the
/// logits that produced them.
#[derive(Debug, Clone)]
pub struct TapeGraph {
    /// Indices (into the type list) of the labels present, in order.
    pub label_indices: Vec<usize>,
    pub raw_nodes: Var,
    pub nodes: Var,
    pub distances: Var,
    pub graph: LabelGraph,
}

/// Builds the per-batch target graph from token logits on `tape`.
///
/// Returns `Ok(None)` when fewer than two distinct gold types are present or
/// all node rows coincide; graph matching is skipped in both cases.
#[allow(clippy::too_many_arguments)]
pub fn target_graph_on_tape(
    tape: &mut Tape,
    logits: Var,
    class_types: &[Option<usize>],
    type_names: &[String],
    gold_types: &[Option<usize>],
    temperature: f64,
    threshold: f64,
) -> Result<Option<TapeGraph>> {
    let n_tokens = tape.value(logits).rows();
    if gold_types.len() != n_tokens {
        return input_err(format!(
            "{} gold labels for {} logit rows",
            gold_types.len(),
            n_tokens
        ));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, g) in gold_types.iter().enumerate() {
        if let Some(t) = g {
            if *t >= type_names.len() {
                return input_err(format!("gold type {t} out of range"));
            }
            members.entry(*t).or_default().push(j);
        }
    }
    if members.len() < 2 {
        return Ok(None);
    }

    let (select, aggregate) = type_projection(class_types, type_names.len())?;
    let mut averaging = Matrix::zeros(members.len(), n_tokens);
    for (r, toks) in members.values().enumerate() {
        let w = 1.0 / toks.len() as f64;
        for &j in toks {
            averaging.set(r, j, w);
        }
    }

    let select = tape.leaf(select);
    let aggregate = tape.leaf(aggregate);
    let averaging = tape.leaf(averaging);
    let entity_logits = tape.matmul(logits, select)?;
    let probs = tape.softmax_rows(entity_logits, temperature)?;
    let type_probs = tape.matmul(probs, aggregate)?;
    let raw = tape.matmul(averaging, type_probs)?;

    let raw_dist = tape.pairwise_l2(raw);
    let total = tape.sum(raw_dist);
    if tape.scalar(total) == 0.0 {
        return Ok(None);
    }
    let k = members.len() as f64;
    let shrunk = tape.div_scalar(raw, total)?;
    let nodes = tape.scale(shrunk, k * k);
    let distances = tape.pairwise_l2(nodes);

    let label_indices: Vec<usize> = members.keys().copied().collect();
    let labels = label_indices.iter().map(|&t| type_names[t].clone()).collect();
    let graph = LabelGraph::from_normalized(labels, tape.value(nodes).clone(), false, threshold);
    Ok(Some(TapeGraph {
        label_indices,
        raw_nodes: raw,
        nodes,
        distances,
        graph,
    }))
}

/// Value-only form of [`target_graph_on_tape`].
pub fn target_graph_from_batch(
    logits: &Matrix,
    class_types: &[Option<usize>],
    type_names: &[String],
    gold_types: &[Option<usize>],
    temperature: f64,
    threshold: f64,
) -> Result<Option<LabelGraph>> {
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone());
    Ok(target_graph_on_tape(
        &mut tape,
        v,
        class_types,
        type_names,
        gold_types,
        temperature,
        threshold,
    )?
    .map(|g| g.graph))
}
