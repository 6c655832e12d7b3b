//! Label-semantics fusion network.
//!
//! Per sentence: tokens are encoded to `h`, projected to label-related
//! embeddings `q`, pooled per label by label-guided attention into `u`,
//! propagated over the source label graph by a two-layer GCN into `u'`, and
//! fused back into every token by token-guided attention with a residual
//! projection, giving `h'`. A linear tagger reads `h'`; an auxiliary head
//! predicts which entity types occur in the sentence from the mean of `h'`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};
use crate::graph::LabelGraph;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::glorot(d_in, d_out, rng),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: Matrix::zeros(1, d_out),
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// Trainable token embeddings followed by one window-3 mixing layer with a
/// residual connection: `h_j = e_j + tanh(e_{j-1} A + e_j B + e_{j+1} C + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub embeddings: Matrix,
    pub mix_prev: Matrix,
    pub mix_center: Matrix,
    pub mix_next: Matrix,
    pub mix_bias: Matrix,
}

impl ToyEncoder {
    pub fn init<R: Rng>(vocab_size: usize, d_h: usize, rng: &mut R) -> Self {
        let scale = (3.0 / d_h as f64).sqrt();
        Self {
            embeddings: Matrix::uniform(vocab_size, d_h, scale, rng),
            mix_prev: Matrix::glorot(d_h, d_h, rng),
            mix_center: Matrix::glorot(d_h, d_h, rng),
            mix_next: Matrix::glorot(d_h, d_h, rng),
            mix_bias: Matrix::zeros(1, d_h),
        }
    }

    pub fn d_h(&self) -> usize {
        self.embeddings.cols()
    }

    /// Appends freshly initialised rows for new vocabulary entries.
    pub fn grow_vocab<R: Rng>(&mut self, new_size: usize, rng: &mut R) {
        let (old, d) = self.embeddings.shape();
        if new_size <= old {
            return;
        }
        let extra = Matrix::uniform(new_size - old, d, (3.0 / d as f64).sqrt(), rng);
        let mut data = self.embeddings.data().to_vec();
        data.extend_from_slice(extra.data());
        self.embeddings = Matrix::new(new_size, d, data).expect("consistent shape");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// One `d_p` row per target label (the label representations).
    pub label_reps: Matrix,
    pub proj: Linear,
    pub gcn: Vec<Matrix>,
    pub out_proj: Linear,
}

impl FusionParams {
    pub fn init<R: Rng>(n_labels: usize, d_h: usize, d_p: usize, rng: &mut R) -> Self {
        Self {
            label_reps: Matrix::uniform(n_labels, d_p, 0.1, rng),
            proj: Linear::init(d_h, d_p, rng),
            gcn: vec![Matrix::glorot(d_p, d_p, rng), Matrix::glorot(d_p, d_p, rng)],
            out_proj: Linear::init(d_p, d_h, rng),
        }
    }
}

/// All trainable values of a tagger. A source tagger has neither fusion
/// layers nor the auxiliary head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Option<ToyEncoder>,
    pub fusion: Option<FusionParams>,
    pub fc_cls: Linear,
    pub fc_aux: Option<Linear>,
}

impl ModelParams {
    /// Named tensors in a fixed order; [`BoundModel::vars`] follows it.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        if let Some(e) = &self.encoder {
            out.push(("encoder.embeddings".into(), &e.embeddings));
            out.push(("encoder.mix_prev".into(), &e.mix_prev));
            out.push(("encoder.mix_center".into(), &e.mix_center));
            out.push(("encoder.mix_next".into(), &e.mix_next));
            out.push(("encoder.mix_bias".into(), &e.mix_bias));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.label_reps".into(), &f.label_reps));
            out.push(("fusion.proj.weight".into(), &f.proj.weight));
            out.push(("fusion.proj.bias".into(), &f.proj.bias));
            for (k, w) in f.gcn.iter().enumerate() {
                out.push((format!("fusion.gcn.{k}"), w));
            }
            out.push(("fusion.out_proj.weight".into(), &f.out_proj.weight));
            out.push(("fusion.out_proj.bias".into(), &f.out_proj.bias));
        }
        out.push(("fc_cls.weight".into(), &self.fc_cls.weight));
        out.push(("fc_cls.bias".into(), &self.fc_cls.bias));
        if let Some(a) = &self.fc_aux {
            out.push(("fc_aux.weight".into(), &a.weight));
            out.push(("fc_aux.bias".into(), &a.bias));
        }
        out
    }

    /// Mutable tensors in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.push(&mut e.embeddings);
            out.push(&mut e.mix_prev);
            out.push(&mut e.mix_center);
            out.push(&mut e.mix_next);
            out.push(&mut e.mix_bias);
        }
        if let Some(f) = &mut self.fusion {
            out.push(&mut f.label_reps);
            out.push(&mut f.proj.weight);
            out.push(&mut f.proj.bias);
            for w in &mut f.gcn {
                out.push(w);
            }
            out.push(&mut f.out_proj.weight);
            out.push(&mut f.out_proj.bias);
        }
        out.push(&mut self.fc_cls.weight);
        out.push(&mut self.fc_cls.bias);
        if let Some(a) = &mut self.fc_aux {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.all_finite())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.as_ref().map(|e| BoundEncoder {
                embeddings: tape.leaf(e.embeddings.clone()),
                mix_prev: tape.leaf(e.mix_prev.clone()),
                mix_center: tape.leaf(e.mix_center.clone()),
                mix_next: tape.leaf(e.mix_next.clone()),
                mix_bias: tape.leaf(e.mix_bias.clone()),
            }),
            fusion: self.fusion.as_ref().map(|f| BoundFusion {
                label_reps: tape.leaf(f.label_reps.clone()),
                proj: f.proj.bind(tape),
                gcn: f.gcn.iter().map(|w| tape.leaf(w.clone())).collect(),
                out_proj: f.out_proj.bind(tape),
            }),
            fc_cls: self.fc_cls.bind(tape),
            fc_aux: self.fc_aux.as_ref().map(|a| a.bind(tape)),
        }
    }
}

impl ModelParams {
    /// Rebinds this layout to existing tape variables, listed in the order of
    /// [`ModelParams::named`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.named().len() {
            return shape_err(format!(
                "{} variables for {} tensors",
                vars.len(),
                self.named().len()
            ));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let encoder = self.encoder.as_ref().map(|_| BoundEncoder {
            embeddings: next(),
            mix_prev: next(),
            mix_center: next(),
            mix_next: next(),
            mix_bias: next(),
        });
        let fusion = match &self.fusion {
            Some(f) => {
                let label_reps = next();
                let proj = BoundLinear {
                    weight: next(),
                    bias: next(),
                };
                let gcn = f.gcn.iter().map(|_| next()).collect();
                let out_proj = BoundLinear {
                    weight: next(),
                    bias: next(),
                };
                Some(BoundFusion {
                    label_reps,
                    proj,
                    gcn,
                    out_proj,
                })
            }
            None => None,
        };
        let fc_cls = BoundLinear {
            weight: next(),
            bias: next(),
        };
        let fc_aux = self.fc_aux.as_ref().map(|_| BoundLinear {
            weight: next(),
            bias: next(),
        });
        Ok(BoundModel {
            encoder,
            fusion,
            fc_cls,
            fc_aux,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub embeddings: Var,
    pub mix_prev: Var,
    pub mix_center: Var,
    pub mix_next: Var,
    pub mix_bias: Var,
}

#[derive(Debug, Clone)]
pub struct BoundFusion {
    pub label_reps: Var,
    pub proj: BoundLinear,
    pub gcn: Vec<Var>,
    pub out_proj: BoundLinear,
}

/// Tape handles for every tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: Option<BoundEncoder>,
    pub fusion: Option<BoundFusion>,
    pub fc_cls: BoundLinear,
    pub fc_aux: Option<BoundLinear>,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend([e.embeddings, e.mix_prev, e.mix_center, e.mix_next, e.mix_bias]);
        }
        if let Some(f) = &self.fusion {
            out.extend([f.label_reps, f.proj.weight, f.proj.bias]);
            out.extend(f.gcn.iter().copied());
            out.extend([f.out_proj.weight, f.out_proj.bias]);
        }
        out.extend([self.fc_cls.weight, self.fc_cls.bias]);
        if let Some(a) = &self.fc_aux {
            out.extend([a.weight, a.bias]);
        }
        out
    }
}

/// What the encoder consumes for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    /// Vocabulary ids for the trainable toy encoder.
    Ids(Vec<usize>),
    /// Frozen per-token vectors loaded from an embedding file.
    Vectors(Matrix),
}

fn shift_matrix(n: usize, offset: isize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        let src = j as isize + offset;
        if src >= 0 && (src as usize) < n {
            m.set(j, src as usize, 1.0);
        }
    }
    m
}

/// Contextual token representations, `n_s x d_h`.
pub fn encode(tape: &mut Tape, model: &BoundModel, input: &EncoderInput) -> Result<Var> {
    match input {
        EncoderInput::Vectors(v) => {
            if v.rows() == 0 {
                return input_err("empty sentence");
            }
            Ok(tape.leaf(v.clone()))
        }
        EncoderInput::Ids(ids) => {
            if ids.is_empty() {
                return input_err("empty sentence");
            }
            let Some(enc) = model.encoder else {
                return input_err("model has no trainable encoder; supply embedding vectors");
            };
            let n = ids.len();
            let e = tape.gather_rows(enc.embeddings, ids)?;
            let prev = tape.leaf(shift_matrix(n, -1));
            let next = tape.leaf(shift_matrix(n, 1));
            let e_prev = tape.matmul(prev, e)?;
            let e_next = tape.matmul(next, e)?;
            let a = tape.matmul(e_prev, enc.mix_prev)?;
            let b = tape.matmul(e, enc.mix_center)?;
            let c = tape.matmul(e_next, enc.mix_next)?;
            let ab = tape.add(a, b)?;
            let abc = tape.add(ab, c)?;
            let pre = tape.add_row(abc, enc.mix_bias)?;
            let mixed = tape.tanh(pre);
            tape.add(e, mixed)
        }
    }
}

/// Label-guided attention. Returns `(q, alpha, u)` with `q = h W_p + b_p`,
/// `alpha_ij = softmax_j(q_j . c_i)` and `u_i = sum_j alpha_ij q_j`.
pub fn label_attention(
    tape: &mut Tape,
    h: Var,
    label_reps: Var,
    proj: BoundLinear,
) -> Result<(Var, Var, Var)> {
    if tape.value(h).rows() == 0 {
        return input_err("label attention over an empty sentence");
    }
    let q = proj.apply(tape, h)?;
    let qt = tape.transpose(q);
    let scores = tape.matmul(label_reps, qt)?;
    let alpha = tape.softmax_rows(scores, 1.0)?;
    let u = tape.matmul(alpha, q)?;
    Ok((q, alpha, u))
}

/// `D^{-1/2} (A + I) D^{-1/2}` over the graph's thresholded edges, with rows
/// in `labels` order. The graph must carry exactly these labels, in order.
pub fn normalized_adjacency(graph: &LabelGraph, labels: &[String]) -> Result<Matrix> {
    if graph.labels() != labels {
        return input_err(format!(
            "graph labels {:?} do not align with model labels {:?}",
            graph.labels(),
            labels
        ));
    }
    let n = labels.len();
    let mut a = graph.adjacency();
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    let deg: Vec<f64> = a.row_sums().iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, a.get(i, j) * deg[i] * deg[j]);
        }
    }
    Ok(a)
}

/// `u' = Â ReLU(Â u W_1) W_2`, generalised to any number of layers with ReLU
/// between them.
pub fn gcn_propagate(tape: &mut Tape, u: Var, adjacency: &Matrix, weights: &[Var]) -> Result<Var> {
    if adjacency.rows() != tape.value(u).rows() {
        return shape_err(format!(
            "adjacency over {} nodes for {} label rows",
            adjacency.rows(),
            tape.value(u).rows()
        ));
    }
    let a = tape.leaf(adjacency.clone());
    let mut x = u;
    for (k, w) in weights.iter().enumerate() {
        if k > 0 {
            x = tape.relu(x);
        }
        let ax = tape.matmul(a, x)?;
        x = tape.matmul(ax, *w)?;
    }
    Ok(x)
}

/// Token-guided attention with residual projection. Returns `(beta, h')`
/// with `beta_ji = softmax_i(q_j . u'_i)` and
/// `h'_j = h_j + (sum_i beta_ji u'_i) W'_p + b'_p`.
pub fn token_fusion(
    tape: &mut Tape,
    h: Var,
    q: Var,
    u_prime: Var,
    out_proj: BoundLinear,
) -> Result<(Var, Var)> {
    let ut = tape.transpose(u_prime);
    let scores = tape.matmul(q, ut)?;
    let beta = tape.softmax_rows(scores, 1.0)?;
    let pooled = tape.matmul(beta, u_prime)?;
    let projected = out_proj.apply(tape, pooled)?;
    let h_prime = tape.add(h, projected)?;
    Ok((beta, h_prime))
}

/// Mean token cross-entropy of the tag logits against gold tag indices.
pub fn classification_loss(tape: &mut Tape, logits: Var, gold_tags: &[usize]) -> Result<Var> {
    if let Some(&bad) = gold_tags.iter().find(|&&t| t >= tape.value(logits).cols()) {
        return input_err(format!("tag index {bad} outside the tag set"));
    }
    tape.cross_entropy(logits, gold_tags)
}

/// Sentence vector (token mean of `h'`) for the auxiliary head.
pub fn sentence_vector(tape: &mut Tape, h_prime: Var) -> Var {
    tape.mean_rows(h_prime)
}

/// Binary cross-entropy of auxiliary logits (one row per sentence) against
/// multi-hot type-presence targets, averaged over all entries.
pub fn auxiliary_loss(tape: &mut Tape, aux_logits: Var, present: &Matrix) -> Result<Var> {
    tape.bce_with_logits(aux_logits, present)
}

/// Intermediate values of one fused forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub q: Matrix,
    pub alpha: Matrix,
    pub u: Matrix,
    pub u_prime: Matrix,
    pub beta: Matrix,
    pub h_prime: Matrix,
}

/// Tape handles of one sentence's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SentenceForward {
    pub h: Var,
    pub q: Option<Var>,
    pub alpha: Option<Var>,
    pub u: Option<Var>,
    pub u_prime: Option<Var>,
    pub beta: Option<Var>,
    pub h_prime: Var,
    pub logits: Var,
}

impl SentenceForward {
    pub fn trace(&self, tape: &Tape) -> Option<FusionTrace> {
        Some(FusionTrace {
            q: tape.value(self.q?).clone(),
            alpha: tape.value(self.alpha?).clone(),
            u: tape.value(self.u?).clone(),
            u_prime: tape.value(self.u_prime?).clone(),
            beta: tape.value(self.beta?).clone(),
            h_prime: tape.value(self.h_prime).clone(),
        })
    }
}

/// Encoder, optional fusion over `adjacency`, and tag logits for one sentence.
pub fn forward_sentence(
    tape: &mut Tape,
    model: &BoundModel,
    input: &EncoderInput,
    adjacency: Option<&Matrix>,
) -> Result<SentenceForward> {
    let h = encode(tape, model, input)?;
    let mut out = SentenceForward {
        h,
        q: None,
        alpha: None,
        u: None,
        u_prime: None,
        beta: None,
        h_prime: h,
        logits: h,
    };
    if let Some(fusion) = &model.fusion {
        let Some(adjacency) = adjacency else {
            return input_err("fusion layers need the source graph adjacency");
        };
        let (q, alpha, u) = label_attention(tape, h, fusion.label_reps, fusion.proj)?;
        let u_prime = gcn_propagate(tape, u, adjacency, &fusion.gcn)?;
        let (beta, h_prime) = token_fusion(tape, h, q, u_prime, fusion.out_proj)?;
        out.q = Some(q);
        out.alpha = Some(alpha);
        out.u = Some(u);
        out.u_prime = Some(u_prime);
        out.beta = Some(beta);
        out.h_prime = h_prime;
    }
    out.logits = model.fc_cls.apply(tape, out.h_prime)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::uniform(r, c, 2.0, &mut rng(seed))
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    fn lin(tape: &mut Tape, w: &Matrix, b: &Matrix) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(w.clone()),
            bias: tape.leaf(b.clone()),
        }
    }

    #[test]
    fn single_token_attention() {
        let mut t = Tape::new();
        let h = t.leaf(rand_m(1, 3, 1));
        let c = t.leaf(rand_m(4, 2, 2));
        let p = lin(&mut t, &rand_m(3, 2, 3), &rand_m(1, 2, 4));
        let (q, alpha, u) = label_attention(&mut t, h, c, p).unwrap();
        assert!(t.value(alpha).data().iter().all(|&a| a == 1.0));
        for i in 0..4 {
            assert_eq!(t.value(u).row(i), t.value(q).row(0));
        }
    }

    #[test]
    fn orthogonal_labels_attend_uniformly() {
        let mut t = Tape::new();
        // q_j = h_j (identity projection), all q_j on the x axis; c_i on y
        let h = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![-2.0, 0.0]]).unwrap());
        let c = t.leaf(Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0]]).unwrap());
        let p = lin(&mut t, &Matrix::identity(2), &Matrix::zeros(1, 2));
        let (_, alpha, u) = label_attention(&mut t, h, c, p).unwrap();
        for &a in t.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        for i in 0..2 {
            assert!((t.value(u).get(i, 0) - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_case() {
        // n_s = 2, d_p = 2, identity projection with bias [0, 1]
        let hm = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cm = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(hm);
        let c = t.leaf(cm);
        let p = lin(&mut t, &Matrix::identity(2), &Matrix::row_vector(vec![0.0, 1.0]));
        let (q, alpha, u) = label_attention(&mut t, h, c, p).unwrap();
        // q = [[1,1],[0,2]]; scores = [2, 2] -> alpha = [0.5, 0.5]; u = [0.5, 1.5]
        assert_eq!(t.value(q).to_rows(), vec![vec![1.0, 1.0], vec![0.0, 2.0]]);
        assert_eq!(t.value(alpha).row(0), &[0.5, 0.5]);
        assert_eq!(t.value(u).row(0), &[0.5, 1.5]);

        // c = [1, 0]: scores [1, 0] -> alpha = [e/(e+1), 1/(e+1)]
        let mut t = Tape::new();
        let h = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let c = t.leaf(Matrix::row_vector(vec![1.0, 0.0]));
        let p = lin(&mut t, &Matrix::identity(2), &Matrix::row_vector(vec![0.0, 1.0]));
        let (_, alpha, u) = label_attention(&mut t, h, c, p).unwrap();
        let e = std::f64::consts::E;
        let a0 = e / (e + 1.0);
        assert!((t.value(alpha).get(0, 0) - a0).abs() < 1e-15);
        assert!((t.value(u).get(0, 0) - a0).abs() < 1e-15);
        assert!((t.value(u).get(0, 1) - (a0 + 2.0 * (1.0 - a0))).abs() < 1e-15);
    }

    fn graph(labels: &[&str], rows: &[Vec<f64>], threshold: f64) -> LabelGraph {
        LabelGraph::build(
            labels.iter().map(|s| s.to_string()).collect(),
            &Matrix::from_rows(rows).unwrap(),
            threshold,
        )
        .unwrap()
    }

    fn names(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn edgeless_gcn_is_relu() {
        let g = graph(&["A", "B"], &[vec![0.0, 1.0], vec![1.0, 0.0]], 0.5);
        assert_eq!(g.edge_count(), 0);
        let adj = normalized_adjacency(&g, &names(&["A", "B"])).unwrap();
        assert_eq!(adj, Matrix::identity(2));
        let um = rand_m(2, 3, 7);
        let mut t = Tape::new();
        let u = t.leaf(um.clone());
        let w1 = t.leaf(Matrix::identity(3));
        let w2 = t.leaf(Matrix::identity(3));
        let out = gcn_propagate(&mut t, u, &adj, &[w1, w2]).unwrap();
        assert_eq!(t.value(out), &um.map(|x| x.max(0.0)));
    }

    #[test]
    fn connected_pair_with_equal_rows_stays_equal() {
        let g = graph(&["A", "B"], &[vec![0.0, 1.0], vec![1.0, 0.0]], 5.0);
        let adj = normalized_adjacency(&g, &names(&["A", "B"])).unwrap();
        let row = vec![0.3, -0.2, 1.1];
        let mut t = Tape::new();
        let u = t.leaf(Matrix::from_rows(&[row.clone(), row]).unwrap());
        let w1 = t.leaf(rand_m(3, 3, 8));
        let w2 = t.leaf(rand_m(3, 3, 9));
        let out = gcn_propagate(&mut t, u, &adj, &[w1, w2]).unwrap();
        assert_eq!(t.value(out).row(0), t.value(out).row(1));
    }

    #[test]
    fn path_graph_matches_dense_evaluation() {
        // collinear nodes 0, 0.5, 1 -> normalised gaps 1.125 and 2.25: a path A-B-C
        let g = graph(&["A", "B", "C"], &[vec![0.0], vec![0.5], vec![1.0]], 1.5);
        let adj = normalized_adjacency(&g, &names(&["A", "B", "C"])).unwrap();
        let (s2, s3) = (1.0 / 2f64.sqrt(), 1.0 / 3f64.sqrt());
        let want = Matrix::from_rows(&[
            vec![0.5, s2 * s3, 0.0],
            vec![s2 * s3, 1.0 / 3.0, s2 * s3],
            vec![0.0, s2 * s3, 0.5],
        ])
        .unwrap();
        close(&adj, &want, 1e-15);

        let (um, w1m, w2m) = (rand_m(3, 2, 10), rand_m(2, 2, 11), rand_m(2, 2, 12));
        let mut t = Tape::new();
        let u = t.leaf(um.clone());
        let w1 = t.leaf(w1m.clone());
        let w2 = t.leaf(w2m.clone());
        let out = gcn_propagate(&mut t, u, &adj, &[w1, w2]).unwrap();
        let hidden = want.matmul(&um).unwrap().matmul(&w1m).unwrap().map(|x| x.max(0.0));
        let direct = want.matmul(&hidden).unwrap().matmul(&w2m).unwrap();
        close(t.value(out), &direct, 1e-14);
    }

    #[test]
    fn misaligned_labels_rejected() {
        let g = graph(&["A", "B"], &[vec![0.0, 1.0], vec![1.0, 0.0]], 1.5);
        assert!(normalized_adjacency(&g, &names(&["B", "A"])).is_err());
    }

    #[test]
    fn fusion_with_identical_components() {
        let (hm, qm) = (rand_m(3, 4, 13), rand_m(3, 2, 14));
        let star = vec![0.4, -0.7];
        let (wm, bm) = (rand_m(2, 4, 15), rand_m(1, 4, 16));
        let mut t = Tape::new();
        let h = t.leaf(hm.clone());
        let q = t.leaf(qm);
        let up = t.leaf(Matrix::from_rows(&[star.clone(), star.clone()]).unwrap());
        let p = lin(&mut t, &wm, &bm);
        let (beta, hp) = token_fusion(&mut t, h, q, up, p).unwrap();
        assert!(t.value(beta).data().iter().all(|&b| b == 0.5));
        let shift = Matrix::row_vector(star).matmul(&wm).unwrap();
        for j in 0..3 {
            for c in 0..4 {
                let want = hm.get(j, c) + shift.get(0, c) + bm.get(0, c);
                assert!((t.value(hp).get(j, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_projection_is_identity() {
        let hm = rand_m(3, 4, 17);
        let mut t = Tape::new();
        let h = t.leaf(hm.clone());
        let q = t.leaf(rand_m(3, 2, 18));
        let up = t.leaf(rand_m(5, 2, 19));
        let p = lin(&mut t, &Matrix::zeros(2, 4), &Matrix::zeros(1, 4));
        let (_, hp) = token_fusion(&mut t, h, q, up, p).unwrap();
        assert_eq!(t.value(hp), &hm);
    }

    #[test]
    fn fusion_hand_case() {
        // one token, q = [1, 0], u' = [[2, 0], [0, 1]] -> scores [2, 0]
        let mut t = Tape::new();
        let h = t.leaf(Matrix::row_vector(vec![1.0]));
        let q = t.leaf(Matrix::row_vector(vec![1.0, 0.0]));
        let up = t.leaf(Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let p = lin(&mut t, &Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), &Matrix::scalar(0.5));
        let (beta, hp) = token_fusion(&mut t, h, q, up, p).unwrap();
        let e2 = 2f64.exp();
        let b0 = e2 / (e2 + 1.0);
        assert!((t.value(beta).get(0, 0) - b0).abs() < 1e-15);
        let want = 1.0 + (2.0 * b0 + (1.0 - b0)) + 0.5;
        assert!((t.scalar(hp) - want).abs() < 1e-14);
    }

    #[test]
    fn classification_loss_cases() {
        let mut t = Tape::new();
        let mut big = Matrix::zeros(2, 3);
        big.set(0, 1, 30.0);
        big.set(1, 2, 30.0);
        let l = t.leaf(big);
        let loss = classification_loss(&mut t, l, &[1, 2]).unwrap();
        assert!(t.scalar(loss) < 1e-3);

        let z = t.leaf(Matrix::zeros(4, 7));
        let loss = classification_loss(&mut t, z, &[0, 1, 2, 6]).unwrap();
        assert!((t.scalar(loss) - 7f64.ln()).abs() < 1e-12);
        assert!(classification_loss(&mut t, z, &[0, 1, 2, 7]).is_err());

        // hand case: logits [1, 0] gold 0 and [0, 2] gold 0
        let hand = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let loss = classification_loss(&mut t, hand, &[0, 0]).unwrap();
        let want = ((1f64.exp() + 1.0).ln() - 1.0 + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((t.scalar(loss) - want).abs() < 1e-14);
    }

    #[test]
    fn auxiliary_loss_cases() {
        let mut t = Tape::new();
        let present = Matrix::row_vector(vec![1.0, 0.0, 1.0]);
        let sat = t.leaf(Matrix::row_vector(vec![20.0, -20.0, 20.0]));
        let loss = auxiliary_loss(&mut t, sat, &present).unwrap();
        assert!(t.scalar(loss) < 1e-6);

        let zero = t.leaf(Matrix::zeros(1, 3));
        let loss = auxiliary_loss(&mut t, zero, &present).unwrap();
        assert!((t.scalar(loss) - 2f64.ln()).abs() < 1e-15);

        // hand case via the mean-pooled sentence vector
        let hp = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap());
        let s = sentence_vector(&mut t, hp);
        let head = lin(&mut t, &Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(), &Matrix::scalar(0.5));
        let z = head.apply(&mut t, s).unwrap();
        // mean = [2, 1], z = 2 - 1 + 0.5 = 1.5, target 1
        let loss = auxiliary_loss(&mut t, z, &Matrix::scalar(1.0)).unwrap();
        let want = -(1.0 / (1.0 + (-1.5f64).exp())).ln();
        assert!((t.scalar(loss) - want).abs() < 1e-14);
    }

    #[test]
    fn encoder_modes() {
        let mut r = rng(20);
        let enc = ToyEncoder::init(5, 3, &mut r);
        let params = ModelParams {
            encoder: Some(enc.clone()),
            fusion: None,
            fc_cls: Linear::init(3, 2, &mut r),
            fc_aux: None,
        };
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = encode(&mut t, &b, &EncoderInput::Ids(vec![2])).unwrap();
        let e = enc.embeddings.select_rows(&[2]);
        let pre = e.matmul(&enc.mix_center).unwrap().zip_map(&enc.mix_bias, |a, b| a + b).unwrap();
        let want = e.zip_map(&pre.map(f64::tanh), |a, b| a + b).unwrap();
        close(t.value(h), &want, 1e-15);

        let h1 = encode(&mut t, &b, &EncoderInput::Ids(vec![1, 4, 3])).unwrap();
        let h2 = encode(&mut t, &b, &EncoderInput::Ids(vec![1, 4, 3])).unwrap();
        assert_eq!(t.value(h1), t.value(h2));

        let frozen = rand_m(2, 3, 21);
        let hf = encode(&mut t, &b, &EncoderInput::Vectors(frozen.clone())).unwrap();
        assert_eq!(t.value(hf), &frozen);
        assert!(encode(&mut t, &b, &EncoderInput::Ids(vec![])).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng(22);
        let fusion = FusionParams::init(4, 5, 3, &mut r);
        let g = graph(
            &["A", "B", "C", "D"],
            &[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.9], vec![0.3, 0.7]],
            1.5,
        );
        let adj = normalized_adjacency(&g, g.labels()).unwrap();
        let params = ModelParams {
            encoder: None,
            fusion: Some(fusion),
            fc_cls: Linear::init(5, 9, &mut r),
            fc_aux: Some(Linear::init(5, 4, &mut r)),
        };
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let fwd = forward_sentence(&mut t, &b, &EncoderInput::Vectors(rand_m(6, 5, 23)), Some(&adj)).unwrap();
        let trace = fwd.trace(&t).unwrap();
        for s in trace.alpha.row_sums().iter().chain(trace.beta.row_sums().iter()) {
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(trace.alpha.shape(), (4, 6));
        assert_eq!(trace.beta.shape(), (6, 4));
    }

    #[test]
    fn label_permutation_leaves_fused_embeddings_unchanged() {
        let mut r = rng(24);
        let fusion = FusionParams::init(3, 4, 3, &mut r);
        let rows = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.2, 0.8]];
        let g = graph(&["A", "B", "C"], &rows, 1.5);
        let perm = [2usize, 0, 1];
        let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let pnames: Vec<&str> = perm.iter().map(|&i| ["A", "B", "C"][i]).collect();
        let pg = graph(&pnames, &prow, 1.5);
        let mut pf = fusion.clone();
        pf.label_reps = fusion.label_reps.select_rows(&perm);

        let h = rand_m(5, 4, 25);
        let run = |f: &FusionParams, g: &LabelGraph| {
            let mut t = Tape::new();
            let b = ModelParams {
                encoder: None,
                fusion: Some(f.clone()),
                fc_cls: Linear::zeros(4, 2),
                fc_aux: None,
            }
            .bind(&mut t);
            let adj = normalized_adjacency(g, g.labels()).unwrap();
            let fwd = forward_sentence(&mut t, &b, &EncoderInput::Vectors(h.clone()), Some(&adj)).unwrap();
            fwd.trace(&t).unwrap()
        };
        let a = run(&fusion, &g);
        let p = run(&pf, &pg);
        close(&p.u, &a.u.select_rows(&perm), 1e-12);
        close(&p.u_prime, &a.u_prime.select_rows(&perm), 1e-12);
        close(&p.alpha, &a.alpha.select_rows(&perm), 1e-12);
        close(&p.h_prime, &a.h_prime, 1e-12);
    }

    #[test]
    fn primitive_gradients() {
        // label attention
        let report = grad_check(
            |t, v| {
                let p = BoundLinear { weight: v[2], bias: v[3] };
                let (_, _, u) = label_attention(t, v[0], v[1], p)?;
                let th = t.tanh(u);
                Ok(t.sum(th))
            },
            &[rand_m(4, 3, 30), rand_m(2, 2, 31), rand_m(3, 2, 32), rand_m(1, 2, 33)],
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // gcn over a path graph
        let g = graph(&["A", "B", "C"], &[vec![0.0], vec![0.5], vec![1.0]], 1.5);
        let adj = normalized_adjacency(&g, g.labels()).unwrap();
        let report = grad_check(
            |t, v| {
                let out = gcn_propagate(t, v[0], &adj, &[v[1], v[2]])?;
                let th = t.tanh(out);
                Ok(t.sum(th))
            },
            &[rand_m(3, 2, 34), rand_m(2, 2, 35), rand_m(2, 2, 36)],
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // token fusion
        let report = grad_check(
            |t, v| {
                let p = BoundLinear { weight: v[3], bias: v[4] };
                let (_, hp) = token_fusion(t, v[0], v[1], v[2], p)?;
                let th = t.tanh(hp);
                Ok(t.sum(th))
            },
            &[rand_m(3, 4, 37), rand_m(3, 2, 38), rand_m(2, 2, 39), rand_m(2, 4, 40), rand_m(1, 4, 41)],
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // classification and auxiliary heads
        let present = Matrix::row_vector(vec![1.0, 0.0]);
        let report = grad_check(
            |t, v| {
                let cls = BoundLinear { weight: v[1], bias: v[2] };
                let aux = BoundLinear { weight: v[3], bias: v[4] };
                let logits = cls.apply(t, v[0])?;
                let lc = classification_loss(t, logits, &[0, 2, 1])?;
                let s = sentence_vector(t, v[0]);
                let z = aux.apply(t, s)?;
                let la = auxiliary_loss(t, z, &present)?;
                let la = t.scale(la, 0.1);
                t.add(lc, la)
            },
            &[rand_m(3, 4, 42), rand_m(4, 3, 43), rand_m(1, 3, 44), rand_m(4, 2, 45), rand_m(1, 2, 46)],
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // toy encoder
        let emb = rand_m(6, 3, 47);
        let report = grad_check(
            |t, v| {
                let b = BoundModel {
                    encoder: Some(BoundEncoder {
                        embeddings: v[0],
                        mix_prev: v[1],
                        mix_center: v[2],
                        mix_next: v[3],
                        mix_bias: v[4],
                    }),
                    fusion: None,
                    fc_cls: BoundLinear { weight: v[1], bias: v[4] },
                    fc_aux: None,
                };
                let h = encode(t, &b, &EncoderInput::Ids(vec![1, 5, 1, 0]))?;
                let th = t.tanh(h);
                Ok(t.sum(th))
            },
            &[emb, rand_m(3, 3, 48), rand_m(3, 3, 49), rand_m(3, 3, 50), rand_m(1, 3, 51)],
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
