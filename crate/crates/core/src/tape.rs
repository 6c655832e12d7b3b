//! Reverse-mode accumulation over a tape of matrix primitives.
//!
//! Every primitive pushes its output value plus the state needed for its
//! backward rule. [`Tape::backward`] walks the tape once in reverse, so each
//! leaf receives its full gradient exactly once.

use crate::error::{shape_err, Result};
use crate::tensor::{log_sum_exp, softmax_in_place, softmax_rows, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var, f64),
    Sum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PairwiseL2(Var),
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Matrix),
    GwFixedPlan { dist: Var, source: Matrix, plan: Matrix },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves receive gradients; constants are simply
    /// leaves whose gradient the caller ignores.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return shape_err(format!(
                "bias {:?} for matrix {:?}",
                rv.shape(),
                mv.shape()
            ));
        }
        let mut out = mv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(m, row)))
    }

    pub fn scale(&mut self, m: Var, k: f64) -> Var {
        let out = self.value(m).scale(k);
        self.push(out, Op::Scale(m, k))
    }

    /// Divides every entry of `m` by the `1 x 1` value `s`.
    pub fn div_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return shape_err("divisor must be 1x1");
        }
        let d = self.scalar(s);
        let out = self.value(m).map(|x| x / d);
        Ok(self.push(out, Op::DivScalar(m, s)))
    }

    pub fn transpose(&mut self, m: Var) -> Var {
        let out = self.value(m).transpose();
        self.push(out, Op::Transpose(m))
    }

    pub fn relu(&mut self, m: Var) -> Var {
        let out = self.value(m).map(|x| x.max(0.0));
        self.push(out, Op::Relu(m))
    }

    pub fn tanh(&mut self, m: Var) -> Var {
        let out = self.value(m).map(f64::tanh);
        self.push(out, Op::Tanh(m))
    }

    /// Row-wise `softmax(m / temperature)`.
    pub fn softmax_rows(&mut self, m: Var, temperature: f64) -> Result<Var> {
        let out = softmax_rows(self.value(m), temperature)?;
        Ok(self.push(out, Op::SoftmaxRows(m, temperature)))
    }

    pub fn sum(&mut self, m: Var) -> Var {
        let out = Matrix::scalar(self.value(m).sum());
        self.push(out, Op::Sum(m))
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, m: Var) -> Var {
        let mv = self.value(m);
        let n = mv.rows().max(1) as f64;
        let out = Matrix::row_vector(mv.col_sums().into_iter().map(|s| s / n).collect());
        self.push(out, Op::MeanRows(m))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero matrices");
        };
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return shape_err(format!("concat {} cols with {}", v.cols(), cols));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Matrix::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row lookup, as for an embedding table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return shape_err(format!("row {bad} out of {} rows", t.rows()));
        }
        let out = t.select_rows(indices);
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec())))
    }

    /// `n x n` matrix of l2 distances between rows.
    pub fn pairwise_l2(&mut self, m: Var) -> Var {
        let out = crate::tensor::pairwise_distances(self.value(m));
        self.push(out, Op::PairwiseL2(m))
    }

    /// Mean softmax cross-entropy of each logit row against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return shape_err(format!("{} logit rows, {} targets", lv.rows(), targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return shape_err(format!("target {bad} out of {} classes", lv.cols()));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row.iter().copied()) - row[t];
        }
        let out = Matrix::scalar(total / targets.len().max(1) as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec())))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Matrix) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return shape_err(format!("bce {:?} vs {:?}", lv.shape(), targets.shape()));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let out = Matrix::scalar(total / lv.data().len().max(1) as f64);
        Ok(self.push(out, Op::BceWithLogits(logits, targets.clone())))
    }

    /// `sum_{i,i',j,j'} P_ij P_i'j' |S_ii' - D_jj'|` with the plan `P` and the
    /// source distances `S` held constant; only `D` is differentiated.
    pub fn gw_fixed_plan(&mut self, dist: Var, source: &Matrix, plan: &Matrix) -> Result<Var> {
        let d = self.value(dist);
        let (n, m) = plan.shape();
        if source.shape() != (n, n) || d.shape() != (m, m) {
            return shape_err(format!(
                "plan {:?} with source {:?} and target {:?}",
                plan.shape(),
                source.shape(),
                d.shape()
            ));
        }
        let value = crate::gw::gw_objective(source, d, plan);
        Ok(self.push(
            Matrix::scalar(value),
            Op::GwFixedPlan {
                dist,
                source: source.clone(),
                plan: plan.clone(),
            },
        ))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.matmul(&bv.transpose()).expect("matmul grad shape");
                    let db = av.transpose().matmul(&g).expect("matmul grad shape");
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(m, row) => {
                    acc(*row, Matrix::row_vector(g.col_sums()));
                    acc(*m, g);
                }
                Op::Scale(m, k) => acc(*m, g.scale(*k)),
                Op::DivScalar(m, s) => {
                    let d = self.scalar(*s);
                    let mv = self.value(*m);
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(mv.data())
                        .map(|(gi, mi)| -gi * mi / (d * d))
                        .sum();
                    acc(*s, Matrix::scalar(ds));
                    acc(*m, g.scale(1.0 / d));
                }
                Op::Transpose(m) => acc(*m, g.transpose()),
                Op::Relu(m) => {
                    let dm = self
                        .value(*m)
                        .zip_map(&g, |x, gi| if x > 0.0 { gi } else { 0.0 })
                        .expect("relu grad shape");
                    acc(*m, dm);
                }
                Op::Tanh(m) => {
                    let dm = node
                        .value
                        .zip_map(&g, |y, gi| gi * (1.0 - y * y))
                        .expect("tanh grad shape");
                    acc(*m, dm);
                }
                Op::SoftmaxRows(m, temperature) => {
                    let y = &node.value;
                    let mut dm = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, out) in dm.row_mut(r).iter_mut().enumerate() {
                            *out = yr[c] * (gr[c] - dot) / temperature;
                        }
                    }
                    acc(*m, dm);
                }
                Op::Sum(m) => {
                    let (r, c) = self.value(*m).shape();
                    acc(*m, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::MeanRows(m) => {
                    let (r, c) = self.value(*m).shape();
                    let mut dm = Matrix::zeros(r, c);
                    for i in 0..r {
                        for (j, out) in dm.row_mut(i).iter_mut().enumerate() {
                            *out = g.get(0, j) / r as f64;
                        }
                    }
                    acc(*m, dm);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        acc(*p, g.select_rows(&idx));
                        offset += rows;
                    }
                }
                Op::GatherRows(table, indices) => {
                    let (r, c) = self.value(*table).shape();
                    let mut dt = Matrix::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, gi) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += gi;
                        }
                    }
                    acc(*table, dt);
                }
                Op::PairwiseL2(m) => {
                    let x = self.value(*m);
                    let dist = &node.value;
                    let n = x.rows();
                    let mut dx = Matrix::zeros(n, x.cols());
                    for i in 0..n {
                        for j in 0..n {
                            let dij = dist.get(i, j);
                            // subgradient 0 at coincident rows
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            let coef = (g.get(i, j) + g.get(j, i)) / dij;
                            for c in 0..x.cols() {
                                let v = dx.get(i, c) + coef * (x.get(i, c) - x.get(j, c));
                                dx.set(i, c, v);
                            }
                        }
                    }
                    acc(*m, dx);
                }
                Op::CrossEntropy(logits, targets) => {
                    let lv = self.value(*logits);
                    let n = targets.len().max(1) as f64;
                    let scale = g.get(0, 0) / n;
                    let mut dl = lv.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        softmax_in_place(row, 1.0);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= scale);
                    }
                    acc(*logits, dl);
                }
                Op::BceWithLogits(logits, targets) => {
                    let lv = self.value(*logits);
                    let scale = g.get(0, 0) / lv.data().len().max(1) as f64;
                    let dl = lv
                        .zip_map(targets, |z, y| (sigmoid(z) - y) * scale)
                        .expect("bce grad shape");
                    acc(*logits, dl);
                }
                Op::GwFixedPlan { dist, source, plan } => {
                    let d = self.value(*dist);
                    let mut dd = crate::gw::gw_objective_grad(source, d, plan);
                    dd = dd.scale(g.get(0, 0));
                    acc(*dist, dd);
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when `v` did not influence
    /// the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per parameter, ignoring entries whose absolute
    /// difference is under the floor.
    pub max_rel_error: Vec<f64>,
    pub max_abs_error: Vec<f64>,
    pub tolerance: f64,
    pub abs_floor: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().fold(0.0, |a, &b| a.max(b))
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the default step, tolerance and absolute floor.
pub fn grad_check<F>(f: F, params: &[Matrix]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, GRAD_CHECK_STEP, GRAD_CHECK_TOL, GRAD_CHECK_ABS_FLOOR)
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Matrix],
    step: f64,
    tolerance: f64,
    abs_floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != (1, 1) {
        return shape_err("grad_check needs a scalar output");
    }
    let grads = tape.backward(out);

    let mut perturbed = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    let mut max_abs_error = Vec::with_capacity(params.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        let mut worst_rel: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for k in 0..params[p].data().len() {
            let orig = params[p].data()[k];
            perturbed[p].data_mut()[k] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[p].data_mut()[k] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[p].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let diff = (a - numeric).abs();
            worst_abs = worst_abs.max(diff);
            if diff > abs_floor {
                worst_rel = worst_rel.max(diff / a.abs().max(numeric.abs()));
            }
        }
        max_rel_error.push(worst_rel);
        max_abs_error.push(worst_abs);
    }
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        tolerance,
        abs_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform(rows, cols, 2.0, &mut rng)
    }

    fn assert_passes(report: GradCheckReport) {
        assert!(report.passed(), "{report:?}");
    }

    fn sum_squares(t: &mut Tape, x: Var) -> Result<Var> {
        let xt = t.transpose(x);
        t.matmul(xt, x)
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = rand_matrix(6, 1, 1);
        let report = grad_check(|t, v| sum_squares(t, v[0]), &[x.clone()]).unwrap();
        assert!(report.worst() < 1e-8, "{report:?}");

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = sum_squares(&mut tape, v).unwrap();
        let g = tape.backward(s).wrt(&tape, v);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = rand_matrix(2, 2, 2);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let c = tape.leaf(Matrix::scalar(3.0));
        let out = tape.sum(c);
        let g = tape.backward(out);
        assert!(g.get(v).is_none());
        assert_eq!(g.wrt(&tape, v), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let a = rand_matrix(3, 4, 3);
        let b = rand_matrix(4, 2, 4);
        assert_passes(
            grad_check(
                |t, v| {
                    let p = t.matmul(v[0], v[1])?;
                    Ok(t.sum(p))
                },
                &[a, b],
            )
            .unwrap(),
        );
    }

    #[test]
    fn elementwise_primitives() {
        let a = rand_matrix(3, 3, 5);
        let b = rand_matrix(3, 3, 6);
        let row = rand_matrix(1, 3, 7);
        let w = rand_matrix(3, 3, 8);
        assert_passes(
            grad_check(
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let s = t.add_row(s, v[2])?;
                    let r = t.relu(s);
                    let h = t.tanh(r);
                    let h = t.scale(h, 1.7);
                    let tr = t.transpose(h);
                    let p = t.matmul(tr, v[3])?;
                    let m = t.mean_rows(p);
                    let mw = t.matmul(m, v[3])?;
                    Ok(t.sum(mw))
                },
                &[a, b, row, w],
            )
            .unwrap(),
        );
    }

    #[test]
    fn softmax_and_division() {
        let a = rand_matrix(3, 4, 9);
        let w = rand_matrix(4, 2, 10);
        let s = Matrix::scalar(1.3);
        assert_passes(
            grad_check(
                |t, v| {
                    let sm = t.softmax_rows(v[0], 2.5)?;
                    let d = t.div_scalar(sm, v[2])?;
                    let p = t.matmul(d, v[1])?;
                    let q = t.tanh(p);
                    Ok(t.sum(q))
                },
                &[a, w, s],
            )
            .unwrap(),
        );
    }

    #[test]
    fn gather_concat_pairwise() {
        let table = rand_matrix(5, 3, 11);
        let w = rand_matrix(4, 4, 12);
        assert_passes(
            grad_check(
                |t, v| {
                    let a = t.gather_rows(v[0], &[0, 2, 2])?;
                    let b = t.gather_rows(v[0], &[4])?;
                    let c = t.concat_rows(&[a, b])?;
                    let d = t.pairwise_l2(c);
                    let p = t.matmul(d, v[1])?;
                    let q = t.tanh(p);
                    Ok(t.sum(q))
                },
                &[table, w],
            )
            .unwrap(),
        );
    }

    #[test]
    fn losses() {
        let logits = rand_matrix(4, 3, 13);
        let aux = rand_matrix(2, 3, 14);
        let targets = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_passes(
            grad_check(
                |t, v| {
                    let ce = t.cross_entropy(v[0], &[0, 2, 1, 2])?;
                    let bce = t.bce_with_logits(v[1], &targets)?;
                    let both = t.concat_rows(&[ce, bce])?;
                    Ok(t.sum(both))
                },
                &[logits, aux],
            )
            .unwrap(),
        );
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(3, 5));
        let ce = t.cross_entropy(z, &[0, 1, 4]).unwrap();
        assert!((t.scalar(ce) - 5f64.ln()).abs() < 1e-12);
        assert!(t.cross_entropy(z, &[0, 1, 5]).is_err());
    }

    #[test]
    fn backward_reaches_each_leaf_once() {
        // y = x + x: gradient 2 from two uses accumulated into one entry
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(1.5));
        let y = t.add(x, x).unwrap();
        let g = t.backward(y);
        assert_eq!(g.wrt(&t, x).get(0, 0), 2.0);
    }
}
