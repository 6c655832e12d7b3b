//! Gromov-Wasserstein matching of label graphs.
//!
//! The structural cost compares intra-graph distances with an absolute
//! difference, `|d_s(i, i') - d_t(j, j')|`. The solver starts from the
//! uniform coupling and repeatedly linearises the objective at the current
//! plan, then takes a KL-proximal step: a log-domain Sinkhorn projection of
//! the kernel `plan * exp(-cost / epsilon)` onto the uniform marginals.
//! The objective is not convex, so the solver also restarts from couplings
//! seeded with each single correspondence and keeps the best run.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::LabelGraph;
use crate::tape::Tape;
use crate::tensor::{log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub matrix: Matrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    /// Largest absolute deviation of row or column sums from the marginals.
    pub fn marginal_error(&self) -> f64 {
        let rows = self.matrix.row_sums();
        let cols = self.matrix.col_sums();
        rows.iter()
            .zip(&self.row_marginal)
            .chain(cols.iter().zip(&self.col_marginal))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// CSV with label headers and six-decimal entries.
    pub fn to_csv(&self, row_labels: &[String], col_labels: &[String]) -> String {
        let mut out = String::from("source\\target");
        for l in col_labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in row_labels.iter().enumerate() {
            out.push_str(l);
            for x in self.matrix.row(i) {
                out.push_str(&format!(",{x:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: TransportPlan,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct GwResult {
    pub value: f64,
    pub plan: TransportPlan,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Set when an outer step raised the objective; the solver then stops and
    /// returns the previous plan.
    pub halted_on_increase: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GwSettings {
    pub epsilon: f64,
    pub outer_iter: usize,
    pub inner_iter: usize,
    pub tol: f64,
    /// Also descend from a greedy start per node pair and keep the best.
    #[serde(default = "default_true")]
    pub anchored_restarts: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GwSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            outer_iter: 20,
            inner_iter: 200,
            tol: 1e-6,
            anchored_restarts: true,
        }
    }
}

const MONOTONE_SLACK: f64 = 1e-9;
const ANCHOR_MIX: f64 = 0.1;
// remaining mass below this counts as assigned
const SPENT: f64 = 1e-12;

fn check_distances(d: &Matrix, name: &str) -> Result<()> {
    if d.rows() != d.cols() {
        return shape_err(format!("{name} distance matrix is {:?}", d.shape()));
    }
    if !d.all_finite() {
        return Err(Error::Numeric(format!("{name} distances are not finite")));
    }
    Ok(())
}

/// `C_ij = sum_{i',j'} P_i'j' |d_s(i,i') - d_t(j,j')|`.
pub fn structural_cost(d_s: &Matrix, d_t: &Matrix, plan: &Matrix) -> Result<Matrix> {
    check_distances(d_s, "source")?;
    check_distances(d_t, "target")?;
    if plan.shape() != (d_s.rows(), d_t.rows()) {
        return shape_err(format!(
            "plan {:?} for graphs of {} and {} nodes",
            plan.shape(),
            d_s.rows(),
            d_t.rows()
        ));
    }
    Ok(structural_cost_unchecked(d_s, d_t, plan))
}

fn structural_cost_unchecked(d_s: &Matrix, d_t: &Matrix, plan: &Matrix) -> Matrix {
    let (n, m) = plan.shape();
    let mut c = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for ip in 0..n {
                let s = d_s.get(i, ip);
                for jp in 0..m {
                    acc += plan.get(ip, jp) * (s - d_t.get(j, jp)).abs();
                }
            }
            c.set(i, j, acc);
        }
    }
    c
}

/// `sum_{i,i',j,j'} P_ij P_i'j' |d_s(i,i') - d_t(j,j')|`.
pub fn gw_objective(d_s: &Matrix, d_t: &Matrix, plan: &Matrix) -> f64 {
    let c = structural_cost_unchecked(d_s, d_t, plan);
    c.data().iter().zip(plan.data()).map(|(a, b)| a * b).sum()
}

/// Gradient of [`gw_objective`] in `d_t` with the plan held fixed. The
/// subgradient of `|x|` at zero is taken as zero.
pub fn gw_objective_grad(d_s: &Matrix, d_t: &Matrix, plan: &Matrix) -> Matrix {
    let (n, m) = plan.shape();
    let mut g = Matrix::zeros(m, m);
    for j in 0..m {
        for jp in 0..m {
            let dt = d_t.get(j, jp);
            let mut acc = 0.0;
            for i in 0..n {
                let pij = plan.get(i, j);
                if pij == 0.0 {
                    continue;
                }
                for ip in 0..n {
                    let diff = d_s.get(i, ip) - dt;
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    // d|s - t| / dt = -sign(s - t)
                    acc -= pij * plan.get(ip, jp) * sign;
                }
            }
            g.set(j, jp, acc);
        }
    }
    g
}

fn check_weights(w: &[f64], name: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Input(format!("{name} weights must be strictly positive")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} weights sum to {total}, not 1")));
    }
    Ok(())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Entropic optimal transport for `cost` at regularisation `epsilon`,
/// computed with log-domain scaling.
pub fn sinkhorn(
    cost: &Matrix,
    u: &[f64],
    v: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornOutput> {
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    if !cost.all_finite() {
        return Err(Error::Numeric("non-finite cost".into()));
    }
    let log_kernel = cost.scale(-1.0 / epsilon);
    sinkhorn_log_kernel(&log_kernel, u, v, max_iter, tol)
}

/// Scales `exp(log_kernel)` to the marginals `u`, `v`. Entries of
/// `log_kernel` may be `-inf`.
pub fn sinkhorn_log_kernel(
    log_kernel: &Matrix,
    u: &[f64],
    v: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornOutput> {
    let (n, m) = log_kernel.shape();
    if u.len() != n || v.len() != m {
        return shape_err(format!(
            "kernel {:?} with marginals of length {} and {}",
            log_kernel.shape(),
            u.len(),
            v.len()
        ));
    }
    check_weights(u, "row")?;
    check_weights(v, "column")?;
    let log_u: Vec<f64> = u.iter().map(|x| x.ln()).collect();
    let log_v: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_from = |f: &[f64], g: &[f64]| {
        let mut p = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                p.set(i, j, (log_kernel.get(i, j) + f[i] + g[j]).exp());
            }
        }
        p
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| log_kernel.get(i, j) + g[j]));
            f[i] = log_u[i] - lse;
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| log_kernel.get(i, j) + f[i]));
            g[j] = log_v[j] - lse;
        }
        // columns are exact after the g update; rows measure convergence
        let row_err = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| (log_kernel.get(i, j) + f[i] + g[j]).exp()).sum();
                (s - u[i]).abs()
            })
            .fold(0.0, f64::max);
        if !row_err.is_finite() {
            return Err(Error::Numeric("sinkhorn diverged".into()));
        }
        if row_err < tol {
            converged = true;
            break;
        }
    }
    Ok(SinkhornOutput {
        plan: TransportPlan {
            matrix: plan_from(&f, &g),
            row_marginal: u.to_vec(),
            col_marginal: v.to_vec(),
        },
        iterations,
        converged,
    })
}

/// Solves the matching between two distance matrices with uniform masses.
///
/// The first descent starts from the uniform coupling. With
/// `anchored_restarts`, one more descent runs per node pair `(i, j)`, started
/// from a greedy completion of the correspondence `i -> j`. The lowest
/// objective wins.
pub fn gromov_wasserstein_distances(
    d_s: &Matrix,
    d_t: &Matrix,
    settings: &GwSettings,
) -> Result<GwResult> {
    check_distances(d_s, "source")?;
    check_distances(d_t, "target")?;
    if !(settings.epsilon > 0.0) {
        return Err(Error::Input("epsilon must be positive".into()));
    }
    let (n, m) = (d_s.rows(), d_t.rows());
    if n == 0 || m == 0 {
        return Err(Error::Input("empty graph".into()));
    }
    let u = uniform_weights(n);
    let v = uniform_weights(m);
    let uniform = Matrix::filled(n, m, 1.0 / (n * m) as f64);
    let mut best = descend(d_s, d_t, settings, &u, &v, uniform)?;
    if !settings.anchored_restarts || n * m == 1 || best.value <= settings.tol {
        return Ok(best);
    }
    let mut inner_total = best.inner_iterations;
    let mut outer_total = best.outer_iterations;
    for i in 0..n {
        for j in 0..m {
            if best.value <= settings.tol {
                break;
            }
            let start = greedy_start(d_s, d_t, &u, &v, i, j);
            let run = descend(d_s, d_t, settings, &u, &v, start)?;
            inner_total += run.inner_iterations;
            outer_total += run.outer_iterations;
            if run.value < best.value - MONOTONE_SLACK {
                best = run;
            }
        }
    }
    best.inner_iterations = inner_total;
    best.outer_iterations = outer_total;
    Ok(best)
}

/// Feasible start that sends `i` to `j`, fills the remaining mass greedily
/// by the linearised cost of the partial plan, improves the result by
/// exchanges, and mixes in a little of the uniform coupling so every entry
/// stays positive.
fn greedy_start(d_s: &Matrix, d_t: &Matrix, u: &[f64], v: &[f64], i: usize, j: usize) -> Matrix {
    let (n, m) = (u.len(), v.len());
    let mut rows = u.to_vec();
    let mut cols = v.to_vec();
    let mut hard = Matrix::zeros(n, m);
    let mut next = Some((i, j));
    while let Some((a, b)) = next {
        let mass = rows[a].min(cols[b]);
        hard.set(a, b, hard.get(a, b) + mass);
        rows[a] -= mass;
        cols[b] -= mass;
        let cost = structural_cost_unchecked(d_s, d_t, &hard);
        next = None;
        let mut lowest = f64::INFINITY;
        for a in (0..n).filter(|&a| rows[a] > SPENT) {
            for b in (0..m).filter(|&b| cols[b] > SPENT) {
                if cost.get(a, b) < lowest {
                    lowest = cost.get(a, b);
                    next = Some((a, b));
                }
            }
        }
    }
    exchange_polish(d_s, d_t, &mut hard);
    let uniform = 1.0 / (n * m) as f64;
    hard.map(|x| (1.0 - ANCHOR_MIX) * x + ANCHOR_MIX * uniform)
}

/// First-improvement local search over 2x2 exchanges: mass on `(a, b)` and
/// `(c, d)` moves to `(a, d)` and `(c, b)` while that lowers the objective.
fn exchange_polish(d_s: &Matrix, d_t: &Matrix, plan: &mut Matrix) {
    let (n, m) = plan.shape();
    let mut value = gw_objective(d_s, d_t, plan);
    for _ in 0..n * m {
        let support: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .filter(|&(a, b)| plan.get(a, b) > SPENT)
            .collect();
        let mut improved = false;
        'search: for (k, &(a, b)) in support.iter().enumerate() {
            for &(c, d) in &support[k + 1..] {
                if a == c || b == d {
                    continue;
                }
                let mass = plan.get(a, b).min(plan.get(c, d));
                let mut next = plan.clone();
                next.set(a, b, next.get(a, b) - mass);
                next.set(c, d, next.get(c, d) - mass);
                next.set(a, d, next.get(a, d) + mass);
                next.set(c, b, next.get(c, b) + mass);
                let v = gw_objective(d_s, d_t, &next);
                if v < value - MONOTONE_SLACK {
                    *plan = next;
                    value = v;
                    improved = true;
                    break 'search;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

fn descend(
    d_s: &Matrix,
    d_t: &Matrix,
    settings: &GwSettings,
    u: &[f64],
    v: &[f64],
    start: Matrix,
) -> Result<GwResult> {
    let mut log_plan = start.map(f64::ln);
    let mut plan = TransportPlan {
        matrix: start,
        row_marginal: u.to_vec(),
        col_marginal: v.to_vec(),
    };
    let mut value = gw_objective(d_s, d_t, &plan.matrix);
    let mut inner_total = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut halted_on_increase = false;

    while outer < settings.outer_iter {
        outer += 1;
        let cost = structural_cost_unchecked(d_s, d_t, &plan.matrix);
        let log_kernel = log_plan.zip_map(&cost, |lp, c| lp - c / settings.epsilon)?;
        let step = sinkhorn_log_kernel(&log_kernel, u, v, settings.inner_iter, settings.tol)?;
        inner_total += step.iterations;

        let next_value = gw_objective(d_s, d_t, &step.plan.matrix);
        if next_value > value + MONOTONE_SLACK {
            halted_on_increase = true;
            break;
        }
        let change = step
            .plan
            .matrix
            .zip_map(&plan.matrix, |a, b| (a - b).abs())?
            .max_abs();
        log_plan = step.plan.matrix.map(f64::ln);
        // keep the log plan finite where the exponent underflowed
        for (lp, lk) in log_plan.data_mut().iter_mut().zip(log_kernel.data()) {
            if !lp.is_finite() {
                *lp = *lk;
            }
        }
        plan = step.plan;
        value = next_value;
        if change < settings.tol {
            converged = true;
            break;
        }
    }

    Ok(GwResult {
        value,
        plan,
        inner_iterations: inner_total,
        outer_iterations: outer,
        converged,
        halted_on_increase,
    })
}

/// Matches two label graphs; `Ok(None)` signals a degenerate graph, for which
/// matching is skipped.
pub fn gromov_wasserstein(
    gs: &LabelGraph,
    gt: &LabelGraph,
    settings: &GwSettings,
) -> Result<Option<GwResult>> {
    if gs.is_degenerate() || gt.is_degenerate() || gs.len() < 2 || gt.len() < 2 {
        return Ok(None);
    }
    gromov_wasserstein_distances(gs.distances(), gt.distances(), settings).map(Some)
}

/// Gradient of the fixed-plan objective with respect to the target graph's
/// node rows, through `d_t = pairwise l2(gt_nodes)`.
pub fn gw_loss_gradient(gs: &LabelGraph, gt_nodes: &Matrix, result: &GwResult) -> Result<Matrix> {
    let mut tape = Tape::new();
    let nodes = tape.leaf(gt_nodes.clone());
    let dist = tape.pairwise_l2(nodes);
    let loss = tape.gw_fixed_plan(dist, gs.distances(), &result.plan.matrix)?;
    Ok(tape.backward(loss).wrt(&tape, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::pairwise_distances;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_cost(d_s: &Matrix, d_t: &Matrix, plan: &Matrix) -> Matrix {
        let (n, m) = plan.shape();
        let mut c = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for ip in 0..n {
                    for jp in 0..m {
                        s += plan.get(ip, jp) * (d_s.get(i, ip) - d_t.get(j, jp)).abs();
                    }
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random_points(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform(n, 3, 1.0, &mut rng)
    }

    #[test]
    fn cost_matches_four_index_sum() {
        let d_s = pairwise_distances(&random_points(3, 1));
        let d_t = pairwise_distances(&random_points(3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Matrix::uniform(3, 3, 1.0, &mut rng).map(|x| x.abs() + 0.1);
        let plan = raw.scale(1.0 / raw.sum());
        let c = structural_cost(&d_s, &d_t, &plan).unwrap();
        let want = brute_cost(&d_s, &d_t, &plan);
        for (a, b) in c.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_structure_has_zero_diagonal_cost() {
        let d = pairwise_distances(&random_points(4, 4));
        let plan = Matrix::identity(4).scale(0.25);
        let c = structural_cost(&d, &d, &plan).unwrap();
        for i in 0..4 {
            assert!(c.get(i, i).abs() < 1e-15);
        }
        let one = Matrix::zeros(1, 1);
        assert_eq!(structural_cost(&one, &one, &Matrix::scalar(1.0)).unwrap(), Matrix::zeros(1, 1));
    }

    #[test]
    fn cost_rejects_non_finite() {
        let mut d = Matrix::zeros(2, 2);
        d.set(0, 1, f64::INFINITY);
        let plan = Matrix::filled(2, 2, 0.25);
        assert!(matches!(structural_cost(&d, &d, &plan), Err(Error::Numeric(_))));
    }

    #[test]
    fn sinkhorn_zero_cost_gives_product() {
        let u = vec![0.2, 0.8];
        let v = vec![0.5, 0.3, 0.2];
        let out = sinkhorn(&Matrix::zeros(2, 3), &u, &v, 0.05, 200, 1e-12).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((out.plan.matrix.get(i, j) - u[i] * v[j]).abs() < 1e-12);
            }
        }
        assert!(out.converged);
    }

    #[test]
    fn sinkhorn_small_epsilon_is_diagonal() {
        let cost = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let out = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.01, 200, 1e-9).unwrap();
        assert!(out.plan.matrix.get(0, 0) > 0.4999);
        assert!(out.plan.matrix.get(0, 1) < 1e-10);
        assert!(out.plan.marginal_error() < 1e-6);
    }

    #[test]
    fn sinkhorn_flags_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = Matrix::uniform(5, 5, 3.0, &mut rng);
        let out = sinkhorn(&cost, &uniform_weights(5), &uniform_weights(5), 0.01, 1, 1e-15).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn sinkhorn_rejects_bad_marginals() {
        let c = Matrix::zeros(2, 2);
        assert!(sinkhorn(&c, &[0.0, 1.0], &[0.5, 0.5], 0.1, 10, 1e-9).is_err());
        assert!(sinkhorn(&c, &[0.4, 0.4], &[0.5, 0.5], 0.1, 10, 1e-9).is_err());
        assert!(sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], 0.0, 10, 1e-9).is_err());
    }

    #[test]
    fn identical_graph_value_vanishes() {
        let d = pairwise_distances(&random_points(5, 6));
        let r = gromov_wasserstein_distances(&d, &d, &GwSettings::default()).unwrap();
        assert!(r.value <= 1e-6, "{}", r.value);
        assert!(r.plan.marginal_error() < 1e-6);
    }

    #[test]
    fn restarts_leave_the_uniform_saddle() {
        let d = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let plain = GwSettings {
            anchored_restarts: false,
            ..GwSettings::default()
        };
        let stuck = gromov_wasserstein_distances(&d, &d, &plain).unwrap();
        assert!((stuck.value - 0.5).abs() < 1e-12);
        let r = gromov_wasserstein_distances(&d, &d, &GwSettings::default()).unwrap();
        assert!(r.value < 1e-6, "{}", r.value);
        assert!(r.plan.marginal_error() < 1e-6);
    }

    #[test]
    fn three_node_value_within_permutation_oracle() {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for seed in 0..10 {
            let d_s = pairwise_distances(&random_points(3, 100 + seed));
            let d_t = pairwise_distances(&random_points(3, 200 + seed));
            let best = perms
                .iter()
                .map(|p| {
                    let mut plan = Matrix::zeros(3, 3);
                    for (i, &j) in p.iter().enumerate() {
                        plan.set(i, j, 1.0 / 3.0);
                    }
                    gw_objective(&d_s, &d_t, &plan)
                })
                .fold(f64::INFINITY, f64::min);
            let r = gromov_wasserstein_distances(&d_s, &d_t, &GwSettings::default()).unwrap();
            assert!(r.value <= best + 1e-3, "seed {seed}: {} vs {best}", r.value);
        }
    }

    #[test]
    fn degenerate_graph_is_skipped() {
        let rows = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let names = vec!["A".to_string(), "B".to_string()];
        let g = LabelGraph::build(names, &rows, 1.5).unwrap();
        assert!(gromov_wasserstein(&g, &g, &GwSettings::default()).unwrap().is_none());
    }

    #[test]
    fn gradient_is_zero_at_identity() {
        let rows = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let g = LabelGraph::build(names, &rows, 1.5).unwrap();
        let r = gromov_wasserstein(&g, &g, &GwSettings::default()).unwrap().unwrap();
        let grad = gw_loss_gradient(&g, g.nodes(), &r).unwrap();
        assert!(grad.max_abs() < 1e-6, "{grad:?}");
    }

    #[test]
    fn plan_csv_layout() {
        let plan = TransportPlan {
            matrix: Matrix::filled(1, 2, 0.5),
            row_marginal: vec![1.0],
            col_marginal: vec![0.5, 0.5],
        };
        let csv = plan.to_csv(&["A".into()], &["X".into(), "Y".into()]);
        assert_eq!(csv, "source\\target,X,Y\nA,0.500000,0.500000\n");
    }
}
