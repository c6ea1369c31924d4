//! Optimal transport between empirical measures.
//!
//! Exact couplings come from a shortest-augmenting-path assignment solver on
//! the N x N cost matrix. Entropic couplings come from log-domain Sinkhorn
//! iterations, which stay stable when epsilon is far below the cost scale.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{select_rows, PointCloud};

/// Default Sinkhorn iteration cap.
pub const DEFAULT_SINKHORN_ITERS: usize = 200;
/// Default marginal tolerance.
pub const DEFAULT_SINKHORN_TOL: f64 = 1e-6;
/// Default epsilon, relative to the mean of the cost matrix.
pub const DEFAULT_RELATIVE_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `perm[j]` is the target row matched to source row `j`.
    Permutation(Vec<usize>),
    /// N x M nonnegative plan with marginals 1/N and 1/M.
    Dense(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub coupling: Coupling,
    /// Transport cost of the plan, reported on the W_p scale: `(sum P C)^(1/p)`.
    pub cost: f64,
    /// False when Sinkhorn hit `max_iters` before reaching `tol`.
    pub converged: bool,
}

impl CouplingPlan {
    pub fn permutation(&self) -> Option<&[usize]> {
        match &self.coupling {
            Coupling::Permutation(p) => Some(p),
            Coupling::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<&Array2<f64>> {
        match &self.coupling {
            Coupling::Dense(p) => Some(p),
            Coupling::Permutation(_) => None,
        }
    }
}

fn check_exponent(p: u32) -> Result<()> {
    if p == 0 {
        return Err(Error::InvalidArgument("OT exponent must be >= 1".into()));
    }
    Ok(())
}

/// `C[j, k] = |x_j - y_k|^p`.
pub fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>, p: u32) -> Result<Array2<f64>> {
    check_exponent(p)?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix between d={} and d={}",
            x.ncols(),
            y.ncols()
        )));
    }
    let mut c = Array2::zeros((x.nrows(), y.nrows()));
    for (j, xr) in x.rows().into_iter().enumerate() {
        for (k, yr) in y.rows().into_iter().enumerate() {
            let sq: f64 = xr.iter().zip(yr.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            c[[j, k]] = match p {
                1 => sq.sqrt(),
                2 => sq,
                _ => sq.sqrt().powi(p as i32),
            };
        }
    }
    Ok(c)
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `assignment[row] = col`. Among equal reduced costs the lowest
/// column index is preferred, so degenerate inputs resolve deterministically.
pub fn solve_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::DimensionMismatch(format!(
            "assignment needs a square matrix, got {n}x{m}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based potentials; column 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == 0 {
                return Err(Error::NonFinite("assignment cost matrix".into()));
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Sum of `cost[j, perm[j]]` in row order.
pub fn assignment_cost(cost: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(j, &k)| cost[[j, k]]).sum()
}

/// Exact W_p coupling between equal-size clouds.
pub fn exact_coupling(x: &PointCloud, y: &PointCloud, p: u32) -> Result<CouplingPlan> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "exact coupling needs equal sizes, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let c = cost_matrix(x.points().view(), y.points().view(), p)?;
    let perm = solve_assignment(&c)?;
    let total = assignment_cost(&c, &perm);
    Ok(CouplingPlan {
        coupling: Coupling::Permutation(perm),
        cost: root(total / x.len() as f64, p),
        converged: true,
    })
}

fn root(v: f64, p: u32) -> f64 {
    match p {
        1 => v,
        2 => v.max(0.0).sqrt(),
        _ => v.max(0.0).powf(1.0 / p as f64),
    }
}

/// Output of [`sinkhorn`] on a raw cost matrix.
#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: Array2<f64>,
    /// `sum_jk P_jk C_jk`.
    pub transport_cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max deviation of row sums from 1/N at exit (columns are exact after the last update).
    pub marginal_error: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with uniform marginals.
pub fn sinkhorn(cost: &Array2<f64>, epsilon: f64, max_iters: usize, tol: f64) -> Result<SinkhornOutput> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn epsilon must be positive, got {epsilon}"
        )));
    }
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let a = 1.0 / n as f64;
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut marginal_error = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters.max(1) {
        iterations += 1;
        for i in 0..n {
            let row = cost.row(i);
            let lse = log_sum_exp((0..m).map(|j| (g[j] - row[j]) / epsilon));
            f[i] = epsilon * log_a - epsilon * lse;
        }
        for j in 0..m {
            let col = cost.column(j);
            let lse = log_sum_exp((0..n).map(|i| (f[i] - col[i]) / epsilon));
            g[j] = epsilon * log_b - epsilon * lse;
        }
        marginal_error = (0..n)
            .map(|i| {
                let s: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - cost[[i, j]]) / epsilon).exp())
                    .sum();
                (s - a).abs()
            })
            .fold(0.0, f64::max);
        if marginal_error < tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / epsilon).exp());
    let transport_cost = (&plan * cost).sum();
    Ok(SinkhornOutput {
        plan,
        transport_cost,
        converged,
        iterations,
        marginal_error,
    })
}

/// Entropic coupling on `C = |x - y|^p`.
pub fn sinkhorn_plan(
    x: &PointCloud,
    y: &PointCloud,
    p: u32,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<CouplingPlan> {
    let c = cost_matrix(x.points().view(), y.points().view(), p)?;
    let out = sinkhorn(&c, epsilon, max_iters, tol)?;
    Ok(CouplingPlan {
        coupling: Coupling::Dense(out.plan),
        cost: root(out.transport_cost, p),
        converged: out.converged,
    })
}

/// Empirical W_p. Equal sizes use the exact assignment; unequal sizes use
/// Sinkhorn at `epsilon = 0.05 * mean(C)`.
pub fn wasserstein_p(x: &PointCloud, y: &PointCloud, p: u32) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch(format!(
            "wasserstein between d={} and d={}",
            x.dim(),
            y.dim()
        )));
    }
    if x.len() == y.len() {
        return Ok(exact_coupling(x, y, p)?.cost);
    }
    let c = cost_matrix(x.points().view(), y.points().view(), p)?;
    let mean = c.mean().unwrap_or(0.0);
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let out = sinkhorn(&c, DEFAULT_RELATIVE_EPSILON * mean, 1000, DEFAULT_SINKHORN_TOL)?;
    Ok(root(out.transport_cost, p))
}

/// Reorders `y_batch` so row j is the exact-OT partner of `x_batch` row j.
pub fn minibatch_ot_pairs(
    x_batch: &Array2<f64>,
    y_batch: &Array2<f64>,
    p: u32,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x_batch.dim() != y_batch.dim() {
        return Err(Error::DimensionMismatch(format!(
            "minibatch OT needs equal shapes, got {:?} and {:?}",
            x_batch.dim(),
            y_batch.dim()
        )));
    }
    let c = cost_matrix(x_batch.view(), y_batch.view(), p)?;
    let perm = solve_assignment(&c)?;
    Ok((x_batch.clone(), select_rows(y_batch, &perm)?))
}
