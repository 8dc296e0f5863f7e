//! Entropic optimal transport between discrete point clouds.
//!
//! Costs are squared Euclidean distances. Iterations run on dual
//! potentials in the log domain, so small regularization never underflows.
//! The value reported is the dual objective `<f, a> + <g, b>` evaluated
//! right after a column update, where the column marginal is exact; its
//! derivative with respect to the cost matrix is the transport plan, which
//! gives point gradients without differentiating through the iterations.

mod exact;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, sq_dist, Matrix};

pub use exact::{exact_ot_oracle, EXACT_MAX_POINTS};

const WEIGHT_TOL: f64 = 1e-9;

/// A weighted set of points in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Matrix,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Uniform weights `1/n`.
    pub fn uniform(points: Matrix) -> Result<Self> {
        let n = points.rows();
        if n == 0 {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        Ok(Self {
            points,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn with_weights(points: Matrix, weights: Vec<f64>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        if weights.len() != points.rows() {
            return Err(Error::shape(format!(
                "{} weights for {} points",
                weights.len(),
                points.rows()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|v| (v - w).abs() <= WEIGHT_TOL)
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| cmp_slices(self.points.as_slice(), other.points.as_slice()))
            .then_with(|| cmp_slices(&self.weights, &other.weights))
    }
}

fn cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L-infinity marginal violation drops to this level.
    pub convergence_tol: f64,
    /// Subtract the self-transport terms: `OT(a,b) - (OT(a,a) + OT(b,b)) / 2`.
    pub debiased: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 200,
            convergence_tol: 1e-6,
            debiased: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::invalid("convergence_tol must be > 0"));
        }
        Ok(())
    }
}

/// Result of a Sinkhorn solve. Non-convergence is reported, not raised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOutput {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

impl SinkhornOutput {
    fn merge(self, other: SinkhornOutput, value: f64) -> SinkhornOutput {
        SinkhornOutput {
            value,
            converged: self.converged && other.converged,
            iterations: self.iterations.max(other.iterations),
            marginal_error: self.marginal_error.max(other.marginal_error),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornGradients {
    pub output: SinkhornOutput,
    /// Gradient with respect to `a.points` (zeros when not requested).
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// Which sides need point gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradSides {
    pub a: bool,
    pub b: bool,
}

impl GradSides {
    pub const BOTH: GradSides = GradSides { a: true, b: true };
    pub const B_ONLY: GradSides = GradSides { a: false, b: true };
    pub const NONE: GradSides = GradSides { a: false, b: false };
}

/// Entropic OT cost between `a` and `b`, debiased when configured.
pub fn sinkhorn_cost(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    Ok(sinkhorn_with_grads(a, b, cfg, GradSides::NONE)?.output)
}

/// Cost and gradients with respect to both clouds' coordinates.
pub fn sinkhorn_grad_points(
    a: &PointCloud,
    b: &PointCloud,
    cfg: &SinkhornConfig,
) -> Result<SinkhornGradients> {
    sinkhorn_with_grads(a, b, cfg, GradSides::BOTH)
}

pub fn sinkhorn_with_grads(
    a: &PointCloud,
    b: &PointCloud,
    cfg: &SinkhornConfig,
    sides: GradSides,
) -> Result<SinkhornGradients> {
    cfg.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("cloud dims {} vs {}", a.dim(), b.dim())));
    }
    // Solve in a canonical argument order so swapping the inputs replays the
    // same floating-point operations.
    if a.canonical_cmp(b) == Ordering::Greater {
        let swapped = GradSides { a: sides.b, b: sides.a };
        let mut r = solve(b, a, cfg, swapped);
        std::mem::swap(&mut r.grad_a, &mut r.grad_b);
        return finish(r);
    }
    finish(solve(a, b, cfg, sides))
}

fn finish(r: SinkhornGradients) -> Result<SinkhornGradients> {
    if !r.output.value.is_finite() {
        return Err(Error::NonFinite("sinkhorn value".into()));
    }
    if !r.output.converged {
        log::debug!(
            "sinkhorn stopped at max_iters={} with marginal error {:.3e}",
            r.output.iterations,
            r.output.marginal_error
        );
    }
    Ok(r)
}

fn solve(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig, sides: GradSides) -> SinkhornGradients {
    let cross = CrossProblem::new(a, b, cfg.epsilon);
    let (f, g, mut output) = cross.iterate(cfg);
    let mut grad_a = Matrix::zeros(a.len(), a.dim());
    let mut grad_b = Matrix::zeros(b.len(), b.dim());
    if sides.a || sides.b {
        cross.accumulate_grads(&f, &g, 1.0, sides, &mut grad_a, &mut grad_b);
    }
    if cfg.debiased {
        let self_a = SelfProblem::new(a, cfg.epsilon);
        let (fa, out_a) = self_a.iterate(cfg);
        let self_b = SelfProblem::new(b, cfg.epsilon);
        let (fb, out_b) = self_b.iterate(cfg);
        if sides.a {
            self_a.accumulate_grad(&fa, -0.5, &mut grad_a);
        }
        if sides.b {
            self_b.accumulate_grad(&fb, -0.5, &mut grad_b);
        }
        let value = output.value - 0.5 * (out_a.value + out_b.value);
        output = output.merge(out_a, value).merge(out_b, value);
    }
    SinkhornGradients {
        output,
        grad_a,
        grad_b,
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| v.ln()).collect()
}

fn cost_matrix(x: &Matrix, y: &Matrix) -> Vec<f64> {
    let mut c = Vec::with_capacity(x.rows() * y.rows());
    for xu in x.iter_rows() {
        for yv in y.iter_rows() {
            c.push(sq_dist(xu, yv));
        }
    }
    c
}

/// L-infinity row-marginal violation of the plan built from potentials
/// `(f, g)`, where `f_next` is the f-update implied by `g`:
/// row mass is `a_u * exp((f_u - f_next_u) / eps)`.
fn row_violation(weights: &[f64], f: &[f64], f_next: &[f64], eps: f64) -> f64 {
    weights
        .iter()
        .zip(f.iter().zip(f_next))
        .map(|(w, (fu, fnu))| (w * (((fu - fnu) / eps).exp() - 1.0)).abs())
        .fold(0.0, f64::max)
}

struct CrossProblem<'a> {
    a: &'a PointCloud,
    b: &'a PointCloud,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    cost: Vec<f64>,
    eps: f64,
}

impl<'a> CrossProblem<'a> {
    fn new(a: &'a PointCloud, b: &'a PointCloud, eps: f64) -> Self {
        Self {
            a,
            b,
            log_a: log_weights(a.weights()),
            log_b: log_weights(b.weights()),
            cost: cost_matrix(a.points(), b.points()),
            eps,
        }
    }

    fn c(&self, u: usize, v: usize) -> f64 {
        self.cost[u * self.b.len() + v]
    }

    fn update_f(&self, g: &[f64]) -> Vec<f64> {
        (0..self.a.len())
            .map(|u| {
                let terms = (0..self.b.len()).map(|v| self.log_b[v] + (g[v] - self.c(u, v)) / self.eps);
                -self.eps * log_sum_exp(terms)
            })
            .collect()
    }

    fn update_g(&self, f: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|v| {
                let terms = (0..self.a.len()).map(|u| self.log_a[u] + (f[u] - self.c(u, v)) / self.eps);
                -self.eps * log_sum_exp(terms)
            })
            .collect()
    }

    fn iterate(&self, cfg: &SinkhornConfig) -> (Vec<f64>, Vec<f64>, SinkhornOutput) {
        let mut f = self.update_f(&vec![0.0; self.b.len()]);
        let mut g = self.update_g(&f);
        let mut iterations = 1;
        let err = loop {
            let f_next = self.update_f(&g);
            let err = row_violation(self.a.weights(), &f, &f_next, self.eps);
            if err <= cfg.convergence_tol || iterations >= cfg.max_iters {
                break err;
            }
            f = f_next;
            g = self.update_g(&f);
            iterations += 1;
        };
        let value = crate::numeric::dot(&f, self.a.weights()) + crate::numeric::dot(&g, self.b.weights());
        let out = SinkhornOutput {
            value,
            converged: err <= cfg.convergence_tol,
            iterations,
            marginal_error: err,
        };
        (f, g, out)
    }

    fn accumulate_grads(
        &self,
        f: &[f64],
        g: &[f64],
        scale: f64,
        sides: GradSides,
        grad_a: &mut Matrix,
        grad_b: &mut Matrix,
    ) {
        let x = self.a.points();
        let y = self.b.points();
        for u in 0..self.a.len() {
            for v in 0..self.b.len() {
                let plan = (self.log_a[u] + self.log_b[v] + (f[u] + g[v] - self.c(u, v)) / self.eps).exp();
                if plan == 0.0 {
                    continue;
                }
                let w = 2.0 * scale * plan;
                if sides.a {
                    let row = grad_a.row_mut(u);
                    axpy(w, x.row(u), row);
                    axpy(-w, y.row(v), row);
                }
                if sides.b {
                    let row = grad_b.row_mut(v);
                    axpy(w, y.row(v), row);
                    axpy(-w, x.row(u), row);
                }
            }
        }
    }
}

/// `OT(a, a)` with a single symmetric potential, updated by averaging
/// `f <- (f + T(f)) / 2`.
struct SelfProblem<'a> {
    a: &'a PointCloud,
    log_a: Vec<f64>,
    cost: Vec<f64>,
    eps: f64,
}

impl<'a> SelfProblem<'a> {
    fn new(a: &'a PointCloud, eps: f64) -> Self {
        Self {
            a,
            log_a: log_weights(a.weights()),
            cost: cost_matrix(a.points(), a.points()),
            eps,
        }
    }

    fn update(&self, f: &[f64]) -> Vec<f64> {
        let n = self.a.len();
        (0..n)
            .map(|u| {
                let terms = (0..n).map(|v| self.log_a[v] + (f[v] - self.cost[u * n + v]) / self.eps);
                -self.eps * log_sum_exp(terms)
            })
            .collect()
    }

    fn iterate(&self, cfg: &SinkhornConfig) -> (Vec<f64>, SinkhornOutput) {
        let mut f = vec![0.0; self.a.len()];
        let mut iterations = 0;
        let err = loop {
            let f_next = self.update(&f);
            let err = row_violation(self.a.weights(), &f, &f_next, self.eps);
            iterations += 1;
            if err <= cfg.convergence_tol || iterations >= cfg.max_iters {
                break err;
            }
            for (fi, ni) in f.iter_mut().zip(&f_next) {
                *fi = 0.5 * (*fi + ni);
            }
        };
        let value = 2.0 * crate::numeric::dot(&f, self.a.weights());
        let out = SinkhornOutput {
            value,
            converged: err <= cfg.convergence_tol,
            iterations,
            marginal_error: err,
        };
        (f, out)
    }

    /// `d OT(a,a) / d x_u = 4 sum_v plan_uv (x_u - x_v)`, scaled.
    fn accumulate_grad(&self, f: &[f64], scale: f64, grad: &mut Matrix) {
        let n = self.a.len();
        let x = self.a.points();
        for u in 0..n {
            for v in 0..n {
                if u == v {
                    continue;
                }
                let plan = (self.log_a[u] + self.log_a[v] + (f[u] + f[v] - self.cost[u * n + v]) / self.eps).exp();
                if plan == 0.0 {
                    continue;
                }
                let w = 4.0 * scale * plan;
                let row = grad.row_mut(u);
                axpy(w, x.row(u), row);
                axpy(-w, x.row(v), row);
            }
        }
    }
}

#[cfg(test)]
mod tests;
