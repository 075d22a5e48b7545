//! Weak-constraint variational assimilation.
//!
//! Given noisy observations `y_i` of a trajectory, find the trajectory `z`
//! minimizing
//!
//! ```text
//!   (1/q^2) sum_{i<N} |f(z_i) - z_{i+1}|^2 + (1/r^2) sum_{i<=N} |h(z_i) - y_i|^2
//! ```
//!
//! over all stacked states `(z_1, ..., z_N)`. With `q << r` the dynamics term
//! acts as a stiff penalty and the minimizer is an exact trajectory to within
//! round-off relative to the observation error. The minimization is a
//! Gauss-Newton iteration with a truncated pseudo-inverse solve and a
//! Levenberg fallback when a step would increase the cost.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{simulate_from, DynSystem, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{BlockQr, BlockRows};
use crate::observe::{ObsScheme, Observations};
use crate::rng::{self, Purpose};

/// Largest stacked dimension for which a dense SVD is attempted.
pub const DENSE_LIMIT: usize = 5000;

/// Reliability boundary for `cond_C / sigma`: about `1 / eps_mach`.
pub const RELIABILITY_LIMIT: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Block-banded QR, falling back to dense SVD on numerical rank loss.
    #[default]
    Auto,
    /// Block-banded QR only.
    Banded,
    /// Dense SVD of the stacked Jacobian.
    DenseSvd,
    /// Pseudo-inverse of the explicitly formed `J^T J`. Each solve works at
    /// condition number `cond_C` rather than its square root; repeated
    /// Gauss-Newton steps still refine the iterate.
    NormalEquations,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GnOptions {
    /// Dynamics tolerance weight.
    pub q: f64,
    /// Observation tolerance weight.
    pub r: f64,
    pub max_iter: usize,
    /// Convergence threshold on `|dz|_inf / max(1, |z|_inf)`.
    pub step_tol: f64,
    /// The iteration also stops, as stalled, once the relative cost decrease
    /// of `STALL_WINDOW` consecutive accepted steps stays below this. Zero
    /// disables the test.
    pub cost_rtol: f64,
    /// Singular values below `svd_rtol * sigma_max` are dropped from the
    /// pseudo-inverse.
    pub svd_rtol: f64,
    /// Initial Levenberg damping; zero is pure Gauss-Newton.
    pub damping: f64,
    /// Whether the observation sum includes the final time index.
    pub obs_sum_includes_last: bool,
    pub solver: LinearSolver,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            q: 1e-6,
            r: 1.0,
            max_iter: 100,
            step_tol: 1e-10,
            cost_rtol: 1e-4,
            svd_rtol: 1e-12,
            damping: 0.0,
            obs_sum_includes_last: true,
            solver: LinearSolver::Auto,
        }
    }
}

impl GnOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        if !(self.q > 0.0) || !self.q.is_finite() {
            return bad("q", "must be positive");
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return bad("r", "must be positive");
        }
        if self.q > self.r {
            return bad("q", "must not exceed r");
        }
        if self.max_iter == 0 {
            return bad("max_iter", "must be at least 1");
        }
        if !(self.step_tol > 0.0) {
            return bad("step_tol", "must be positive");
        }
        if !(self.cost_rtol >= 0.0) || self.cost_rtol >= 1.0 {
            return bad("cost_rtol", "must be in [0, 1)");
        }
        if !(self.svd_rtol >= 0.0) || self.svd_rtol >= 1.0 {
            return bad("svd_rtol", "must be in [0, 1)");
        }
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return bad("damping", "must be non-negative");
        }
        Ok(())
    }

    fn observes_step(&self, i: usize, n: usize) -> bool {
        self.obs_sum_includes_last || i + 1 < n
    }
}

fn check_problem(sys: &dyn DynSystem, scheme: &ObsScheme, z: &Trajectory, y: Option<&Observations>) -> Result<()> {
    if z.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "trajectory dimension",
            expected: sys.dim(),
            got: z.dim(),
        });
    }
    if scheme.state_dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation scheme dimension",
            expected: sys.dim(),
            got: scheme.state_dim(),
        });
    }
    if z.len() < 2 {
        return Err(Error::InvalidArgument("trajectory length must be at least 2".into()));
    }
    if let Some(y) = y {
        if y.obs_dim != scheme.obs_dim() {
            return Err(Error::DimensionMismatch {
                context: "observation width",
                expected: scheme.obs_dim(),
                got: y.obs_dim,
            });
        }
        if y.len() != z.len() {
            return Err(Error::DimensionMismatch {
                context: "observation length",
                expected: z.len(),
                got: y.len(),
            });
        }
    }
    Ok(())
}

/// Stacked residual `[(f(z_i) - z_{i+1}) / q ; (h(z_i) - y_i) / r]`, dynamics
/// rows first. Its squared norm is the assimilation cost.
pub fn residual(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    z: &Trajectory,
    y: &Observations,
    opts: &GnOptions,
) -> Result<Vec<f64>> {
    check_problem(sys, scheme, z, Some(y))?;
    Ok(residual_unchecked(sys, scheme, z, y, opts))
}

fn residual_unchecked(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    z: &Trajectory,
    y: &Observations,
    opts: &GnOptions,
) -> Vec<f64> {
    let (n, d, m) = (z.len(), z.dim(), scheme.obs_dim());
    let mut out = Vec::with_capacity((n - 1) * d + n * m);
    for i in 0..n - 1 {
        let next = sys.step(z.state(i), z.t0() + i);
        out.extend(next.iter().zip(z.state(i + 1)).map(|(f, z1)| (f - z1) / opts.q));
    }
    for i in (0..n).filter(|&i| opts.observes_step(i, n)) {
        let zi = z.state(i);
        out.extend(
            scheme
                .indices()
                .iter()
                .zip(y.row(i))
                .map(|(&k, yv)| (zi[k] - yv) / opts.r),
        );
    }
    out
}

pub fn cost(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    z: &Trajectory,
    y: &Observations,
    opts: &GnOptions,
) -> Result<f64> {
    Ok(residual(sys, scheme, z, y, opts)?.iter().map(|v| v * v).sum())
}

/// Jacobian of [`residual`] with respect to `(z_1, ..., z_N)`, stored by
/// blocks: one unscaled `Df(z_i)` per step plus the selection pattern.
#[derive(Debug, Clone)]
pub struct ResidualJacobian {
    n: usize,
    d: usize,
    q: f64,
    r: f64,
    obs_indices: Vec<usize>,
    obs_last: bool,
    dyn_blocks: Vec<DMatrix<f64>>,
}

pub fn residual_jacobian(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    z: &Trajectory,
    opts: &GnOptions,
) -> Result<ResidualJacobian> {
    check_problem(sys, scheme, z, None)?;
    let n = z.len();
    let dyn_blocks = (0..n - 1)
        .map(|i| sys.jacobian(z.state(i), z.t0() + i))
        .collect();
    Ok(ResidualJacobian {
        n,
        d: z.dim(),
        q: opts.q,
        r: opts.r,
        obs_indices: scheme.indices().to_vec(),
        obs_last: opts.obs_sum_includes_last,
        dyn_blocks,
    })
}

impl ResidualJacobian {
    fn observed_steps(&self) -> usize {
        if self.obs_last {
            self.n
        } else {
            self.n - 1
        }
    }

    pub fn nrows(&self) -> usize {
        (self.n - 1) * self.d + self.observed_steps() * self.obs_indices.len()
    }

    pub fn ncols(&self) -> usize {
        self.n * self.d
    }

    /// Structural nonzero count.
    pub fn nnz(&self) -> usize {
        let dyn_nnz: usize = self
            .dyn_blocks
            .iter()
            .map(|b| b.iter().filter(|v| **v != 0.0).count() + self.d)
            .sum();
        dyn_nnz + self.observed_steps() * self.obs_indices.len()
    }

    /// Squared Frobenius norm, an upper bound on `sigma_max^2`.
    fn frobenius_sq(&self) -> f64 {
        let dyn_sq: f64 = self
            .dyn_blocks
            .iter()
            .map(|b| b.norm_squared() + self.d as f64)
            .sum();
        dyn_sq / (self.q * self.q) + (self.observed_steps() * self.obs_indices.len()) as f64 / (self.r * self.r)
    }

    /// `Df(z_i)` for step `i`.
    pub fn dynamics_block(&self, i: usize) -> &DMatrix<f64> {
        &self.dyn_blocks[i]
    }

    /// Dense copy, rows in the same order as [`residual`].
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, d) = (self.n, self.d);
        let mut a = DMatrix::zeros(self.nrows(), self.ncols());
        for i in 0..n - 1 {
            let mut blk = a.view_mut((i * d, i * d), (d, d));
            blk.copy_from(&(&self.dyn_blocks[i] / self.q));
            for k in 0..d {
                a[(i * d + k, (i + 1) * d + k)] = -1.0 / self.q;
            }
        }
        let base = (n - 1) * d;
        let m = self.obs_indices.len();
        for i in 0..self.observed_steps() {
            for (c, &k) in self.obs_indices.iter().enumerate() {
                a[(base + i * m + c, i * d + k)] = 1.0 / self.r;
            }
        }
        a
    }

    /// Rows touching block `i`, with right-hand side `-residual`, plus
    /// `sqrt(lambda) I` damping rows.
    fn block_rows(&self, i: usize, res: &[f64], lambda: f64) -> BlockRows {
        let (n, d) = (self.n, self.d);
        let m = self.obs_indices.len();
        let observed = i < self.observed_steps();
        let n_obs = if observed { m } else { 0 };
        let n_damp = if lambda > 0.0 { d } else { 0 };
        let mut local = DMatrix::zeros(n_obs + n_damp, d);
        let mut local_rhs = Vec::with_capacity(n_obs + n_damp);
        let obs_base = (n - 1) * d + i * m;
        for (c, &k) in self.obs_indices.iter().enumerate().take(n_obs) {
            local[(c, k)] = 1.0 / self.r;
            local_rhs.push(-res[obs_base + c]);
        }
        let s = lambda.sqrt();
        for k in 0..n_damp {
            local[(n_obs + k, k)] = s;
            local_rhs.push(0.0);
        }
        if i + 1 < n {
            BlockRows {
                local,
                local_rhs,
                left: Some(&self.dyn_blocks[i] / self.q),
                right: Some(DMatrix::identity(d, d) * (-1.0 / self.q)),
                coupled_rhs: res[i * d..(i + 1) * d].iter().map(|v| -v).collect(),
            }
        } else {
            BlockRows {
                local,
                local_rhs,
                left: None,
                right: None,
                coupled_rhs: Vec::new(),
            }
        }
    }

    /// Ridge weight of the dynamics-only correction problem.
    fn feasibility_ridge(&self) -> f64 {
        1e-3 / self.r
    }

    /// Triangular factor of the correction problem `[ridge I ; C]`, where `C`
    /// holds the dynamics rows. It depends only on the linearization point,
    /// so one factor serves every correction of an iteration.
    fn feasibility_factor(&self) -> Option<BlockQr> {
        let d = self.d;
        let ridge = self.feasibility_ridge();
        let rows = |i: usize| BlockRows {
            local: DMatrix::identity(d, d) * ridge,
            local_rhs: vec![0.0; d],
            left: (i + 1 < self.n).then(|| &self.dyn_blocks[i] / self.q),
            right: (i + 1 < self.n).then(|| DMatrix::identity(d, d) * (-1.0 / self.q)),
            coupled_rhs: vec![0.0; if i + 1 < self.n { d } else { 0 }],
        };
        BlockQr::factor(self.n, d, f64::EPSILON * 1e-4, rows).ok()
    }

    /// `C x`: first-order dynamics defect produced by the update `x`.
    fn dyn_mul(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = Vec::with_capacity((self.n - 1) * d);
        for (i, blk) in self.dyn_blocks.iter().enumerate() {
            let v = blk * DVector::from_column_slice(&x[i * d..(i + 1) * d]);
            out.extend(v.iter().zip(&x[(i + 1) * d..(i + 2) * d]).map(|(a, b)| (a - b) / self.q));
        }
        out
    }

    /// `C^T v`.
    fn dyn_tr_mul(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; self.n * d];
        for (i, blk) in self.dyn_blocks.iter().enumerate() {
            let vi = DVector::from_column_slice(&v[i * d..(i + 1) * d]);
            let t = blk.tr_mul(&vi);
            for k in 0..d {
                out[i * d + k] += t[k] / self.q;
                out[(i + 1) * d + k] -= vi[k] / self.q;
            }
        }
        out
    }

    /// Smallest correction, up to the ridge, that cancels the dynamics defect
    /// `res_dyn` to first order; observation rows are left out. Solved by
    /// seminormal equations on `factor` with one refinement step.
    fn feasibility_step(&self, factor: &BlockQr, res_dyn: &[f64]) -> Vec<f64> {
        let ridge = self.feasibility_ridge();
        let normal_solve = |g: Vec<f64>| factor.solve(&factor.solve_transpose(&g));
        // Right-hand side is [0 ; -res_dyn].
        let neg: Vec<f64> = res_dyn.iter().map(|v| -v).collect();
        let mut x = normal_solve(self.dyn_tr_mul(&neg));
        let cx = self.dyn_mul(&x);
        let r_dyn: Vec<f64> = neg.iter().zip(&cx).map(|(b, a)| b - a).collect();
        let mut g = self.dyn_tr_mul(&r_dyn);
        g.iter_mut().zip(&x).for_each(|(gi, xi)| *gi -= ridge * ridge * xi);
        let dx = normal_solve(g);
        x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        x
    }

    /// Block QR of the (damped) problem; `None` when a triangular diagonal
    /// entry is negligible, where back substitution would overflow.
    fn banded(&self, res: &[f64], lambda: f64) -> Option<BlockQr> {
        BlockQr::factor(self.n, self.d, f64::EPSILON * 1e-4, |i| self.block_rows(i, res, lambda)).ok()
    }

    fn dense_augmented(&self, lambda: f64) -> DMatrix<f64> {
        let a = self.to_dense();
        if lambda <= 0.0 {
            return a;
        }
        let cols = a.ncols();
        let mut aug = DMatrix::zeros(a.nrows() + cols, cols);
        aug.view_mut((0, 0), (a.nrows(), cols)).copy_from(&a);
        for k in 0..cols {
            aug[(a.nrows() + k, k)] = lambda.sqrt();
        }
        aug
    }

    /// Minimizes `|J dz + res|^2 + lambda |dz|^2` with the configured solver.
    pub(crate) fn solve_step(&self, res: &[f64], lambda: f64, opts: &GnOptions) -> Result<Vec<f64>> {
        if opts.solver == LinearSolver::NormalEquations {
            if self.ncols() > DENSE_LIMIT {
                return Err(Error::InvalidArgument(format!(
                    "normal equations are dense; {} unknowns exceed {DENSE_LIMIT}",
                    self.ncols()
                )));
            }
            return Ok(self.normal_step(res, lambda, opts.svd_rtol));
        }
        if !matches!(opts.solver, LinearSolver::DenseSvd) {
            if let Some(f) = self.banded(res, lambda) {
                // Damping keeps every singular value at or above sqrt(lambda),
                // so no direction can fall below the cut.
                let top_sq = self.frobenius_sq() + lambda;
                if lambda > 0.0 && lambda >= opts.svd_rtol * opts.svd_rtol * top_sq {
                    return Ok(f.solution());
                }
                return Ok(f.truncated_solution(opts.svd_rtol).0);
            }
            if opts.solver == LinearSolver::Banded || self.ncols() > DENSE_LIMIT {
                return Err(Error::Divergence {
                    iteration: 0,
                    reason: "stacked Jacobian is numerically rank deficient".into(),
                });
            }
        }
        Ok(self.dense_step(res, lambda, opts.svd_rtol))
    }

    fn dense_step(&self, res: &[f64], lambda: f64, rtol: f64) -> Vec<f64> {
        let a = self.dense_augmented(lambda);
        let mut rhs = DVector::zeros(a.nrows());
        for (k, v) in res.iter().enumerate() {
            rhs[k] = -v;
        }
        let svd = a.svd(true, true);
        let cutoff = rtol * svd.singular_values.max();
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let mut coeffs = u.tr_mul(&rhs);
        for (c, s) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
            *c = if *s > cutoff && *s > 0.0 { *c / s } else { 0.0 };
        }
        (vt.tr_mul(&coeffs)).as_slice().to_vec()
    }

    /// `(J^T J + lambda I)^+ (-J^T res)`, with eigenvalues below
    /// `rtol^2 * max` dropped so the cut matches `rtol` on singular values of `J`.
    fn normal_step(&self, res: &[f64], lambda: f64, rtol: f64) -> Vec<f64> {
        let j = self.to_dense();
        let mut gram = j.tr_mul(&j);
        for k in 0..gram.ncols() {
            gram[(k, k)] += lambda;
        }
        let grad = -j.tr_mul(&DVector::from_column_slice(res));
        let eig = gram.symmetric_eigen();
        let cutoff = rtol * rtol * eig.eigenvalues.amax();
        let mut coeffs = eig.eigenvectors.tr_mul(&grad);
        for (c, &l) in coeffs.iter_mut().zip(eig.eigenvalues.iter()) {
            *c = if l > cutoff && l > 0.0 { *c / l } else { 0.0 };
        }
        (&eig.eigenvectors * coeffs).as_slice().to_vec()
    }

    /// `(sigma_max / sigma_min)^2` of the Jacobian, the 2-norm condition number
    /// of `J^T J`. Infinite when `J` is rank deficient.
    pub fn normal_condition(&self, solver: LinearSolver) -> f64 {
        if matches!(solver, LinearSolver::Auto | LinearSolver::Banded) {
            let zeros = vec![0.0; self.nrows()];
            if let Some(f) = self.banded(&zeros, 0.0) {
                let (lo, hi) = f.singular_range();
                return (hi / lo).powi(2).max(1.0);
            }
            if self.ncols() > DENSE_LIMIT {
                return f64::INFINITY;
            }
        }
        let sv = self.to_dense().svd(false, false).singular_values;
        let (lo, hi) = (sv.min(), sv.max());
        if lo > 0.0 {
            (hi / lo).powi(2).max(1.0)
        } else {
            f64::INFINITY
        }
    }
}

/// Why the Gauss-Newton iteration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The update fell below `step_tol`.
    Step,
    /// The cost stopped decreasing by more than `cost_rtol` per step; the
    /// remaining freedom lies along directions the observations barely
    /// constrain.
    Stalled,
    MaxIter,
    /// No damping level produced a decrease.
    NoProgress,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Step => "step",
            Self::Stalled => "stalled",
            Self::MaxIter => "max_iter",
            Self::NoProgress => "no_progress",
        }
    }
}

/// Outcome of one assimilation run.
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub z: Trajectory,
    pub iterations: usize,
    pub final_cost: f64,
    /// Condition number of `J^T J` at the final iterate.
    pub cond_c: f64,
    /// `cond_c / sigma <= 1e16`.
    pub reliable: bool,
    /// Stopped by the step or stall test rather than by `max_iter` or
    /// exhausted damping.
    pub converged: bool,
    pub stop: StopReason,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl ReconResult {
    pub fn write_trajectory_csv<W: Write>(&self, labels: &[crate::dynamics::VarLabel], out: W) -> Result<()> {
        write_trajectory_csv(&self.z, labels, out)
    }
}

/// Writes a trajectory as `t` plus one column per coordinate label.
pub fn write_trajectory_csv<W: Write>(
    traj: &Trajectory,
    labels: &[crate::dynamics::VarLabel],
    out: W,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(labels.iter().map(ToString::to_string));
    w.write_record(&header)?;
    for i in 0..traj.len() {
        let mut rec = vec![(traj.t0() + i).to_string()];
        rec.extend(traj.state(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

const MAX_DAMPING_RETRIES: usize = 40;
const MAX_CORRECTIONS: usize = 3;
const STALL_WINDOW: usize = 3;

/// Damped Gauss-Newton minimization of the weak-constraint cost from `init`.
///
/// Each iteration solves `min |J dz + R|` through a truncated pseudo-inverse.
/// A step that raises the cost is retried with Levenberg damping, starting at
/// `1e-3 / r^2` and multiplied by ten per retry. Damping that succeeded on a
/// retry carries over to the next iteration; damping that succeeded at once
/// is divided by ten, returning to `opts.damping` once negligible.
/// Trial points whose dynamics defect outweighs their observation misfit
/// are first pulled back toward an exact trajectory by minimum-norm
/// corrections on the dynamics rows alone: with `q << r`, the curvature of
/// the set of exact trajectories otherwise makes almost every long step
/// look like a cost increase.
///
/// Reaching `max_iter` is not an error: the result comes back with
/// `converged = false`.
pub fn gauss_newton(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    y: &Observations,
    init: &Trajectory,
    opts: &GnOptions,
) -> Result<ReconResult> {
    opts.validate()?;
    check_problem(sys, scheme, init, Some(y))?;

    let mut z = init.clone();
    let mut res = residual_unchecked(sys, scheme, &z, y, opts);
    let mut cost = sum_sq(&res);
    if !cost.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "initial cost is not finite".into(),
        });
    }
    let mut history = vec![cost];
    let mut stop = StopReason::MaxIter;
    let mut stalled_steps = 0;
    let mut iterations = 0;

    let base_damping = 1e-3 / (opts.r * opts.r);
    let mut next_lambda = opts.damping;
    'outer: while iterations < opts.max_iter {
        iterations += 1;
        let jac = residual_jacobian(sys, scheme, &z, opts)?;
        let mut feasibility = None;
        let mut lambda = next_lambda;
        for retry in 0..MAX_DAMPING_RETRIES {
            let step = jac.solve_step(&res, lambda, opts).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence {
                    iteration: iterations,
                    reason,
                },
                other => other,
            })?;
            let small = inf_norm(&step) <= opts.step_tol * inf_norm(z.as_slice()).max(1.0);

            let mut trial = z.clone();
            trial
                .as_mut_slice()
                .iter_mut()
                .zip(&step)
                .for_each(|(zi, s)| *zi += s);
            let mut trial_res = residual_unchecked(sys, scheme, &trial, y, opts);
            let mut trial_cost = sum_sq(&trial_res);

            // A tangential step along the curved set of exact trajectories
            // leaves a second-order dynamics defect that the stiff 1/q weight
            // blows up. Correction steps with the same Jacobian remove it.
            let mut corrections = 0;
            let n_dyn = (z.len() - 1) * z.dim();
            while trial_cost.is_finite()
                && corrections < MAX_CORRECTIONS
                && sum_sq(&trial_res[..n_dyn]) > sum_sq(&trial_res[n_dyn..])
            {
                corrections += 1;
                let Some(factor) = feasibility.get_or_insert_with(|| jac.feasibility_factor()) else {
                    break;
                };
                let fix = jac.feasibility_step(factor, &trial_res[..n_dyn]);
                let mut next = trial.clone();
                next.as_mut_slice().iter_mut().zip(&fix).for_each(|(zi, s)| *zi += s);
                let next_res = residual_unchecked(sys, scheme, &next, y, opts);
                let next_cost = sum_sq(&next_res);
                if !(next_cost < trial_cost) {
                    break;
                }
                trial = next;
                trial_res = next_res;
                trial_cost = next_cost;
            }

            if trial_cost.is_finite() && trial_cost <= cost {
                let decrease = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                z = trial;
                res = trial_res;
                cost = trial_cost;
                history.push(cost);
                if small {
                    stop = StopReason::Step;
                    break 'outer;
                }
                stalled_steps = if decrease < opts.cost_rtol { stalled_steps + 1 } else { 0 };
                if stalled_steps >= STALL_WINDOW {
                    stop = StopReason::Stalled;
                    break 'outer;
                }
                // Relax only after a step accepted at first try; otherwise the
                // next iteration would repeat the rejection just seen.
                next_lambda = if retry > 0 {
                    lambda
                } else if lambda / 10.0 < base_damping * 1e-6 {
                    opts.damping
                } else {
                    lambda / 10.0
                };
                continue 'outer;
            }
            if small {
                // A round-off sized step that cannot lower the cost further.
                stop = StopReason::Step;
                break 'outer;
            }
            lambda = if lambda > 0.0 {
                lambda * 10.0
            } else {
                base_damping
            };
        }
        stop = StopReason::NoProgress;
        break;
    }

    let jac = residual_jacobian(sys, scheme, &z, opts)?;
    let cond_c = jac.normal_condition(opts.solver);
    let reliable = cond_c / y.sigma <= RELIABILITY_LIMIT;
    Ok(ReconResult {
        z,
        iterations,
        final_cost: cost,
        cond_c,
        reliable,
        converged: matches!(stop, StopReason::Step | StopReason::Stalled),
        stop,
        cost_history: history,
    })
}

/// Where the free run behind an initial guess starts.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStart {
    /// Seeded random state pushed through `burn_in` steps of the dynamics.
    Random { seed: u64, burn_in: usize },
    /// A given state at the first observation time.
    State(Vec<f64>),
}

/// Free run of `sys` over the observation window with the observed
/// coordinates overwritten by `y`.
pub fn initial_guess(
    sys: &dyn DynSystem,
    scheme: &ObsScheme,
    y: &Observations,
    start: &InitStart,
) -> Result<Trajectory> {
    let x0 = match start {
        InitStart::Random { seed, burn_in } => {
            let mut rng = rng::stream(*seed, Purpose::Init, 0);
            let mut x = sys.random_state(&mut rng);
            for s in 0..*burn_in {
                x = sys.step(&x, s);
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { step: s + 1 });
                }
            }
            x
        }
        InitStart::State(x) => x.clone(),
    };
    let mut guess = simulate_from(sys, &x0, y.t0, y.len(), 0)?;
    for i in 0..guess.len() {
        let row = y.row(i);
        let state = guess.state_mut(i);
        for (&k, v) in scheme.indices().iter().zip(row) {
            state[k] = *v;
        }
    }
    Ok(guess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{linear_map, simulate};
    use crate::observe::observe;

    fn scalar(a: f64) -> crate::dynamics::LinearMap {
        linear_map(DMatrix::from_element(1, 1, a)).unwrap()
    }

    fn obs_from(values: Vec<f64>, sigma: f64) -> Observations {
        Observations {
            t0: 0,
            obs_dim: 1,
            values,
            sigma,
            seed: 0,
        }
    }

    #[test]
    fn residual_by_substitution() {
        let sys = scalar(2.0);
        let scheme = ObsScheme::full(&sys);
        let z = Trajectory::new(0, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let y = obs_from(vec![1.1, 2.0, 4.0], 0.1);
        let opts = GnOptions {
            q: 1.0,
            r: 1.0,
            ..GnOptions::default()
        };
        let r = residual(&sys, &scheme, &z, &y, &opts).unwrap();
        let expected = [0.0, 0.0, -0.1, 0.0, 0.0];
        assert_eq!(r.len(), 5);
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let no_last = GnOptions {
            obs_sum_includes_last: false,
            ..opts
        };
        assert_eq!(residual(&sys, &scheme, &z, &y, &no_last).unwrap().len(), 4);
    }

    #[test]
    fn residual_rejects_mismatches() {
        let sys = scalar(2.0);
        let scheme = ObsScheme::full(&sys);
        let z = Trajectory::new(0, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let short = obs_from(vec![1.0, 2.0], 0.1);
        assert!(residual(&sys, &scheme, &z, &short, &GnOptions::default()).is_err());
        let wide = Trajectory::new(0, 2, vec![0.0; 6]).unwrap();
        let y = obs_from(vec![1.0, 2.0, 4.0], 0.1);
        assert!(residual(&sys, &scheme, &wide, &y, &GnOptions::default()).is_err());
    }

    #[test]
    fn eq4_closed_form_small_case() {
        let sys = scalar(2.0);
        let scheme = ObsScheme::full(&sys);
        let eps = [0.01, -0.01, 0.02];
        let y = obs_from(vec![1.0 + eps[0], 2.0 + eps[1], 4.0 + eps[2]], 0.01);
        let init = initial_guess(&sys, &scheme, &y, &InitStart::State(vec![0.0])).unwrap();
        let out = gauss_newton(&sys, &scheme, &y, &init, &GnOptions::default()).unwrap();
        assert!(out.converged);
        let expected = 1.0 + 0.07 / 21.0;
        let z1 = out.z.state(0)[0];
        assert!(((z1 - expected) / expected).abs() < 1e-8, "{z1} vs {expected}");
    }

    #[test]
    fn identity_dynamics_gives_the_mean() {
        let sys = scalar(1.0);
        let scheme = ObsScheme::full(&sys);
        let values = vec![0.3, -0.1, 0.7, 0.2, 0.4];
        let mean = values.iter().sum::<f64>() / 5.0;
        let y = obs_from(values, 0.1);
        let init = initial_guess(&sys, &scheme, &y, &InitStart::State(vec![0.0])).unwrap();
        let out = gauss_newton(&sys, &scheme, &y, &init, &GnOptions::default()).unwrap();
        for i in 0..5 {
            assert!((out.z.state(i)[0] - mean).abs() < 1e-9);
        }
        assert!(out.iterations <= 2);
    }

    #[test]
    fn exact_start_is_a_fixed_point() {
        let sys = linear_map(DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.5])).unwrap();
        let scheme = ObsScheme::from_indices(&sys, vec![0]).unwrap();
        let truth = simulate(&sys, &[1.0, -1.0], 10, 0).unwrap();
        let y = observe(&truth, &scheme, 0.0, 1).unwrap();
        let out = gauss_newton(&sys, &scheme, &y, &truth, &GnOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 1);
        for (a, b) in out.z.as_slice().iter().zip(truth.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_structure() {
        let sys = linear_map(DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.5])).unwrap();
        let scheme = ObsScheme::from_indices(&sys, vec![0]).unwrap();
        let za = Trajectory::new(0, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let zb = Trajectory::new(0, 2, vec![-1.0, 0.0, 7.0, 4.0, 0.5, 0.1]).unwrap();
        let opts = GnOptions::default();
        let ja = residual_jacobian(&sys, &scheme, &za, &opts).unwrap().to_dense();
        let jb = residual_jacobian(&sys, &scheme, &zb, &opts).unwrap().to_dense();
        assert_eq!(ja, jb);
        let j = residual_jacobian(&sys, &scheme, &za, &opts).unwrap();
        assert_eq!(j.nrows(), 2 * 2 + 3);
        assert_eq!(j.ncols(), 6);
        assert!(j.nnz() <= 2 * 2 * 3 + 3);
        assert_eq!(j.nnz(), ja.iter().filter(|v| **v != 0.0).count());
    }

    #[test]
    fn options_validation() {
        assert!(GnOptions::default().validate().is_ok());
        for bad in [
            GnOptions { q: 0.0, ..GnOptions::default() },
            GnOptions { q: 2.0, r: 1.0, ..GnOptions::default() },
            GnOptions { max_iter: 0, ..GnOptions::default() },
            GnOptions { svd_rtol: 1.0, ..GnOptions::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn divergent_cost_is_an_error() {
        let sys = scalar(2.0);
        let scheme = ObsScheme::full(&sys);
        let y = obs_from(vec![f64::NAN, 1.0, 1.0], 0.1);
        let init = Trajectory::new(0, 1, vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            gauss_newton(&sys, &scheme, &y, &init, &GnOptions::default()),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn initial_guess_overwrites_observed_coordinates() {
        let sys = scalar(0.9);
        let scheme = ObsScheme::full(&sys);
        let y = obs_from(vec![0.5, 0.4, 0.3], 0.1);
        let g = initial_guess(&sys, &scheme, &y, &InitStart::Random { seed: 3, burn_in: 10 }).unwrap();
        assert_eq!(g.as_slice(), y.values.as_slice());

        let sys2 = linear_map(DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.5])).unwrap();
        let part = ObsScheme::from_indices(&sys2, vec![0]).unwrap();
        let start = InitStart::Random { seed: 3, burn_in: 10 };
        let a = initial_guess(&sys2, &part, &y, &start).unwrap();
        let b = initial_guess(&sys2, &part, &y, &start).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            assert_eq!(a.state(i)[0], y.values[i]);
        }
        // The unobserved coordinate follows the free run.
        let free = simulate_from(&sys2, &{
            let mut rng = rng::stream(3, Purpose::Init, 0);
            let mut x = sys2.random_state(&mut rng);
            for s in 0..10 {
                x = sys2.step(&x, s);
            }
            x
        }, 0, 3, 0)
        .unwrap();
        for i in 0..3 {
            assert_eq!(a.state(i)[1], free.state(i)[1]);
        }
    }
}
