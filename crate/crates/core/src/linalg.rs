//! Least-squares kernels for block-bidiagonal trajectory problems.
//!
//! The stacked Jacobian of a trajectory residual couples only neighbouring
//! time blocks, so its QR factor is block upper-bidiagonal. [`BlockQr`]
//! builds that factor one time block at a time with dense Householder QR on
//! small panels, which costs `O(N d^3)` instead of `O((N d)^3)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::rng::{self, Purpose};

/// Rows of the least-squares problem that touch time block `i`.
pub(crate) struct BlockRows {
    /// Rows supported on block `i` only, with their right-hand side.
    pub local: DMatrix<f64>,
    pub local_rhs: Vec<f64>,
    /// Rows coupling block `i` and `i + 1`: `[left | right]`, with rhs.
    pub left: Option<DMatrix<f64>>,
    pub right: Option<DMatrix<f64>>,
    pub coupled_rhs: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct RankDeficient;

/// Upper block-bidiagonal triangular factor: diagonal blocks `diag[i]` are
/// upper triangular, `off[i]` couples block `i` to block `i + 1`.
#[derive(Debug, Clone)]
pub(crate) struct BlockQr {
    d: usize,
    diag: Vec<DMatrix<f64>>,
    off: Vec<DMatrix<f64>>,
    rhs: Vec<DVector<f64>>,
}

impl BlockQr {
    /// Factors the problem whose rows per block are produced by `rows(i)`.
    pub fn factor(
        n_blocks: usize,
        d: usize,
        rank_rtol: f64,
        mut rows: impl FnMut(usize) -> BlockRows,
    ) -> Result<Self, RankDeficient> {
        let mut diag = Vec::with_capacity(n_blocks);
        let mut off = Vec::with_capacity(n_blocks.saturating_sub(1));
        let mut rhs = Vec::with_capacity(n_blocks);
        // Rows left over from the previous panel, supported on the current block.
        let mut carry = DMatrix::<f64>::zeros(0, d + 1);

        for i in 0..n_blocks {
            let b = rows(i);
            let last = i + 1 == n_blocks;
            let width = if last { d } else { 2 * d };
            let n_coupled = b.left.as_ref().map_or(0, |m| m.nrows());
            let n_rows = carry.nrows() + b.local.nrows() + n_coupled;
            let mut panel = DMatrix::<f64>::zeros(n_rows, width + 1);

            let mut r0 = 0;
            for k in 0..carry.nrows() {
                panel.view_mut((r0 + k, 0), (1, d)).copy_from(&carry.view((k, 0), (1, d)));
                panel[(r0 + k, width)] = carry[(k, d)];
            }
            r0 += carry.nrows();
            panel.view_mut((r0, 0), (b.local.nrows(), d)).copy_from(&b.local);
            for (k, v) in b.local_rhs.iter().enumerate() {
                panel[(r0 + k, width)] = *v;
            }
            r0 += b.local.nrows();
            if let (Some(l), Some(r)) = (&b.left, &b.right) {
                debug_assert!(!last);
                panel.view_mut((r0, 0), (n_coupled, d)).copy_from(l);
                panel.view_mut((r0, d), (n_coupled, d)).copy_from(r);
                for (k, v) in b.coupled_rhs.iter().enumerate() {
                    panel[(r0 + k, width)] = *v;
                }
            }

            if n_rows < d {
                return Err(RankDeficient);
            }
            let tri = panel.qr().r();
            diag.push(tri.view((0, 0), (d, d)).upper_triangle());
            rhs.push(tri.view((0, width), (d, 1)).column(0).into_owned());
            if !last {
                off.push(tri.view((0, d), (d, d)).into_owned());
                let keep = tri.nrows().min(2 * d) - d;
                let mut next = DMatrix::<f64>::zeros(keep, d + 1);
                for k in 0..keep {
                    next.view_mut((k, 0), (1, d)).copy_from(&tri.view((d + k, d), (1, d)));
                    next[(k, d)] = tri[(d + k, width)];
                }
                carry = next;
            }
        }

        let f = Self { d, diag, off, rhs };
        let (lo, hi) = f.diag_range();
        if !(lo > rank_rtol * hi) || !hi.is_finite() {
            return Err(RankDeficient);
        }
        Ok(f)
    }

    fn diag_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for blk in &self.diag {
            for k in 0..self.d {
                let v = blk[(k, k)].abs();
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    pub fn len(&self) -> usize {
        self.diag.len() * self.d
    }

    /// Least-squares solution from the factored right-hand side.
    pub fn solution(&self) -> Vec<f64> {
        let stacked: Vec<f64> = self.rhs.iter().flat_map(|v| v.iter().copied()).collect();
        self.solve(&stacked)
    }

    /// Solves `R x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, d) = (self.diag.len(), self.d);
        let mut x = vec![0.0; n * d];
        for i in (0..n).rev() {
            let mut v = DVector::from_column_slice(&b[i * d..(i + 1) * d]);
            if i + 1 < n {
                v -= &self.off[i] * DVector::from_column_slice(&x[(i + 1) * d..(i + 2) * d]);
            }
            let xi = self.diag[i]
                .solve_upper_triangular(&v)
                .expect("nonsingular diagonal block");
            x[i * d..(i + 1) * d].copy_from_slice(xi.as_slice());
        }
        x
    }

    /// Solves `R^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let (n, d) = (self.diag.len(), self.d);
        let mut x = vec![0.0; n * d];
        for i in 0..n {
            let mut v = DVector::from_column_slice(&b[i * d..(i + 1) * d]);
            if i > 0 {
                v -= self.off[i - 1].tr_mul(&DVector::from_column_slice(&x[(i - 1) * d..i * d]));
            }
            let xi = self.diag[i]
                .tr_solve_upper_triangular(&v)
                .expect("nonsingular diagonal block");
            x[i * d..(i + 1) * d].copy_from_slice(xi.as_slice());
        }
        x
    }

    /// `R x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let (n, d) = (self.diag.len(), self.d);
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            let mut v = &self.diag[i] * DVector::from_column_slice(&x[i * d..(i + 1) * d]);
            if i + 1 < n {
                v += &self.off[i] * DVector::from_column_slice(&x[(i + 1) * d..(i + 2) * d]);
            }
            y[i * d..(i + 1) * d].copy_from_slice(v.as_slice());
        }
        y
    }

    /// `R^T x`.
    pub fn tr_mul(&self, x: &[f64]) -> Vec<f64> {
        let (n, d) = (self.diag.len(), self.d);
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            let mut v = self.diag[i].tr_mul(&DVector::from_column_slice(&x[i * d..(i + 1) * d]));
            if i > 0 {
                v += self.off[i - 1].tr_mul(&DVector::from_column_slice(&x[(i - 1) * d..i * d]));
            }
            y[i * d..(i + 1) * d].copy_from_slice(v.as_slice());
        }
        y
    }

    /// Least-squares solution with the components along right singular
    /// vectors whose singular value is below `rtol * sigma_max` removed,
    /// matching a truncated-SVD pseudo-inverse. Also returns how many
    /// directions were dropped.
    pub fn truncated_solution(&self, rtol: f64) -> (Vec<f64>, usize) {
        let mut x = self.solution();
        if rtol <= 0.0 {
            return (x, 0);
        }
        let n = self.len();
        let cut = rtol * lanczos_max(n, |v| self.tr_mul(&self.mul(v))).sqrt();
        // Small singular values of R are large eigenvalues of (R^T R)^-1.
        let weak = lanczos_above(n, |v| self.solve(&self.solve_transpose(v)), 1.0 / (cut * cut));
        for v in &weak {
            let c: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
            x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= c * vi);
        }
        (x, weak.len())
    }

    /// Extreme singular values `(sigma_min, sigma_max)` of the factor, which
    /// equal those of the original least-squares matrix.
    pub fn singular_range(&self) -> (f64, f64) {
        let n = self.len();
        let big = lanczos_max(n, |v| self.tr_mul(&self.mul(v)));
        let inv = lanczos_max(n, |v| self.solve(&self.solve_transpose(v)));
        (1.0 / inv.sqrt(), big.sqrt())
    }
}

/// Largest eigenvalue of a symmetric positive semi-definite operator by
/// Lanczos with full reorthogonalization, from a fixed pseudo-random start.
pub(crate) fn lanczos_max(n: usize, op: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    const MAX_STEPS: usize = 300;
    const CHECK_EVERY: usize = 4;
    const RTOL: f64 = 1e-12;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = rng::stream(0x5eed, Purpose::Lanczos, n as u64);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= norm);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut estimate = 0.0;
    let steps = MAX_STEPS.min(n);

    for k in 0..steps {
        let mut w = op(&q);
        let a = dot(&w, &q);
        alpha.push(a);
        basis.push(q);
        // Two passes of Gram-Schmidt against every basis vector.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let bnorm = dot(&w, &w).sqrt();

        let done = k + 1 == steps || bnorm <= 1e-14 * a.abs().max(1e-300);
        if done || (k + 1) % CHECK_EVERY == 0 {
            let top = tridiagonal_max(&alpha, &beta);
            let converged = (top - estimate).abs() <= RTOL * top.abs();
            estimate = top;
            if done || converged {
                break;
            }
        }
        beta.push(bnorm);
        q = w.into_iter().map(|v| v / bnorm).collect();
    }
    estimate
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta[..alpha.len() - 1]`, by Sturm-sequence
/// bisection inside the Gershgorin interval.
fn tridiagonal_max(alpha: &[f64], beta: &[f64]) -> f64 {
    let m = alpha.len();
    let off = |i: usize| if i + 1 < m { beta[i].abs() } else { 0.0 };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..m {
        let r = off(i) + if i > 0 { off(i - 1) } else { 0.0 };
        lo = lo.min(alpha[i] - r);
        hi = hi.max(alpha[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    // Number of eigenvalues below x.
    let below = |x: f64| {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..m {
            let b2 = if i > 0 { beta[i - 1] * beta[i - 1] } else { 0.0 };
            d = alpha[i] - x - if i > 0 { b2 / d } else { 0.0 };
            if d == 0.0 {
                d = -f64::EPSILON * scale;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    while hi - lo > 4.0 * f64::EPSILON * scale {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) == m {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Eigenvectors of a symmetric positive semi-definite operator whose
/// eigenvalues exceed `threshold`, by Lanczos with full reorthogonalization.
///
/// Iterates until every Ritz pair above the threshold, and the largest one
/// below it, has converged; the Krylov space then holds no further
/// eigenvalue above the threshold unless the start vector is blind to it.
pub(crate) fn lanczos_above(n: usize, op: impl Fn(&[f64]) -> Vec<f64>, threshold: f64) -> Vec<Vec<f64>> {
    const MAX_STEPS: usize = 300;
    const CHECK_EVERY: usize = 4;
    const RTOL: f64 = 1e-8;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rng = rng::stream(0x5eed, Purpose::Lanczos, (1 << 40) | n as u64);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= norm);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let steps = MAX_STEPS.min(n);

    for k in 0..steps {
        let mut w = op(&q);
        let a = dot(&w, &q);
        alpha.push(a);
        basis.push(q);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let bnorm = dot(&w, &w).sqrt();
        let exhausted = k + 1 == steps || bnorm <= 1e-14 * a.abs().max(1e-300);

        if exhausted || (k + 1) % CHECK_EVERY == 0 {
            let m = alpha.len();
            let t = DMatrix::from_fn(m, m, |r, c| {
                if r == c {
                    alpha[r]
                } else if r + 1 == c {
                    beta[r]
                } else if c + 1 == r {
                    beta[c]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
            let above = order.iter().take_while(|&&j| eig.eigenvalues[j] > threshold).count();
            // Residual norm of Ritz pair j is |beta_m * s_{m,j}|.
            let settled = |j: usize| {
                bnorm * eig.eigenvectors[(m - 1, j)].abs() <= RTOL * eig.eigenvalues[j].max(threshold)
            };
            let converged = above < m && order[..=above].iter().all(|&j| settled(j));
            if exhausted || converged {
                return order[..above]
                    .iter()
                    .map(|&j| {
                        let mut v = vec![0.0; n];
                        for (r, b) in basis.iter().enumerate() {
                            let c = eig.eigenvectors[(r, j)];
                            v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
                        }
                        v
                    })
                    .collect();
            }
        }
        beta.push(bnorm);
        q = w.into_iter().map(|v| v / bnorm).collect();
    }
    unreachable!("the loop returns on its last step")
}
