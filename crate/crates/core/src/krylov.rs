//! Restarted GMRES and inverse iteration on complex sample vectors.

use nalgebra::DMatrix;

use crate::error::{GeomError, Result};
use crate::lattice::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    /// Target relative residual `‖b − Ax‖ / ‖b‖`.
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            restart: 60,
            max_iter: 600,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative residual after every inner iteration.
    pub residual_history: Vec<f64>,
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Right-preconditioned restarted GMRES for `A x = b`.
///
/// `precond` applies an approximate inverse `M⁻¹`; the Krylov space is built
/// for `A M⁻¹` and the iterate is mapped back at each restart.
pub fn gmres(
    mut apply: impl FnMut(&[C64]) -> Result<Vec<C64>>,
    mut precond: impl FnMut(&[C64]) -> Vec<C64>,
    b: &[C64],
    x0: Option<&[C64]>,
    opts: GmresOptions,
) -> Result<(Vec<C64>, SolveReport)> {
    let len = b.len();
    let bnorm = norm(b);
    let mut report = SolveReport::default();
    if bnorm == 0.0 {
        report.residual_history.push(0.0);
        return Ok((vec![ZERO; len], report));
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; len]);
    let m = opts.restart.max(1);

    loop {
        let ax = apply(&x)?;
        let r: Vec<C64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        let rel = beta / bnorm;
        if rel <= opts.tol {
            report.residual_history.push(rel);
            return Ok((x, report));
        }
        if report.iterations >= opts.max_iter {
            return Err(GeomError::IterativeSolveFailure {
                iterations: report.iterations,
                final_residual: rel,
                residual_history: report.residual_history,
            });
        }

        let mut v: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
        v.push(r.iter().map(|c| c / beta).collect());
        let mut h = vec![vec![ZERO; m]; m + 1];
        let mut cs = vec![ZERO; m];
        let mut sn = vec![ZERO; m];
        let mut g = vec![ZERO; m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;

        for k in 0..m {
            let z = precond(&v[k]);
            let mut w = apply(&z)?;
            for (i, vi) in v.iter().enumerate() {
                let hik = dot(vi, &w);
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(vi) {
                    *wj -= hik * vj;
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = C64::new(hn, 0.0);
            for i in 0..k {
                let t = cs[i].conj() * h[i][k] + sn[i].conj() * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let a = h[k][k];
            let bb = h[k + 1][k];
            let den = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            if den == 0.0 {
                cs[k] = C64::new(1.0, 0.0);
                sn[k] = ZERO;
            } else {
                cs[k] = a / den;
                sn[k] = bb / den;
            }
            h[k][k] = cs[k].conj() * a + sn[k].conj() * bb;
            h[k + 1][k] = ZERO;
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k].conj() * g[k];

            report.iterations += 1;
            k_used = k + 1;
            let est = g[k + 1].norm() / bnorm;
            report.residual_history.push(est);
            if est <= opts.tol * 0.5 || hn == 0.0 || report.iterations >= opts.max_iter {
                break;
            }
            v.push(w.iter().map(|c| c / hn).collect());
        }

        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut u = vec![ZERO; len];
        for (yi, vi) in y.iter().zip(&v) {
            for (uj, vj) in u.iter_mut().zip(vi) {
                *uj += yi * vj;
            }
        }
        let du = precond(&u);
        for (xj, dj) in x.iter_mut().zip(&du) {
            *xj += dj;
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenReport {
    pub lambda: f64,
    pub vector: Vec<C64>,
    pub iterations: usize,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

/// Inverse iteration for the eigenvalue of smallest magnitude of an operator
/// self-adjoint under `inner`.
///
/// `solve` applies the inverse, `project` removes the excluded subspace
/// (for instance constants) before every step.
pub fn inverse_iteration(
    mut solve: impl FnMut(&[C64]) -> Result<Vec<C64>>,
    mut apply: impl FnMut(&[C64]) -> Result<Vec<C64>>,
    inner: impl Fn(&[C64], &[C64]) -> C64,
    project: impl Fn(&mut [C64]),
    x0: Vec<C64>,
    tol: f64,
    max_iter: usize,
) -> Result<EigenReport> {
    let normalise = |x: &mut Vec<C64>| {
        let n = inner(x, x).re.sqrt();
        for v in x.iter_mut() {
            *v /= n;
        }
    };
    let mut x = x0;
    project(&mut x);
    normalise(&mut x);
    let mut history = Vec::new();
    let mut last = f64::NAN;
    for it in 1..=max_iter {
        let mut y = solve(&x)?;
        project(&mut y);
        normalise(&mut y);
        x = y;
        let ax = apply(&x)?;
        let lambda = inner(&x, &ax).re;
        history.push(lambda);
        let change = ((lambda - last) / lambda).abs();
        if change < tol {
            return Ok(EigenReport {
                lambda,
                vector: x,
                iterations: it,
                history,
            });
        }
        last = lambda;
    }
    let n = history.len();
    Err(GeomError::EigenNonConvergence {
        iterations: max_iter,
        last_change: if n >= 2 {
            ((history[n - 1] - history[n - 2]) / history[n - 1]).abs()
        } else {
            f64::INFINITY
        },
    })
}

/// Assembles the matrix of a linear map by applying it to unit vectors.
pub fn dense_matrix(mut apply: impl FnMut(&[C64]) -> Result<Vec<C64>>, len: usize) -> Result<DMatrix<C64>> {
    let mut m = DMatrix::zeros(len, len);
    let mut e = vec![ZERO; len];
    for j in 0..len {
        e[j] = C64::new(1.0, 0.0);
        let col = apply(&e)?;
        for (i, c) in col.into_iter().enumerate() {
            m[(i, j)] = c;
        }
        e[j] = ZERO;
    }
    Ok(m)
}
