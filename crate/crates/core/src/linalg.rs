//! Small dense linear algebra used by the calculus and the optimizers.
//!
//! Factorizations and eigen-decompositions come from `nalgebra`; this module
//! adds the ridge-escalation policy, definiteness helpers, a power-iteration
//! spectral radius and a matrix-free conjugate-gradient solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Outcome of [`solve_symmetric`].
#[derive(Debug, Clone)]
pub struct SymmetricSolve {
    pub x: DVector<f64>,
    /// Ridge actually added to the diagonal (the requested one, or larger after escalation).
    pub ridge: f64,
    /// Number of times the ridge was escalated because factorization failed.
    pub escalations: usize,
    /// Final residual `‖(M + ridge·I)x − b‖`.
    pub residual: f64,
}

/// Solves `(m + ridge·I) x = b` by Cholesky factorization.
///
/// If the factorization fails the ridge is raised (starting from
/// `1e-10·|trace|/n`, then ×10 each attempt) until it succeeds or exceeds
/// `1e-2·|trace|/n`. Two rounds of iterative refinement tighten the residual.
pub fn solve_symmetric(m: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<SymmetricSolve> {
    let n = m.nrows();
    check_dim(n, m.ncols(), "solve_symmetric: square matrix")?;
    check_dim(n, b.len(), "solve_symmetric: right-hand side")?;
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::Numerical(format!("invalid ridge {ridge}")));
    }
    if n == 0 {
        return Ok(SymmetricSolve {
            x: DVector::zeros(0),
            ridge,
            escalations: 0,
            residual: 0.0,
        });
    }
    let scale = max_abs(m).max(1.0);
    if max_abs(&(m - m.transpose())) > 1e-9 * scale {
        return Err(Error::InvalidModel("solve_symmetric: matrix is not symmetric".into()));
    }
    let m = symmetrize(m);
    let mean_diag = (m.trace() / n as f64).abs();
    let cap = 1e-2 * mean_diag;

    let mut current = ridge;
    let mut escalations = 0;
    loop {
        let shifted = &m + DMatrix::identity(n, n) * current;
        if let Some(chol) = shifted.clone().cholesky() {
            let mut x = chol.solve(b);
            for _ in 0..2 {
                let r = b - &shifted * &x;
                x += chol.solve(&r);
            }
            let residual = (b - &shifted * &x).norm();
            if !residual.is_finite() {
                return Err(Error::Numerical("solve_symmetric: non-finite solution".into()));
            }
            return Ok(SymmetricSolve {
                x,
                ridge: current,
                escalations,
                residual,
            });
        }
        let next = if current > 0.0 {
            current * 10.0
        } else {
            1e-10 * mean_diag
        };
        if next <= 0.0 || next > cap || !next.is_finite() {
            return Err(Error::Numerical(format!(
                "solve_symmetric: factorization failed with ridge up to {current:e}"
            )));
        }
        current = next;
        escalations += 1;
    }
}

/// Eigen-decomposition of a symmetric matrix with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
}

/// Eigenvalues (ascending) and eigenvectors of the symmetrized input.
pub fn eigen_symmetric(m: &DMatrix<f64>) -> Result<SymmetricEigen> {
    let n = m.nrows();
    check_dim(n, m.ncols(), "eigen_symmetric: square matrix")?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigen_symmetric: non-finite entry".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigen_symmetric(m)?.values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Largest eigenvalue of the symmetrized matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigen_symmetric(m)?.values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Sign structure of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    PositiveDefinite,
    PositiveSemidefinite,
    NegativeDefinite,
    NegativeSemidefinite,
    Indefinite,
    Zero,
}

/// Classifies a symmetric matrix; eigenvalues within `tol` of zero count as zero.
pub fn classify_definiteness(m: &DMatrix<f64>, tol: f64) -> Result<Definiteness> {
    let values = eigen_symmetric(m)?.values;
    let pos = values.iter().filter(|&&v| v > tol).count();
    let neg = values.iter().filter(|&&v| v < -tol).count();
    let n = values.len();
    Ok(match (pos, neg) {
        (0, 0) => Definiteness::Zero,
        (p, 0) if p == n => Definiteness::PositiveDefinite,
        (_, 0) => Definiteness::PositiveSemidefinite,
        (0, q) if q == n => Definiteness::NegativeDefinite,
        (0, _) => Definiteness::NegativeSemidefinite,
        _ => Definiteness::Indefinite,
    })
}

/// How [`spectral_radius`] obtained its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusMethod {
    PowerIteration { iterations: usize },
    DenseEigensolve,
}

#[derive(Debug, Clone, Copy)]
pub struct SpectralRadius {
    pub value: f64,
    pub method: RadiusMethod,
}

const POWER_ITERATION_CAP: usize = 10_000;

/// Largest eigenvalue magnitude of a general square matrix.
///
/// Power iteration runs first. It is accepted only when the eigen-residual
/// `‖Mv − λv‖` is small; otherwise (complex or tied dominant eigenvalues,
/// slow convergence) the dense Schur-based eigensolver decides.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<SpectralRadius> {
    let n = m.nrows();
    check_dim(n, m.ncols(), "spectral_radius: square matrix")?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("spectral_radius: non-finite entry".into()));
    }
    if n == 0 {
        return Ok(SpectralRadius {
            value: 0.0,
            method: RadiusMethod::DenseEigensolve,
        });
    }
    let scale = max_abs(m);
    if scale == 0.0 {
        return Ok(SpectralRadius {
            value: 0.0,
            method: RadiusMethod::PowerIteration { iterations: 0 },
        });
    }

    // A fixed, generic start vector keeps the result deterministic.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i as f64) * 0.7548).sin());
    v /= v.norm();
    let mut previous = f64::NAN;
    for it in 1..=POWER_ITERATION_CAP {
        let mv = m * &v;
        let norm = mv.norm();
        if norm == 0.0 {
            break;
        }
        let lambda = v.dot(&mv);
        let shift = (lambda - previous).abs();
        v = mv / norm;
        if shift <= 1e-10 * lambda.abs() {
            let residual = (m * &v - &v * v.dot(&(m * &v))).norm();
            if residual <= 1e-9 * scale * (n as f64).sqrt() {
                let value = v.dot(&(m * &v)).abs();
                return Ok(SpectralRadius {
                    value,
                    method: RadiusMethod::PowerIteration { iterations: it },
                });
            }
        }
        previous = lambda;
    }

    let eigs = m.clone().complex_eigenvalues();
    let value = eigs.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    if !value.is_finite() {
        return Err(Error::Numerical("spectral_radius: dense eigensolve failed".into()));
    }
    Ok(SpectralRadius {
        value,
        method: RadiusMethod::DenseEigensolve,
    })
}

/// A matrix-free linear map `x ↦ Mx`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }
}

/// Adapts a closure into a [`LinearOperator`].
pub struct FnOperator<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    /// Iteration cap; `None` means the operator dimension.
    pub max_iter: Option<usize>,
    /// Stop once `‖r‖ ≤ tol·‖b‖`.
    pub tol: f64,
    /// Keep every iterate in [`CgResult::iterates`].
    pub record_iterates: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iter: None,
            tol: 1e-8,
            record_iterates: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// `‖r_k‖` for k = 0..=iterations.
    pub residual_norms: Vec<f64>,
    /// Set when `pᵀMp ≤ 0` was met; `x` is then the last good iterate.
    pub breakdown: bool,
    /// `x_0, x_1, …` when requested.
    pub iterates: Vec<DVector<f64>>,
}

/// Conjugate gradients for `Mx = b` with `M` symmetric positive definite.
pub fn conjugate_gradient<O: LinearOperator + ?Sized>(
    op: &O,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    options: CgOptions,
) -> Result<CgResult> {
    let n = op.dim();
    check_dim(n, b.len(), "conjugate_gradient: right-hand side")?;
    check_dim(n, x0.len(), "conjugate_gradient: initial guess")?;
    let max_iter = options.max_iter.unwrap_or(n);
    let b_norm = b.norm();

    let mut x = x0.clone();
    let mut r = b - op.apply(&x);
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut residual_norms = vec![rr.sqrt()];
    let mut iterates = Vec::new();
    if options.record_iterates {
        iterates.push(x.clone());
    }
    let mut breakdown = false;
    let mut iterations = 0;

    while iterations < max_iter && rr.sqrt() > options.tol * b_norm {
        let mp = op.apply(&p);
        let curvature = p.dot(&mp);
        if !(curvature > 0.0) {
            breakdown = true;
            break;
        }
        let alpha = rr / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &mp, 1.0);
        let rr_next = r.dot(&r);
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
        iterations += 1;
        residual_norms.push(rr.sqrt());
        if options.record_iterates {
            iterates.push(x.clone());
        }
        if !rr.is_finite() {
            return Err(Error::Numerical("conjugate_gradient: non-finite residual".into()));
        }
    }

    Ok(CgResult {
        x,
        iterations,
        residual_norms,
        breakdown,
        iterates,
    })
}

/// Steepest descent with exact line search on `½ xᵀMx − bᵀx`, started at `x0`.
///
/// Stops after `max_iter` steps, when the residual falls below `tol·‖b‖`, or
/// when a search direction has no positive curvature. Few iterations act as
/// regularization on ill-conditioned systems.
pub fn steepest_descent_solve<O: LinearOperator + ?Sized>(
    op: &O,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    check_dim(op.dim(), b.len(), "steepest_descent_solve: right-hand side")?;
    check_dim(op.dim(), x0.len(), "steepest_descent_solve: initial guess")?;
    let mut x = x0.clone();
    let mut r = b - op.apply(&x);
    let b_norm = b.norm();
    for _ in 0..max_iter {
        let rr = r.dot(&r);
        if rr.sqrt() <= tol * b_norm {
            break;
        }
        let mr = op.apply(&r);
        let curvature = r.dot(&mr);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rr / curvature;
        x.axpy(alpha, &r, 1.0);
        r.axpy(-alpha, &mr, 1.0);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("steepest_descent_solve: non-finite iterate".into()));
    }
    Ok(x)
}
