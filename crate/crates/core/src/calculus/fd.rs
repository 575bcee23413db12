//! Central finite differences, used as an independent oracle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default step for first derivatives.
pub const GRADIENT_STEP: f64 = 1e-5;
/// Default step for second derivatives.
pub const HESSIAN_STEP: f64 = 1e-4;
/// Default coarse step for [`fd_hessian_extrapolated`].
pub const EXTRAPOLATED_HESSIAN_STEP: f64 = 1e-2;

/// Result of [`fd_derivative_oracle`].
#[derive(Debug, Clone)]
pub enum Derivative {
    Gradient(DVector<f64>),
    Hessian(DMatrix<f64>),
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("finite-difference probe returned a non-finite value".into()))
    }
}

fn shifted(w: &DVector<f64>, moves: &[(usize, f64)]) -> DVector<f64> {
    let mut x = w.clone();
    for &(i, d) in moves {
        x[i] += d;
    }
    x
}

/// Central-difference gradient `(f(w+h e_i) − f(w−h e_i)) / 2h`.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, w: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(w.len());
    for i in 0..w.len() {
        let plus = finite(f(&shifted(w, &[(i, h)])))?;
        let minus = finite(f(&shifted(w, &[(i, -h)])))?;
        g[i] = (plus - minus) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Hessian from function values only, symmetrized.
pub fn fd_hessian<F: Fn(&DVector<f64>) -> f64>(f: F, w: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    let n = w.len();
    let f0 = finite(f(w))?;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let plus = finite(f(&shifted(w, &[(i, h)])))?;
        let minus = finite(f(&shifted(w, &[(i, -h)])))?;
        m[(i, i)] = (plus - 2.0 * f0 + minus) / (h * h);
        for j in 0..i {
            let pp = finite(f(&shifted(w, &[(i, h), (j, h)])))?;
            let pm = finite(f(&shifted(w, &[(i, h), (j, -h)])))?;
            let mp = finite(f(&shifted(w, &[(i, -h), (j, h)])))?;
            let mm = finite(f(&shifted(w, &[(i, -h), (j, -h)])))?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Central-difference Hessian refined by one Richardson step,
/// `(4 H(h/2) − H(h)) / 3`, which cancels the `h²` error term. A larger `h`
/// then keeps round-off small, which matters when the Hessian is tiny next
/// to the objective.
pub fn fd_hessian_extrapolated<F: Fn(&DVector<f64>) -> f64>(f: F, w: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    let coarse = fd_hessian(&f, w, h)?;
    let fine = fd_hessian(&f, w, h / 2.0)?;
    Ok((fine * 4.0 - coarse) / 3.0)
}

/// Central-difference Jacobian of a vector function; column `j` is `∂f/∂w_j`.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, w: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    let f0 = f(w);
    let mut m = DMatrix::zeros(f0.len(), w.len());
    for j in 0..w.len() {
        let col = (f(&shifted(w, &[(j, h)])) - f(&shifted(w, &[(j, -h)]))) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("finite-difference probe returned a non-finite value".into()));
        }
        m.set_column(j, &col);
    }
    Ok(m)
}

/// First (`order = 1`) or second (`order = 2`) derivative of `f` at `w`.
pub fn fd_derivative_oracle<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    w: &DVector<f64>,
    order: usize,
    h: f64,
) -> Result<Derivative> {
    if !(h > 0.0) {
        return Err(Error::Numerical(format!("finite-difference step must be positive, got {h}")));
    }
    match order {
        1 => fd_gradient(f, w, h).map(Derivative::Gradient),
        2 => fd_hessian(f, w, h).map(Derivative::Hessian),
        _ => Err(Error::Numerical(format!("unsupported derivative order {order}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_and_linear_hessian() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let w = DVector::from_vec(vec![0.3, -0.7]);
        let g = fd_gradient(|x| x.dot(&(&m * x)), &w, GRADIENT_STEP).unwrap();
        let exact = (&m + m.transpose()) * &w;
        assert!((g - exact).amax() < 1e-8);
        let h = fd_hessian(|x| 2.0 * x[0] - x[1], &w, HESSIAN_STEP).unwrap();
        // Only round-off survives: about ε·|f|/h².
        assert!(h.amax() < 1e-6);
    }

    #[test]
    fn hessian_of_quadratic_is_symmetric_part() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let w = DVector::from_vec(vec![0.3, -0.7]);
        let h = fd_hessian(|x| x.dot(&(&m * x)), &w, HESSIAN_STEP).unwrap();
        assert!((h - (&m + m.transpose())).amax() < 1e-6);
    }

    #[test]
    fn extrapolation_removes_the_quartic_error() {
        // f = x⁴ has f'' = 12x²; the plain rule is off by 2h², the refined one is exact.
        let w = DVector::from_element(1, 0.5);
        let f = |x: &DVector<f64>| x[0].powi(4);
        let h = 1e-2;
        let plain = fd_hessian(f, &w, h).unwrap()[(0, 0)];
        let refined = fd_hessian_extrapolated(f, &w, h).unwrap()[(0, 0)];
        assert!((plain - 3.0 - 2.0 * h * h).abs() < 1e-9);
        assert!((refined - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = DVector::from_vec(vec![1.0]);
        assert!(fd_derivative_oracle(|_| f64::NAN, &w, 1, 1e-5).is_err());
        assert!(fd_derivative_oracle(|x| x[0], &w, 3, 1e-5).is_err());
        assert!(fd_derivative_oracle(|x| x[0], &w, 1, 0.0).is_err());
    }
}
