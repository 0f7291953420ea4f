use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function of a matrix:
/// `(f(x + h·e) − f(x − h·e)) / 2h` for every entry.
/// Shares no code with the tape.
pub fn finite_diff_grad<F>(f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let mut x = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.len() {
        let orig = x.as_slice()[idx];
        x.as_mut_slice()[idx] = orig + h;
        let plus = f(&x);
        x.as_mut_slice()[idx] = orig - h;
        let minus = f(&x);
        x.as_mut_slice()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at entry {idx} ({plus}, {minus})"
            )));
        }
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise relative error between two gradients.
///
/// Entries whose magnitudes are both below `floor` are compared absolutely
/// against `floor`, since the central-difference quotient carries roughly
/// `eps / h` of cancellation noise.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.2);
        let g = finite_diff_grad(|m| m.sum(), &x, DEFAULT_STEP).unwrap();
        for &v in g.as_slice() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_norm_gradient_is_identity_map() {
        let x = Matrix::from_fn(3, 2, |i, j| (i as f64 - 1.0) * 0.7 + j as f64 * 0.3);
        let g = finite_diff_grad(|m| 0.5 * m.frobenius_sq(), &x, DEFAULT_STEP).unwrap();
        for (a, b) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Matrix::filled(1, 1, 0.0);
        let err = finite_diff_grad(|m| 1.0 / m[(0, 0)].abs().min(0.0), &x, 1e-5);
        assert!(matches!(err, Err(Error::Oracle(_))));
        assert!(finite_diff_grad(|m| m.sum(), &x, 0.0).is_err());
    }
}
