//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{ensure, EkiError, Result};

/// Eigendecomposition of a symmetric matrix, eigenvalues in ascending order.
///
/// Only the lower triangle is read.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    let n = m.nrows();
    let mat = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let evd = mat.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let u = evd.u();
    SymmetricEigen {
        eigenvalues: DVector::from_fn(n, |i, _| s.read(i)),
        eigenvectors: DMatrix::from_fn(n, n, |i, j| u.read(i, j)),
    }
}

/// Applies `f` to the eigenvalues of a symmetric matrix: `Q f(Λ) Qᵀ`.
pub fn sym_matrix_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let mapped = eig.eigenvalues.map(f);
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&mapped) * q.transpose()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sym_eigen(m)
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest relative asymmetry `max |m_ij − m_ji| / max |m_ij|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Least-squares slope of `log(values)` against `log(times)`.
///
/// All times and values must be strictly positive.
pub fn loglog_slope(times: &[f64], values: &[f64]) -> Result<f64> {
    ensure!(
        times.len() == values.len(),
        InvalidInput,
        "loglog_slope: {} times but {} values",
        times.len(),
        values.len()
    );
    ensure!(times.len() >= 2, InvalidInput, "loglog_slope needs at least two points");
    if let Some(bad) = times.iter().chain(values).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(EkiError::UndefinedRate(format!(
            "log-log fit over non-positive or non-finite value {bad}"
        )));
    }
    let xs: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    ensure!(sxx > 0.0, InvalidInput, "loglog_slope: all times coincide");
    Ok(sxy / sxx)
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn slope_of_power_law() {
        let ts = logspace(10.0, 1e3, 12);
        let vs: Vec<f64> = ts.iter().map(|t| 3.0 * t.powf(-0.75)).collect();
        assert_relative_eq!(loglog_slope(&ts, &vs).unwrap(), -0.75, epsilon = 1e-12);
    }

    #[test]
    fn slope_rejects_zero_values() {
        assert!(matches!(
            loglog_slope(&[1.0, 2.0], &[1.0, 0.0]),
            Err(EkiError::UndefinedRate(_))
        ));
    }

    #[test]
    fn eigen_reconstructs_singular_gram_with_wide_spectrum() {
        // centred columns with scales spread over five decades
        let j = 5;
        let mut x = DMatrix::<f64>::zeros(255, j);
        for c in 0..j {
            let scale = 10f64.powi(-(c as i32));
            for r in 0..255 {
                x[(r, c)] = scale * ((r * (c + 3)) as f64 * 0.37).sin();
            }
        }
        let mean = x.column_mean();
        for mut col in x.column_iter_mut() {
            col -= &mean;
        }
        let g = x.tr_mul(&x);
        let eig = sym_eigen(&g);
        let q = &eig.eigenvectors;
        let back = q * DMatrix::from_diagonal(&eig.eigenvalues) * q.transpose();
        assert!((back - &g).norm() <= 1e-12 * g.norm());
    }

    #[test]
    fn inverse_square_root_of_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_matrix_fn(&m, |l| l.powf(-0.5));
        let back = &r * &m * &r;
        assert_relative_eq!(back, DMatrix::identity(2, 2), epsilon = 1e-12);
    }
}
