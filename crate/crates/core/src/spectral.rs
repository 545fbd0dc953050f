//! Closed-form collapse of `E(t)` and the split of observation space into
//! the span of the initial mapped deviations and its Γ-orthogonal complement.
//!
//! `E` obeys `dE/dt = −(2/J) E²`, so with `E(0) = X Λ₀ Xᵀ` every eigenvalue
//! evolves independently as `λ(t) = (2t/J + 1/λ₀)⁻¹` (and stays zero when
//! `λ₀ = 0`). The eigenvectors do not move.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{Ensemble, LinearForwardModel};
use crate::error::{ensure, EkiError, Result};

/// Eigenvalues below this fraction of the largest are treated as exact zeros.
const ZERO_EIGENVALUE_REL: f64 = 1e-12;

/// Rank tolerance for the Gram–Schmidt deflation, relative to the largest image.
pub const SPLIT_RANK_TOL: f64 = 1e-10;

/// Eigendecomposition of `E(0)` with round-off negatives clamped to zero.
#[derive(Debug, Clone)]
pub struct SpectralE {
    eigenvectors: DMatrix<f64>,
    lambda0: DVector<f64>,
    ensemble_size: usize,
}

impl SpectralE {
    pub fn new(e0: &DMatrix<f64>) -> Result<Self> {
        ensure!(
            e0.is_square() && e0.nrows() >= 1,
            InvalidInput,
            "E(0) must be a non-empty square matrix"
        );
        let sym = (e0 + e0.transpose()) * 0.5;
        let eig = crate::linalg::sym_eigen(&sym);
        let top = eig.eigenvalues.amax();
        let cutoff = ZERO_EIGENVALUE_REL * top;
        let lambda0 = eig.eigenvalues.map(|l| if l <= cutoff { 0.0 } else { l });
        Ok(Self {
            eigenvectors: eig.eigenvectors,
            lambda0,
            ensemble_size: e0.nrows(),
        })
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn initial_eigenvalues(&self) -> &DVector<f64> {
        &self.lambda0
    }

    /// `λ(t)` for every eigenvalue.
    pub fn eigenvalues_at(&self, t: f64) -> Result<DVector<f64>> {
        ensure!(t >= 0.0, InvalidInput, "time must be non-negative, got {t}");
        let j = self.ensemble_size as f64;
        Ok(self.lambda0.map(|l0| {
            if l0 == 0.0 {
                0.0
            } else {
                1.0 / (2.0 * t / j + 1.0 / l0)
            }
        }))
    }

    /// `E(t) = X Λ(t) Xᵀ`.
    pub fn closed_form_e(&self, t: f64) -> Result<DMatrix<f64>> {
        let lam = self.eigenvalues_at(t)?;
        let x = &self.eigenvectors;
        Ok(x * DMatrix::from_diagonal(&lam) * x.transpose())
    }

    /// Spectral norm `‖E(t)‖₂ = maxⱼ λ⁽ʲ⁾(t)`.
    pub fn norm_at(&self, t: f64) -> Result<f64> {
        Ok(self.eigenvalues_at(t)?.max())
    }

    /// Least-squares slope of `log ‖E(t)‖₂` against `log t` over `t_grid`.
    ///
    /// The grid must lie in `[10, 10⁴]` and hold at least ten points; the
    /// answer tends to `−1` for any non-degenerate `E(0)`.
    pub fn collapse_rate(&self, t_grid: &[f64]) -> Result<f64> {
        ensure!(t_grid.len() >= 10, InvalidInput, "collapse_rate needs at least 10 times");
        ensure!(
            t_grid.iter().all(|t| (10.0..=1e4).contains(t)),
            InvalidInput,
            "collapse_rate times must lie in [10, 1e4]"
        );
        if self.lambda0.max() <= 0.0 {
            return Err(EkiError::UndefinedRate("E(0) has no positive eigenvalue".into()));
        }
        let norms = t_grid.iter().map(|&t| self.norm_at(t)).collect::<Result<Vec<_>>>()?;
        crate::linalg::loglog_slope(t_grid, &norms)
    }
}

/// Γ-orthonormal basis of `𝒴‖ = span{Ae⁽ʲ⁾(0)}`.
#[derive(Debug, Clone)]
pub struct SubspaceSplit {
    /// `K × m`, columns `bᵢ` with `⟨bᵢ, bⱼ⟩_Γ = δᵢⱼ`.
    basis: DMatrix<f64>,
    /// `Γ^{-1/2} bᵢ`, Euclidean-orthonormal.
    whitened_basis: DMatrix<f64>,
    gamma_inv_sqrt: DMatrix<f64>,
}

impl SubspaceSplit {
    pub fn dim_par(&self) -> usize {
        self.basis.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Splits `v = v‖ + v⊥` with `v‖ ∈ 𝒴‖` and `v⊥` Γ-orthogonal to it.
    pub fn project(&self, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        ensure!(
            v.len() == self.obs_dim(),
            InvalidInput,
            "project: vector has dimension {} but the split lives in R^{}",
            v.len(),
            self.obs_dim()
        );
        let coeffs = self.whitened_basis.tr_mul(&(&self.gamma_inv_sqrt * v));
        let par = &self.basis * coeffs;
        let perp = v - &par;
        Ok((par, perp))
    }

    /// `(‖v‖‖_Γ², ‖v⊥‖_Γ²)` computed in whitened coordinates.
    pub fn norms_sq(&self, v: &DVector<f64>) -> Result<(f64, f64)> {
        ensure!(v.len() == self.obs_dim(), InvalidInput, "norms_sq: dimension mismatch");
        let w = &self.gamma_inv_sqrt * v;
        let coeffs = self.whitened_basis.tr_mul(&w);
        let perp = &w - &self.whitened_basis * &coeffs;
        Ok((coeffs.norm_squared(), perp.norm_squared()))
    }

    /// Γ-orthogonal complement component of `v`, in whitened coordinates.
    pub(crate) fn whitened_perp(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = &self.gamma_inv_sqrt * v;
        let coeffs = self.whitened_basis.tr_mul(&w);
        w - &self.whitened_basis * coeffs
    }
}

/// Γ-weighted Gram–Schmidt on the initial mapped deviations `Ae⁽ʲ⁾(0)`.
///
/// Images whose remainder after orthogonalisation falls below
/// [`SPLIT_RANK_TOL`] times the largest image norm are dropped. A collapsed
/// ensemble yields a zero-dimensional split.
pub fn build_split(ens0: &Ensemble, fm: &LinearForwardModel) -> Result<SubspaceSplit> {
    fm.check_param("ensemble", ens0.dim())?;
    let images = fm.whitened() * ens0.deviations();
    let k = fm.obs_dim();
    let largest = images.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    if largest > 0.0 {
        for col in images.column_iter() {
            let mut v = col.into_owned();
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&v);
                    v.axpy(-c, q, 1.0);
                }
            }
            let n = v.norm();
            if n > SPLIT_RANK_TOL * largest && basis.len() < k {
                basis.push(v / n);
            }
        }
    }
    let whitened_basis = if basis.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&basis)
    };
    Ok(SubspaceSplit {
        basis: fm.gamma_sqrt() * &whitened_basis,
        whitened_basis,
        gamma_inv_sqrt: fm.gamma_inv_sqrt().clone(),
    })
}
