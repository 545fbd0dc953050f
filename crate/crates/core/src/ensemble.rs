//! Ensembles, the linear forward model and the per-time Gram diagnostics.
//!
//! Particles are stored as the columns of a `d × J` matrix. The empirical
//! covariance `C(u) = (1/J) Σ e⁽ʲ⁾ ⊗ e⁽ʲ⁾` is never formed; everything that
//! needs it works with the deviation columns directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, EkiError, Result};
use crate::linalg::asymmetry;

/// A set of `J` particles in `ℝᵈ` with cached mean and deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
    mean: DVector<f64>,
    deviations: DMatrix<f64>,
}

impl Ensemble {
    /// Builds an ensemble from individual particles.
    pub fn new(particles: Vec<DVector<f64>>) -> Result<Self> {
        ensure!(!particles.is_empty(), InvalidInput, "ensemble has no particles");
        let d = particles[0].len();
        ensure!(d >= 1, InvalidInput, "particles must have dimension >= 1");
        if let Some((j, p)) = particles.iter().enumerate().find(|(_, p)| p.len() != d) {
            return Err(EkiError::InvalidInput(format!(
                "particle {j} has dimension {} but particle 0 has {d}",
                p.len()
            )));
        }
        Self::from_matrix(DMatrix::from_columns(&particles))
    }

    /// Builds an ensemble from a `d × J` matrix whose columns are particles.
    pub fn from_matrix(particles: DMatrix<f64>) -> Result<Self> {
        ensure!(particles.ncols() >= 1, InvalidInput, "ensemble has no particles");
        ensure!(particles.nrows() >= 1, InvalidInput, "particles must have dimension >= 1");
        let mean = particles.column_mean();
        let mut deviations = particles.clone();
        for mut col in deviations.column_iter_mut() {
            col -= &mean;
        }
        Ok(Self {
            particles,
            mean,
            deviations,
        })
    }

    /// Number of particles `J`.
    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn particle(&self, j: usize) -> DVector<f64> {
        self.particles.column(j).into_owned()
    }

    /// Columns `e⁽ʲ⁾ = u⁽ʲ⁾ − ū`.
    pub fn deviations(&self) -> &DMatrix<f64> {
        &self.deviations
    }

    /// The empirical mean `ū = (1/J) Σⱼ u⁽ʲ⁾`.
    pub fn empirical_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Applies the empirical covariance to `v` without forming it:
    /// `(1/J) Σₖ ⟨e⁽ᵏ⁾, v⟩ e⁽ᵏ⁾`.
    pub fn covariance_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        ensure!(
            v.len() == self.dim(),
            InvalidInput,
            "covariance_apply: vector has dimension {} but ensemble has {}",
            v.len(),
            self.dim()
        );
        let weights = self.deviations.tr_mul(v);
        Ok(&self.deviations * weights / self.size() as f64)
    }
}

/// A linear forward map `A : ℝᵈ → ℝᴷ` together with the noise covariance `Γ`.
#[derive(Debug, Clone)]
pub struct LinearForwardModel {
    a: DMatrix<f64>,
    gamma: DMatrix<f64>,
    gamma_inv_sqrt: DMatrix<f64>,
    gamma_sqrt: DMatrix<f64>,
    whitened: DMatrix<f64>,
}

impl LinearForwardModel {
    /// Validates `Γ` (symmetric to 1e-12 relative, strictly positive
    /// spectrum) and caches `Γ^{±1/2}` from one eigendecomposition.
    pub fn new(a: DMatrix<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        let k = a.nrows();
        ensure!(k >= 1 && a.ncols() >= 1, InvalidInput, "forward matrix is empty");
        ensure!(
            gamma.nrows() == k && gamma.ncols() == k,
            InvalidInput,
            "noise covariance is {}x{} but A has {k} rows",
            gamma.nrows(),
            gamma.ncols()
        );
        ensure!(
            a.iter().chain(gamma.iter()).all(|v| v.is_finite()),
            InvalidInput,
            "forward model contains non-finite entries"
        );
        ensure!(
            asymmetry(&gamma) <= 1e-12,
            InvalidInput,
            "noise covariance is not symmetric"
        );
        let sym = (&gamma + gamma.transpose()) * 0.5;
        let eig = crate::linalg::sym_eigen(&sym);
        let min_eig = eig.eigenvalues.min();
        ensure!(
            min_eig > 0.0,
            InvalidInput,
            "noise covariance is not positive definite (smallest eigenvalue {min_eig:e})"
        );
        let q = &eig.eigenvectors;
        let gamma_inv_sqrt = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.sqrt().recip())) * q.transpose();
        let gamma_sqrt = q * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * q.transpose();
        let whitened = &gamma_inv_sqrt * &a;
        Ok(Self {
            a,
            gamma,
            gamma_inv_sqrt,
            gamma_sqrt,
            whitened,
        })
    }

    /// Forward model with `Γ = γ I`.
    pub fn with_scalar_noise(a: DMatrix<f64>, gamma: f64) -> Result<Self> {
        ensure!(gamma > 0.0, InvalidInput, "noise variance must be positive, got {gamma}");
        let k = a.nrows();
        Self::new(a, DMatrix::identity(k, k) * gamma)
    }

    /// Number of observations `K`.
    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Parameter dimension `d`.
    pub fn param_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn gamma_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.gamma_inv_sqrt
    }

    pub fn gamma_sqrt(&self) -> &DMatrix<f64> {
        &self.gamma_sqrt
    }

    /// `Γ^{-1/2} A`.
    pub fn whitened(&self) -> &DMatrix<f64> {
        &self.whitened
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a * u
    }

    /// `Γ^{-1/2} v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.gamma_inv_sqrt * v
    }

    /// `⟨a, b⟩_Γ = ⟨Γ^{-1/2}a, Γ^{-1/2}b⟩`.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.whiten(a).dot(&self.whiten(b))
    }

    /// `‖v‖_Γ²`.
    pub fn norm_sq(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    pub(crate) fn check_param(&self, what: &str, len: usize) -> Result<()> {
        ensure!(
            len == self.param_dim(),
            InvalidInput,
            "{what} has dimension {len} but the forward model expects {}",
            self.param_dim()
        );
        Ok(())
    }

    pub(crate) fn check_obs(&self, what: &str, len: usize) -> Result<()> {
        ensure!(
            len == self.obs_dim(),
            InvalidInput,
            "{what} has dimension {len} but the forward model has {} observations",
            self.obs_dim()
        );
        Ok(())
    }
}

/// Gram matrices of the mapped deviations, residuals and misfits at one time.
///
/// With `e⁽ʲ⁾ = u⁽ʲ⁾ − ū`, `r⁽ʲ⁾ = u⁽ʲ⁾ − u†` and `ϑ⁽ʲ⁾ = Au⁽ʲ⁾ − y†`:
///
/// * `E_lj = ⟨Ae⁽ˡ⁾, Ae⁽ʲ⁾⟩_Γ`
/// * `R_lj = ⟨Ar⁽ˡ⁾, Ar⁽ʲ⁾⟩_Γ`
/// * `F_lj = ⟨Ar⁽ˡ⁾, Ae⁽ʲ⁾⟩_Γ`
/// * `D_lj = ⟨ϑ⁽ˡ⁾, Ae⁽ʲ⁾⟩_Γ`
///
/// `R` and `F` exist only when the truth is known.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub e: DMatrix<f64>,
    pub d: DMatrix<f64>,
    r: Option<DMatrix<f64>>,
    f: Option<DMatrix<f64>>,
    /// `K × J`, column `j` is `ϑ⁽ʲ⁾`.
    pub misfits: DMatrix<f64>,
    /// `K × J`, column `j` is `Ae⁽ʲ⁾`.
    pub mapped_deviations: DMatrix<f64>,
    mapped_residuals: Option<DMatrix<f64>>,
    /// `‖e⁽ʲ⁾‖₂`.
    pub deviation_norms: DVector<f64>,
    residual_norms: Option<DVector<f64>>,
}

impl Diagnostics {
    pub fn r(&self) -> Result<&DMatrix<f64>> {
        self.r.as_ref().ok_or(EkiError::NotAvailable("R requires the truth u†"))
    }

    pub fn f(&self) -> Result<&DMatrix<f64>> {
        self.f.as_ref().ok_or(EkiError::NotAvailable("F requires the truth u†"))
    }

    /// `K × J`, column `j` is `Ar⁽ʲ⁾`.
    pub fn mapped_residuals(&self) -> Result<&DMatrix<f64>> {
        self.mapped_residuals
            .as_ref()
            .ok_or(EkiError::NotAvailable("mapped residuals require the truth u†"))
    }

    /// `‖r⁽ʲ⁾‖₂`.
    pub fn residual_norms(&self) -> Result<&DVector<f64>> {
        self.residual_norms
            .as_ref()
            .ok_or(EkiError::NotAvailable("residual norms require the truth u†"))
    }

    pub fn ensemble_size(&self) -> usize {
        self.e.ncols()
    }
}

/// Computes `E`, `D`, the misfits and, when `u_truth` is given, `R` and `F`.
pub fn compute_diagnostics(
    ens: &Ensemble,
    fm: &LinearForwardModel,
    y_dagger: &DVector<f64>,
    u_truth: Option<&DVector<f64>>,
) -> Result<Diagnostics> {
    fm.check_param("ensemble", ens.dim())?;
    fm.check_obs("data", y_dagger.len())?;
    if let Some(u) = u_truth {
        fm.check_param("truth", u.len())?;
    }

    let mapped_deviations = fm.a() * ens.deviations();
    let mut misfits = fm.a() * ens.particles();
    for mut col in misfits.column_iter_mut() {
        col -= y_dagger;
    }
    let w_dev = fm.gamma_inv_sqrt() * &mapped_deviations;
    let w_mis = fm.gamma_inv_sqrt() * &misfits;
    let e = w_dev.tr_mul(&w_dev);
    let d = w_mis.tr_mul(&w_dev);
    let deviation_norms = DVector::from_iterator(ens.size(), ens.deviations().column_iter().map(|c| c.norm()));

    let (r, f, mapped_residuals, residual_norms) = match u_truth {
        Some(u) => {
            let mut residuals = ens.particles().clone();
            for mut col in residuals.column_iter_mut() {
                col -= u;
            }
            let mapped = fm.a() * &residuals;
            let w_res = fm.gamma_inv_sqrt() * &mapped;
            let norms = DVector::from_iterator(ens.size(), residuals.column_iter().map(|c| c.norm()));
            (
                Some(w_res.tr_mul(&w_res)),
                Some(w_res.tr_mul(&w_dev)),
                Some(mapped),
                Some(norms),
            )
        }
        None => (None, None, None, None),
    };

    Ok(Diagnostics {
        e,
        d,
        r,
        f,
        misfits,
        mapped_deviations,
        mapped_residuals,
        deviation_norms,
        residual_norms,
    })
}
