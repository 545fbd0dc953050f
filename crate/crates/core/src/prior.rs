//! Karhunen–Loève prior `C₀ = s(−Δ)⁻¹` on `(0, π)` and the initial-ensemble
//! constructions.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, LinearForwardModel};
use crate::error::{ensure, EkiError, Result};
use crate::spectral::build_split;

/// Relative tolerance of the span postconditions.
pub const SPAN_TOL: f64 = 1e-8;
/// Coefficient draws whose normalizing denominator is this close to zero are rejected.
pub const DENOMINATOR_TOL: f64 = 1e-8;

/// Eigenpairs `λ_j = s/j²`, `z_j(x) = √(2/π) sin(jx)` at the mesh nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    eigenvalues: Vec<f64>,
    /// `d × count`, column `j − 1` holds `z_j`.
    eigenfunctions: DMatrix<f64>,
}

impl KlBasis {
    pub fn new(nodes: &[f64], count: usize, scale: f64) -> Result<Self> {
        ensure!(count >= 1, InvalidInput, "need at least one mode");
        ensure!(scale > 0.0 && scale.is_finite(), InvalidInput, "prior scale must be positive, got {scale}");
        ensure!(!nodes.is_empty(), InvalidInput, "need at least one node");
        let eigenvalues = (1..=count).map(|j| scale / (j * j) as f64).collect();
        let norm = (2.0 / PI).sqrt();
        let eigenfunctions = DMatrix::from_fn(nodes.len(), count, |i, j| norm * ((j + 1) as f64 * nodes[i]).sin());
        Ok(Self {
            eigenvalues,
            eigenfunctions,
        })
    }

    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.eigenfunctions.nrows()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `z_j` for `j = 1..=count`.
    pub fn eigenfunction(&self, j: usize) -> DVector<f64> {
        self.eigenfunctions.column(j - 1).into_owned()
    }

    /// A draw `Σⱼ √λ_j ξ_j z_j` from the truncated prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let coeffs = DVector::from_iterator(
            self.count(),
            self.eigenvalues.iter().map(|l| l.sqrt() * rng.sample::<f64, _>(StandardNormal)),
        );
        &self.eigenfunctions * coeffs
    }
}

/// Particle `j` is `√λ_j ζ_j z_j` with independent standard normal `ζ_j`.
pub fn kl_ensemble<R: Rng + ?Sized>(basis: &KlBasis, j: usize, rng: &mut R) -> Result<Ensemble> {
    ensure!(j >= 2, InvalidConfiguration, "ensemble size must be at least 2, got {j}");
    ensure!(
        j <= basis.count(),
        InvalidConfiguration,
        "ensemble size {j} exceeds the {} retained modes",
        basis.count()
    );
    let particles = (1..=j)
        .map(|m| basis.eigenfunction(m) * (basis.eigenvalues[m - 1].sqrt() * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ensemble::new(particles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleStrategy {
    Kl,
    AdaptiveTruth,
    AdaptiveLsq,
}

impl EnsembleStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::AdaptiveTruth => "adaptive_truth",
            Self::AdaptiveLsq => "adaptive_lsq",
        }
    }
}

fn denominator(alpha: &[f64]) -> f64 {
    let j = alpha.len() as f64;
    1.0 - alpha[0] + alpha.iter().sum::<f64>() / j
}

/// `α ∈ [−1, 1]ᴶ` i.i.d. uniform, redrawn while the denominator is degenerate.
pub fn draw_alpha<R: Rng + ?Sized>(j: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let alpha: Vec<f64> = (0..j).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if denominator(&alpha).abs() >= DENOMINATOR_TOL {
            return alpha;
        }
    }
}

/// Prepends `u⁽¹⁾` to `base = [u⁽²⁾, …, u⁽ᴶ⁾]` so that
/// `u⁽¹⁾ − target = Σₖ α_k e⁽ᵏ⁾` for the resulting ensemble.
pub fn adaptive_ensemble(base: &[DVector<f64>], alpha: &[f64], target: &DVector<f64>) -> Result<Ensemble> {
    let jn = base.len() + 1;
    ensure!(jn >= 2, InvalidConfiguration, "need at least one base particle");
    ensure!(
        alpha.len() == jn,
        InvalidInput,
        "need {jn} coefficients, got {}",
        alpha.len()
    );
    ensure!(
        base.iter().all(|u| u.len() == target.len()),
        InvalidInput,
        "base particles and target must share a dimension"
    );
    let denom = denominator(alpha);
    ensure!(
        denom.abs() >= DENOMINATOR_TOL,
        InvalidConfiguration,
        "normalizing denominator {denom:e} is too close to zero"
    );
    let j = jn as f64;
    let tail_sum = base.iter().fold(DVector::zeros(target.len()), |acc, u| acc + u);
    let mut numerator = target - &tail_sum * (alpha[0] / j);
    for (u, &a) in base.iter().zip(&alpha[1..]) {
        numerator += u * a - &tail_sum * (a / j);
    }
    let mut particles = Vec::with_capacity(jn);
    particles.push(numerator / denom);
    particles.extend(base.iter().cloned());
    Ensemble::new(particles)
}

/// `‖v⊥‖_Γ ≤ SPAN_TOL · ‖v‖_Γ` with respect to the ensemble's own split.
fn check_in_span(ens: &Ensemble, fm: &LinearForwardModel, v: &DVector<f64>, what: &str) -> Result<()> {
    let split = build_split(ens, fm)?;
    let (par, perp) = split.norms_sq(v)?;
    let total = (par + perp).sqrt();
    if perp.sqrt() > SPAN_TOL * total {
        return Err(EkiError::Postcondition(format!(
            "{what} leaves the span of the mapped deviations: ‖perp‖ = {:e}, ‖total‖ = {total:e}",
            perp.sqrt()
        )));
    }
    Ok(())
}

/// Adaptive construction towards the truth; checks `Ar⁽¹⁾ ∈ 𝒴‖`.
pub fn adaptive_truth_ensemble(
    base: &[DVector<f64>],
    alpha: &[f64],
    u_truth: &DVector<f64>,
    fm: &LinearForwardModel,
) -> Result<Ensemble> {
    fm.check_param("truth", u_truth.len())?;
    let ens = adaptive_ensemble(base, alpha, u_truth)?;
    let mapped = fm.apply(&(ens.particle(0) - u_truth));
    check_in_span(&ens, fm, &mapped, "mapped residual of the first particle")?;
    Ok(ens)
}

/// Minimum-norm minimiser of `‖y − Au‖_Γ` via the SVD of `Γ^{-1/2}A`,
/// discarding singular values below `1e-10` times the largest.
pub fn min_norm_least_squares(fm: &LinearForwardModel, y: &DVector<f64>) -> Result<DVector<f64>> {
    fm.check_obs("data", y.len())?;
    let svd = fm.whitened().clone().svd(true, true);
    let eps = 1e-10 * svd.singular_values.max();
    svd.solve(&fm.whiten(y), eps)
        .map_err(|e| EkiError::InvalidInput(format!("least-squares solve failed: {e}")))
}

/// Adaptive construction towards the least-squares solution; checks `ϑ⁽¹⁾ ∈ 𝒴‖`.
pub fn adaptive_lsq_ensemble(
    base: &[DVector<f64>],
    alpha: &[f64],
    fm: &LinearForwardModel,
    y_dagger: &DVector<f64>,
) -> Result<Ensemble> {
    let u_tilde = min_norm_least_squares(fm, y_dagger)?;
    let ens = adaptive_ensemble(base, alpha, &u_tilde)?;
    let misfit = fm.apply(&ens.particle(0)) - y_dagger;
    check_in_span(&ens, fm, &misfit, "misfit of the first particle")?;
    Ok(ens)
}
