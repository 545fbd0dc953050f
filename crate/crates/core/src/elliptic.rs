//! P1 finite elements for `−p″ + p = u` on `(0, π)` with `p(0) = p(π) = 0`,
//! pointwise observation and the Gaussian noise model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::spectral::SubspaceSplit;

/// Uniform mesh with `n_cells` cells; unknowns are the `n_cells − 1`
/// interior nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct FemDiscretization {
    n_cells: usize,
    h: f64,
    nodes: Vec<f64>,
    // S + M = L·diag(pivots)·Lᵀ with unit lower bidiagonal L
    pivots: Vec<f64>,
    lower: Vec<f64>,
}

impl FemDiscretization {
    pub fn new(n_cells: usize) -> Result<Self> {
        ensure!(n_cells >= 2, InvalidInput, "need at least 2 cells, got {n_cells}");
        let h = PI / n_cells as f64;
        let nodes = (1..n_cells).map(|i| i as f64 * h).collect();
        let (diag, off) = Self::system_coefficients(h);
        let n = n_cells - 1;
        let mut pivots = Vec::with_capacity(n);
        let mut lower = vec![0.0; n];
        pivots.push(diag);
        for i in 1..n {
            lower[i] = off / pivots[i - 1];
            pivots.push(diag - lower[i] * off);
        }
        Ok(Self {
            n_cells,
            h,
            nodes,
            pivots,
            lower,
        })
    }

    fn system_coefficients(h: f64) -> (f64, f64) {
        (2.0 / h + 4.0 * h / 6.0, -1.0 / h + h / 6.0)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Number of unknowns, `n_cells − 1`.
    pub fn dim(&self) -> usize {
        self.n_cells - 1
    }

    pub fn mesh_width(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Dense copy of the stiffness-plus-mass matrix.
    pub fn stiffness_plus_mass(&self) -> DMatrix<f64> {
        let (diag, off) = Self::system_coefficients(self.h);
        tridiagonal(self.dim(), diag, off)
    }

    /// Dense copy of the consistent mass matrix.
    pub fn mass(&self) -> DMatrix<f64> {
        tridiagonal(self.dim(), 4.0 * self.h / 6.0, self.h / 6.0)
    }

    pub fn mass_apply(&self, u: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let (a, b) = (4.0 * self.h / 6.0, self.h / 6.0);
        DVector::from_fn(n, |i, _| {
            let mut v = a * u[i];
            if i > 0 {
                v += b * u[i - 1];
            }
            if i + 1 < n {
                v += b * u[i + 1];
            }
            v
        })
    }

    /// Solves `(S + M)p = M u` with the cached factorization.
    pub fn solve_pde(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        ensure!(
            u.len() == self.dim(),
            InvalidInput,
            "source has {} coefficients, mesh has {} unknowns",
            u.len(),
            self.dim()
        );
        let mut x = self.mass_apply(u);
        let n = self.dim();
        for i in 1..n {
            x[i] -= self.lower[i] * x[i - 1];
        }
        for i in 0..n {
            x[i] /= self.pivots[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.lower[i + 1] * x[i + 1];
        }
        Ok(x)
    }

    /// Piecewise-linear interpolation of nodal values (with the boundary
    /// zeros) at each point.
    pub fn observe(&self, points: &[f64], p: &DVector<f64>) -> Result<DVector<f64>> {
        ensure!(p.len() == self.dim(), InvalidInput, "nodal vector has wrong length {}", p.len());
        let value = |i: usize| if i == 0 || i == self.n_cells { 0.0 } else { p[i - 1] };
        let out = points
            .iter()
            .map(|&x| {
                ensure!((0.0..=PI).contains(&x), InvalidInput, "observation point {x} outside the mesh");
                let mut s = x / self.h;
                if (s - s.round()).abs() < 1e-10 {
                    s = s.round();
                }
                let i = (s.floor() as usize).min(self.n_cells - 1);
                let frac = s - i as f64;
                Ok((1.0 - frac) * value(i) + frac * value(i + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(out))
    }

    /// Nodal interpolant of `f` at the interior nodes.
    pub fn interpolate(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.nodes.iter().map(|&x| f(x)))
    }

    /// `‖p_h − p‖_{L²(0,π)}` by three-point Gauss quadrature per cell.
    pub fn l2_error(&self, p: &DVector<f64>, exact: impl Fn(f64) -> f64) -> Result<f64> {
        ensure!(p.len() == self.dim(), InvalidInput, "nodal vector has wrong length {}", p.len());
        let gauss = [
            (-(0.6f64).sqrt(), 5.0 / 9.0),
            (0.0, 8.0 / 9.0),
            ((0.6f64).sqrt(), 5.0 / 9.0),
        ];
        let value = |i: usize| if i == 0 || i == self.n_cells { 0.0 } else { p[i - 1] };
        let mut total = 0.0;
        for c in 0..self.n_cells {
            let (left, right) = (value(c), value(c + 1));
            let x0 = c as f64 * self.h;
            for &(xi, w) in &gauss {
                let s = 0.5 * (xi + 1.0);
                let diff = (1.0 - s) * left + s * right - exact(x0 + s * self.h);
                total += 0.5 * self.h * w * diff * diff;
            }
        }
        Ok(total.sqrt())
    }
}

fn tridiagonal(n: usize, diag: f64, off: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => diag,
        1 => off,
        _ => 0.0,
    })
}

/// Observation points and scalar noise level `Γ = γI`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSetup {
    points: Vec<f64>,
    gamma: f64,
}

impl Default for ObservationSetup {
    fn default() -> Self {
        Self::equispaced(15, 1e-4).expect("default observation setup is valid")
    }
}

impl ObservationSetup {
    pub fn new(points: Vec<f64>, gamma: f64) -> Result<Self> {
        ensure!(!points.is_empty(), InvalidInput, "need at least one observation point");
        ensure!(
            points.iter().all(|&x| x > 0.0 && x < PI),
            InvalidInput,
            "observation points must lie strictly inside (0, π)"
        );
        ensure!(
            points.windows(2).all(|w| w[0] < w[1]),
            InvalidInput,
            "observation points must be strictly increasing"
        );
        ensure!(gamma >= 0.0 && gamma.is_finite(), InvalidInput, "gamma must be non-negative, got {gamma}");
        Ok(Self { points, gamma })
    }

    /// `x_k = kπ/(K+1)`, `k = 1..K`.
    pub fn equispaced(k: usize, gamma: f64) -> Result<Self> {
        ensure!(k >= 1, InvalidInput, "K must be at least 1");
        Self::new((1..=k).map(|i| i as f64 * PI / (k + 1) as f64).collect(), gamma)
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `A = 𝒪 ∘ G` as a dense `K × d` matrix, one solve per nodal basis vector.
pub fn assemble_a(disc: &FemDiscretization, setup: &ObservationSetup) -> Result<DMatrix<f64>> {
    let d = disc.dim();
    let mut a = DMatrix::zeros(setup.k(), d);
    let mut unit = DVector::zeros(d);
    for i in 0..d {
        unit[i] = 1.0;
        let col = disc.observe(setup.points(), &disc.solve_pde(&unit)?)?;
        a.set_column(i, &col);
        unit[i] = 0.0;
    }
    Ok(a)
}

/// `y† = Au† + η†` with `η† ~ N(0, γI)`.
pub fn make_data<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    u_truth: &DVector<f64>,
    gamma: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    ensure!(gamma >= 0.0 && gamma.is_finite(), InvalidInput, "gamma must be non-negative, got {gamma}");
    ensure!(
        u_truth.len() == a.ncols(),
        InvalidInput,
        "truth has dimension {} but A has {} columns",
        u_truth.len(),
        a.ncols()
    );
    let sd = gamma.sqrt();
    let eta = DVector::from_fn(a.nrows(), |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    Ok((a * u_truth + &eta, eta))
}

/// `N(0, γI)` noise Γ-projected onto the complement of the split.
pub fn orthogonal_noise<R: Rng + ?Sized>(split: &SubspaceSplit, gamma: f64, rng: &mut R) -> Result<DVector<f64>> {
    ensure!(
        split.dim_par() < split.obs_dim(),
        InvalidConfiguration,
        "orthogonal noise needs a non-trivial complement, but the initial mapped deviations span all of R^{}",
        split.obs_dim()
    );
    ensure!(gamma >= 0.0 && gamma.is_finite(), InvalidInput, "gamma must be non-negative, got {gamma}");
    let sd = gamma.sqrt();
    let raw = DVector::from_fn(split.obs_dim(), |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    Ok(split.project(&raw)?.1)
}
