//! Quick oracle checks behind `eki verify`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{discrete_step, integrate, IntegratorSettings};
use crate::elliptic::FemDiscretization;
use crate::ensemble::{Ensemble, LinearForwardModel};
use crate::error::Result;
use crate::experiment::{prepare_run, ExperimentConfig, Problem};
use crate::spectral::SpectralE;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Integrated `E(t)` against its closed form for the default J = 5 problem.
pub fn closed_form_collapse() -> Result<Check> {
    let cfg = ExperimentConfig::default();
    let problem = Problem::new(&cfg)?;
    let inputs = prepare_run(&cfg, &problem, 0, 0)?;
    let times = [0.0, 0.1, 1.0, 10.0, 100.0];
    let mut settings = IntegratorSettings::new(100.0)
        .with_snapshots(times.to_vec())
        .with_tolerances(1e-10, 1e-12);
    settings.record_matrices = true;
    let traj = integrate(&inputs.ensemble, &problem.fm, &inputs.y, &settings, &[], None)?;
    let e0 = traj.snapshots[0].e_matrix.clone().expect("matrices recorded");
    let oracle = SpectralE::new(&e0)?;
    let mut worst: f64 = 0.0;
    for snap in &traj.snapshots[1..] {
        let exact = oracle.closed_form_e(snap.t)?;
        let got = snap.e_matrix.as_ref().expect("matrices recorded");
        worst = worst.max((got - &exact).norm() / exact.norm());
    }
    Ok(Check {
        name: "closed-form collapse",
        passed: worst <= 1e-6,
        detail: format!("max relative Frobenius error {worst:.3e}"),
    })
}

/// L² error ratios of the `sin x` manufactured solution under refinement.
pub fn fem_convergence() -> Result<Check> {
    let mut errors = Vec::new();
    for n in [32, 64, 128, 256] {
        let disc = FemDiscretization::new(n)?;
        let p = disc.solve_pde(&disc.interpolate(f64::sin))?;
        errors.push(disc.l2_error(&p, |x| 0.5 * x.sin())?);
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(Check {
        name: "FEM convergence",
        passed: ratios.iter().all(|r| (r - 4.0).abs() <= 0.4),
        detail: format!("error ratios {ratios:.4?}"),
    })
}

/// Gap between `N` discrete steps of size `1/N` and the flow at `T = 1`.
pub fn discrete_gap(ens: &Ensemble, fm: &LinearForwardModel, y: &DVector<f64>, n: usize) -> Result<f64> {
    let settings = IntegratorSettings::new(1.0)
        .with_snapshots(vec![1.0])
        .with_tolerances(1e-12, 1e-14);
    let flow = integrate(ens, fm, y, &settings, &[], None)?;
    let mut disc = ens.clone();
    for _ in 0..n {
        disc = discrete_step(&disc, fm, y, 1.0 / n as f64)?;
    }
    Ok((disc.particles() - flow.final_ensemble.particles()).amax())
}

/// First-order agreement of the discrete iteration with the flow.
pub fn discrete_to_continuum() -> Result<Check> {
    let ens = Ensemble::new(vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)])?;
    let fm = LinearForwardModel::with_scalar_noise(DMatrix::from_element(1, 1, 1.0), 1.0)?;
    let y = DVector::from_element(1, 1.0);
    let gaps = [64, 128, 256, 512]
        .into_iter()
        .map(|n| discrete_gap(&ens, &fm, &y, n))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(Check {
        name: "discrete-to-continuum order",
        passed: ratios.iter().all(|r| (1.8..=2.2).contains(r)),
        detail: format!("gap ratios {ratios:.4?}"),
    })
}

pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![closed_form_collapse()?, fem_convergence()?, discrete_to_continuum()?])
}
