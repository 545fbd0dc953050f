use eki::dynamics::{default_snapshot_grid, discrete_step, integrate, vector_field, IntegratorSettings};
use eki::linalg::loglog_slope;
use eki::rng::{stream, Purpose};
use eki::{EkiError, Ensemble, LinearForwardModel, PreparedRule, RuleKind, SpectralE, StoppingRule};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, Purpose::Coefficients, 99);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_problem(d: usize, k: usize, j: usize, seed: u64) -> (Ensemble, LinearForwardModel, DVector<f64>) {
    let a = gaussian_matrix(k, d, seed);
    let b = gaussian_matrix(k, k, seed + 1);
    let gamma = &b * b.transpose() * 0.1 + DMatrix::identity(k, k) * 0.2;
    let fm = LinearForwardModel::new(a, gamma).unwrap();
    let ens = Ensemble::from_matrix(gaussian_matrix(d, j, seed + 2)).unwrap();
    let y = gaussian_matrix(k, 1, seed + 3).column(0).into_owned();
    (ens, fm, y)
}

fn scalar_pair() -> (Ensemble, LinearForwardModel) {
    let ens = Ensemble::new(vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)]).unwrap();
    let fm = LinearForwardModel::with_scalar_noise(DMatrix::from_element(1, 1, 1.0), 1.0).unwrap();
    (ens, fm)
}

#[test]
fn discrete_increment_converges_to_field_at_first_order() {
    let (ens, fm, y) = random_problem(6, 4, 5, 11);
    let field = vector_field(&ens, &fm, &y).unwrap();
    let gap = |h: f64| {
        let next = discrete_step(&ens, &fm, &y, h).unwrap();
        (0..ens.size())
            .map(|j| ((next.particle(j) - ens.particle(j)) / h - &field[j]).amax())
            .fold(0.0, f64::max)
    };
    let hs = [1e-4, 5e-5, 2.5e-5, 1.25e-5];
    let gaps: Vec<f64> = hs.iter().map(|&h| gap(h)).collect();
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.9..=2.1).contains(&ratio), "gaps {gaps:?}");
    }
}

#[test]
fn field_is_preconditioned_gradient_descent() {
    // du/dt = −C(u) ∇Φ(u), Φ(u) = ½‖Γ^{-1/2}(y − Au)‖²
    let (ens, fm, y) = random_problem(5, 3, 4, 21);
    let phi = |u: &DVector<f64>| 0.5 * fm.norm_sq(&(&y - fm.apply(u)));
    let field = vector_field(&ens, &fm, &y).unwrap();
    let eps = 1e-5;
    for j in 0..ens.size() {
        let u = ens.particle(j);
        let grad = DVector::from_fn(u.len(), |i, _| {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += eps;
            dn[i] -= eps;
            (phi(&up) - phi(&dn)) / (2.0 * eps)
        });
        let want = -ens.covariance_apply(&grad).unwrap();
        let err = (&field[j] - &want).amax() / want.amax();
        assert!(err < 1e-6, "particle {j}: {err:e}");
    }
}

#[test]
fn symmetric_pair_at_data_keeps_mean() {
    let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 0.0, 2.0, 1.0]);
    let fm = LinearForwardModel::with_scalar_noise(a, 0.3).unwrap();
    let mean = DVector::from_vec(vec![0.3, -0.2, 1.0]);
    let offset = DVector::from_vec(vec![1.0, 0.5, -0.5]);
    let ens = Ensemble::new(vec![&mean + &offset, &mean - &offset]).unwrap();
    let y = fm.apply(&mean);
    let settings = IntegratorSettings::new(100.0).with_snapshots(default_snapshot_grid(100.0, 40, 1e-3));
    let traj = integrate(&ens, &fm, &y, &settings, &[], None).unwrap();
    for s in &traj.snapshots {
        assert!(s.data_residual <= 1e-8, "t = {}: {}", s.t, s.data_residual);
    }
}

#[test]
fn scalar_collapse_matches_closed_form() {
    let (ens, fm) = scalar_pair();
    let y = DVector::from_element(1, 1.0);
    let mut settings = IntegratorSettings::new(10.0).with_snapshots(vec![0.0, 10.0]);
    settings.record_matrices = true;
    let traj = integrate(&ens, &fm, &y, &settings, &[], None).unwrap();
    let e0 = traj.snapshots[0].e_matrix.clone().unwrap();
    let oracle = SpectralE::new(&e0).unwrap();
    let got = traj.snapshots[1].e_matrix.as_ref().unwrap()[(0, 0)];
    let want = oracle.closed_form_e(10.0).unwrap()[(0, 0)];
    // E₁₁ = λ(t)/2 with λ(t) = (t + 1/2)⁻¹
    assert!((want - 0.5 / 10.5).abs() < 1e-14);
    assert!((got - want).abs() <= 1e-6 * want);
}

#[test]
fn noise_free_full_span_misfit_decays_algebraically() {
    let (ens, fm, _) = random_problem(6, 3, 5, 31);
    let truth = gaussian_matrix(6, 1, 77).column(0).into_owned();
    let y = fm.apply(&truth);
    let settings = IntegratorSettings::new(1e3).with_snapshots(default_snapshot_grid(1e3, 60, 1e-2));
    let traj = integrate(&ens, &fm, &y, &settings, &[], Some(&truth)).unwrap();
    assert_eq!(traj.split.dim_par(), 3);
    let late: Vec<_> = traj.snapshots.iter().filter(|s| s.t >= 10.0).collect();
    let t: Vec<f64> = late.iter().map(|s| s.t).collect();
    let par: Vec<f64> = late.iter().map(|s| s.misfit_par_sq.iter().sum::<f64>()).collect();
    let slope = loglog_slope(&t, &par).unwrap();
    assert!(slope < -0.5, "slope {slope}");
}

#[test]
fn discrepancy_crossing_matches_analytic_time() {
    // particles {0, 2}, y = 3: |ū − y| = 2/√(2t + 1), threshold 0.2 ⇒ t = 49.5
    let (ens, fm) = scalar_pair();
    let y = DVector::from_element(1, 3.0);
    let rule = PreparedRule::new(StoppingRule::discrepancy(1.2).with_threshold(0.2), &fm).unwrap();
    let settings = IntegratorSettings::new(100.0).with_tolerances(1e-10, 1e-12);
    let traj = integrate(&ens, &fm, &y, &settings, &[rule], None).unwrap();
    let t = traj.stop_time(RuleKind::Discrepancy).unwrap();
    assert!((t - 49.5).abs() <= 1e-3, "crossing at {t}");
    // crossing snapshot recorded in time order
    assert!(traj.times().contains(&t));
    assert!(traj.times().windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn non_finite_field_aborts() {
    let (ens, fm) = scalar_pair();
    let y = DVector::from_element(1, 1e308);
    let err = integrate(&ens, &fm, &y, &IntegratorSettings::new(1.0), &[], None).unwrap_err();
    assert!(matches!(err, EkiError::NonFinite { .. }), "{err}");
}

#[test]
fn snapshot_count_matches_grid() {
    let (ens, fm, y) = random_problem(4, 3, 3, 41);
    let grid = default_snapshot_grid(50.0, 30, 1e-3);
    let settings = IntegratorSettings::new(50.0).with_snapshots(grid.clone());
    let traj = integrate(&ens, &fm, &y, &settings, &[], None).unwrap();
    assert_eq!(traj.times(), grid);
}

/// Finite differences of recorded `‖Ar⁽ʲ⁾‖²_Γ` against `−(2/J) Σₖ D_jk F_jk`.
#[test]
fn mapped_residual_rate_identity() {
    let (ens, fm, y) = random_problem(6, 4, 5, 51);
    let truth = gaussian_matrix(6, 1, 52).column(0).into_owned();
    let centers = [0.05, 0.3, 1.0, 4.0, 20.0];
    let mut times = vec![0.0];
    for c in centers {
        times.extend([c * (1.0 - 1e-3), c, c * (1.0 + 1e-3)]);
    }
    let settings = IntegratorSettings::new(25.0)
        .with_snapshots(times)
        .with_tolerances(1e-12, 1e-14);
    let traj = integrate(&ens, &fm, &y, &settings, &[], Some(&truth)).unwrap();
    for i in 0..centers.len() {
        let (lo, mid, hi) = (&traj.snapshots[1 + 3 * i], &traj.snapshots[2 + 3 * i], &traj.snapshots[3 + 3 * i]);
        let rates = mid.mapped_residual_rate.as_ref().unwrap();
        let (a, b) = (lo.mapped_residual_sq.as_ref().unwrap(), hi.mapped_residual_sq.as_ref().unwrap());
        let scale = rates.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        for j in 0..ens.size() {
            let fd = 0.5 * (b[j] - a[j]) / (hi.t - lo.t);
            assert!((fd - rates[j]).abs() <= 1e-4 * scale, "t = {}, j = {j}: {fd} vs {}", mid.t, rates[j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn trajectory_invariants(seed in 0u64..10_000, d in 3usize..8, k in 2usize..6, j in 2usize..6) {
        let (ens, fm, y) = random_problem(d, k, j, seed);
        let settings = IntegratorSettings::new(100.0).with_snapshots(default_snapshot_grid(100.0, 25, 1e-3));
        let traj = integrate(&ens, &fm, &y, &settings, &[], None).unwrap();
        // subspace property: particles stay in span{u⁽ʲ⁾(0)}
        let q = ens.particles().clone().svd(true, false);
        let smax = q.singular_values.max();
        let u = q.u.unwrap();
        let rank = q.singular_values.iter().filter(|&&s| s > 1e-12 * smax).count();
        let basis = u.columns(0, rank);
        let fin = traj.final_ensemble.particles();
        for col in fin.column_iter() {
            let rem = col - &basis * basis.tr_mul(&col);
            prop_assert!(rem.norm() <= 1e-8 * col.norm().max(1e-300));
        }
        // ‖ϑ⁽ʲ⁾‖_Γ non-increasing and ϑ⊥ frozen
        for w in traj.snapshots.windows(2) {
            for jj in 0..j {
                prop_assert!(w[1].misfit_sq[jj] <= w[0].misfit_sq[jj] * (1.0 + 1e-7) + 1e-12);
            }
        }
        let m0 = traj.snapshots[0].misfit_sq.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
        for s in &traj.snapshots {
            for &drift in &s.misfit_perp_drift {
                prop_assert!(drift <= 1e-6 * m0.max(1e-300));
            }
            // discrepancy boundedness
            let r = s.data_residual;
            prop_assert!(r.is_finite());
        }
        // ‖E(t)‖ ≤ J/(2t)
        for s in traj.snapshots.iter().filter(|s| s.t > 0.0) {
            prop_assert!(s.e_norm <= j as f64 / (2.0 * s.t) * (1.0 + 1e-6));
        }
    }
}
