use eki::linalg::logspace;
use eki::rng::{stream, Purpose};
use eki::spectral::build_split;
use eki::stopping::{threshold, triggered};
use eki::{compute_diagnostics, Ensemble, LinearForwardModel, PreparedRule, SpectralE, StoppingRule};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, Purpose::Coefficients, 7);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Classical RK4 on `dλ/dt = −(2/J)λ²` in `s = ln(1 + t)`.
fn rk4_eigenvalue(l0: f64, j: f64, t_end: f64) -> f64 {
    let f = |s: f64, l: f64| -(2.0 / j) * l * l * s.exp();
    let n = 20_000;
    let hs = (1.0 + t_end).ln() / n as f64;
    let mut l = l0;
    for i in 0..n {
        let s = i as f64 * hs;
        let k1 = f(s, l);
        let k2 = f(s + hs / 2.0, l + hs / 2.0 * k1);
        let k3 = f(s + hs / 2.0, l + hs / 2.0 * k2);
        let k4 = f(s + hs, l + hs * k3);
        l += hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    l
}

fn gram(seed: u64, j: usize, k: usize) -> DMatrix<f64> {
    let images = gaussian(k, j, seed);
    let mean = images.column_mean();
    let mut dev = images;
    for mut c in dev.column_iter_mut() {
        c -= &mean;
    }
    dev.tr_mul(&dev)
}

#[test]
fn closed_form_matches_independent_scalar_ode() {
    let e0 = gram(3, 5, 15);
    let spec = SpectralE::new(&e0).unwrap();
    for t in [0.1, 1.0, 10.0, 100.0] {
        let got = spec.eigenvalues_at(t).unwrap();
        for (i, &l0) in spec.initial_eigenvalues().iter().enumerate() {
            let want = rk4_eigenvalue(l0, 5.0, t);
            assert!((got[i] - want).abs() <= 1e-8 * want.max(1e-300), "t = {t}: {} vs {want}", got[i]);
        }
    }
}

#[test]
fn unit_eigenvalues_collapse_with_slope_minus_one() {
    let spec = SpectralE::new(&DMatrix::identity(5, 5)).unwrap();
    let grid = logspace(10.0, 1e4, 30);
    // λ(t) = (2t/5 + 1)⁻¹ still carries the offset at t = 10
    let slope = spec.collapse_rate(&grid).unwrap();
    assert!((slope + 1.0).abs() < 0.03, "{slope}");
    assert!((spec.collapse_rate(&logspace(1e3, 1e4, 30)).unwrap() + 1.0).abs() < 3e-3);
    // single nonzero eigenvalue
    let mut e = DMatrix::zeros(3, 3);
    e[(0, 0)] = 4.0;
    let spec = SpectralE::new(&e).unwrap();
    assert!((spec.collapse_rate(&grid).unwrap() + 1.0).abs() < 0.03);
    for t in [0.5, 3.0, 77.0] {
        assert!((spec.norm_at(t).unwrap() - 1.0 / (2.0 * t / 3.0 + 0.25)).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn norm_bound_holds(seed in 0u64..1000, j in 2usize..10, t in 1e-3..1e4f64) {
        let spec = SpectralE::new(&gram(seed, j, 6)).unwrap();
        prop_assert!(spec.norm_at(t).unwrap() <= j as f64 / (2.0 * t) * (1.0 + 1e-12));
    }

    #[test]
    fn split_is_gamma_orthonormal_and_projects(seed in 0u64..1000, j in 2usize..7, k in 2usize..9) {
        let d = 10;
        let a = gaussian(k, d, seed);
        let b = gaussian(k, k, seed + 1);
        let g = &b * b.transpose() + DMatrix::identity(k, k);
        let fm = LinearForwardModel::new(a, g.clone()).unwrap();
        let ens = Ensemble::from_matrix(gaussian(d, j, seed + 2)).unwrap();
        let split = build_split(&ens, &fm).unwrap();
        prop_assert_eq!(split.dim_par(), (j - 1).min(k));
        let basis = split.basis();
        let gram = basis.transpose() * g.clone().lu().solve(basis).unwrap();
        prop_assert!((gram - DMatrix::identity(split.dim_par(), split.dim_par())).amax() <= 1e-10);
        let v = gaussian(k, 1, seed + 3).column(0).into_owned();
        let (par, perp) = split.project(&v).unwrap();
        prop_assert!((&par + &perp - &v).amax() <= 1e-12 * v.amax());
        for col in basis.column_iter() {
            prop_assert!(fm.inner(&perp, &col.into_owned()).abs() <= 1e-10 * v.norm());
        }
        let (par2, perp2) = split.project(&par).unwrap();
        prop_assert!(perp2.amax() <= 1e-10 * v.norm());
        prop_assert!((par2 - &par).amax() <= 1e-10 * v.norm());
        if split.dim_par() < k {
            let (par3, _) = split.project(&perp).unwrap();
            prop_assert!(par3.amax() <= 1e-10 * v.norm());
        }
    }

    #[test]
    fn rules_are_pure(seed in 0u64..1000, t in 0.0..5.0f64) {
        let a = gaussian(3, 4, seed);
        let fm = LinearForwardModel::with_scalar_noise(a, 0.01).unwrap();
        let mean = gaussian(4, 1, seed + 1).column(0).into_owned();
        let y = gaussian(3, 1, seed + 2).column(0).into_owned();
        for rule in [
            StoppingRule::bayesian(1.0),
            StoppingRule::discrepancy(1.2),
            StoppingRule::symmetrized(1.2),
            StoppingRule::modified(1.2, 1e-2),
        ] {
            let first = triggered(&rule, &mean, &fm, &y, t).unwrap();
            prop_assert_eq!(first, triggered(&rule, &mean, &fm, &y, t).unwrap());
        }
    }
}

#[test]
fn generic_ensemble_has_full_split() {
    let fm = LinearForwardModel::with_scalar_noise(gaussian(15, 30, 1), 1e-4).unwrap();
    let ens = Ensemble::from_matrix(gaussian(30, 5, 2)).unwrap();
    assert_eq!(build_split(&ens, &fm).unwrap().dim_par(), 4);
}

#[test]
fn hand_split_of_antisymmetric_pair() {
    let fm = LinearForwardModel::with_scalar_noise(DMatrix::identity(2, 2), 1.0).unwrap();
    let ens = Ensemble::new(vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0])]).unwrap();
    let split = build_split(&ens, &fm).unwrap();
    assert_eq!(split.dim_par(), 1);
    assert!((split.basis()[(0, 0)].abs() - 1.0).abs() < 1e-15);
    assert_eq!(split.basis()[(1, 0)], 0.0);
    let (par, perp) = split.project(&DVector::from_vec(vec![0.0, 3.0])).unwrap();
    assert_eq!(par, DVector::zeros(2));
    assert_eq!(perp, DVector::from_vec(vec![0.0, 3.0]));
}

#[test]
fn default_discrepancy_threshold() {
    let fm = LinearForwardModel::with_scalar_noise(DMatrix::identity(15, 15), 1e-4).unwrap();
    let th = threshold(&StoppingRule::discrepancy(1.2), &fm).unwrap().unwrap();
    assert!((th - 1.2 * (15.0f64 * 1e-4).sqrt()).abs() < 1e-15);
    assert!((th - 0.046476).abs() < 1e-6);
}

/// `‖(λI + N)^{-1/2} A*Γ⁻¹(Aū − y)‖ → ‖N^{-1/2}(Nū − A*Γ⁻¹y)‖` as `λ → 0`.
#[test]
fn modified_rule_small_lambda_limit() {
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.5, 3.0, 1.0, -1.0, 0.0, 1.5]);
    let g = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]);
    let fm = LinearForwardModel::new(a.clone(), g.clone()).unwrap();
    let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
    let y = DVector::from_vec(vec![1.0, 2.0, -0.5]);
    // independent oracle with explicit inverses
    let g_inv = g.try_inverse().unwrap();
    let n = a.transpose() * &g_inv * &a;
    let eig = n.clone().symmetric_eigen();
    let n_inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|m| m.sqrt().recip()))
        * eig.eigenvectors.transpose();
    let limit = (n_inv_sqrt * (&n * &mean - a.transpose() * &g_inv * &y)).norm();
    let gaps: Vec<f64> = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&lambda| {
            let rule = PreparedRule::new(StoppingRule::modified(1.2, lambda), &fm).unwrap();
            (rule.residual(&mean, &fm, &y).unwrap() - limit).abs()
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] <= 1e-5 * limit, "{gaps:?}");
}

#[test]
fn exact_fit_triggers_residual_rules() {
    let a = gaussian(3, 5, 9);
    let fm = LinearForwardModel::with_scalar_noise(a, 1e-2).unwrap();
    let mean = gaussian(5, 1, 10).column(0).into_owned();
    let y = fm.apply(&mean);
    assert!(triggered(&StoppingRule::discrepancy(1.2), &mean, &fm, &y, 0.0).unwrap());
    assert!(triggered(&StoppingRule::modified(1.2, 1e-4), &mean, &fm, &y, 0.0).unwrap());
    assert!(!triggered(&StoppingRule::bayesian(1.0), &mean, &fm, &y, 0.999).unwrap());
    assert!(triggered(&StoppingRule::bayesian(1.0), &mean, &fm, &y, 1.0).unwrap());
}

#[test]
fn diagnostics_rank_bounded_by_ensemble() {
    let fm = LinearForwardModel::with_scalar_noise(gaussian(8, 12, 4), 0.1).unwrap();
    let ens = Ensemble::from_matrix(gaussian(12, 3, 5)).unwrap();
    let y = gaussian(8, 1, 6).column(0).into_owned();
    let diag = compute_diagnostics(&ens, &fm, &y, None).unwrap();
    let eig = diag.e.symmetric_eigen().eigenvalues;
    assert_eq!(eig.iter().filter(|&&l| l > 1e-9 * eig.amax()).count(), 2);
}
