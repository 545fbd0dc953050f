use eki::{compute_diagnostics, Ensemble, LinearForwardModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd(k: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(k, k).prop_map(move |b| &b * b.transpose() + DMatrix::identity(k, k) * 0.5)
}

/// (particles d×J, A K×d, Γ K×K, y, u†)
fn problem() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    (1usize..8, 2usize..7, 1usize..6).prop_flat_map(|(d, j, k)| {
        (
            matrix(d, j),
            matrix(k, d),
            spd(k),
            prop::collection::vec(-3.0..3.0f64, k).prop_map(DVector::from_vec),
            prop::collection::vec(-3.0..3.0f64, d).prop_map(DVector::from_vec),
        )
    })
}

fn explicit_covariance(p: &DMatrix<f64>) -> DMatrix<f64> {
    let j = p.ncols() as f64;
    let mean = p.column_mean();
    let mut c = DMatrix::zeros(p.nrows(), p.nrows());
    for col in p.column_iter() {
        let e = col - &mean;
        c += &e * e.transpose();
    }
    c / j
}

proptest! {
    #[test]
    fn deviations_sum_to_zero(p in (1usize..20, 2usize..10).prop_flat_map(|(d, j)| matrix(d, j))) {
        let ens = Ensemble::from_matrix(p.clone()).unwrap();
        let scale = p.amax().max(1.0);
        let sums = ens.deviations().column_sum();
        prop_assert!(sums.amax() <= 1e-12 * scale);
    }

    #[test]
    fn covariance_apply_matches_explicit_matrix(
        (p, v) in (1usize..=50, 2usize..8).prop_flat_map(|(d, j)| (matrix(d, j), prop::collection::vec(-2.0..2.0f64, d)))
    ) {
        let ens = Ensemble::from_matrix(p.clone()).unwrap();
        let v = DVector::from_vec(v);
        let got = ens.covariance_apply(&v).unwrap();
        let want = explicit_covariance(&p) * &v;
        prop_assert!((&got - &want).amax() <= 1e-10 * want.amax().max(1.0));
    }

    #[test]
    fn diagnostics_invariants((p, a, g, y, u) in problem()) {
        let fm = LinearForwardModel::new(a.clone(), g).unwrap();
        // magnitude of the terms entering Au⁽ʲ⁾ − y and A(u⁽ʲ⁾ − u†)
        let size = (a.abs().column_sum().amax() * (p.amax() + u.amax()) + y.amax()).max(1.0);
        let ens = Ensemble::from_matrix(p).unwrap();
        let diag = compute_diagnostics(&ens, &fm, &y, Some(&u)).unwrap();
        let e = &diag.e;
        let scale = e.amax().max(1.0);
        prop_assert!((e - e.transpose()).amax() <= 1e-12 * scale);
        let eig = e.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() >= -1e-10 * scale);
        let rank = eig.eigenvalues.iter().filter(|&&l| l > 1e-9 * scale).count();
        prop_assert!(rank <= (ens.size() - 1).min(fm.obs_dim()));
        // row sums of D vanish
        let dnorm = diag.d.amax().max(1e-300);
        for row in diag.d.row_iter() {
            prop_assert!(row.sum().abs() <= 1e-10 * dnorm.max(1.0));
        }
        // ϑ⁽ʲ⁾ = Ar⁽ʲ⁾ − η† with η† = y − Au†
        let eta = &y - &a * &u;
        let ar = diag.mapped_residuals().unwrap();
        for (j, th) in diag.misfits.column_iter().enumerate() {
            let rebuilt = ar.column(j) - &eta;
            prop_assert!((th - rebuilt).amax() <= 1e-12 * size);
        }
    }

    #[test]
    fn gamma_norm_matches_quadratic_form((g, v) in (1usize..7).prop_flat_map(|k| (spd(k), prop::collection::vec(-3.0..3.0f64, k)))) {
        let k = g.nrows();
        let fm = LinearForwardModel::new(DMatrix::identity(k, 1), g.clone()).unwrap();
        let v = DVector::from_vec(v);
        let quad = v.dot(&(g.lu().solve(&v).unwrap()));
        prop_assert!((fm.norm_sq(&v) - quad).abs() <= 1e-10 * quad.abs().max(1e-12));
    }
}

#[test]
fn empirical_mean_by_hand() {
    let ens = Ensemble::new(vec![
        DVector::from_vec(vec![1.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0]),
        DVector::from_vec(vec![2.0, 2.0]),
    ])
    .unwrap();
    assert_eq!(ens.empirical_mean(), &DVector::from_vec(vec![1.0, 1.0]));
}

#[test]
fn covariance_of_pair() {
    let ens = Ensemble::new(vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)]).unwrap();
    assert_eq!(ens.covariance_apply(&DVector::from_element(1, 1.0)).unwrap()[0], 1.0);
    // orthogonal to the deviations
    let ens = Ensemble::new(vec![DVector::from_vec(vec![0.0, 5.0]), DVector::from_vec(vec![2.0, 5.0])]).unwrap();
    assert_eq!(
        ens.covariance_apply(&DVector::from_vec(vec![0.0, 1.0])).unwrap(),
        DVector::zeros(2)
    );
}

#[test]
fn ragged_and_empty_ensembles_rejected() {
    assert!(Ensemble::new(vec![]).is_err());
    assert!(Ensemble::new(vec![DVector::zeros(2), DVector::zeros(3)]).is_err());
}

#[test]
fn asymmetric_gamma_rejected() {
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(LinearForwardModel::new(DMatrix::identity(2, 2), g).is_err());
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(LinearForwardModel::new(DMatrix::identity(2, 2), g).is_err());
}
