//! The discrete ensemble Kalman update and its continuous-time limit.
//!
//! The continuous flow
//!
//! ```text
//! du⁽ʲ⁾/dt = (1/J) Σₖ ⟨Ae⁽ᵏ⁾, y† − Au⁽ʲ⁾⟩_Γ e⁽ᵏ⁾ = −(1/J) Σₖ D_jk e⁽ᵏ⁾
//! ```
//!
//! is integrated as one flattened `J·d` system (column-major particle
//! matrix) with the Dormand–Prince pair from [`crate::rk`]. Deviations are
//! recomputed at every stage; `E` and `D` are only ever diagnostics.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::ensemble::{compute_diagnostics, Ensemble, LinearForwardModel};
use crate::error::{ensure, EkiError, Result};
use crate::linalg::{logspace, sym_spectral_norm};
use crate::rk::{dp_step, error_norm, initial_step, PiController};
use crate::spectral::{build_split, SubspaceSplit};
use crate::stopping::{PreparedRule, RuleKind};

/// One step of the discrete iteration with step size `h`:
///
/// `u⁽ʲ⁾ ← u⁽ʲ⁾ + C(u)A*(AC(u)A* + Γ/h)⁻¹(y† − Au⁽ʲ⁾)`.
///
/// The `K × K` system is factored once and reused for every particle.
pub fn discrete_step(ens: &Ensemble, fm: &LinearForwardModel, y_dagger: &DVector<f64>, h: f64) -> Result<Ensemble> {
    ensure!(h > 0.0 && h.is_finite(), InvalidInput, "step size must be positive and finite, got {h}");
    fm.check_param("ensemble", ens.dim())?;
    fm.check_obs("data", y_dagger.len())?;
    let j = ens.size() as f64;
    let mapped_dev = fm.a() * ens.deviations();
    // C(u)A* = (1/J) Σ e⁽ᵏ⁾ (Ae⁽ᵏ⁾)ᵀ
    let cov_at = ens.deviations() * mapped_dev.transpose() / j;
    let system = &mapped_dev * mapped_dev.transpose() / j + fm.gamma() / h;
    let chol = system
        .cholesky()
        .ok_or_else(|| EkiError::NonFinite {
            t: f64::NAN,
            context: "innovation covariance lost positive definiteness".into(),
        })?;
    let mut innovations = -(fm.a() * ens.particles());
    for mut col in innovations.column_iter_mut() {
        col += y_dagger;
    }
    let gains = chol.solve(&innovations);
    let next = ens.particles() + cov_at * gains;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(EkiError::NonFinite {
            t: f64::NAN,
            context: "discrete update produced non-finite particles".into(),
        });
    }
    Ensemble::from_matrix(next)
}

/// Right-hand side for a `d × J` particle matrix, as a `d × J` matrix.
fn field_matrix(particles: DMatrixView<'_, f64>, fm: &LinearForwardModel, y_white: &DVector<f64>) -> DMatrix<f64> {
    let j = particles.ncols();
    let mean = particles.column_mean();
    let mut dev = particles.clone_owned();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    let w = fm.whitened();
    let mut w_u = w * particles;
    let w_mean = w_u.column_mean();
    let mut w_dev = w_u.clone();
    for mut col in w_dev.column_iter_mut() {
        col -= &w_mean;
    }
    for mut col in w_u.column_iter_mut() {
        col -= y_white;
    }
    // D_jk = ⟨ϑ⁽ʲ⁾, Ae⁽ᵏ⁾⟩_Γ
    let d = w_u.tr_mul(&w_dev);
    dev * d.transpose() * (-1.0 / j as f64)
}

/// `du⁽ʲ⁾/dt` for every particle.
pub fn vector_field(ens: &Ensemble, fm: &LinearForwardModel, y_dagger: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    fm.check_param("ensemble", ens.dim())?;
    fm.check_obs("data", y_dagger.len())?;
    let field = field_matrix(ens.particles().as_view(), fm, &fm.whiten(y_dagger));
    Ok(field.column_iter().map(|c| c.into_owned()).collect())
}

/// Tolerances, horizon and recording options for [`integrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_end: f64,
    pub max_step: f64,
    /// Strictly increasing times in `[0, t_end]` at which snapshots are taken.
    pub snapshot_times: Vec<f64>,
    /// Stop integrating once every rule has fired.
    pub halt_on_stop: bool,
    /// Absolute accuracy of the crossing-time bisection.
    pub crossing_tol: f64,
    /// Also take a snapshot at every rule crossing.
    pub snapshot_at_crossings: bool,
    /// Keep the full `E` and `D` matrices in every snapshot.
    pub record_matrices: bool,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self::new(1e3)
    }
}

impl IntegratorSettings {
    /// Defaults with the standard snapshot grid up to `t_end`.
    pub fn new(t_end: f64) -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            t_end,
            max_step: f64::INFINITY,
            snapshot_times: default_snapshot_grid(t_end, 200, 1e-3),
            halt_on_stop: false,
            crossing_tol: 1e-3,
            snapshot_at_crossings: true,
            record_matrices: false,
        }
    }

    pub fn with_snapshots(mut self, times: Vec<f64>) -> Self {
        self.snapshot_times = times;
        self
    }

    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.rel_tol > 0.0 && self.abs_tol > 0.0,
            InvalidInput,
            "tolerances must be positive"
        );
        ensure!(
            self.t_end > 0.0 && self.t_end.is_finite(),
            InvalidInput,
            "t_end must be positive and finite"
        );
        ensure!(self.max_step > 0.0, InvalidInput, "max_step must be positive");
        ensure!(self.crossing_tol > 0.0, InvalidInput, "crossing_tol must be positive");
        ensure!(
            self.snapshot_times.iter().all(|t| (0.0..=self.t_end).contains(t)),
            InvalidInput,
            "snapshot times must lie in [0, t_end]"
        );
        ensure!(
            self.snapshot_times.windows(2).all(|w| w[0] < w[1]),
            InvalidInput,
            "snapshot times must be strictly increasing"
        );
        Ok(())
    }
}

/// `t = 0` followed by `n` logarithmically spaced times on `[t_min, t_end]`.
pub fn default_snapshot_grid(t_end: f64, n: usize, t_min: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    if t_end > t_min {
        grid.extend(logspace(t_min, t_end, n));
    } else if t_end > 0.0 {
        grid.push(t_end);
    }
    grid
}

/// Per-time summary of the ensemble. Vectors are indexed by particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    /// `‖e⁽ʲ⁾‖₂²`
    pub deviation_sq: Vec<f64>,
    /// `‖Ae⁽ʲ⁾‖_Γ² = E_jj`
    pub mapped_deviation_sq: Vec<f64>,
    /// `‖ϑ⁽ʲ⁾‖_Γ²`
    pub misfit_sq: Vec<f64>,
    pub misfit_par_sq: Vec<f64>,
    pub misfit_perp_sq: Vec<f64>,
    /// `‖ϑ⊥⁽ʲ⁾(t) − ϑ⊥⁽ʲ⁾(0)‖_Γ`
    pub misfit_perp_drift: Vec<f64>,
    /// `−(1/J) Σₖ D_jk²`, the rate of `½‖ϑ⁽ʲ⁾‖_Γ²`.
    pub misfit_energy_rate: Vec<f64>,
    /// `‖Ar⁽ʲ⁾‖_Γ²` (truth known).
    pub mapped_residual_sq: Option<Vec<f64>>,
    pub mapped_residual_par_sq: Option<Vec<f64>>,
    pub mapped_residual_perp_sq: Option<Vec<f64>>,
    /// `−(1/J) Σₖ D_jk F_jk`, the rate of `½‖Ar⁽ʲ⁾‖_Γ²` (truth known).
    pub mapped_residual_rate: Option<Vec<f64>>,
    /// `⟨η†, Ae⁽ᵏ⁾⟩_Γ ≤ ⟨Ar⁽ᵏ⁾, Ae⁽ᵏ⁾⟩_Γ` for every `k` (truth known).
    pub angle_condition: Option<bool>,
    /// `‖Aū − y†‖₂`
    pub data_residual: f64,
    /// `‖E‖₂`
    pub e_norm: f64,
    /// `maxᵢⱼ |D_ij|`
    pub d_max: f64,
    pub e_matrix: Option<DMatrix<f64>>,
    pub d_matrix: Option<DMatrix<f64>>,
}

/// First time a rule fired, with the ensemble mean at that time.
#[derive(Debug, Clone, PartialEq)]
pub struct StopEvent {
    pub rule: RuleKind,
    pub time: f64,
    pub mean: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_ensemble: Ensemble,
    pub final_time: f64,
    pub stop_events: Vec<StopEvent>,
    /// Split with respect to the initial mapped deviations.
    pub split: SubspaceSplit,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn stop_time(&self, rule: RuleKind) -> Option<f64> {
        self.stop_event(rule).map(|e| e.time)
    }

    pub fn stop_event(&self, rule: RuleKind) -> Option<&StopEvent> {
        self.stop_events.iter().find(|e| e.rule == rule)
    }

    /// Snapshot recorded at exactly `t`, if any.
    pub fn snapshot_at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }
}

struct Recorder<'a> {
    fm: &'a LinearForwardModel,
    y_dagger: &'a DVector<f64>,
    u_truth: Option<&'a DVector<f64>>,
    noise: Option<DVector<f64>>,
    split: SubspaceSplit,
    perp0: Vec<DVector<f64>>,
    record_matrices: bool,
}

impl<'a> Recorder<'a> {
    fn new(
        ens0: &Ensemble,
        fm: &'a LinearForwardModel,
        y_dagger: &'a DVector<f64>,
        u_truth: Option<&'a DVector<f64>>,
        record_matrices: bool,
    ) -> Result<Self> {
        let split = build_split(ens0, fm)?;
        let mut misfits0 = fm.a() * ens0.particles();
        for mut col in misfits0.column_iter_mut() {
            col -= y_dagger;
        }
        let perp0 = misfits0
            .column_iter()
            .map(|c| split.whitened_perp(&c.into_owned()))
            .collect();
        let noise = u_truth.map(|u| y_dagger - fm.apply(u));
        Ok(Self {
            fm,
            y_dagger,
            u_truth,
            noise,
            split,
            perp0,
            record_matrices,
        })
    }

    fn snapshot(&self, t: f64, ens: &Ensemble) -> Result<Snapshot> {
        let diag = compute_diagnostics(ens, self.fm, self.y_dagger, self.u_truth)?;
        let jn = ens.size();
        let jf = jn as f64;
        let mut misfit_sq = Vec::with_capacity(jn);
        let mut misfit_par_sq = Vec::with_capacity(jn);
        let mut misfit_perp_sq = Vec::with_capacity(jn);
        let mut misfit_perp_drift = Vec::with_capacity(jn);
        for (j, col) in diag.misfits.column_iter().enumerate() {
            let v = col.into_owned();
            let (par, perp) = self.split.norms_sq(&v)?;
            misfit_sq.push(self.fm.norm_sq(&v));
            misfit_par_sq.push(par);
            misfit_perp_sq.push(perp);
            misfit_perp_drift.push((self.split.whitened_perp(&v) - &self.perp0[j]).norm());
        }
        let misfit_energy_rate = diag.d.row_iter().map(|r| -r.norm_squared() / jf).collect();

        let (mut ar_sq, mut ar_par, mut ar_perp, mut ar_rate, mut angle) = (None, None, None, None, None);
        if let (Ok(mapped), Ok(f), Some(eta)) = (diag.mapped_residuals(), diag.f(), self.noise.as_ref()) {
            let mut sq = Vec::with_capacity(jn);
            let mut par_v = Vec::with_capacity(jn);
            let mut perp_v = Vec::with_capacity(jn);
            for col in mapped.column_iter() {
                let v = col.into_owned();
                let (par, perp) = self.split.norms_sq(&v)?;
                sq.push(self.fm.norm_sq(&v));
                par_v.push(par);
                perp_v.push(perp);
            }
            let rate = (0..jn)
                .map(|j| -(0..jn).map(|k| diag.d[(j, k)] * f[(j, k)]).sum::<f64>() / jf)
                .collect();
            let holds = diag
                .mapped_deviations
                .column_iter()
                .enumerate()
                .all(|(k, ae)| self.fm.inner(eta, &ae.into_owned()) <= f[(k, k)]);
            ar_sq = Some(sq);
            ar_par = Some(par_v);
            ar_perp = Some(perp_v);
            ar_rate = Some(rate);
            angle = Some(holds);
        }

        Ok(Snapshot {
            t,
            deviation_sq: diag.deviation_norms.iter().map(|n| n * n).collect(),
            mapped_deviation_sq: diag.e.diagonal().iter().copied().collect(),
            misfit_sq,
            misfit_par_sq,
            misfit_perp_sq,
            misfit_perp_drift,
            misfit_energy_rate,
            mapped_residual_sq: ar_sq,
            mapped_residual_par_sq: ar_par,
            mapped_residual_perp_sq: ar_perp,
            mapped_residual_rate: ar_rate,
            angle_condition: angle,
            data_residual: (self.fm.apply(ens.empirical_mean()) - self.y_dagger).norm(),
            e_norm: sym_spectral_norm(&diag.e),
            d_max: diag.d.amax(),
            e_matrix: self.record_matrices.then(|| diag.e.clone()),
            d_matrix: self.record_matrices.then(|| diag.d.clone()),
        })
    }
}

fn mean_of(y: &DVector<f64>, d: usize, j: usize) -> DVector<f64> {
    DMatrixView::from_slice(y.as_slice(), d, j).column_mean()
}

fn ensemble_of(y: &DVector<f64>, d: usize, j: usize) -> Result<Ensemble> {
    Ensemble::from_matrix(DMatrix::from_column_slice(d, j, y.as_slice()))
}

/// Integrates the continuous-time flow from `ens0` up to `settings.t_end`.
///
/// Snapshots are taken by landing steps exactly on the requested times.
/// Every rule is checked after each accepted step; when one fires inside a
/// step its crossing time is refined by bisection (re-stepping from the
/// start of the step) to `settings.crossing_tol`. Rules only record unless
/// `halt_on_stop` is set, in which case integration ends once all have fired.
pub fn integrate(
    ens0: &Ensemble,
    fm: &LinearForwardModel,
    y_dagger: &DVector<f64>,
    settings: &IntegratorSettings,
    rules: &[PreparedRule],
    u_truth: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    settings.validate()?;
    fm.check_param("ensemble", ens0.dim())?;
    fm.check_obs("data", y_dagger.len())?;
    if let Some(u) = u_truth {
        fm.check_param("truth", u.len())?;
    }

    let (d, jn) = (ens0.dim(), ens0.size());
    let recorder = Recorder::new(ens0, fm, y_dagger, u_truth, settings.record_matrices)?;
    let y_white = fm.whiten(y_dagger);
    let mut rhs = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let field = field_matrix(DMatrixView::from_slice(y.as_slice(), d, jn), fm, &y_white);
        if field.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::NonFinite {
                t,
                context: format!("vector field (J = {jn}, d = {d})"),
            });
        }
        Ok(DVector::from_column_slice(field.as_slice()))
    };

    // times the integrator must hit exactly
    let mut landings: Vec<f64> = settings
        .snapshot_times
        .iter()
        .copied()
        .chain(rules.iter().filter_map(|r| r.scheduled_time()))
        .filter(|&t| t > 0.0 && t <= settings.t_end)
        .chain(std::iter::once(settings.t_end))
        .collect();
    landings.sort_by(f64::total_cmp);
    landings.dedup();
    let is_snapshot_time = |t: f64| settings.snapshot_times.binary_search_by(|s| s.total_cmp(&t)).is_ok();

    let mut snapshots = Vec::with_capacity(settings.snapshot_times.len() + rules.len());
    let mut stop_events: Vec<StopEvent> = Vec::new();
    let mut fired = vec![false; rules.len()];

    let mut t = 0.0;
    let mut y = DVector::from_column_slice(ens0.particles().as_slice());
    if is_snapshot_time(0.0) {
        snapshots.push(recorder.snapshot(0.0, ens0)?);
    }
    for (i, rule) in rules.iter().enumerate() {
        if rule.triggered(ens0.empirical_mean(), fm, y_dagger, 0.0) {
            fired[i] = true;
            stop_events.push(StopEvent {
                rule: rule.kind(),
                time: 0.0,
                mean: ens0.empirical_mean().clone(),
            });
        }
    }

    let mut dy = rhs(t, &y)?;
    let mut h = initial_step(&mut rhs, t, &y, &dy, settings.rel_tol, settings.abs_tol, settings.max_step.min(settings.t_end))?;
    let mut ctrl = PiController::default();
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut next = 0usize;

    let halted = |fired: &[bool]| settings.halt_on_stop && !fired.is_empty() && fired.iter().all(|f| *f);

    while next < landings.len() && !halted(&fired) {
        let target = landings[next];
        let mut step = h.min(settings.max_step);
        let lands = t + 1.1 * step >= target;
        if lands {
            step = target - t;
        }
        if step < 1e-14 * t.abs().max(1.0) {
            return Err(EkiError::IntegratorFailure {
                t,
                step,
                reason: "step size underflow".into(),
                partial: Box::new(Trajectory {
                    snapshots,
                    final_ensemble: ensemble_of(&y, d, jn)?,
                    final_time: t,
                    stop_events,
                    split: recorder.split.clone(),
                    accepted_steps: accepted,
                    rejected_steps: rejected,
                }),
            });
        }

        let out = dp_step(&mut rhs, t, &y, &dy, step)?;
        let err = error_norm(&y, &out.y, &out.error, settings.rel_tol, settings.abs_tol);
        if !(err <= 1.0) {
            rejected += 1;
            h = ctrl.reject(step, err);
            continue;
        }

        let t_new = if lands { target } else { t + step };
        let new_mean = mean_of(&out.y, d, jn);
        let mut crossings: Vec<(usize, f64, DVector<f64>)> = Vec::new();
        for (i, rule) in rules.iter().enumerate() {
            if fired[i] || !rule.triggered(&new_mean, fm, y_dagger, t_new) {
                continue;
            }
            // bisect on the offset within [t, t_new]; lo never fires, hi does
            let (mut lo, mut hi) = (0.0, step);
            let mut hi_state: Option<DVector<f64>> = None;
            while hi - lo > settings.crossing_tol {
                let mid = 0.5 * (lo + hi);
                let trial = dp_step(&mut rhs, t, &y, &dy, mid)?.y;
                if rule.triggered(&mean_of(&trial, d, jn), fm, y_dagger, t + mid) {
                    hi = mid;
                    hi_state = Some(trial);
                } else {
                    lo = mid;
                }
            }
            let (tc, state) = match hi_state {
                Some(s) => (t + hi, s),
                None => (t_new, out.y.clone()),
            };
            fired[i] = true;
            crossings.push((i, tc, state));
        }
        crossings.sort_by(|a, b| a.1.total_cmp(&b.1));
        for (i, tc, state) in crossings {
            stop_events.push(StopEvent {
                rule: rules[i].kind(),
                time: tc,
                mean: mean_of(&state, d, jn),
            });
            let lands_here = lands && tc == t_new && is_snapshot_time(t_new);
            let already = snapshots.last().is_some_and(|s: &Snapshot| s.t >= tc);
            if settings.snapshot_at_crossings && !lands_here && !already {
                snapshots.push(recorder.snapshot(tc, &ensemble_of(&state, d, jn)?)?);
            }
        }
        if lands {
            if is_snapshot_time(target) && snapshots.last().is_none_or(|s| s.t < target) {
                snapshots.push(recorder.snapshot(target, &ensemble_of(&out.y, d, jn)?)?);
            }
            next += 1;
        }

        accepted += 1;
        t = t_new;
        y = out.y;
        dy = out.dy;
        let proposed = ctrl.accept(step, err);
        h = if lands { proposed.max(h) } else { proposed };
    }

    Ok(Trajectory {
        snapshots,
        final_ensemble: ensemble_of(&y, d, jn)?,
        final_time: t,
        stop_events,
        split: recorder.split,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}
