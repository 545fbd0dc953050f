//! Single experiment runs.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::dynamics::{integrate, Snapshot, Trajectory};
use crate::elliptic::{assemble_a, make_data, orthogonal_noise, FemDiscretization, ObservationSetup};
use crate::ensemble::{Ensemble, LinearForwardModel};
use crate::error::{EkiError, Result};
use crate::prior::{adaptive_lsq_ensemble, adaptive_truth_ensemble, draw_alpha, kl_ensemble, EnsembleStrategy, KlBasis};
use crate::rng::{stream, Purpose};
use crate::spectral::build_split;
use crate::stopping::{PreparedRule, RuleKind};

/// The parts of an experiment shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct Problem {
    pub disc: FemDiscretization,
    pub setup: ObservationSetup,
    pub fm: LinearForwardModel,
    pub basis: KlBasis,
    pub truth: DVector<f64>,
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let disc = FemDiscretization::new(cfg.n_cells)?;
        let setup = ObservationSetup::equispaced(cfg.k, cfg.gamma)?;
        let a = assemble_a(&disc, &setup)?;
        // noise-free data keeps the Euclidean weighting
        let weight = if cfg.gamma > 0.0 { cfg.gamma } else { 1.0 };
        let fm = LinearForwardModel::with_scalar_noise(a, weight)?;
        let basis = KlBasis::new(disc.nodes(), disc.dim(), cfg.prior_scale)?;
        let truth = basis.sample(&mut stream(cfg.seeds.truth_seed, Purpose::Truth, 0));
        Ok(Self {
            disc,
            setup,
            fm,
            basis,
            truth,
        })
    }
}

/// Everything needed to integrate one run.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub ensemble: Ensemble,
    pub y: DVector<f64>,
    pub noise: DVector<f64>,
    pub rules: Vec<PreparedRule>,
}

/// Ensemble `e` and noise realisation `n` of the configured experiment.
pub fn prepare_run(cfg: &ExperimentConfig, problem: &Problem, e: u64, n: u64) -> Result<RunInputs> {
    let mut ens_rng = stream(cfg.seeds.ensemble_seed, Purpose::Ensemble, e);
    let mut noise_rng = stream(cfg.seeds.noise_seed, Purpose::Noise, n);
    let fm = &problem.fm;
    let kl = kl_ensemble(&problem.basis, cfg.j, &mut ens_rng)?;
    let base: Vec<_> = (1..cfg.j).map(|i| kl.particle(i)).collect();
    let alpha = || draw_alpha(cfg.j, &mut stream(cfg.seeds.ensemble_seed, Purpose::Coefficients, e));

    let data_ensemble = match cfg.ensemble_strategy {
        EnsembleStrategy::Kl => Some(kl.clone()),
        EnsembleStrategy::AdaptiveTruth => Some(adaptive_truth_ensemble(&base, &alpha(), &problem.truth, fm)?),
        EnsembleStrategy::AdaptiveLsq => None,
    };
    let (y, noise) = if cfg.orthogonal_noise {
        let ens = data_ensemble.as_ref().expect("validated: orthogonal noise needs a data-free ensemble");
        let eta = orthogonal_noise(&build_split(ens, fm)?, cfg.gamma, &mut noise_rng)?;
        (fm.apply(&problem.truth) + &eta, eta)
    } else {
        make_data(fm.a(), &problem.truth, cfg.gamma, &mut noise_rng)?
    };
    let ensemble = match data_ensemble {
        Some(ens) => ens,
        None => adaptive_lsq_ensemble(&base, &alpha(), fm, &y)?,
    };
    let rules = cfg
        .rules()
        .into_iter()
        .map(|r| PreparedRule::new(r, fm))
        .collect::<Result<_>>()?;
    Ok(RunInputs {
        ensemble,
        y,
        noise,
        rules,
    })
}

/// Mean, minimum and maximum over particles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One row of a run's time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub deviation_sq: Stat,
    pub mapped_deviation_sq: Stat,
    pub misfit_sq: Stat,
    pub misfit_par_sq: Stat,
    pub misfit_perp_sq: Stat,
    pub mapped_residual_sq: Stat,
    pub mapped_residual_par_sq: Stat,
    pub mapped_residual_perp_sq: Stat,
    pub data_residual: f64,
    pub e_norm: f64,
    pub d_max: f64,
}

impl SeriesRow {
    fn from_snapshot(s: &Snapshot) -> Self {
        let opt = |v: &Option<Vec<f64>>| Stat::of(v.as_deref().expect("runs always know the truth"));
        Self {
            t: s.t,
            deviation_sq: Stat::of(&s.deviation_sq),
            mapped_deviation_sq: Stat::of(&s.mapped_deviation_sq),
            misfit_sq: Stat::of(&s.misfit_sq),
            misfit_par_sq: Stat::of(&s.misfit_par_sq),
            misfit_perp_sq: Stat::of(&s.misfit_perp_sq),
            mapped_residual_sq: opt(&s.mapped_residual_sq),
            mapped_residual_par_sq: opt(&s.mapped_residual_par_sq),
            mapped_residual_perp_sq: opt(&s.mapped_residual_perp_sq),
            data_residual: s.data_residual,
            e_norm: s.e_norm,
            d_max: s.d_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub rule: RuleKind,
    pub threshold: Option<f64>,
    /// `None` if the rule never fired before the end of the run.
    pub time: Option<f64>,
    /// `‖ū(time) − u†‖₂`
    pub parameter_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub ensemble_index: u64,
    pub noise_index: u64,
    pub rows: Vec<SeriesRow>,
    pub stops: Vec<StopRecord>,
    pub final_time: f64,
    /// `‖ū(final_time) − u†‖₂`
    pub final_error: f64,
    pub final_mean: Vec<f64>,
    pub truth: Vec<f64>,
    pub dim_par: usize,
    /// Set when the integrator gave up; the record then holds the partial run.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn stop(&self, rule: RuleKind) -> Option<&StopRecord> {
        self.stops.iter().find(|s| s.rule == rule)
    }
}

fn record(
    cfg: &ExperimentConfig,
    problem: &Problem,
    inputs: &RunInputs,
    traj: &Trajectory,
    (e, n): (u64, u64),
    failure: Option<String>,
) -> RunRecord {
    let truth = &problem.truth;
    let stops = inputs
        .rules
        .iter()
        .map(|rule| {
            let event = traj.stop_event(rule.kind());
            StopRecord {
                rule: rule.kind(),
                threshold: rule.threshold(),
                time: event.map(|ev| ev.time),
                parameter_error: event.map(|ev| (&ev.mean - truth).norm()),
            }
        })
        .collect();
    let mean = traj.final_ensemble.empirical_mean();
    RunRecord {
        config_hash: cfg.hash(),
        ensemble_index: e,
        noise_index: n,
        rows: traj.snapshots.iter().map(SeriesRow::from_snapshot).collect(),
        stops,
        final_time: traj.final_time,
        final_error: (mean - truth).norm(),
        final_mean: mean.iter().copied().collect(),
        truth: truth.iter().copied().collect(),
        dim_par: traj.split.dim_par(),
        failure,
    }
}

/// Runs ensemble `e` against noise realisation `n`.
pub fn run_indexed(cfg: &ExperimentConfig, problem: &Problem, e: u64, n: u64) -> Result<RunRecord> {
    let inputs = prepare_run(cfg, problem, e, n)?;
    let settings = cfg.integrator_settings();
    match integrate(&inputs.ensemble, &problem.fm, &inputs.y, &settings, &inputs.rules, Some(&problem.truth)) {
        Ok(traj) => Ok(record(cfg, problem, &inputs, &traj, (e, n), None)),
        Err(EkiError::IntegratorFailure {
            t,
            step,
            reason,
            partial,
        }) => {
            let msg = format!("integrator failure at t = {t} (step {step:e}): {reason}");
            Ok(record(cfg, problem, &inputs, &partial, (e, n), Some(msg)))
        }
        Err(other) => Err(other),
    }
}

/// The run selected by the configured seeds (ensemble and noise index 0).
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let problem = Problem::new(cfg)?;
    run_indexed(cfg, &problem, 0, 0)
}

