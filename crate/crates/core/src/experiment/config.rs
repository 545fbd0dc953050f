//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{default_snapshot_grid, IntegratorSettings};
use crate::error::{ensure, EkiError, Result};
use crate::prior::EnsembleStrategy;
use crate::stopping::{RuleKind, StoppingRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_cells: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub gamma: f64,
    pub prior_scale: f64,
    #[serde(rename = "J")]
    pub j: usize,
    pub ensemble_strategy: EnsembleStrategy,
    pub integrator: IntegratorConfig,
    pub stopping: StoppingConfig,
    pub seeds: Seeds,
    pub sweep: SweepCounts,
    pub orthogonal_noise: bool,
    pub halt_on_stop: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_cells: 256,
            k: 15,
            gamma: 1e-4,
            prior_scale: 10.0,
            j: 5,
            ensemble_strategy: EnsembleStrategy::Kl,
            integrator: IntegratorConfig::default(),
            stopping: StoppingConfig::default(),
            seeds: Seeds::default(),
            sweep: SweepCounts::default(),
            orthogonal_noise: false,
            halt_on_stop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub t_end: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// `None` means unbounded.
    pub max_step: Option<f64>,
    /// Number of log-spaced snapshots on `[t_min_snapshot, t_end]`.
    pub n_snapshots: usize,
    pub t_min_snapshot: f64,
    pub crossing_tol: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            t_end: 1e3,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: None,
            n_snapshots: 200,
            t_min_snapshot: 1e-3,
            crossing_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingConfig {
    pub rules: Vec<RuleKind>,
    pub tau: f64,
    pub lambda: f64,
    #[serde(rename = "T_star")]
    pub t_star: f64,
    /// Replaces the computed threshold of every residual-based rule.
    pub threshold: Option<f64>,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            rules: vec![
                RuleKind::Bayesian,
                RuleKind::Discrepancy,
                RuleKind::Symmetrized,
                RuleKind::Modified,
            ],
            tau: 1.2,
            lambda: 1e-4,
            t_star: 1.0,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub ensemble_seed: u64,
    pub noise_seed: u64,
    /// Seed of the prior draw used as the true parameter.
    pub truth_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCounts {
    pub n_ensembles: usize,
    pub n_noise: usize,
}

impl Default for SweepCounts {
    fn default() -> Self {
        Self {
            n_ensembles: 10,
            n_noise: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EkiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| EkiError::io(path.as_ref(), e))?;
        Self::from_json(&text).map_err(|e| match e {
            EkiError::Config(msg) => EkiError::Config(format!("{}: {msg}", path.as_ref().display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_cells >= 2, InvalidConfiguration, "n_cells must be at least 2");
        ensure!(self.k >= 1, InvalidConfiguration, "K must be at least 1");
        ensure!(
            self.gamma >= 0.0 && self.gamma.is_finite(),
            InvalidConfiguration,
            "gamma must be non-negative and finite"
        );
        ensure!(
            self.prior_scale > 0.0 && self.prior_scale.is_finite(),
            InvalidConfiguration,
            "prior_scale must be positive"
        );
        ensure!(self.j >= 2, InvalidConfiguration, "J must be at least 2");
        ensure!(
            self.j < self.n_cells,
            InvalidConfiguration,
            "J = {} exceeds the {} prior modes",
            self.j,
            self.n_cells - 1
        );
        ensure!(
            !(self.orthogonal_noise && self.ensemble_strategy == EnsembleStrategy::AdaptiveLsq),
            InvalidConfiguration,
            "orthogonal_noise cannot be combined with adaptive_lsq, whose ensemble depends on the data"
        );
        ensure!(
            self.sweep.n_ensembles >= 1 && self.sweep.n_noise >= 1,
            InvalidConfiguration,
            "sweep counts must be at least 1"
        );
        ensure!(
            self.integrator.t_min_snapshot > 0.0,
            InvalidConfiguration,
            "t_min_snapshot must be positive"
        );
        for rule in self.rules() {
            rule.validate()?;
        }
        self.integrator_settings().validate()
    }

    pub fn rules(&self) -> Vec<StoppingRule> {
        let s = &self.stopping;
        s.rules
            .iter()
            .map(|kind| {
                let rule = match kind {
                    RuleKind::Bayesian => StoppingRule::bayesian(s.t_star),
                    RuleKind::Discrepancy => StoppingRule::discrepancy(s.tau),
                    RuleKind::Symmetrized => StoppingRule::symmetrized(s.tau),
                    RuleKind::Modified => StoppingRule::modified(s.tau, s.lambda),
                };
                match (s.threshold, kind) {
                    (Some(th), k) if *k != RuleKind::Bayesian => rule.with_threshold(th),
                    // noise-free data: the noise level is zero
                    (None, k) if *k != RuleKind::Bayesian && self.gamma == 0.0 => rule.with_threshold(0.0),
                    _ => rule,
                }
            })
            .collect()
    }

    pub fn integrator_settings(&self) -> IntegratorSettings {
        let ic = &self.integrator;
        let mut settings = IntegratorSettings::new(ic.t_end)
            .with_tolerances(ic.rel_tol, ic.abs_tol)
            .with_snapshots(default_snapshot_grid(ic.t_end, ic.n_snapshots, ic.t_min_snapshot));
        settings.max_step = ic.max_step.unwrap_or(f64::INFINITY);
        settings.crossing_tol = ic.crossing_tol;
        settings.halt_on_stop = self.halt_on_stop;
        settings
    }
}
