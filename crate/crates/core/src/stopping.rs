//! Stopping criteria evaluated on the ensemble mean during integration.
//!
//! With `N = A*Γ⁻¹A` the four rules are:
//!
//! * bayesian: stop at the fixed time `T*` (default 1)
//! * discrepancy: `‖Aū − y†‖₂ ≤ τ √trace(Γ)`
//! * symmetrized: `‖N ū − A*Γ^{-1/2} y†‖₂ ≤ τ √trace(N)`
//! * modified: `‖(λI + N)^{-1/2} A*Γ⁻¹ (Aū − y†)‖₂ ≤ τ √trace((λI + N)⁻¹ N)`
//!
//! The symmetrized data term uses `Γ^{-1/2}` exactly as the criterion is
//! usually stated, even though `Γ⁻¹` would match the left-hand operator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::LinearForwardModel;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Bayesian,
    Discrepancy,
    Symmetrized,
    Modified,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Bayesian => "bayesian",
            RuleKind::Discrepancy => "discrepancy",
            RuleKind::Symmetrized => "symmetrized",
            RuleKind::Modified => "modified",
        }
    }
}

impl std::fmt::Display for RuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of one stopping rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule {
    pub kind: RuleKind,
    /// Multiplier `τ > 1` (discrepancy-type rules).
    pub tau: f64,
    /// Regularisation `λ > 0` (modified rule).
    pub lambda: f64,
    /// Stopping time (bayesian rule).
    pub t_star: f64,
    /// Replaces the computed threshold when set.
    pub threshold_override: Option<f64>,
}

impl StoppingRule {
    pub fn bayesian(t_star: f64) -> Self {
        Self {
            kind: RuleKind::Bayesian,
            tau: f64::NAN,
            lambda: f64::NAN,
            t_star,
            threshold_override: None,
        }
    }

    pub fn discrepancy(tau: f64) -> Self {
        Self {
            kind: RuleKind::Discrepancy,
            tau,
            ..Self::bayesian(f64::NAN)
        }
    }

    pub fn symmetrized(tau: f64) -> Self {
        Self {
            kind: RuleKind::Symmetrized,
            tau,
            ..Self::bayesian(f64::NAN)
        }
    }

    pub fn modified(tau: f64, lambda: f64) -> Self {
        Self {
            kind: RuleKind::Modified,
            tau,
            lambda,
            ..Self::bayesian(f64::NAN)
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold_override = Some(threshold);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RuleKind::Bayesian => {
                ensure!(
                    self.t_star.is_finite() && self.t_star >= 0.0,
                    InvalidInput,
                    "bayesian stopping time must be a finite non-negative number, got {}",
                    self.t_star
                );
            }
            _ => {
                ensure!(self.tau > 1.0, InvalidInput, "{}: tau must exceed 1, got {}", self.kind, self.tau);
            }
        }
        if self.kind == RuleKind::Modified {
            ensure!(self.lambda > 0.0, InvalidInput, "modified: lambda must be positive, got {}", self.lambda);
        }
        if let Some(t) = self.threshold_override {
            ensure!(t >= 0.0 && t.is_finite(), InvalidInput, "threshold override must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Cached {
    None,
    /// `(λI + N)^{-1/2} A*Γ⁻¹`, `d × K`.
    Modified(DMatrix<f64>),
}

/// A rule bound to a forward model, with its threshold and matrix
/// functions computed once.
#[derive(Debug, Clone)]
pub struct PreparedRule {
    rule: StoppingRule,
    threshold: Option<f64>,
    cached: Cached,
}

impl PreparedRule {
    pub fn new(rule: StoppingRule, fm: &LinearForwardModel) -> Result<Self> {
        rule.validate()?;
        let w = fm.whitened();
        let (computed, cached) = match rule.kind {
            RuleKind::Bayesian => (None, Cached::None),
            RuleKind::Discrepancy => (Some(rule.tau * fm.gamma().trace().sqrt()), Cached::None),
            RuleKind::Symmetrized => (Some(rule.tau * w.norm_squared().sqrt()), Cached::None),
            RuleKind::Modified => {
                let normal = w.tr_mul(w);
                let eig = crate::linalg::sym_eigen(&normal);
                let mu = eig.eigenvalues.map(|m| m.max(0.0));
                let trace: f64 = mu.iter().map(|m| m / (rule.lambda + m)).sum();
                let q = &eig.eigenvectors;
                let scale = mu.map(|m| (rule.lambda + m).sqrt().recip());
                let root = q * DMatrix::from_diagonal(&scale) * q.transpose();
                let op = root * w.transpose() * fm.gamma_inv_sqrt();
                (Some(rule.tau * trace.sqrt()), Cached::Modified(op))
            }
        };
        let threshold = match rule.kind {
            RuleKind::Bayesian => None,
            _ => rule.threshold_override.or(computed),
        };
        Ok(Self {
            rule,
            threshold,
            cached,
        })
    }

    pub fn rule(&self) -> &StoppingRule {
        &self.rule
    }

    pub fn kind(&self) -> RuleKind {
        self.rule.kind
    }

    /// Threshold on the right-hand side; `None` for the time-based rule.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    /// A time the integrator should land on exactly, if any.
    pub fn scheduled_time(&self) -> Option<f64> {
        (self.rule.kind == RuleKind::Bayesian).then_some(self.rule.t_star)
    }

    /// Left-hand side of the criterion at the mean `ū`; `None` for bayesian.
    pub fn residual(&self, mean: &DVector<f64>, fm: &LinearForwardModel, y_dagger: &DVector<f64>) -> Option<f64> {
        match self.rule.kind {
            RuleKind::Bayesian => None,
            RuleKind::Discrepancy => Some((fm.apply(mean) - y_dagger).norm()),
            RuleKind::Symmetrized => {
                let w = fm.whitened();
                let lhs = w.tr_mul(&(w * mean));
                let rhs = fm.a().tr_mul(&fm.whiten(y_dagger));
                Some((lhs - rhs).norm())
            }
            RuleKind::Modified => match &self.cached {
                Cached::Modified(op) => Some((op * (fm.apply(mean) - y_dagger)).norm()),
                Cached::None => unreachable!("modified rule is always prepared with its operator"),
            },
        }
    }

    pub fn triggered(&self, mean: &DVector<f64>, fm: &LinearForwardModel, y_dagger: &DVector<f64>, t: f64) -> bool {
        match self.rule.kind {
            RuleKind::Bayesian => t >= self.rule.t_star,
            _ => {
                let lhs = self.residual(mean, fm, y_dagger).unwrap_or(f64::INFINITY);
                lhs <= self.threshold.unwrap_or(0.0)
            }
        }
    }
}

/// Threshold of `rule` for `fm`; `None` for the time-based rule.
pub fn threshold(rule: &StoppingRule, fm: &LinearForwardModel) -> Result<Option<f64>> {
    Ok(PreparedRule::new(rule.clone(), fm)?.threshold())
}

/// Whether `rule` fires for mean `ū` at time `t`.
pub fn triggered(
    rule: &StoppingRule,
    mean: &DVector<f64>,
    fm: &LinearForwardModel,
    y_dagger: &DVector<f64>,
    t: f64,
) -> Result<bool> {
    fm.check_param("mean", mean.len())?;
    fm.check_obs("data", y_dagger.len())?;
    Ok(PreparedRule::new(rule.clone(), fm)?.triggered(mean, fm, y_dagger, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_model(n: usize) -> LinearForwardModel {
        LinearForwardModel::new(DMatrix::identity(n, n), DMatrix::identity(n, n)).unwrap()
    }

    #[test]
    fn discrepancy_threshold_for_default_noise() {
        let a = DMatrix::from_element(15, 4, 1.0);
        let fm = LinearForwardModel::with_scalar_noise(a, 1e-4).unwrap();
        let thr = threshold(&StoppingRule::discrepancy(1.2), &fm).unwrap().unwrap();
        assert_relative_eq!(thr, 1.2 * (15.0f64 * 1e-4).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(thr, 0.046476, epsilon = 1e-6);
    }

    #[test]
    fn symmetrized_threshold_with_identity() {
        let fm = identity_model(7);
        let thr = threshold(&StoppingRule::symmetrized(1.5), &fm).unwrap().unwrap();
        assert_relative_eq!(thr, 1.5 * 7f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn modified_threshold_vanishes_for_large_lambda() {
        let fm = identity_model(3);
        let small = threshold(&StoppingRule::modified(1.2, 1e12), &fm).unwrap().unwrap();
        assert!(small < 1e-5);
        // trace((λ+1)⁻¹ I) = 3/(λ+1)
        let mid = threshold(&StoppingRule::modified(1.2, 1.0), &fm).unwrap().unwrap();
        assert_relative_eq!(mid, 1.2 * 1.5f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn exact_fit_triggers_residual_rules() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let fm = LinearForwardModel::with_scalar_noise(a, 0.01).unwrap();
        let mean = DVector::from_vec(vec![0.3, 0.2, -0.1]);
        let y = fm.apply(&mean);
        for rule in [StoppingRule::discrepancy(1.2), StoppingRule::modified(1.2, 1e-4)] {
            assert!(triggered(&rule, &mean, &fm, &y, 0.0).unwrap(), "{:?}", rule.kind);
        }
    }

    #[test]
    fn bayesian_rule_fires_at_t_star() {
        let fm = identity_model(1);
        let rule = StoppingRule::bayesian(1.0);
        let m = DVector::zeros(1);
        assert!(!triggered(&rule, &m, &fm, &m, 0.999).unwrap());
        assert!(triggered(&rule, &m, &fm, &m, 1.0).unwrap());
        assert_eq!(threshold(&rule, &fm).unwrap(), None);
    }

    #[test]
    fn override_replaces_threshold() {
        let fm = identity_model(2);
        let rule = StoppingRule::discrepancy(1.2).with_threshold(0.5);
        assert_eq!(threshold(&rule, &fm).unwrap(), Some(0.5));
    }

    #[test]
    fn parameter_validation() {
        let fm = identity_model(2);
        assert!(threshold(&StoppingRule::discrepancy(1.0), &fm).is_err());
        assert!(threshold(&StoppingRule::modified(1.2, 0.0), &fm).is_err());
        assert!(threshold(&StoppingRule::bayesian(-1.0), &fm).is_err());
    }

    #[test]
    fn far_from_data_does_not_trigger() {
        let fm = identity_model(2);
        let mean = DVector::from_vec(vec![10.0, 10.0]);
        let y = DVector::zeros(2);
        for rule in [
            StoppingRule::discrepancy(1.2),
            StoppingRule::symmetrized(1.2),
            StoppingRule::modified(1.2, 1e-4),
        ] {
            assert!(!triggered(&rule, &mean, &fm, &y, 5.0).unwrap());
        }
    }
}
