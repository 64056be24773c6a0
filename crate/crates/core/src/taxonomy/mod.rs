//! Behavioural failure taxonomy: per-episode symptom metrics, a rule-based
//! classifier with a fixed precedence, threshold fitting against human
//! labels, and inter-rater agreement.

mod fit;
mod kappa;
mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghost::Trajectory;

pub use fit::{accuracy, fit_thresholds, Lattice};
pub use kappa::{cohen_kappa, fleiss_kappa};
pub use metrics::{compute_metrics, drift_score, BehaviourMetrics, LoopStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureMode {
    CatatonicCollapse,
    ManicOscillation,
    ObsessiveLoop,
    GradualDrift,
    PolicyFragmentation,
    None,
}

impl FailureMode {
    pub const ALL: [FailureMode; 6] = [
        FailureMode::CatatonicCollapse,
        FailureMode::ManicOscillation,
        FailureMode::ObsessiveLoop,
        FailureMode::GradualDrift,
        FailureMode::PolicyFragmentation,
        FailureMode::None,
    ];

    /// The five failure modes, without `None`.
    pub const FAILURES: [FailureMode; 5] = [
        FailureMode::CatatonicCollapse,
        FailureMode::ManicOscillation,
        FailureMode::ObsessiveLoop,
        FailureMode::GradualDrift,
        FailureMode::PolicyFragmentation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::CatatonicCollapse => "CatatonicCollapse",
            FailureMode::ManicOscillation => "ManicOscillation",
            FailureMode::ObsessiveLoop => "ObsessiveLoop",
            FailureMode::GradualDrift => "GradualDrift",
            FailureMode::PolicyFragmentation => "PolicyFragmentation",
            FailureMode::None => "None",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FailureMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown failure mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Minimum stationarity ratio for catatonic collapse.
    pub catatonic: f64,
    /// Minimum reversal rate for manic oscillation.
    pub oscillation: f64,
    pub loop_min_repeats: usize,
    pub loop_max_cycle: usize,
    pub loop_coverage: f64,
    /// Minimum mean normalised action entropy for policy fragmentation.
    pub fragmentation: f64,
    pub fragmentation_min_visits: usize,
    /// Drift fires when the divergence slope strictly exceeds this.
    pub drift_slope: f64,
    /// Episodes in the drift window.
    pub drift_window: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            catatonic: 0.8,
            oscillation: 0.5,
            loop_min_repeats: 3,
            loop_max_cycle: 8,
            loop_coverage: 0.6,
            fragmentation: 0.7,
            fragmentation_min_visits: 3,
            drift_slope: 0.1,
            drift_window: 5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("catatonic", self.catatonic),
            ("oscillation", self.oscillation),
            ("loop_coverage", self.loop_coverage),
            ("fragmentation", self.fragmentation),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "taxonomy.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.loop_max_cycle < 2 {
            return Err(Error::Config(
                "taxonomy.loop_max_cycle must be at least 2".into(),
            ));
        }
        if self.fragmentation_min_visits < 2 {
            return Err(Error::Config(
                "taxonomy.fragmentation_min_visits must be at least 2".into(),
            ));
        }
        if !(self.drift_slope.is_finite() && self.drift_slope >= 0.0) {
            return Err(Error::Config(format!(
                "taxonomy.drift_slope must be a non-negative number, got {}",
                self.drift_slope
            )));
        }
        if self.drift_window < 2 {
            return Err(Error::Config(
                "taxonomy.drift_window must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// First matching mode in precedence order; successful episodes are never failures.
pub fn classify(m: &BehaviourMetrics, th: &Thresholds) -> FailureMode {
    if m.goal_reached {
        FailureMode::None
    } else if m.stationarity_ratio >= th.catatonic {
        FailureMode::CatatonicCollapse
    } else if m.reversal_rate >= th.oscillation {
        FailureMode::ManicOscillation
    } else if m.loop_stats.repeats >= th.loop_min_repeats
        && m.loop_stats.coverage >= th.loop_coverage
    {
        FailureMode::ObsessiveLoop
    } else if m.fragmentation_entropy >= th.fragmentation {
        FailureMode::PolicyFragmentation
    } else if m.drift_slope > th.drift_slope {
        FailureMode::GradualDrift
    } else {
        FailureMode::None
    }
}

/// Metrics and label for the last episode of `recent`, with drift measured
/// over the trailing window against `reference` when one is given.
pub fn classify_latest(
    recent: &[&Trajectory],
    reference: Option<&Trajectory>,
    th: &Thresholds,
) -> Option<(BehaviourMetrics, FailureMode)> {
    let last = *recent.last()?;
    let mut metrics = compute_metrics(last, th);
    if let Some(reference) = reference {
        let window = &recent[recent.len().saturating_sub(th.drift_window)..];
        if window.len() >= 2 {
            if let Ok(slope) = drift_score(window.iter().copied(), reference) {
                metrics.drift_slope = slope;
            }
        }
    }
    let mode = classify(&metrics, th);
    Some((metrics, mode))
}
