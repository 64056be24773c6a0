use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{classify, BehaviourMetrics, FailureMode, Thresholds};
use crate::error::{Error, Result};

/// Candidate values for each fitted threshold. Cycle length, minimum visits
/// and the drift window are structural and stay at their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub catatonic: Vec<f64>,
    pub oscillation: Vec<f64>,
    pub loop_min_repeats: Vec<usize>,
    pub loop_coverage: Vec<f64>,
    pub fragmentation: Vec<f64>,
    pub drift_slope: Vec<f64>,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

impl Default for Lattice {
    fn default() -> Self {
        Lattice {
            catatonic: steps(0.5, 0.95, 0.05),
            oscillation: steps(0.3, 0.9, 0.05),
            loop_min_repeats: (2..=6).collect(),
            loop_coverage: steps(0.3, 0.9, 0.05),
            fragmentation: steps(0.4, 0.95, 0.05),
            drift_slope: steps(0.0, 0.5, 0.025),
        }
    }
}

/// Fraction of examples whose classification matches the label.
pub fn accuracy(labeled: &[(BehaviourMetrics, FailureMode)], th: &Thresholds) -> f64 {
    if labeled.is_empty() {
        return 0.0;
    }
    let hits = labeled
        .iter()
        .filter(|(m, y)| classify(m, th) == *y)
        .count();
    hits as f64 / labeled.len() as f64
}

/// Picks the best value for one coordinate; ties go to the value nearest the
/// default, then to the current value.
fn best_value<T: Copy + PartialEq>(
    values: &[T],
    current: T,
    distance: impl Fn(T) -> f64,
    score: impl Fn(T) -> f64,
) -> T {
    let mut best = current;
    let mut best_score = score(current);
    for &v in values {
        let s = score(v);
        let closer = distance(v) < distance(best);
        if s > best_score || (s == best_score && closer) {
            best = v;
            best_score = s;
        }
    }
    best
}

/// Coordinate-wise search over `lattice`, starting from the defaults and
/// sweeping until no coordinate improves accuracy.
pub fn fit_thresholds(
    labeled: &[(BehaviourMetrics, FailureMode)],
    lattice: &Lattice,
) -> Result<Thresholds> {
    let present: BTreeSet<FailureMode> = labeled.iter().map(|(_, y)| *y).collect();
    let missing: Vec<&str> = FailureMode::FAILURES
        .iter()
        .filter(|m| !present.contains(m))
        .map(|m| m.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "no labelled examples for {}",
            missing.join(", ")
        )));
    }
    let default = Thresholds::default();
    let mut th = default.clone();
    let mut acc = accuracy(labeled, &th);
    // Each sweep strictly improves accuracy or stops, so this terminates
    // quickly; the cap only guards against float oddities.
    for _ in 0..32 {
        macro_rules! sweep {
            ($field:ident, $values:expr) => {{
                let d = default.$field as f64;
                th.$field = best_value(
                    $values,
                    th.$field,
                    |v| (v as f64 - d).abs(),
                    |v| {
                        let mut t = th.clone();
                        t.$field = v;
                        accuracy(labeled, &t)
                    },
                );
            }};
        }
        sweep!(catatonic, &lattice.catatonic);
        sweep!(oscillation, &lattice.oscillation);
        sweep!(loop_min_repeats, &lattice.loop_min_repeats);
        sweep!(loop_coverage, &lattice.loop_coverage);
        sweep!(fragmentation, &lattice.fragmentation);
        sweep!(drift_slope, &lattice.drift_slope);
        let next = accuracy(labeled, &th);
        if next <= acc {
            break;
        }
        acc = next;
    }
    Ok(th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::LoopStats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_metrics(rng: &mut ChaCha8Rng) -> BehaviourMetrics {
        BehaviourMetrics {
            stationarity_ratio: rng.gen(),
            reversal_rate: rng.gen(),
            loop_stats: LoopStats {
                cycle_len: rng.gen_range(2..=8),
                repeats: rng.gen_range(0..=8),
                coverage: rng.gen(),
            },
            fragmentation_entropy: rng.gen(),
            drift_slope: rng.gen_range(0.0..0.5),
            goal_reached: rng.gen_bool(0.1),
        }
    }

    fn sample(n: usize, th: &Thresholds, seed: u64) -> Vec<(BehaviourMetrics, FailureMode)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let m = random_metrics(&mut rng);
                (m, classify(&m, th))
            })
            .collect()
    }

    #[test]
    fn self_consistent_data_fits_perfectly() {
        let data = sample(2000, &Thresholds::default(), 1);
        let th = fit_thresholds(&data, &Lattice::default()).unwrap();
        assert_eq!(accuracy(&data, &th), 1.0);
        assert_eq!(th, Thresholds::default(), "ties must resolve to defaults");
    }

    #[test]
    fn single_mode_is_rejected() {
        let mut data = sample(50, &Thresholds::default(), 2);
        for d in &mut data {
            d.1 = FailureMode::CatatonicCollapse;
        }
        assert!(fit_thresholds(&data, &Lattice::default()).is_err());
    }

    #[test]
    fn recovers_shifted_stationarity_boundary() {
        let lattice = Lattice::default();
        let generating = Thresholds {
            catatonic: 0.65,
            ..Thresholds::default()
        };
        let data = sample(3000, &generating, 3);
        let fitted = fit_thresholds(&data, &lattice).unwrap();
        // Brute force over the catatonic axis alone gives the reference optimum.
        let oracle = lattice
            .catatonic
            .iter()
            .copied()
            .max_by(|a, b| {
                let fa = accuracy(
                    &data,
                    &Thresholds {
                        catatonic: *a,
                        ..generating.clone()
                    },
                );
                let fb = accuracy(
                    &data,
                    &Thresholds {
                        catatonic: *b,
                        ..generating.clone()
                    },
                );
                fa.total_cmp(&fb)
            })
            .unwrap();
        assert!((oracle - 0.65).abs() <= 0.05 + 1e-9);
        assert!(
            (fitted.catatonic - 0.65).abs() <= 0.05 + 1e-9,
            "{}",
            fitted.catatonic
        );
    }
}
