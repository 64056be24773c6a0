use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Thresholds;
use crate::env::{Action, Cell};
use crate::error::{Error, Result};
use crate::ghost::{Outcome, Trajectory};

/// Best periodic stretch found in the state sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopStats {
    pub cycle_len: usize,
    pub repeats: usize,
    /// Fraction of the episode covered by the periodic stretch.
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviourMetrics {
    pub stationarity_ratio: f64,
    pub reversal_rate: f64,
    #[serde(rename = "loop")]
    pub loop_stats: LoopStats,
    pub fragmentation_entropy: f64,
    /// Only set from a cross-episode window; zero otherwise.
    pub drift_slope: f64,
    pub goal_reached: bool,
}

/// Single-episode symptom metrics. `drift_slope` is left at zero.
pub fn compute_metrics(t: &Trajectory, th: &Thresholds) -> BehaviourMetrics {
    let n = t.transitions.len();
    if n == 0 {
        return BehaviourMetrics {
            stationarity_ratio: 0.0,
            reversal_rate: 0.0,
            loop_stats: LoopStats::default(),
            fragmentation_entropy: 0.0,
            drift_slope: 0.0,
            goal_reached: false,
        };
    }
    let still = t
        .transitions
        .iter()
        .filter(|tr| tr.s.agent == tr.s_next.agent)
        .count();
    let reversals = t
        .transitions
        .windows(2)
        .filter(|w| w[0].a.is_opposite(w[1].a))
        .count();
    let states: Vec<Cell> = t.transitions.iter().map(|tr| tr.s.agent).collect();
    BehaviourMetrics {
        stationarity_ratio: still as f64 / n as f64,
        reversal_rate: if n < 2 {
            0.0
        } else {
            reversals as f64 / (n - 1) as f64
        },
        loop_stats: find_loop(&states, th.loop_max_cycle),
        fragmentation_entropy: fragmentation(t, th.fragmentation_min_visits),
        drift_slope: 0.0,
        goal_reached: t.outcome() == Outcome::Success,
    }
}

/// True when `block` is not a repetition of a shorter block.
fn is_primitive(block: &[Cell]) -> bool {
    let len = block.len();
    (1..len)
        .filter(|d| len.is_multiple_of(*d))
        .all(|d| (0..len).any(|j| block[j] != block[(j + d) % len]))
}

/// Longest-covering periodic stretch with period in `[2, max_cycle]`.
///
/// A maximal run of `k` positions where `s[i] == s[i + len]` marks a stretch
/// of `k + len` states with period `len`. Only stretches that repeat their
/// cycle at least twice and whose cycle is primitive count.
fn find_loop(states: &[Cell], max_cycle: usize) -> LoopStats {
    let n = states.len();
    let mut best = LoopStats::default();
    for len in 2..=max_cycle.min(n / 2) {
        let mut i = 0;
        while i + len < n {
            if states[i] != states[i + len] {
                i += 1;
                continue;
            }
            let start = i;
            while i + len < n && states[i] == states[i + len] {
                i += 1;
            }
            let span = i - start + len;
            let repeats = span / len;
            if repeats < 2 || !is_primitive(&states[start..start + len]) {
                continue;
            }
            let coverage = span as f64 / n as f64;
            let better =
                coverage > best.coverage || (coverage == best.coverage && repeats > best.repeats);
            if better {
                best = LoopStats {
                    cycle_len: len,
                    repeats,
                    coverage,
                };
            }
        }
    }
    best
}

/// Mean per-state action entropy (normalised by ln 5) over states visited
/// at least `min_visits` times.
fn fragmentation(t: &Trajectory, min_visits: usize) -> f64 {
    let mut counts: HashMap<Cell, [u32; 5]> = HashMap::new();
    for tr in &t.transitions {
        counts.entry(tr.s.agent).or_default()[tr.a.index()] += 1;
    }
    let norm = (Action::ALL.len() as f64).ln();
    let entropies: Vec<f64> = counts
        .values()
        .filter_map(|c| {
            let visits: u32 = c.iter().sum();
            if (visits as usize) < min_visits {
                return None;
            }
            let total = f64::from(visits);
            let h: f64 = c
                .iter()
                .filter(|&&k| k > 0)
                .map(|&k| {
                    let p = f64::from(k) / total;
                    -p * p.ln()
                })
                .sum();
            Some((h / norm).min(1.0))
        })
        .collect();
    if entropies.is_empty() {
        0.0
    } else {
        // Sum in a fixed order so the result does not depend on hash order.
        let mut sorted = entropies;
        sorted.sort_by(f64::total_cmp);
        sorted.iter().sum::<f64>() / sorted.len() as f64
    }
}

/// Mean Manhattan distance to `reference` at matching step indices.
fn divergence(path: &[Cell], reference: &[Cell]) -> f64 {
    let k = path.len().min(reference.len());
    if k == 0 {
        return 0.0;
    }
    let total: u32 = path
        .iter()
        .zip(reference)
        .map(|(a, b)| a.manhattan(*b))
        .sum();
    f64::from(total) / k as f64
}

/// Least-squares slope of per-episode divergence from `reference` against
/// episode index.
pub fn drift_score<'a, I>(episodes: I, reference: &Trajectory) -> Result<f64>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    if reference.is_empty() {
        return Err(Error::validation("drift reference trajectory is empty"));
    }
    let ref_path = reference.path();
    let points: Vec<(f64, f64)> = episodes
        .into_iter()
        .map(|t| (t.episode_index as f64, divergence(&t.path(), &ref_path)))
        .collect();
    if points.len() < 2 {
        return Err(Error::validation("drift needs at least two episodes"));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::validation(
            "drift episodes share a single episode index",
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    Ok(sxy / sxx)
}
