//! Paired comparison of a plain and a ghost-conditioned learner under a
//! scripted disruption schedule.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::agent::Hyperparams;
use crate::disruption::{self, Author, DisruptionKind};
use crate::dual_loop::{episodes_to_criterion, ActionRule, PenaltyConfig};
use crate::env::GridConfig;
use crate::error::{Error, Result};
use crate::ghost::{GhostDatabase, LayerConfig};
use crate::rng::{self, Stream};
use crate::sim::{evaluate_greedy, AutoLabel, SimSettings, Simulation};
use crate::taxonomy::Thresholds;

/// A count or measurement that may never have been reached. Serialized as
/// the plain value or the string `"not_reached"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reached<T> {
    At(T),
    NotReached,
}

impl<T> From<Option<T>> for Reached<T> {
    fn from(v: Option<T>) -> Self {
        v.map_or(Reached::NotReached, Reached::At)
    }
}

impl<T: Copy> Reached<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Reached::At(v) => Some(v),
            Reached::NotReached => None,
        }
    }
}

const NOT_REACHED: &str = "not_reached";

impl<T: Serialize> Serialize for Reached<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Reached::At(v) => v.serialize(s),
            Reached::NotReached => s.serialize_str(NOT_REACHED),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Reached<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Value(T),
            Marker(String),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Value(v) => Ok(Reached::At(v)),
            Raw::Marker(m) if m == NOT_REACHED => Ok(Reached::NotReached),
            Raw::Marker(m) => Err(de::Error::custom(format!(
                "expected a number or {NOT_REACHED:?}, got {m:?}"
            ))),
        }
    }
}

impl<T: fmt::Display> fmt::Display for Reached<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reached::At(v) => v.fmt(f),
            Reached::NotReached => f.write_str(NOT_REACHED),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledDisruption {
    /// Applied right before the first step of this episode.
    pub episode: u64,
    #[serde(flatten)]
    pub kind: DisruptionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub schedule: Vec<ScheduledDisruption>,
    /// Fraction of the optimal return that counts as learned.
    #[serde(default = "default_fraction")]
    pub criterion_fraction: f64,
    /// Fraction of the pre-disruption greedy return that counts as recovered.
    #[serde(default = "default_fraction")]
    pub recovery_fraction: f64,
    #[serde(default = "default_asymptotic_window")]
    pub asymptotic_window: u64,
    /// Disruption never seen in training, applied after the last episode.
    #[serde(default = "default_held_out")]
    pub held_out: DisruptionKind,
    #[serde(default = "default_robustness_rollouts")]
    pub robustness_rollouts: u32,
}

fn default_episodes() -> u64 {
    600
}
fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}
fn default_fraction() -> f64 {
    0.9
}
fn default_asymptotic_window() -> u64 {
    50
}
fn default_held_out() -> DisruptionKind {
    DisruptionKind::PhysicsAlteration {
        slip_prob: Some(0.2),
        action_permutation: None,
    }
}
fn default_robustness_rollouts() -> u32 {
    20
}

pub const MIN_SEEDS: usize = 20;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            episodes: default_episodes(),
            seeds: default_seeds(),
            schedule: Vec::new(),
            criterion_fraction: default_fraction(),
            recovery_fraction: default_fraction(),
            asymptotic_window: default_asymptotic_window(),
            held_out: default_held_out(),
            robustness_rollouts: default_robustness_rollouts(),
        }
    }
}

impl ExperimentConfig {
    /// Checks the experiment against `env`, including that every scheduled
    /// disruption and the held-out one apply cleanly in order.
    pub fn validate(&self, env: &GridConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seeds.len() < MIN_SEEDS {
            return fail(format!(
                "experiment.seeds needs at least {MIN_SEEDS} seeds, got {}",
                self.seeds.len()
            ));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return fail("experiment.seeds contains duplicates".into());
        }
        for (name, v) in [
            ("criterion_fraction", self.criterion_fraction),
            ("recovery_fraction", self.recovery_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return fail(format!("experiment.{name} must lie in (0, 1], got {v}"));
            }
        }
        if self.asymptotic_window == 0 || self.asymptotic_window > self.episodes {
            return fail("experiment.asymptotic_window must lie in [1, episodes]".into());
        }
        if self.robustness_rollouts == 0 {
            return fail("experiment.robustness_rollouts must be at least 1".into());
        }
        let Some(first) = self.schedule.first() else {
            return fail("experiment.schedule needs at least one disruption".into());
        };
        if first.episode == 0 {
            return fail("the first scheduled disruption must come after episode 0".into());
        }
        let mut cfg = env.clone();
        let mut last = 0;
        for d in &self.schedule {
            if d.episode < last || d.episode >= self.episodes {
                return fail(format!(
                    "scheduled disruption at episode {} is out of order or past the run",
                    d.episode
                ));
            }
            last = d.episode;
            cfg = disruption::apply_disruption(&cfg, &d.kind, cfg.start).map_err(|e| {
                Error::Config(format!(
                    "scheduled {} at episode {}: {e}",
                    d.kind.name(),
                    d.episode
                ))
            })?;
        }
        disruption::validate(&self.held_out, &cfg, cfg.start)
            .map_err(|e| Error::Config(format!("held-out disruption: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Conditioned,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Conditioned => "conditioned",
        }
    }
}

/// Everything one arm needs besides its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub environment: GridConfig,
    pub hyperparams: Hyperparams,
    pub snapshot_interval: u64,
    pub layers: LayerConfig,
    pub thresholds: Thresholds,
    pub rule: ActionRule,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub episodes_to_criterion: Reached<u64>,
    /// Mean greedy return over the last `asymptotic_window` episodes.
    pub asymptotic_return: f64,
    pub recovery_episodes: Reached<u64>,
    /// Mean greedy return under the held-out disruption.
    pub robustness_return: f64,
}

/// Full output of one arm on one seed.
#[derive(Debug)]
pub struct ArmRun {
    pub metrics: SeedMetrics,
    pub curve: Vec<f64>,
    pub db: GhostDatabase,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Episodes from `at` until the curve regains `fraction` of its level at `at - 1`.
///
/// For a negative level the target is loosened by the same relative margin.
pub fn recovery_episodes(curve: &[f64], at: usize, fraction: f64) -> Option<u64> {
    let pre = *curve.get(at.checked_sub(1)?)?;
    let target = pre - (1.0 - fraction) * pre.abs();
    curve[at..]
        .iter()
        .position(|r| *r >= target)
        .map(|k| k as u64)
}

/// Trains one arm on one seed and measures it.
pub fn run_arm(spec: &ArmSpec, seed: u64) -> Result<ArmRun> {
    let exp = &spec.experiment;
    let settings = SimSettings {
        environment: spec.environment.clone(),
        hyperparams: spec.hyperparams.clone(),
        snapshot_interval: spec.snapshot_interval,
        seed,
        layers: spec.layers.clone(),
        thresholds: spec.thresholds.clone(),
        rule: spec.rule.clone(),
        auto_label: AutoLabel::AfterDisruption,
        spawn_ghosts: false,
    };
    let mut sim = Simulation::new(settings)?;
    let mut schedule = exp.schedule.iter().peekable();
    let mut curve = Vec::with_capacity(exp.episodes as usize);
    for episode in 0..exp.episodes {
        while let Some(d) = schedule.next_if(|d| d.episode == episode) {
            sim.queue_disruption(d.kind.clone(), Author::Script("schedule".into()))?;
        }
        curve.push(sim.run_episode()?.greedy_return);
    }

    let optimal = spec.environment.optimal_return()?;
    let criterion = optimal - (1.0 - exp.criterion_fraction) * optimal.abs();
    let tail = &curve[curve.len() - exp.asymptotic_window as usize..];
    let first_disruption = exp.schedule[0].episode as usize;

    let held_out = disruption::apply_disruption(sim.config(), &exp.held_out, sim.config().start)?;
    let mut rng = rng::stream(seed, Stream::Robustness);
    let returns: Vec<f64> = (0..exp.robustness_rollouts)
        .map(|_| {
            evaluate_greedy(
                &spec.rule,
                sim.qtable(),
                sim.db(),
                &held_out,
                exp.episodes,
                &mut rng,
            )
        })
        .collect::<Result<_>>()?;

    let metrics = SeedMetrics {
        seed,
        episodes_to_criterion: episodes_to_criterion(&curve, criterion)
            .map(|i| i as u64)
            .into(),
        asymptotic_return: mean(tail),
        recovery_episodes: recovery_episodes(&curve, first_disruption, exp.recovery_fraction)
            .into(),
        robustness_return: mean(&returns),
    };
    Ok(ArmRun {
        metrics,
        curve,
        db: sim.into_db(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub seeds: Vec<SeedMetrics>,
}

/// Paired comparison of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub metric: String,
    pub lower_is_better: bool,
    pub baseline_median: Reached<f64>,
    pub conditioned_median: Reached<f64>,
    /// Seeds where the conditioned arm did strictly better.
    pub conditioned_better: usize,
    pub baseline_better: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub statement: String,
    pub baseline_median_recovery: Reached<f64>,
    pub conditioned_median_recovery: Reached<f64>,
    /// Unset when neither median was reached.
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: ArmReport,
    pub conditioned: ArmReport,
    pub summary: Vec<PairedSummary>,
    pub hypothesis: Hypothesis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub arm: Arm,
    pub episode: u64,
    pub greedy_return: f64,
}

#[derive(Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub curves: Vec<CurveRow>,
}

/// Sort key with "not reached" ordered after every value.
fn rank(v: Reached<f64>) -> (bool, f64) {
    match v {
        Reached::At(x) => (false, x),
        Reached::NotReached => (true, 0.0),
    }
}

/// Median treating "not reached" as larger than any value.
pub fn median(values: &[Reached<f64>]) -> Reached<f64> {
    if values.is_empty() {
        return Reached::NotReached;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| {
        let (ra, rb) = (rank(*a), rank(*b));
        ra.0.cmp(&rb.0).then(ra.1.total_cmp(&rb.1))
    });
    let n = sorted.len();
    if n % 2 == 1 {
        return sorted[n / 2];
    }
    match (sorted[n / 2 - 1], sorted[n / 2]) {
        (Reached::At(a), Reached::At(b)) => Reached::At((a + b) / 2.0),
        _ => Reached::NotReached,
    }
}

fn paired(
    metric: &str,
    lower_is_better: bool,
    base: &[Reached<f64>],
    cond: &[Reached<f64>],
) -> PairedSummary {
    let (mut cb, mut bb, mut ties) = (0, 0, 0);
    for (b, c) in base.iter().zip(cond) {
        let ord = {
            let (rb, rc) = (rank(*b), rank(*c));
            rc.0.cmp(&rb.0).then(rc.1.total_cmp(&rb.1))
        };
        let ord = if lower_is_better { ord } else { ord.reverse() };
        match ord {
            std::cmp::Ordering::Less => cb += 1,
            std::cmp::Ordering::Greater => bb += 1,
            std::cmp::Ordering::Equal => ties += 1,
        }
    }
    PairedSummary {
        metric: metric.into(),
        lower_is_better,
        baseline_median: median(base),
        conditioned_median: median(cond),
        conditioned_better: cb,
        baseline_better: bb,
        ties,
    }
}

fn summarise(base: &[SeedMetrics], cond: &[SeedMetrics]) -> Vec<PairedSummary> {
    let count = |f: fn(&SeedMetrics) -> Reached<u64>, xs: &[SeedMetrics]| -> Vec<Reached<f64>> {
        xs.iter()
            .map(|m| f(m).value().map(|v| v as f64).into())
            .collect()
    };
    let value = |f: fn(&SeedMetrics) -> f64, xs: &[SeedMetrics]| -> Vec<Reached<f64>> {
        xs.iter().map(|m| Reached::At(f(m))).collect()
    };
    vec![
        paired(
            "episodes_to_criterion",
            true,
            &count(|m| m.episodes_to_criterion, base),
            &count(|m| m.episodes_to_criterion, cond),
        ),
        paired(
            "asymptotic_return",
            false,
            &value(|m| m.asymptotic_return, base),
            &value(|m| m.asymptotic_return, cond),
        ),
        paired(
            "recovery_episodes",
            true,
            &count(|m| m.recovery_episodes, base),
            &count(|m| m.recovery_episodes, cond),
        ),
        paired(
            "robustness_return",
            false,
            &value(|m| m.robustness_return, base),
            &value(|m| m.robustness_return, cond),
        ),
    ]
}

/// Runs both arms on every seed (in parallel) and assembles the report.
pub fn run_experiment(base: &ArmSpec, penalty: &PenaltyConfig) -> Result<ExperimentRun> {
    base.experiment.validate(&base.environment)?;
    penalty.validate()?;
    let baseline = ArmSpec {
        rule: ActionRule::Plain,
        ..base.clone()
    };
    let conditioned = ArmSpec {
        rule: ActionRule::Conditioned(penalty.clone()),
        ..base.clone()
    };
    let jobs: Vec<(Arm, u64)> = base
        .experiment
        .seeds
        .iter()
        .flat_map(|&s| [(Arm::Baseline, s), (Arm::Conditioned, s)])
        .collect();
    let runs: Vec<(Arm, u64, SeedMetrics, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let spec = match arm {
                Arm::Baseline => &baseline,
                Arm::Conditioned => &conditioned,
            };
            run_arm(spec, seed).map(|r| (arm, seed, r.metrics, r.curve))
        })
        .collect::<Result<_>>()?;

    let mut curves = Vec::new();
    let mut base_metrics = Vec::new();
    let mut cond_metrics = Vec::new();
    for (arm, seed, metrics, curve) in runs {
        curves.extend(curve.into_iter().enumerate().map(|(e, r)| CurveRow {
            seed,
            arm,
            episode: e as u64,
            greedy_return: r,
        }));
        match arm {
            Arm::Baseline => base_metrics.push(metrics),
            Arm::Conditioned => cond_metrics.push(metrics),
        }
    }
    let summary = summarise(&base_metrics, &cond_metrics);
    let recovery = &summary[2];
    let holds = match (recovery.baseline_median, recovery.conditioned_median) {
        (Reached::NotReached, Reached::NotReached) => None,
        (b, c) => Some(rank(c) <= rank(b)),
    };
    let hypothesis = Hypothesis {
        statement: "median recovery_episodes of the conditioned arm <= baseline".into(),
        baseline_median_recovery: recovery.baseline_median,
        conditioned_median_recovery: recovery.conditioned_median,
        holds,
    };
    Ok(ExperimentRun {
        report: ExperimentReport {
            baseline: ArmReport {
                arm: Arm::Baseline,
                seeds: base_metrics,
            },
            conditioned: ArmReport {
                arm: Arm::Conditioned,
                seeds: cond_metrics,
            },
            summary,
            hypothesis,
        },
        curves,
    })
}

/// Writes learning curves as `seed,arm,episode,greedy_return`.
pub fn write_curves<W: Write>(w: W, curves: &[CurveRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::io("learning curves", std::io::Error::other(e));
    out.write_record(["seed", "arm", "episode", "greedy_return"])
        .map_err(io)?;
    for row in curves {
        out.write_record([
            row.seed.to_string(),
            row.arm.as_str().to_string(),
            row.episode.to_string(),
            row.greedy_return.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush().map_err(|e| Error::io("learning curves", e))?;
    Ok(())
}
