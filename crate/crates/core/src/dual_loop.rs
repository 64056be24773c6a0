//! Ghost-conditioned action selection: the agent steers away from actions
//! that labelled failure episodes took in its current cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, exploration_draw, greedy_action, QTable, StateKey};
use crate::env::{Action, State};
use crate::error::{Error, Result};
use crate::ghost::GhostDatabase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Never pick a failure action unless every action is one.
    HardMask,
    /// Subtract a recency-weighted penalty from failure actions.
    SoftPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default = "default_mode")]
    pub mode: PenaltyMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Retrieval radius in cells around the agent.
    #[serde(default)]
    pub radius: u32,
    /// Episodes after which a failure occurrence counts half.
    #[serde(default = "default_half_life")]
    pub recency_half_life: f64,
}

fn default_mode() -> PenaltyMode {
    PenaltyMode::SoftPenalty
}
fn default_lambda() -> f64 {
    1.0
}
fn default_half_life() -> f64 {
    50.0
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            mode: default_mode(),
            lambda: default_lambda(),
            radius: 0,
            recency_half_life: default_half_life(),
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "dual_loop.lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        if !(self.recency_half_life.is_finite() && self.recency_half_life > 0.0) {
            return Err(Error::Config(format!(
                "dual_loop.recency_half_life must be positive, got {}",
                self.recency_half_life
            )));
        }
        Ok(())
    }
}

/// How an arm picks actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ActionRule {
    Plain,
    Conditioned(PenaltyConfig),
}

impl ActionRule {
    pub fn select<R: Rng + ?Sized>(
        &self,
        q: &QTable,
        key: &StateKey,
        s: &State,
        db: &GhostDatabase,
        epsilon: f64,
        rng: &mut R,
    ) -> Action {
        exploration_draw(epsilon, rng).unwrap_or_else(|| self.greedy(q, key, s, db))
    }

    /// The action with exploration disabled.
    pub fn greedy(&self, q: &QTable, key: &StateKey, s: &State, db: &GhostDatabase) -> Action {
        match self {
            ActionRule::Plain => greedy_action(q, key),
            ActionRule::Conditioned(pc) => conditioned_greedy(q, key, s, db, pc),
        }
    }
}

/// Epsilon-greedy selection conditioned on remembered failures.
///
/// Exploration is drawn first and is never restricted, so the exploration
/// stream stays aligned with an unconditioned agent.
pub fn conditioned_action<R: Rng + ?Sized>(
    q: &QTable,
    key: &StateKey,
    s: &State,
    db: &GhostDatabase,
    pc: &PenaltyConfig,
    epsilon: f64,
    rng: &mut R,
) -> Action {
    exploration_draw(epsilon, rng).unwrap_or_else(|| conditioned_greedy(q, key, s, db, pc))
}

/// Greedy choice after masking or penalising failure actions at `s`.
///
/// Only actions taken at `s.agent` itself are ever collected, so every
/// trajectory that contributes one also lies inside any retrieval radius;
/// the per-cell failure index therefore gives the same action set as a
/// radius query followed by action extraction.
pub fn conditioned_greedy(
    q: &QTable,
    key: &StateKey,
    s: &State,
    db: &GhostDatabase,
    pc: &PenaltyConfig,
) -> Action {
    let values = q.values(key);
    let Some(counts) = db.failure_counts(s.agent) else {
        return argmax(&values);
    };
    match pc.mode {
        PenaltyMode::HardMask => {
            let masked: Vec<bool> = counts.iter().map(|c| !c.is_empty()).collect();
            if masked.iter().all(|m| *m) {
                return argmax(&values);
            }
            let mut best: Option<usize> = None;
            for i in 0..values.len() {
                if masked[i] {
                    continue;
                }
                if best.is_none_or(|b| values[i] > values[b]) {
                    best = Some(i);
                }
            }
            Action::ALL[best.expect("at least one action is unmasked")]
        }
        PenaltyMode::SoftPenalty => {
            if pc.lambda == 0.0 {
                return argmax(&values);
            }
            let mut scores = values;
            for (score, by_episode) in scores.iter_mut().zip(counts) {
                let w: f64 = by_episode
                    .iter()
                    .map(|(&ep, &n)| {
                        let age = s.episode.saturating_sub(ep) as f64;
                        f64::from(n) * (-age / pc.recency_half_life).exp2()
                    })
                    .sum();
                *score -= pc.lambda * w;
            }
            argmax(&scores)
        }
    }
}

/// First episode whose greedy return reaches `criterion`.
pub fn episodes_to_criterion(curve: &[f64], criterion: f64) -> Option<usize> {
    curve.iter().position(|r| *r >= criterion)
}
