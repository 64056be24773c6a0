use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GhostDatabase, Trajectory};
use crate::agent::{greedy_rollout, PolicySnapshot};
use crate::env::{Cell, GridConfig, State};
use crate::error::{Error, Result};
use crate::ids::SnapshotId;

/// The live agent is always drawn fully opaque.
pub const LIVE_ALPHA: f64 = 1.0;

fn default_k_recent() -> u64 {
    5
}
fn default_k_historical() -> u64 {
    50
}
fn default_alpha_min() -> f64 {
    0.15
}
fn default_max_age() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(default = "default_k_recent")]
    pub k_recent: u64,
    #[serde(default = "default_k_historical")]
    pub k_historical: u64,
    #[serde(default = "default_alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "default_max_age")]
    pub max_age: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            k_recent: default_k_recent(),
            k_historical: default_k_historical(),
            alpha_min: default_alpha_min(),
            max_age: default_max_age(),
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return Err(Error::Config(format!(
                "layers.alpha_min must lie in (0, 1), got {}",
                self.alpha_min
            )));
        }
        if !(self.max_age > 0.0 && self.max_age.is_finite()) {
            return Err(Error::Config(format!(
                "layers.max_age must be positive, got {}",
                self.max_age
            )));
        }
        if self.k_recent >= self.k_historical {
            return Err(Error::Config(format!(
                "layers.k_recent ({}) must be smaller than k_historical ({})",
                self.k_recent, self.k_historical
            )));
        }
        Ok(())
    }
}

/// Linear fade with a floor: `max(alpha_min, 1 - age / max_age)`.
pub fn alpha_for_age(age: f64, alpha_min: f64, max_age: f64) -> f64 {
    (1.0 - age / max_age).max(alpha_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhostKind {
    Recent,
    Historical,
    PreDisruption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhostColor {
    Red,
    Grey,
    Green,
}

impl GhostKind {
    pub fn color(self) -> GhostColor {
        match self {
            GhostKind::Recent => GhostColor::Red,
            GhostKind::Historical => GhostColor::Grey,
            GhostKind::PreDisruption => GhostColor::Green,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            GhostKind::Recent => "recent",
            GhostKind::Historical => "historical",
            GhostKind::PreDisruption => "pre_disruption",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ghost {
    pub id: String,
    pub kind: GhostKind,
    pub source_snapshot_id: SnapshotId,
    pub source_episode: u64,
    pub trajectory: Trajectory,
    pub alpha: f64,
    pub color: GhostColor,
}

impl Ghost {
    pub fn path(&self) -> Vec<Cell> {
        self.trajectory.path()
    }
}

/// Past snapshot whose episode is nearest to `target`; ties go to the older
/// episode, then to the later capture.
fn nearest_snapshot(
    db: &GhostDatabase,
    current_episode: u64,
    target: i64,
) -> Option<&Arc<PolicySnapshot>> {
    db.snapshots()
        .iter()
        .filter(|s| s.episode_index() < current_episode)
        .min_by_key(|s| {
            let e = s.episode_index() as i64;
            ((e - target).abs(), e, std::cmp::Reverse(s.id()))
        })
}

/// Replays up to three ghost layers for the episode that `current` belongs to.
///
/// Recent and Historical replay under `config`; the pre-disruption ghost
/// replays under the environment its snapshot was captured in. All ghosts
/// start from `config.start`.
pub fn spawn_ghosts(
    db: &GhostDatabase,
    config: &GridConfig,
    current: &State,
    layers: &LayerConfig,
) -> Vec<Ghost> {
    let episode = current.episode;
    let start = State {
        agent: config.start,
        tick: 0,
        episode,
    };
    let age_alpha = |snap: &PolicySnapshot| {
        let age = episode.saturating_sub(snap.episode_index()) as f64;
        alpha_for_age(age, layers.alpha_min, layers.max_age)
    };
    let make = |kind: GhostKind, snap: &PolicySnapshot, world: &GridConfig| {
        let trajectory = greedy_rollout(snap, world, start, world.max_steps).ok()?;
        Some(Ghost {
            id: format!("{}-{}", kind.tag(), snap.id().0),
            kind,
            source_snapshot_id: snap.id(),
            source_episode: snap.episode_index(),
            trajectory,
            alpha: age_alpha(snap),
            color: kind.color(),
        })
    };

    let mut ghosts = Vec::with_capacity(3);
    let recent = nearest_snapshot(db, episode, episode as i64 - layers.k_recent as i64);
    if let Some(snap) = recent {
        ghosts.extend(make(GhostKind::Recent, snap, config));
    }
    let historical = nearest_snapshot(db, episode, episode as i64 - layers.k_historical as i64);
    if let (Some(hist), Some(rec)) = (historical, recent) {
        // Same snapshot or the same clamped opacity would break layer ordering.
        if hist.id() != rec.id() && age_alpha(hist) < age_alpha(rec) {
            ghosts.extend(make(GhostKind::Historical, hist, config));
        }
    }
    if !db.disruptions().is_empty() {
        let pre = db
            .snapshots()
            .iter()
            .filter(|s| s.captured_pre_disruption())
            .max_by_key(|s| s.id());
        if let Some(snap) = pre {
            ghosts.extend(make(GhostKind::PreDisruption, snap, snap.config()));
        }
    }
    ghosts
}
