//! Tabular Q-learning with epsilon-greedy exploration and frozen policy snapshots.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{self, Action, Cell, GridConfig, State, Transition};
use crate::error::{Error, Result};
use crate::ghost::Trajectory;
use crate::ids::{DisruptionId, IdSeq, SnapshotId};

/// Table key: the agent cell plus whether the goal is currently hidden.
///
/// Splitting on the occlusion flag gives the tabular agent a distinct value
/// estimate when it cannot see where the goal is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub cell: Cell,
    pub occluded: bool,
}

impl StateKey {
    pub fn new(config: &GridConfig, state: &State) -> Self {
        StateKey {
            cell: state.agent,
            occluded: config.goal_occluded(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QTable {
    values: BTreeMap<StateKey, [f64; 5]>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Missing entries read as zero.
    pub fn values(&self, key: &StateKey) -> [f64; 5] {
        self.values.get(key).copied().unwrap_or([0.0; 5])
    }

    pub fn get(&self, key: &StateKey, action: Action) -> f64 {
        self.values(key)[action.index()]
    }

    /// Seeds a value directly, e.g. for fixtures. Learning goes through [`update`].
    pub fn set(&mut self, key: StateKey, action: Action, value: f64) {
        assert!(value.is_finite(), "Q-values must be finite");
        self.values.entry(key).or_insert([0.0; 5])[action.index()] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &[f64; 5])> {
        self.values.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct QEntry {
    x: i32,
    y: i32,
    occluded: bool,
    values: [f64; 5],
}

impl Serialize for QTable {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.values.iter().map(|(k, v)| QEntry {
            x: k.cell.x,
            y: k.cell.y,
            occluded: k.occluded,
            values: *v,
        }))
    }
}

impl<'de> Deserialize<'de> for QTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let entries = Vec::<QEntry>::deserialize(deserializer)?;
        let mut values = BTreeMap::new();
        for e in entries {
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err(serde::de::Error::custom("non-finite Q-value"));
            }
            let key = StateKey {
                cell: Cell::new(e.x, e.y),
                occluded: e.occluded,
            };
            if values.insert(key, e.values).is_some() {
                return Err(serde::de::Error::custom(format!(
                    "duplicate Q-table key ({}, {}, occluded={})",
                    e.x, e.y, e.occluded
                )));
            }
        }
        Ok(QTable { values })
    }
}

fn default_alpha() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.99
}
fn default_epsilon_start() -> f64 {
    1.0
}
fn default_epsilon_end() -> f64 {
    0.05
}
fn default_epsilon_decay() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon_start")]
    pub epsilon_start: f64,
    #[serde(default = "default_epsilon_end")]
    pub epsilon_end: f64,
    #[serde(default = "default_epsilon_decay")]
    pub epsilon_decay_episodes: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: default_alpha(),
            gamma: default_gamma(),
            epsilon_start: default_epsilon_start(),
            epsilon_end: default_epsilon_end(),
            epsilon_decay_episodes: default_epsilon_decay(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!(
                "agent.alpha must lie in (0, 1], got {}",
                self.alpha
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!(
                "agent.gamma must lie in [0, 1], got {}",
                self.gamma
            ));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("agent.{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return fail("agent.epsilon_end must not exceed epsilon_start".into());
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the decay window.
    pub fn epsilon_at(&self, episode: u64) -> f64 {
        if self.epsilon_decay_episodes == 0 || episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Argmax with ties broken by [`Action::ALL`] order.
pub fn argmax(scores: &[f64; 5]) -> Action {
    let mut best = 0;
    for i in 1..5 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

pub fn greedy_action(q: &QTable, key: &StateKey) -> Action {
    argmax(&q.values(key))
}

/// Draws whether to explore. Always consumes exactly one draw so that callers
/// with different greedy rules stay aligned on the exploration stream.
pub(crate) fn exploration_draw<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> Option<Action> {
    let u: f64 = rng.gen();
    (u < epsilon).then(|| Action::ALL[rng.gen_range(0..Action::ALL.len())])
}

pub fn select_action<R: Rng + ?Sized>(
    q: &QTable,
    key: &StateKey,
    epsilon: f64,
    rng: &mut R,
) -> Action {
    exploration_draw(epsilon, rng).unwrap_or_else(|| greedy_action(q, key))
}

/// One-step Q-learning backup. Returns the new `Q(s, a)`.
pub fn update(q: &mut QTable, config: &GridConfig, t: &Transition, h: &Hyperparams) -> f64 {
    let key = StateKey::new(config, &t.s);
    let bootstrap = if t.done {
        0.0
    } else {
        let next = q.values(&StateKey::new(config, &t.s_next));
        next.into_iter().fold(f64::NEG_INFINITY, f64::max)
    };
    let entry = q.values.entry(key).or_insert([0.0; 5]);
    let old = entry[t.a.index()];
    let new = old + h.alpha * (t.r + h.gamma * bootstrap - old);
    entry[t.a.index()] = new;
    new
}

/// Disruption bookkeeping at the moment a snapshot is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DisruptionContext {
    /// Disruptions applied so far in this run.
    pub applied: usize,
    /// Set when the snapshot is taken immediately before applying this disruption.
    pub about_to_apply: Option<DisruptionId>,
}

/// Frozen copy of a value table. Fields are read-only after capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    id: SnapshotId,
    episode_index: u64,
    captured_pre_disruption: bool,
    disruption_id_before: Option<DisruptionId>,
    /// Environment in force when the snapshot was taken.
    config: GridConfig,
    qtable: QTable,
}

impl PolicySnapshot {
    pub fn id(&self) -> SnapshotId {
        self.id
    }
    pub fn episode_index(&self) -> u64 {
        self.episode_index
    }
    pub fn captured_pre_disruption(&self) -> bool {
        self.captured_pre_disruption
    }
    pub fn disruption_id_before(&self) -> Option<DisruptionId> {
        self.disruption_id_before
    }
    pub fn config(&self) -> &GridConfig {
        &self.config
    }
    pub fn qtable(&self) -> &QTable {
        &self.qtable
    }
}

/// A snapshot counts as pre-disruption when nothing has been applied yet or
/// when it is taken right before a disruption lands.
pub fn snapshot_policy(
    q: &QTable,
    episode: u64,
    ctx: DisruptionContext,
    config: &GridConfig,
    ids: &mut IdSeq,
) -> PolicySnapshot {
    PolicySnapshot {
        id: SnapshotId(ids.next_raw()),
        episode_index: episode,
        captured_pre_disruption: ctx.applied == 0 || ctx.about_to_apply.is_some(),
        disruption_id_before: ctx.about_to_apply,
        config: config.clone(),
        qtable: q.clone(),
    }
}

/// Replays a value table greedily with slip disabled.
pub fn rollout_greedy(
    q: &QTable,
    config: &GridConfig,
    start: State,
    max_steps: u32,
) -> Result<Trajectory> {
    let mut replay = config.clone();
    replay.physics.slip_prob = 0.0;
    replay.max_steps = max_steps;
    replay.validate()?;
    if !replay.is_free(start.agent) {
        return Err(Error::Config(format!(
            "rollout start {} is not a free cell",
            start.agent
        )));
    }
    // Slip is off, so the generator is never drawn from.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut state = start;
    let mut transitions = Vec::new();
    while !env::is_terminal(&replay, &state) {
        let action = greedy_action(q, &StateKey::new(&replay, &state));
        let t = env::step(&replay, &state, action, &mut unused)?;
        state = t.s_next;
        transitions.push(t);
    }
    if transitions.is_empty() {
        return Err(Error::Done);
    }
    Ok(Trajectory::new(start.episode, transitions))
}

pub fn greedy_rollout(
    snapshot: &PolicySnapshot,
    config: &GridConfig,
    start: State,
    max_steps: u32,
) -> Result<Trajectory> {
    let mut t = rollout_greedy(&snapshot.qtable, config, start, max_steps)?;
    t.snapshot_id = Some(snapshot.id);
    Ok(t)
}
