//! The ghost database: an append-only store of recorded episodes, frozen
//! policy snapshots, failure labels and the applied-disruption journal.
//!
//! Episodes are the retrieval unit. Every cell an episode visits is indexed so
//! the dual-learning loop can ask which labelled failures passed through the
//! agent's current cell.

mod layers;
mod persist;
mod retrieval;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::PolicySnapshot;
use crate::disruption::Disruption;
use crate::env::{Action, Cell, DoneReason, Transition};
use crate::error::{Error, Result};
use crate::ids::{DisruptionId, SnapshotId, TrajectoryId};
use crate::taxonomy::FailureMode;

pub use layers::{
    alpha_for_age, spawn_ghosts, Ghost, GhostColor, GhostKind, LayerConfig, LIVE_ALPHA,
};
pub use persist::{
    load, persist, read_labels, read_trajectories, trajectory_line, write_labels, TrajectoryLine,
    DISRUPTIONS_FILE, GHOSTS_FILE, LABELS_FILE, SNAPSHOTS_FILE,
};
pub use retrieval::{failure_occurrences, get_failure_actions, retrieve_ghosts};

/// Rater id used for labels produced by the rule classifier.
pub const AUTO_RATER: &str = "auto-classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Timeout,
}

/// An ordered, chained sequence of transitions from one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_index: u64,
    pub transitions: Vec<Transition>,
    pub snapshot_id: Option<SnapshotId>,
    pub disruptions_active: Vec<DisruptionId>,
}

impl Trajectory {
    pub fn new(episode_index: u64, transitions: Vec<Transition>) -> Self {
        Trajectory {
            episode_index,
            transitions,
            snapshot_id: None,
            disruptions_active: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn outcome(&self) -> Outcome {
        match self.transitions.last() {
            Some(t) if t.done_reason == DoneReason::Goal => Outcome::Success,
            _ => Outcome::Timeout,
        }
    }

    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::validation("trajectory has no transitions"));
        }
        for (k, pair) in self.transitions.windows(2).enumerate() {
            if pair[0].s_next != pair[1].s {
                return Err(Error::validation(format!(
                    "trajectory breaks chaining between steps {k} and {}",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    /// Agent cells in visiting order, including the final resting cell.
    pub fn path(&self) -> Vec<Cell> {
        let mut path: Vec<Cell> = self.transitions.iter().map(|t| t.s.agent).collect();
        if let Some(last) = self.transitions.last() {
            path.push(last.s_next.agent);
        }
        path
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub trajectory_id: TrajectoryId,
    pub rater_id: String,
    pub failure_mode: FailureMode,
    pub unix_ts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrajectory {
    pub id: TrajectoryId,
    pub trajectory: Trajectory,
    labels: Vec<(String, FailureMode)>,
}

impl StoredTrajectory {
    pub fn labels(&self) -> &[(String, FailureMode)] {
        &self.labels
    }

    /// Human labels take precedence over the classifier's when any exist.
    pub fn is_failure(&self) -> bool {
        let human: Vec<FailureMode> = self
            .labels
            .iter()
            .filter(|(rater, _)| rater != AUTO_RATER)
            .map(|(_, m)| *m)
            .collect();
        let verdicts: Vec<FailureMode> = if human.is_empty() {
            self.labels.iter().map(|(_, m)| *m).collect()
        } else {
            human
        };
        verdicts.iter().any(|m| *m != FailureMode::None)
    }
}

/// Failure occurrences at one cell: per action, episode index to count.
pub type FailureCounts = [BTreeMap<u64, u32>; 5];

#[derive(Debug, Default)]
pub struct GhostDatabase {
    trajectories: Vec<StoredTrajectory>,
    snapshots: Vec<Arc<PolicySnapshot>>,
    snapshot_pos: HashMap<SnapshotId, usize>,
    labels: Vec<LabelRecord>,
    disruptions: Vec<Disruption>,
    cell_index: HashMap<Cell, Vec<TrajectoryId>>,
    failing: Vec<bool>,
    failure_index: HashMap<Cell, FailureCounts>,
    sink: Option<persist::Sink>,
}

impl PartialEq for GhostDatabase {
    fn eq(&self, other: &Self) -> bool {
        self.trajectories == other.trajectories
            && self.snapshots == other.snapshots
            && self.labels == other.labels
            && self.disruptions == other.disruptions
    }
}

impl GhostDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes the current contents to `dir` and appends every later record
    /// to the same files as it arrives.
    pub fn attach_log(&mut self, dir: &Path) -> Result<()> {
        persist(self, dir)?;
        self.sink = Some(persist::Sink::open(dir)?);
        Ok(())
    }

    pub fn record_episode(&mut self, trajectory: Trajectory) -> Result<TrajectoryId> {
        trajectory.validate()?;
        let id = TrajectoryId(self.trajectories.len() as u64);
        if let Some(sink) = &mut self.sink {
            sink.trajectory(id, &trajectory)?;
        }
        let mut visited = trajectory.path();
        visited.sort_unstable();
        visited.dedup();
        for cell in visited {
            self.cell_index.entry(cell).or_default().push(id);
        }
        self.trajectories.push(StoredTrajectory {
            id,
            trajectory,
            labels: Vec::new(),
        });
        self.failing.push(false);
        Ok(id)
    }

    pub fn add_snapshot(&mut self, snapshot: PolicySnapshot) -> Result<Arc<PolicySnapshot>> {
        if self.snapshot_pos.contains_key(&snapshot.id()) {
            return Err(Error::validation(format!(
                "duplicate snapshot id {}",
                snapshot.id()
            )));
        }
        if let Some(sink) = &mut self.sink {
            sink.snapshot(&snapshot)?;
        }
        let snapshot = Arc::new(snapshot);
        self.snapshot_pos
            .insert(snapshot.id(), self.snapshots.len());
        self.snapshots.push(Arc::clone(&snapshot));
        Ok(snapshot)
    }

    pub fn add_label(&mut self, label: LabelRecord) -> Result<()> {
        let pos = label.trajectory_id.0 as usize;
        if pos >= self.trajectories.len() {
            return Err(Error::State(format!(
                "unknown trajectory id {}",
                label.trajectory_id.0
            )));
        }
        if let Some(sink) = &mut self.sink {
            sink.label(&label)?;
        }
        self.trajectories[pos]
            .labels
            .push((label.rater_id.clone(), label.failure_mode));
        self.labels.push(label);
        self.refresh_failure(pos);
        Ok(())
    }

    /// Appends an applied disruption to the journal.
    pub fn log_disruption(&mut self, disruption: Disruption) -> Result<()> {
        if disruption.applied_at_episode.is_none() || disruption.applied_at_tick.is_none() {
            return Err(Error::validation(format!(
                "disruption {} has not been applied",
                disruption.id
            )));
        }
        if self.disruptions.iter().any(|d| d.id == disruption.id) {
            return Err(Error::validation(format!(
                "duplicate disruption id {}",
                disruption.id
            )));
        }
        if let Some(sink) = &mut self.sink {
            sink.disruption(&disruption)?;
        }
        self.disruptions.push(disruption);
        Ok(())
    }

    fn refresh_failure(&mut self, pos: usize) {
        let now = self.trajectories[pos].is_failure();
        if now == self.failing[pos] {
            return;
        }
        self.failing[pos] = now;
        let episode = self.trajectories[pos].trajectory.episode_index;
        for t in &self.trajectories[pos].trajectory.transitions {
            let counts = self.failure_index.entry(t.s.agent).or_default();
            let slot = &mut counts[t.a.index()];
            if now {
                *slot.entry(episode).or_insert(0) += 1;
            } else if let Some(c) = slot.get_mut(&episode) {
                *c -= 1;
                if *c == 0 {
                    slot.remove(&episode);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[StoredTrajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, id: TrajectoryId) -> Option<&StoredTrajectory> {
        self.trajectories.get(id.0 as usize)
    }

    pub fn snapshots(&self) -> &[Arc<PolicySnapshot>] {
        &self.snapshots
    }

    pub fn snapshot(&self, id: SnapshotId) -> Option<&Arc<PolicySnapshot>> {
        self.snapshot_pos.get(&id).map(|&i| &self.snapshots[i])
    }

    pub fn labels(&self) -> &[LabelRecord] {
        &self.labels
    }

    pub fn disruptions(&self) -> &[Disruption] {
        &self.disruptions
    }

    /// Ids of trajectories whose path includes `cell`, oldest first.
    pub fn visiting(&self, cell: Cell) -> &[TrajectoryId] {
        self.cell_index.get(&cell).map_or(&[], Vec::as_slice)
    }

    /// Aggregated failure occurrences at `cell`, maintained as labels arrive.
    pub fn failure_counts(&self, cell: Cell) -> Option<&FailureCounts> {
        self.failure_index.get(&cell)
    }

    /// Actions taken at `cell` in labelled failure trajectories, from the index.
    pub fn failure_actions_at(&self, cell: Cell) -> [bool; 5] {
        let mut out = [false; 5];
        if let Some(counts) = self.failure_index.get(&cell) {
            for a in Action::ALL {
                out[a.index()] = !counts[a.index()].is_empty();
            }
        }
        out
    }

    /// Checks that the cell index agrees with the log.
    pub fn index_consistent(&self) -> bool {
        let indexed_exist = self
            .cell_index
            .values()
            .flatten()
            .all(|id| (id.0 as usize) < self.trajectories.len());
        let all_indexed = self.trajectories.iter().all(|st| {
            st.trajectory
                .path()
                .iter()
                .all(|c| self.visiting(*c).contains(&st.id))
        });
        indexed_exist && all_indexed
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::env::State;

    pub(crate) fn walk(episode: u64, cells: &[(i32, i32)], actions: &[Action]) -> Trajectory {
        assert_eq!(cells.len(), actions.len() + 1);
        let transitions = actions
            .iter()
            .enumerate()
            .map(|(k, a)| Transition {
                s: State {
                    agent: Cell::new(cells[k].0, cells[k].1),
                    tick: k as u32,
                    episode,
                },
                a: *a,
                r: -0.01,
                s_next: State {
                    agent: Cell::new(cells[k + 1].0, cells[k + 1].1),
                    tick: k as u32 + 1,
                    episode,
                },
                done: false,
                done_reason: DoneReason::None,
            })
            .collect();
        Trajectory::new(episode, transitions)
    }

    fn three_step() -> Trajectory {
        walk(
            0,
            &[(0, 0), (1, 0), (1, 1), (1, 2)],
            &[Action::Right, Action::Down, Action::Down],
        )
    }

    #[test]
    fn record_assigns_fresh_ids() {
        let mut db = GhostDatabase::new();
        let a = db.record_episode(three_step()).unwrap();
        assert_eq!(db.len(), 1);
        let b = db.record_episode(three_step()).unwrap();
        assert_ne!(a, b);
        assert_eq!(db.len(), 2);
        assert!(db.index_consistent());
        assert_eq!(db.visiting(Cell::new(1, 1)), &[a, b]);
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut t = three_step();
        t.transitions[1].s.agent = Cell::new(5, 5);
        let mut db = GhostDatabase::new();
        assert!(matches!(
            db.record_episode(t),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            db.record_episode(Trajectory::new(0, vec![])),
            Err(Error::Validation { .. })
        ));
        assert!(db.is_empty());
    }

    #[test]
    fn totals_and_outcome() {
        let t = three_step();
        assert!((t.total_return() - -0.03).abs() < 1e-15);
        assert_eq!(t.outcome(), Outcome::Timeout);
        assert_eq!(t.path().len(), 4);
    }

    #[test]
    fn label_unknown_trajectory_is_state_error() {
        let mut db = GhostDatabase::new();
        let err = db
            .add_label(LabelRecord {
                trajectory_id: TrajectoryId(3),
                rater_id: "r1".into(),
                failure_mode: FailureMode::ObsessiveLoop,
                unix_ts: 0,
            })
            .unwrap_err();
        assert_eq!(err.code(), "E_STATE");
    }

    #[test]
    fn human_labels_override_classifier() {
        let mut db = GhostDatabase::new();
        let id = db.record_episode(three_step()).unwrap();
        let label = |rater: &str, mode| LabelRecord {
            trajectory_id: id,
            rater_id: rater.into(),
            failure_mode: mode,
            unix_ts: 0,
        };
        db.add_label(label(AUTO_RATER, FailureMode::GradualDrift))
            .unwrap();
        assert!(db.trajectory(id).unwrap().is_failure());
        assert!(db.failure_actions_at(Cell::new(1, 1))[Action::Down.index()]);
        db.add_label(label("alice", FailureMode::None)).unwrap();
        assert!(!db.trajectory(id).unwrap().is_failure());
        assert_eq!(db.failure_actions_at(Cell::new(1, 1)), [false; 5]);
        db.add_label(label("bob", FailureMode::ObsessiveLoop))
            .unwrap();
        assert!(db.trajectory(id).unwrap().is_failure());
        assert_eq!(db.trajectory(id).unwrap().labels().len(), 3);
    }
}
