use std::collections::BTreeSet;

use super::{GhostDatabase, StoredTrajectory, Trajectory};
use crate::env::{Action, Cell, State};

/// Labelled failure trajectories visiting any cell within Manhattan distance
/// `radius` of `s.agent`, newest first.
pub fn retrieve_ghosts<'a>(
    db: &'a GhostDatabase,
    s: &State,
    radius: u32,
) -> Vec<&'a StoredTrajectory> {
    let r = radius as i32;
    let mut ids = BTreeSet::new();
    for dx in -r..=r {
        let span = r - dx.abs();
        for dy in -span..=span {
            let cell = Cell::new(s.agent.x + dx, s.agent.y + dy);
            ids.extend(db.visiting(cell).iter().copied());
        }
    }
    ids.into_iter()
        .rev()
        .filter_map(|id| db.trajectory(id))
        .filter(|st| st.is_failure())
        .collect()
}

/// Actions taken at `s.agent` across the given trajectories.
pub fn get_failure_actions<'a, I>(trajectories: I, s: &State) -> BTreeSet<Action>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    failure_occurrences(trajectories, s)
        .into_iter()
        .map(|(a, _)| a)
        .collect()
}

/// Every (action, episode) occurrence at `s.agent` across the given trajectories.
pub fn failure_occurrences<'a, I>(trajectories: I, s: &State) -> Vec<(Action, u64)>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    trajectories
        .into_iter()
        .flat_map(|t| {
            t.transitions
                .iter()
                .filter(|tr| tr.s.agent == s.agent)
                .map(move |tr| (tr.a, t.episode_index))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ghost::tests::walk;
    use crate::ghost::{LabelRecord, AUTO_RATER};
    use crate::ids::TrajectoryId;
    use crate::taxonomy::FailureMode;

    fn at(x: i32, y: i32) -> State {
        State {
            agent: Cell::new(x, y),
            tick: 0,
            episode: 10,
        }
    }

    fn label(db: &mut GhostDatabase, id: TrajectoryId, mode: FailureMode) {
        db.add_label(LabelRecord {
            trajectory_id: id,
            rater_id: AUTO_RATER.into(),
            failure_mode: mode,
            unix_ts: 0,
        })
        .unwrap();
    }

    #[test]
    fn empty_database_retrieves_nothing() {
        let db = GhostDatabase::new();
        assert!(retrieve_ghosts(&db, &at(0, 0), 3).is_empty());
        assert!(get_failure_actions(std::iter::empty(), &at(0, 0)).is_empty());
    }

    #[test]
    fn labelled_failure_is_retrieved_at_visited_cell() {
        let mut db = GhostDatabase::new();
        let loop_ = walk(
            1,
            &[(2, 2), (2, 1), (2, 2), (2, 1), (2, 2)],
            &[Action::Up, Action::Down, Action::Up, Action::Down],
        );
        let id = db.record_episode(loop_).unwrap();
        assert!(retrieve_ghosts(&db, &at(2, 2), 0).is_empty(), "unlabelled");
        label(&mut db, id, FailureMode::ObsessiveLoop);
        let hits = retrieve_ghosts(&db, &at(2, 2), 0);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, id);
        let actions = get_failure_actions(hits.iter().map(|h| &h.trajectory), &at(2, 2));
        assert_eq!(actions, BTreeSet::from([Action::Up]));
        assert!(retrieve_ghosts(&db, &at(3, 3), 0).is_empty());
    }

    #[test]
    fn radius_reaches_four_neighbours() {
        let mut db = GhostDatabase::new();
        let id = db
            .record_episode(walk(0, &[(5, 4), (5, 5)], &[Action::Down]))
            .unwrap();
        label(&mut db, id, FailureMode::GradualDrift);
        assert!(retrieve_ghosts(&db, &at(4, 4), 0).is_empty());
        assert_eq!(retrieve_ghosts(&db, &at(4, 4), 1).len(), 1);
        // (4,5) is only a diagonal neighbour of (5,4) but (5,5) is adjacent.
        assert_eq!(retrieve_ghosts(&db, &at(4, 5), 1).len(), 1);
        assert!(retrieve_ghosts(&db, &at(3, 3), 1).is_empty());
    }

    #[test]
    fn union_of_actions_and_newest_first() {
        let mut db = GhostDatabase::new();
        let a = db
            .record_episode(walk(0, &[(1, 1), (1, 0)], &[Action::Up]))
            .unwrap();
        let b = db
            .record_episode(walk(1, &[(1, 1), (0, 1)], &[Action::Left]))
            .unwrap();
        let ok = db
            .record_episode(walk(2, &[(1, 1), (2, 1)], &[Action::Right]))
            .unwrap();
        label(&mut db, a, FailureMode::ManicOscillation);
        label(&mut db, b, FailureMode::PolicyFragmentation);
        label(&mut db, ok, FailureMode::None);
        let hits = retrieve_ghosts(&db, &at(1, 1), 0);
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![b, a]);
        let actions = get_failure_actions(hits.iter().map(|h| &h.trajectory), &at(1, 1));
        assert_eq!(actions, BTreeSet::from([Action::Up, Action::Left]));
    }
}
