//! Typed, validated environment disruptions.
//!
//! A disruption is checked against the current config and agent cell before
//! it is applied. Accepted disruptions change only the fields their kind
//! governs, and the goal stays reachable from both the start cell and the
//! agent's cell.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{distances_from, Action, Cell, GridConfig, OcclusionMask, PhysicsParams};
use crate::error::{Error, Result, ValidationReason};
use crate::ghost::GhostDatabase;
use crate::ids::DisruptionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DisruptionKind {
    ObstaclePlacement {
        cells: BTreeSet<Cell>,
    },
    GoalRelocation {
        new_goal: Cell,
    },
    /// Fields left out keep their current value.
    PhysicsAlteration {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slip_prob: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        action_permutation: Option<[Action; 5]>,
    },
    RewardInversion {},
    SensoryOcclusion {
        cells: BTreeSet<Cell>,
    },
}

impl DisruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            DisruptionKind::ObstaclePlacement { .. } => "obstacle_placement",
            DisruptionKind::GoalRelocation { .. } => "goal_relocation",
            DisruptionKind::PhysicsAlteration { .. } => "physics_alteration",
            DisruptionKind::RewardInversion {} => "reward_inversion",
            DisruptionKind::SensoryOcclusion { .. } => "sensory_occlusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Human(String),
    Script(String),
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Author::Human(id) => write!(f, "human:{id}"),
            Author::Script(name) => write!(f, "script:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disruption {
    pub id: DisruptionId,
    #[serde(flatten)]
    pub kind: DisruptionKind,
    pub author: Author,
    #[serde(default)]
    pub applied_at_episode: Option<u64>,
    #[serde(default)]
    pub applied_at_tick: Option<u32>,
}

impl Disruption {
    pub fn new(id: DisruptionId, kind: DisruptionKind, author: Author) -> Self {
        Disruption {
            id,
            kind,
            author,
            applied_at_episode: None,
            applied_at_tick: None,
        }
    }

    pub fn is_applied(&self) -> bool {
        self.applied_at_episode.is_some()
    }
}

fn reject<T>(reason: ValidationReason, message: impl Into<String>) -> Result<T> {
    Err(Error::rejected(reason, message))
}

/// The config `kind` would produce, without reachability checks.
fn mutate(config: &GridConfig, kind: &DisruptionKind) -> GridConfig {
    let mut next = config.clone();
    match kind {
        DisruptionKind::ObstaclePlacement { cells } => next.obstacles.extend(cells.iter().copied()),
        DisruptionKind::GoalRelocation { new_goal } => next.goal = *new_goal,
        DisruptionKind::PhysicsAlteration {
            slip_prob,
            action_permutation,
        } => {
            next.physics = PhysicsParams {
                slip_prob: slip_prob.unwrap_or(config.physics.slip_prob),
                action_permutation: action_permutation.unwrap_or(config.physics.action_permutation),
            };
        }
        DisruptionKind::RewardInversion {} => next.reward_sign = -config.reward_sign,
        DisruptionKind::SensoryOcclusion { cells } => {
            next.occlusion = Some(OcclusionMask {
                cells: cells.clone(),
            });
        }
    }
    next
}

/// Checks `kind` against `config` with the agent currently standing on `agent`.
pub fn validate(kind: &DisruptionKind, config: &GridConfig, agent: Cell) -> Result<()> {
    use ValidationReason::*;
    if !config.in_bounds(agent) {
        return reject(
            OutOfBounds,
            format!("agent cell {agent} is outside the grid"),
        );
    }
    let out_of_bounds =
        |cells: &BTreeSet<Cell>| cells.iter().find(|c| !config.in_bounds(**c)).copied();
    match kind {
        DisruptionKind::ObstaclePlacement { cells } => {
            if cells.is_empty() {
                return reject(BadParams, "obstacle_placement needs at least one cell");
            }
            if let Some(c) = out_of_bounds(cells) {
                return reject(OutOfBounds, format!("obstacle {c} is outside the grid"));
            }
            if cells.contains(&agent) {
                return reject(Occupied, format!("the agent stands on {agent}"));
            }
            if cells.contains(&config.start) {
                return reject(Occupied, format!("{} is the start cell", config.start));
            }
            if cells.contains(&config.goal) {
                return reject(Occupied, format!("{} is the goal cell", config.goal));
            }
        }
        DisruptionKind::GoalRelocation { new_goal } => {
            if !config.in_bounds(*new_goal) {
                return reject(OutOfBounds, format!("goal {new_goal} is outside the grid"));
            }
            if config.obstacles.contains(new_goal) {
                return reject(BadParams, format!("goal {new_goal} lies on an obstacle"));
            }
            if *new_goal == config.start {
                return reject(
                    BadParams,
                    format!("goal {new_goal} would coincide with start"),
                );
            }
            if *new_goal == agent {
                return reject(Occupied, format!("the agent stands on {agent}"));
            }
        }
        DisruptionKind::PhysicsAlteration {
            slip_prob,
            action_permutation,
        } => {
            if slip_prob.is_none() && action_permutation.is_none() {
                return reject(
                    BadParams,
                    "physics_alteration needs slip_prob or action_permutation",
                );
            }
            if let Some(p) = slip_prob {
                if !(0.0..=1.0).contains(p) {
                    return reject(BadParams, format!("slip_prob {p} is outside [0, 1]"));
                }
            }
            if let Some(perm) = action_permutation {
                if !PhysicsParams::is_bijective(perm) {
                    return reject(BadParams, "action_permutation is not a bijection");
                }
            }
        }
        DisruptionKind::RewardInversion {} => {}
        DisruptionKind::SensoryOcclusion { cells } => {
            if let Some(c) = out_of_bounds(cells) {
                return reject(
                    OutOfBounds,
                    format!("occlusion cell {c} is outside the grid"),
                );
            }
        }
    }

    let next = mutate(config, kind);
    if let Err(message) = next.validate_structure() {
        return reject(BadParams, message);
    }
    let from_goal = distances_from(&next, next.goal);
    let reach = |c: Cell| from_goal[(c.y * next.width + c.x) as usize].is_some();
    if !reach(next.start) {
        return reject(
            Unreachable,
            format!("goal {} cut off from start {}", next.goal, next.start),
        );
    }
    if !reach(agent) {
        return reject(
            Unreachable,
            format!("goal {} cut off from the agent at {agent}", next.goal),
        );
    }
    Ok(())
}

/// Returns the disrupted config; the input is left untouched.
pub fn apply_disruption(
    config: &GridConfig,
    kind: &DisruptionKind,
    agent: Cell,
) -> Result<GridConfig> {
    validate(kind, config, agent)?;
    Ok(mutate(config, kind))
}

/// Appends an applied disruption to the database journal (and its file, when
/// the database is attached to a directory).
pub fn log_disruption(journal: &mut GhostDatabase, d: &Disruption) -> Result<()> {
    journal.log_disruption(d.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridConfig {
        GridConfig::default()
    }

    fn reason(r: Result<GridConfig>) -> Option<ValidationReason> {
        r.err().and_then(|e| e.reason())
    }

    #[test]
    fn obstacle_on_agent_is_occupied() {
        let kind = DisruptionKind::ObstaclePlacement {
            cells: BTreeSet::from([Cell::new(3, 3)]),
        };
        assert_eq!(
            reason(apply_disruption(&grid(), &kind, Cell::new(3, 3))),
            Some(ValidationReason::Occupied)
        );
    }

    #[test]
    fn goal_onto_obstacle_is_bad_params() {
        let mut cfg = grid();
        cfg.obstacles.insert(Cell::new(2, 2));
        let kind = DisruptionKind::GoalRelocation {
            new_goal: Cell::new(2, 2),
        };
        assert_eq!(
            reason(apply_disruption(&cfg, &kind, cfg.start)),
            Some(ValidationReason::BadParams)
        );
    }

    #[test]
    fn walling_off_goal_is_unreachable() {
        let kind = DisruptionKind::ObstaclePlacement {
            cells: BTreeSet::from([Cell::new(6, 7), Cell::new(7, 6)]),
        };
        assert_eq!(
            reason(apply_disruption(&grid(), &kind, Cell::new(0, 0))),
            Some(ValidationReason::Unreachable)
        );
    }

    #[test]
    fn agent_cut_off_is_unreachable() {
        // Enclose the agent at (4,4) without touching start or goal.
        let ring = [(3, 4), (5, 4), (4, 3), (4, 5)]
            .map(|(x, y)| Cell::new(x, y))
            .into_iter()
            .collect();
        let kind = DisruptionKind::ObstaclePlacement { cells: ring };
        assert_eq!(
            reason(apply_disruption(&grid(), &kind, Cell::new(4, 4))),
            Some(ValidationReason::Unreachable)
        );
        // Any other agent cell keeps a route to the goal.
        assert!(apply_disruption(&grid(), &kind, Cell::new(1, 1)).is_ok());
    }

    #[test]
    fn out_of_bounds_cells() {
        let kind = DisruptionKind::SensoryOcclusion {
            cells: BTreeSet::from([Cell::new(8, 0)]),
        };
        assert_eq!(
            reason(apply_disruption(&grid(), &kind, Cell::new(0, 0))),
            Some(ValidationReason::OutOfBounds)
        );
        let kind = DisruptionKind::GoalRelocation {
            new_goal: Cell::new(-1, 0),
        };
        assert_eq!(
            reason(apply_disruption(&grid(), &kind, Cell::new(0, 0))),
            Some(ValidationReason::OutOfBounds)
        );
    }

    #[test]
    fn goal_relocation_changes_only_goal() {
        let cfg = grid();
        let kind = DisruptionKind::GoalRelocation {
            new_goal: Cell::new(0, 7),
        };
        let next = apply_disruption(&cfg, &kind, cfg.start).unwrap();
        let mut expected = cfg.clone();
        expected.goal = Cell::new(0, 7);
        assert_eq!(next, expected);
        assert_eq!(cfg.goal, Cell::new(7, 7));
    }

    #[test]
    fn reward_inversion_is_an_involution() {
        let cfg = grid();
        let kind = DisruptionKind::RewardInversion {};
        let once = apply_disruption(&cfg, &kind, cfg.start).unwrap();
        assert_eq!(once.reward_sign, -1);
        let twice = apply_disruption(&once, &kind, cfg.start).unwrap();
        assert_eq!(twice, cfg);
    }

    #[test]
    fn physics_alteration_partial_update() {
        let cfg = grid();
        let kind = DisruptionKind::PhysicsAlteration {
            slip_prob: Some(0.3),
            action_permutation: None,
        };
        let next = apply_disruption(&cfg, &kind, cfg.start).unwrap();
        let mut expected = cfg.clone();
        expected.physics.slip_prob = 0.3;
        assert_eq!(next, expected);

        let bad = DisruptionKind::PhysicsAlteration {
            slip_prob: None,
            action_permutation: Some([Action::Up; 5]),
        };
        assert_eq!(
            reason(apply_disruption(&cfg, &bad, cfg.start)),
            Some(ValidationReason::BadParams)
        );
        let empty = DisruptionKind::PhysicsAlteration {
            slip_prob: None,
            action_permutation: None,
        };
        assert_eq!(
            reason(apply_disruption(&cfg, &empty, cfg.start)),
            Some(ValidationReason::BadParams)
        );
    }

    #[test]
    fn obstacle_placement_is_idempotent() {
        let cfg = grid();
        let kind = DisruptionKind::ObstaclePlacement {
            cells: BTreeSet::from([Cell::new(3, 3), Cell::new(4, 4)]),
        };
        let once = apply_disruption(&cfg, &kind, cfg.start).unwrap();
        let twice = apply_disruption(&once, &kind, cfg.start).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn wire_shape() {
        let d = Disruption::new(
            DisruptionId(4),
            DisruptionKind::GoalRelocation {
                new_goal: Cell::new(0, 7),
            },
            Author::Human("r1".into()),
        );
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["kind"], "goal_relocation");
        assert_eq!(v["params"]["new_goal"]["x"], 0);
        assert_eq!(v["author"]["human"], "r1");
        let back: Disruption = serde_json::from_value(v).unwrap();
        assert_eq!(back, d);

        let inv: DisruptionKind =
            serde_json::from_str(r#"{"kind":"reward_inversion","params":{}}"#).unwrap();
        assert_eq!(inv, DisruptionKind::RewardInversion {});
        let slip: DisruptionKind =
            serde_json::from_str(r#"{"kind":"physics_alteration","params":{"slip_prob":0.3}}"#)
                .unwrap();
        assert_eq!(
            slip,
            DisruptionKind::PhysicsAlteration {
                slip_prob: Some(0.3),
                action_permutation: None
            }
        );
    }
}
