//! Deterministic gridworld environment.
//!
//! All functions here are pure over an explicit [`GridConfig`] and [`State`];
//! randomness (slip) comes only from the caller-supplied generator, so a fixed
//! seed and action sequence always reproduces the same transitions.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: i32 = 2;
pub const MAX_SIDE: i32 = 64;

/// A grid cell; origin is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn offset(self, (dx, dy): (i32, i32)) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    /// Fixed order, also used for greedy tie-breaking.
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }

    pub fn opposite(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            Action::Stay => Action::Stay,
        }
    }

    /// True for Up/Down and Left/Right pairs. Stay is opposite to nothing.
    pub fn is_opposite(self, other: Action) -> bool {
        self != Action::Stay && self.opposite() == other
    }

    pub fn perpendicular(self) -> Option<[Action; 2]> {
        match self {
            Action::Up | Action::Down => Some([Action::Left, Action::Right]),
            Action::Left | Action::Right => Some([Action::Up, Action::Down]),
            Action::Stay => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsParams {
    #[serde(default)]
    pub slip_prob: f64,
    /// `action_permutation[a.index()]` is the action actually executed for `a`.
    #[serde(default = "identity_permutation")]
    pub action_permutation: [Action; 5],
}

pub fn identity_permutation() -> [Action; 5] {
    Action::ALL
}

impl Default for PhysicsParams {
    fn default() -> Self {
        PhysicsParams {
            slip_prob: 0.0,
            action_permutation: identity_permutation(),
        }
    }
}

impl PhysicsParams {
    pub fn is_bijective(permutation: &[Action; 5]) -> bool {
        let mut seen = [false; 5];
        for a in permutation {
            if std::mem::replace(&mut seen[a.index()], true) {
                return false;
            }
        }
        true
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(format!(
                "physics.slip_prob must lie in [0, 1], got {}",
                self.slip_prob
            ));
        }
        if !Self::is_bijective(&self.action_permutation) {
            return Err("physics.action_permutation must be a bijection over the 5 actions".into());
        }
        Ok(())
    }

    pub fn effective(&self, action: Action) -> Action {
        self.action_permutation[action.index()]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionMask {
    pub cells: BTreeSet<Cell>,
}

impl OcclusionMask {
    pub fn contains(&self, cell: Cell) -> bool {
        self.cells.contains(&cell)
    }
}

fn default_step_penalty() -> f64 {
    -0.01
}

fn default_goal_reward() -> f64 {
    1.0
}

fn default_max_steps() -> u32 {
    200
}

fn default_reward_sign() -> i8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: i32,
    pub height: i32,
    #[serde(default)]
    pub obstacles: BTreeSet<Cell>,
    pub start: Cell,
    pub goal: Cell,
    #[serde(default = "default_step_penalty")]
    pub step_penalty: f64,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default)]
    pub physics: PhysicsParams,
    #[serde(default)]
    pub occlusion: Option<OcclusionMask>,
    #[serde(default = "default_reward_sign")]
    pub reward_sign: i8,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig::empty(8, 8, Cell::new(0, 0), Cell::new(7, 7))
    }
}

impl GridConfig {
    /// An obstacle-free grid with default rewards and physics.
    pub fn empty(width: i32, height: i32, start: Cell, goal: Cell) -> Self {
        GridConfig {
            width,
            height,
            obstacles: BTreeSet::new(),
            start,
            goal,
            step_penalty: default_step_penalty(),
            goal_reward: default_goal_reward(),
            max_steps: default_max_steps(),
            physics: PhysicsParams::default(),
            occlusion: None,
            reward_sign: default_reward_sign(),
        }
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        (0..self.width).contains(&cell.x) && (0..self.height).contains(&cell.y)
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.in_bounds(cell) && !self.obstacles.contains(&cell)
    }

    pub fn goal_occluded(&self) -> bool {
        self.occlusion
            .as_ref()
            .is_some_and(|mask| mask.contains(self.goal))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Cell::new(x, y)))
    }

    /// Checks every structural invariant, including reachability of the goal.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure().map_err(Error::Config)?;
        if distance(self, self.start, self.goal).is_none() {
            return Err(Error::Config(format!(
                "goal {} is unreachable from start {}",
                self.goal, self.start
            )));
        }
        Ok(())
    }

    /// Invariants that do not need a path search.
    pub(crate) fn validate_structure(&self) -> std::result::Result<(), String> {
        for (name, side) in [("width", self.width), ("height", self.height)] {
            if !(MIN_SIDE..=MAX_SIDE).contains(&side) {
                return Err(format!(
                    "{name} must lie in [{MIN_SIDE}, {MAX_SIDE}], got {side}"
                ));
            }
        }
        if !self.in_bounds(self.start) {
            return Err(format!("start {} is out of bounds", self.start));
        }
        if !self.in_bounds(self.goal) {
            return Err(format!("goal {} is out of bounds", self.goal));
        }
        if self.start == self.goal {
            return Err(format!(
                "start and goal must differ, both are {}",
                self.start
            ));
        }
        if let Some(c) = self.obstacles.iter().find(|c| !self.in_bounds(**c)) {
            return Err(format!("obstacle {c} is out of bounds"));
        }
        if self.obstacles.contains(&self.start) {
            return Err(format!("start {} lies on an obstacle", self.start));
        }
        if self.obstacles.contains(&self.goal) {
            return Err(format!("goal {} lies on an obstacle", self.goal));
        }
        if let Some(mask) = &self.occlusion {
            if let Some(c) = mask.cells.iter().find(|c| !self.in_bounds(**c)) {
                return Err(format!("occlusion cell {c} is out of bounds"));
            }
        }
        self.physics.validate()?;
        if self.reward_sign != 1 && self.reward_sign != -1 {
            return Err(format!(
                "reward_sign must be +1 or -1, got {}",
                self.reward_sign
            ));
        }
        if self.max_steps == 0 {
            return Err("max_steps must be at least 1".into());
        }
        if !self.step_penalty.is_finite() || !self.goal_reward.is_finite() {
            return Err("step_penalty and goal_reward must be finite".into());
        }
        Ok(())
    }

    /// Return of an episode that follows a shortest path to the goal.
    pub fn optimal_return(&self) -> Result<f64> {
        let steps = shortest_path_length(self)?;
        let sign = f64::from(self.reward_sign);
        Ok(sign * (self.goal_reward + f64::from(steps - 1) * self.step_penalty))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub agent: Cell,
    pub tick: u32,
    pub episode: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Goal,
    Timeout,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: State,
    pub a: Action,
    pub r: f64,
    pub s_next: State,
    pub done: bool,
    pub done_reason: DoneReason,
}

pub fn reset(config: &GridConfig, episode: u64) -> Result<State> {
    config.validate()?;
    Ok(State {
        agent: config.start,
        tick: 0,
        episode,
    })
}

pub fn is_terminal(config: &GridConfig, state: &State) -> bool {
    state.agent == config.goal || state.tick >= config.max_steps
}

/// Advances one tick. Slip draws come from `rng` only when the executed
/// action can slip (non-Stay and `slip_prob > 0`).
pub fn step<R: Rng + ?Sized>(
    config: &GridConfig,
    state: &State,
    action: Action,
    rng: &mut R,
) -> Result<Transition> {
    if is_terminal(config, state) {
        return Err(Error::Done);
    }
    let mut executed = config.physics.effective(action);
    if config.physics.slip_prob > 0.0 {
        if let Some(sideways) = executed.perpendicular() {
            if rng.gen_bool(config.physics.slip_prob) {
                executed = sideways[usize::from(rng.gen_bool(0.5))];
            }
        }
    }
    let target = state.agent.offset(executed.delta());
    let agent = if config.is_free(target) {
        target
    } else {
        state.agent
    };
    let s_next = State {
        agent,
        tick: state.tick + 1,
        episode: state.episode,
    };
    let at_goal = agent == config.goal;
    let base = if at_goal {
        config.goal_reward
    } else {
        config.step_penalty
    };
    let done_reason = if at_goal {
        DoneReason::Goal
    } else if s_next.tick >= config.max_steps {
        DoneReason::Timeout
    } else {
        DoneReason::None
    };
    Ok(Transition {
        s: *state,
        a: action,
        r: f64::from(config.reward_sign) * base,
        s_next,
        done: done_reason != DoneReason::None,
        done_reason,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellContent {
    Empty,
    Obstacle,
    Goal,
    /// Outside the grid.
    Wall,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalDirection {
    /// Sign of the goal offset on each axis, each in {-1, 0, 1}.
    Known {
        dx: i32,
        dy: i32,
    },
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    /// Row-major 3x3 window centred on the agent; `window[1][1]` is the agent cell.
    pub window: [[CellContent; 3]; 3],
    pub goal_direction: GoalDirection,
}

impl Observation {
    pub fn known_cells(&self) -> usize {
        self.window
            .iter()
            .flatten()
            .filter(|c| **c != CellContent::Unknown)
            .count()
    }
}

pub fn observe(config: &GridConfig, state: &State) -> Observation {
    let occluded = |c: Cell| config.occlusion.as_ref().is_some_and(|m| m.contains(c));
    let mut window = [[CellContent::Empty; 3]; 3];
    for (row, dy) in (-1..=1).enumerate() {
        for (col, dx) in (-1..=1).enumerate() {
            let cell = state.agent.offset((dx, dy));
            window[row][col] = if !config.in_bounds(cell) {
                CellContent::Wall
            } else if occluded(cell) {
                CellContent::Unknown
            } else if config.obstacles.contains(&cell) {
                CellContent::Obstacle
            } else if cell == config.goal {
                CellContent::Goal
            } else {
                CellContent::Empty
            };
        }
    }
    let goal_direction = if occluded(config.goal) {
        GoalDirection::Unknown
    } else {
        GoalDirection::Known {
            dx: (config.goal.x - state.agent.x).signum(),
            dy: (config.goal.y - state.agent.y).signum(),
        }
    };
    Observation {
        window,
        goal_direction,
    }
}

/// Breadth-first distances from `from` to every free cell, indexed `y * width + x`.
pub fn distances_from(config: &GridConfig, from: Cell) -> Vec<Option<u32>> {
    let idx = |c: Cell| (c.y * config.width + c.x) as usize;
    let mut dist = vec![None; (config.width * config.height).max(0) as usize];
    if !config.is_free(from) {
        return dist;
    }
    dist[idx(from)] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(cell) = queue.pop_front() {
        let d = dist[idx(cell)].unwrap_or(0);
        for action in [Action::Up, Action::Down, Action::Left, Action::Right] {
            let next = cell.offset(action.delta());
            if config.is_free(next) && dist[idx(next)].is_none() {
                dist[idx(next)] = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

pub fn distance(config: &GridConfig, from: Cell, to: Cell) -> Option<u32> {
    if !config.in_bounds(to) {
        return None;
    }
    distances_from(config, from)[(to.y * config.width + to.x) as usize]
}

pub fn shortest_path_length(config: &GridConfig) -> Result<u32> {
    config.validate_structure().map_err(Error::Config)?;
    distance(config, config.start, config.goal).ok_or_else(|| {
        Error::Config(format!(
            "goal {} is unreachable from start {}",
            config.goal, config.start
        ))
    })
}
