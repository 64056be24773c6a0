//! The authoritative session state machine, free of any I/O.
//!
//! Commands are handled strictly between steps, so replaying the same
//! command schedule against the same settings reproduces the same run.

use std::collections::HashMap;

use ghostgrid::disruption::Author;
use ghostgrid::ghost::LabelRecord;
use ghostgrid::ids::DisruptionId;
use ghostgrid::sim::{SimSettings, Simulation};

use crate::protocol::{
    ClientMessage, ControlCmd, ErrorCode, GhostView, ServerMessage, PROTOCOL_VERSION,
};

pub type ClientId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Running,
    Paused,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    All,
    Client(ClientId),
}

pub type Outbox = Vec<(Target, ServerMessage)>;

pub const MIN_TICK_RATE: u32 = 1;
pub const MAX_TICK_RATE: u32 = 120;

pub struct Session {
    id: String,
    sim: Simulation,
    mode: Mode,
    tick_rate_hz: u32,
    /// Who asked for each queued disruption, for rejection notices.
    requesters: HashMap<DisruptionId, ClientId>,
    steps: u64,
    clock: fn() -> u64,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Session {
    pub fn new(
        id: impl Into<String>,
        settings: SimSettings,
        tick_rate_hz: u32,
    ) -> ghostgrid::Result<Self> {
        if !(MIN_TICK_RATE..=MAX_TICK_RATE).contains(&tick_rate_hz) {
            return Err(ghostgrid::Error::Config(format!(
                "server.tick_rate_hz must lie in [{MIN_TICK_RATE}, {MAX_TICK_RATE}], got {tick_rate_hz}"
            )));
        }
        Ok(Session {
            id: id.into(),
            sim: Simulation::new(settings)?,
            mode: Mode::Running,
            tick_rate_hz,
            requesters: HashMap::new(),
            steps: 0,
            clock: unix_now,
        })
    }

    /// Label timestamps come from `clock`; tests pin it for reproducible files.
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = clock;
        self
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }
    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }
    pub fn mode(&self) -> Mode {
        self.mode
    }
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
    pub fn tick_rate_hz(&self) -> u32 {
        self.tick_rate_hz
    }
    /// Steps executed so far across all episodes.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::SessionHello {
            session_id: self.id.clone(),
            protocol_version: PROTOCOL_VERSION,
            grid_config: self.sim.config().clone(),
            tick_rate_hz: self.tick_rate_hz,
        }
    }

    /// Handles one raw line from `client`.
    pub fn handle_line(&mut self, client: ClientId, line: &str) -> Outbox {
        match crate::protocol::parse_client(line) {
            Ok(msg) => self.handle(client, msg),
            Err(e) => vec![(Target::Client(client), e)],
        }
    }

    pub fn handle(&mut self, client: ClientId, msg: ClientMessage) -> Outbox {
        let reply = |m| vec![(Target::Client(client), m)];
        match msg {
            ClientMessage::Disruption { kind, author } => {
                match self.sim.queue_disruption(kind, Author::Human(author)) {
                    Ok(id) => {
                        self.requesters.insert(id, client);
                        Vec::new()
                    }
                    Err(e) => reply(ServerMessage::from_error(&e)),
                }
            }
            ClientMessage::Label {
                trajectory_id,
                failure_mode,
                rater_id,
            } => {
                if rater_id.trim().is_empty() {
                    return reply(ServerMessage::error(
                        ErrorCode::Validation,
                        "rater_id must not be empty",
                    ));
                }
                let label = LabelRecord {
                    trajectory_id,
                    rater_id,
                    failure_mode,
                    unix_ts: (self.clock)(),
                };
                match self.sim.add_label(label) {
                    Ok(()) => vec![(Target::All, ServerMessage::LabelAck { trajectory_id })],
                    Err(e) => reply(ServerMessage::from_error(&e)),
                }
            }
            ClientMessage::Control { cmd, value } => match cmd {
                ControlCmd::Pause => {
                    self.mode = Mode::Paused;
                    Vec::new()
                }
                ControlCmd::Resume => {
                    self.mode = Mode::Running;
                    Vec::new()
                }
                ControlCmd::Step => {
                    if self.mode == Mode::Running {
                        return reply(ServerMessage::error(
                            ErrorCode::State,
                            "step is only accepted while paused",
                        ));
                    }
                    self.step()
                }
                ControlCmd::SetSpeed => match value {
                    Some(v)
                        if (f64::from(MIN_TICK_RATE)..=f64::from(MAX_TICK_RATE)).contains(&v) =>
                    {
                        self.tick_rate_hz = v.round() as u32;
                        Vec::new()
                    }
                    _ => reply(ServerMessage::error(
                        ErrorCode::Validation,
                        format!("set_speed needs a value in [{MIN_TICK_RATE}, {MAX_TICK_RATE}]"),
                    )),
                },
            },
        }
    }

    /// One scheduled tick: steps only while running.
    pub fn tick(&mut self) -> Outbox {
        match self.mode {
            Mode::Running => self.step(),
            Mode::Paused => Vec::new(),
        }
    }

    /// Advances the simulation one step and returns everything to send.
    pub fn step(&mut self) -> Outbox {
        let report = match self.sim.step() {
            Ok(r) => r,
            // A failing step means the session state is broken; pause and tell everyone.
            Err(e) => {
                self.mode = Mode::Paused;
                return vec![(Target::All, ServerMessage::from_error(&e))];
            }
        };
        self.steps += 1;
        let mut out = Outbox::new();
        for (id, err) in &report.rejected {
            let target = self
                .requesters
                .remove(id)
                .map_or(Target::All, Target::Client);
            out.push((target, ServerMessage::from_error(err)));
        }
        for d in &report.applied {
            self.requesters.remove(&d.id);
            out.push((
                Target::All,
                ServerMessage::DisruptionAck {
                    id: d.id,
                    applied_at_tick: d.applied_at_tick.unwrap_or_default(),
                    grid_config: self.sim.config().clone(),
                },
            ));
        }
        let t = report.transition;
        out.push((
            Target::All,
            ServerMessage::StateUpdate {
                tick: t.s_next.tick,
                episode: t.s_next.episode,
                agent: t.s_next.agent,
                last_action: t.a,
                reward: t.r,
                cumulative_return: report.cumulative_return,
                done: t.done,
                done_reason: t.done_reason,
                goal: self.sim.config().goal,
            },
        ));
        if let Some(end) = report.episode_end {
            out.push((
                Target::All,
                ServerMessage::GhostUpdate {
                    ghosts: self.sim.ghosts().iter().map(GhostView::from).collect(),
                },
            ));
            out.push((
                Target::All,
                ServerMessage::MetricsUpdate {
                    episode: end.episode,
                    greedy_return: end.greedy_return,
                    epsilon: end.epsilon,
                    live_failure_mode: end.classification.map(|(_, m)| m),
                    trajectory_id: end.trajectory_id,
                },
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ghostgrid::env::{Cell, GridConfig};

    fn session() -> Session {
        let env = GridConfig::empty(5, 5, Cell::new(0, 0), Cell::new(4, 4));
        Session::new("test", SimSettings::new(env, 1), 10)
            .unwrap()
            .with_clock(|| 42)
    }

    fn state_updates(out: &Outbox) -> usize {
        out.iter()
            .filter(|(_, m)| matches!(m, ServerMessage::StateUpdate { .. }))
            .count()
    }

    #[test]
    fn tick_rate_bounds() {
        let env = GridConfig::default();
        assert!(Session::new("s", SimSettings::new(env.clone(), 0), 0).is_err());
        assert!(Session::new("s", SimSettings::new(env.clone(), 0), 121).is_err());
        assert!(Session::new("s", SimSettings::new(env, 0), 120).is_ok());
    }

    #[test]
    fn paused_session_only_moves_on_step() {
        let mut s = session();
        s.handle_line(1, r#"{"type":"control","cmd":"pause"}"#);
        assert!(s.tick().is_empty());
        let mut n = 0;
        for _ in 0..3 {
            n += state_updates(&s.handle_line(1, r#"{"type":"control","cmd":"step"}"#));
        }
        assert_eq!(n, 3);
        assert_eq!(s.steps(), 3);
    }

    #[test]
    fn malformed_line_answers_only_the_sender() {
        let mut s = session();
        let out = s.handle_line(7, "{oops");
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, Target::Client(7));
        assert!(matches!(
            out[0].1,
            ServerMessage::Error {
                code: ErrorCode::Parse,
                ..
            }
        ));
        assert_eq!(state_updates(&s.tick()), 1);
    }

    #[test]
    fn occupied_obstacle_is_rejected_with_reason() {
        let mut s = session();
        let out = s.handle_line(
            2,
            r#"{"type":"disruption","kind":"obstacle_placement","params":{"cells":[{"x":0,"y":0}]},"author":"r1"}"#,
        );
        match &out[0].1 {
            ServerMessage::Error { code, reason, .. } => {
                assert_eq!(*code, ErrorCode::Validation);
                assert_eq!(*reason, Some(ghostgrid::ValidationReason::Occupied));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_trajectory_label_is_state_error() {
        let mut s = session();
        let out = s.handle_line(
            2,
            r#"{"type":"label","trajectory_id":99,"failure_mode":"ObsessiveLoop","rater_id":"r1"}"#,
        );
        assert!(matches!(
            out[0].1,
            ServerMessage::Error {
                code: ErrorCode::State,
                ..
            }
        ));
    }
}
