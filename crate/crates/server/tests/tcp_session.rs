use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use ghostgrid::env::{Cell, GridConfig};
use ghostgrid::ghost::{load, retrieve_ghosts};
use ghostgrid::sim::SimSettings;
use ghostgrid::taxonomy::{cohen_kappa, FailureMode};
use ghostgrid_server::protocol::{parse_server, ErrorCode, ServerMessage};
use ghostgrid_server::{serve, Mode, ServeOptions, ServerError, Session};

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Client {
        let stream = TcpStream::connect(addr).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .unwrap();
        Client {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn recv(&mut self) -> ServerMessage {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).unwrap();
        assert!(n > 0, "server closed the connection");
        parse_server(&line).unwrap_or_else(|e| panic!("bad server line {line:?}: {e}"))
    }

    /// Messages up to and including the first one matching `stop`.
    fn until(&mut self, stop: impl Fn(&ServerMessage) -> bool) -> Vec<ServerMessage> {
        let mut seen = Vec::new();
        loop {
            let m = self.recv();
            let done = stop(&m);
            seen.push(m);
            if done {
                return seen;
            }
        }
    }

    /// Sends a line the server is guaranteed to reject, then collects
    /// everything up to that rejection. Commands are handled in order, so
    /// this acts as a barrier.
    fn barrier(&mut self) -> Vec<ServerMessage> {
        self.send("barrier");
        let mut seen = self.until(|m| {
            matches!(
                m,
                ServerMessage::Error {
                    code: ErrorCode::Parse,
                    ..
                }
            )
        });
        seen.pop();
        seen
    }
}

fn env() -> GridConfig {
    let mut g = GridConfig::empty(5, 5, Cell::new(0, 0), Cell::new(4, 4));
    g.max_steps = 20;
    g
}

fn session(mode: Mode) -> Session {
    let mut s = Session::new("t", SimSettings::new(env(), 3), 120)
        .unwrap()
        .with_clock(|| 1_700_000_000);
    s.set_mode(mode);
    s
}

fn start(mode: Mode, data_dir: Option<std::path::PathBuf>) -> ghostgrid_server::ServerHandle {
    serve(
        session(mode),
        &ServeOptions {
            addr: "127.0.0.1:0".into(),
            data_dir,
        },
    )
    .unwrap()
}

fn count_states(ms: &[ServerMessage]) -> usize {
    ms.iter()
        .filter(|m| matches!(m, ServerMessage::StateUpdate { .. }))
        .count()
}

#[test]
fn hello_then_state_updates() {
    let server = start(Mode::Running, None);
    let mut c = Client::connect(server.local_addr());
    match c.recv() {
        ServerMessage::SessionHello {
            protocol_version,
            tick_rate_hz,
            grid_config,
            ..
        } => {
            assert_eq!(protocol_version, 1);
            assert_eq!(tick_rate_hz, 120);
            assert_eq!(grid_config, env());
        }
        other => panic!("expected hello, got {other:?}"),
    }
    assert!(matches!(c.recv(), ServerMessage::StateUpdate { .. }));
    server.shutdown();
}

#[test]
fn pause_then_three_steps_gives_three_updates() {
    let server = start(Mode::Running, None);
    let mut c = Client::connect(server.local_addr());
    c.recv();
    c.send(r#"{"type":"control","cmd":"pause"}"#);
    c.barrier();
    // Nothing moves while paused.
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(count_states(&c.barrier()), 0);
    for _ in 0..3 {
        c.send(r#"{"type":"control","cmd":"step"}"#);
    }
    let seen = c.barrier();
    assert_eq!(count_states(&seen), 3, "{seen:?}");
    server.shutdown();
}

#[test]
fn disruption_while_paused_lands_on_resume() {
    let server = start(Mode::Paused, None);
    let mut c = Client::connect(server.local_addr());
    c.recv();
    c.send(r#"{"type":"disruption","kind":"goal_relocation","params":{"new_goal":{"x":4,"y":0}},"author":"r1"}"#);
    assert!(c.barrier().is_empty(), "no ack before the next step");
    c.send(r#"{"type":"control","cmd":"resume"}"#);
    let seen = c.until(|m| matches!(m, ServerMessage::StateUpdate { .. }));
    match &seen[..] {
        [ServerMessage::DisruptionAck {
            applied_at_tick,
            grid_config,
            ..
        }, ServerMessage::StateUpdate { tick, goal, .. }] => {
            assert_eq!(*applied_at_tick, 0);
            assert_eq!(*tick, 1);
            assert_eq!(*goal, Cell::new(4, 0));
            assert_eq!(grid_config.goal, Cell::new(4, 0));
        }
        other => panic!("{other:?}"),
    }
    server.shutdown();
}

#[test]
fn occupied_obstacle_reports_reason() {
    let server = start(Mode::Paused, None);
    let mut c = Client::connect(server.local_addr());
    c.recv();
    c.send(r#"{"type":"disruption","kind":"obstacle_placement","params":{"cells":[{"x":0,"y":0}]},"author":"r1"}"#);
    match c.recv() {
        ServerMessage::Error { code, reason, .. } => {
            assert_eq!(code, ErrorCode::Validation);
            assert_eq!(reason, Some(ghostgrid::ValidationReason::Occupied));
        }
        other => panic!("{other:?}"),
    }
    server.shutdown();
}

#[test]
fn labels_are_acked_persisted_and_retrievable() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(Mode::Paused, Some(dir.path().to_path_buf()));
    let mut c = Client::connect(server.local_addr());
    c.recv();
    let trajectory_id = loop {
        c.send(r#"{"type":"control","cmd":"step"}"#);
        let found = c.barrier().into_iter().find_map(|m| match m {
            ServerMessage::MetricsUpdate { trajectory_id, .. } => Some(trajectory_id),
            _ => None,
        });
        if let Some(id) = found {
            break id;
        }
    };
    for rater in ["r1", "r2"] {
        c.send(&format!(
            r#"{{"type":"label","trajectory_id":{},"failure_mode":"ObsessiveLoop","rater_id":"{rater}"}}"#,
            trajectory_id.0
        ));
        assert_eq!(c.recv(), ServerMessage::LabelAck { trajectory_id });
    }
    c.send(
        r#"{"type":"label","trajectory_id":999,"failure_mode":"ObsessiveLoop","rater_id":"r1"}"#,
    );
    assert!(matches!(
        c.recv(),
        ServerMessage::Error {
            code: ErrorCode::State,
            ..
        }
    ));
    server.shutdown();

    let db = load(dir.path()).unwrap();
    let stored = db.trajectory(trajectory_id).unwrap();
    let humans: Vec<FailureMode> = db
        .labels()
        .iter()
        .filter(|l| l.trajectory_id == trajectory_id && l.rater_id.starts_with('r'))
        .map(|l| l.failure_mode)
        .collect();
    assert_eq!(humans, vec![FailureMode::ObsessiveLoop; 2]);
    assert_eq!(cohen_kappa(&humans[..1], &humans[1..]).unwrap(), 1.0);
    let first = stored.trajectory.transitions[0].s;
    let hits = retrieve_ghosts(&db, &first, 0);
    assert!(hits.iter().any(|h| h.id == trajectory_id));
}

#[test]
fn malformed_line_only_answers_its_sender() {
    let server = start(Mode::Paused, None);
    let mut a = Client::connect(server.local_addr());
    let mut b = Client::connect(server.local_addr());
    a.recv();
    b.recv();
    a.send("{\"type\":");
    assert!(matches!(
        a.recv(),
        ServerMessage::Error {
            code: ErrorCode::Parse,
            ..
        }
    ));
    b.send(r#"{"type":"control","cmd":"step"}"#);
    let seen = b.barrier();
    assert_eq!(count_states(&seen), 1);
    assert!(!seen
        .iter()
        .any(|m| matches!(m, ServerMessage::Error { .. })));
    // A still sees the broadcast that followed.
    assert!(matches!(a.recv(), ServerMessage::StateUpdate { .. }));
    server.shutdown();
}

#[test]
fn every_client_sees_the_same_updates() {
    let server = start(Mode::Paused, None);
    let mut a = Client::connect(server.local_addr());
    a.recv();
    let mut b = Client::connect(server.local_addr());
    b.recv();
    for _ in 0..40 {
        a.send(r#"{"type":"control","cmd":"step"}"#);
    }
    let broadcast = |m: &ServerMessage| !matches!(m, ServerMessage::Error { .. });
    let seen_a: Vec<ServerMessage> = a.barrier().into_iter().filter(broadcast).collect();
    assert_eq!(count_states(&seen_a), 40);
    let mut seen_b = Vec::new();
    while seen_b.len() < seen_a.len() {
        seen_b.push(b.recv());
    }
    assert_eq!(seen_a, seen_b);
    server.shutdown();
}

#[test]
fn idle_reader_does_not_stall_others() {
    let server = start(Mode::Running, None);
    let _idle = TcpStream::connect(server.local_addr()).unwrap();
    let mut c = Client::connect(server.local_addr());
    c.recv();
    let t0 = Instant::now();
    let mut states = 0;
    while states < 60 {
        if matches!(c.recv(), ServerMessage::StateUpdate { .. }) {
            states += 1;
        }
    }
    // 60 ticks at 120 Hz is half a second; allow generous scheduling slack.
    assert!(t0.elapsed() < Duration::from_secs(5));
    server.shutdown();
}

#[test]
fn busy_port_is_a_bind_error() {
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap().to_string();
    let err = serve(
        session(Mode::Running),
        &ServeOptions {
            addr,
            data_dir: None,
        },
    )
    .err()
    .expect("bind must fail");
    assert!(matches!(err, ServerError::Bind { .. }));
    assert!(err.to_string().starts_with("E_BIND"));
}
