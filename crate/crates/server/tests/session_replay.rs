use proptest::prelude::*;

use ghostgrid::env::{Cell, GridConfig};
use ghostgrid::sim::SimSettings;
use ghostgrid_server::protocol::ServerMessage;
use ghostgrid_server::{Outbox, Session};

#[derive(Debug, Clone)]
enum Event {
    Ticks(u8),
    Line(String),
}

fn line() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(r#"{"type":"control","cmd":"pause"}"#.to_string()),
        Just(r#"{"type":"control","cmd":"resume"}"#.to_string()),
        Just(r#"{"type":"control","cmd":"step"}"#.to_string()),
        (0u32..200).prop_map(|v| format!(r#"{{"type":"control","cmd":"set_speed","value":{v}}}"#)),
        (0i32..6, 0i32..6).prop_map(|(x, y)| format!(
            r#"{{"type":"disruption","kind":"goal_relocation","params":{{"new_goal":{{"x":{x},"y":{y}}}}},"author":"r"}}"#
        )),
        (0i32..6, 0i32..6).prop_map(|(x, y)| format!(
            r#"{{"type":"disruption","kind":"obstacle_placement","params":{{"cells":[{{"x":{x},"y":{y}}}]}},"author":"r"}}"#
        )),
        Just(r#"{"type":"disruption","kind":"reward_inversion","params":{},"author":"r"}"#.to_string()),
        (0u64..20).prop_map(|t| format!(
            r#"{{"type":"label","trajectory_id":{t},"failure_mode":"ObsessiveLoop","rater_id":"r"}}"#
        )),
        Just("{broken".to_string()),
    ]
}

fn schedule() -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec(
        prop_oneof![
            3 => (1u8..40).prop_map(Event::Ticks),
            2 => line().prop_map(Event::Line),
        ],
        1..40,
    )
}

fn session() -> Session {
    let mut env = GridConfig::empty(6, 6, Cell::new(0, 0), Cell::new(5, 5));
    env.max_steps = 30;
    env.physics.slip_prob = 0.1;
    Session::new("replay", SimSettings::new(env, 9), 10)
        .unwrap()
        .with_clock(|| 1)
}

fn play(events: &[Event]) -> (Vec<Outbox>, Session) {
    let mut s = session();
    let mut log = Vec::new();
    for e in events {
        match e {
            Event::Ticks(n) => {
                for _ in 0..*n {
                    log.push(s.tick());
                }
            }
            Event::Line(l) => log.push(s.handle_line(1, l)),
        }
    }
    (log, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replaying_a_command_log_reproduces_the_run(events in schedule()) {
        let (a, sa) = play(&events);
        let (b, sb) = play(&events);
        prop_assert_eq!(a, b);
        let lines = |s: &Session| -> Vec<String> {
            s.sim()
                .db()
                .trajectories()
                .iter()
                .map(|t| ghostgrid::ghost::trajectory_line(t.id, &t.trajectory))
                .collect()
        };
        prop_assert_eq!(lines(&sa), lines(&sb));
        prop_assert_eq!(sa.sim().db().labels(), sb.sim().db().labels());
    }

    #[test]
    fn state_update_ticks_increase_within_an_episode(events in schedule()) {
        let (log, _) = play(&events);
        let mut last: Option<(u64, u32)> = None;
        for (_, msg) in log.iter().flatten() {
            if let ServerMessage::StateUpdate { tick, episode, .. } = msg {
                if let Some((e, t)) = last {
                    prop_assert!(*episode > e || (*episode == e && *tick > t), "tick {tick} after {t} in episode {episode}");
                }
                last = Some((*episode, *tick));
            }
        }
    }
}
