//! Step-by-step driver for one learning run: disruptions queued between
//! steps, Q-learning updates, and the per-episode bookkeeping (recording,
//! auto-labelling, snapshots, greedy evaluation and ghost spawning).

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, snapshot_policy, DisruptionContext, Hyperparams, QTable, StateKey};
use crate::disruption::{self, Author, Disruption, DisruptionKind};
use crate::dual_loop::ActionRule;
use crate::env::{self, GridConfig, State, Transition};
use crate::error::{Error, Result};
use crate::ghost::{
    spawn_ghosts, Ghost, GhostDatabase, LabelRecord, LayerConfig, Outcome, Trajectory, AUTO_RATER,
};
use crate::ids::{DisruptionId, IdSeq, TrajectoryId};
use crate::rng::Streams;
use crate::taxonomy::{classify_latest, BehaviourMetrics, FailureMode, Thresholds};

/// Which finished episodes the rule classifier labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoLabel {
    Every,
    AfterDisruption,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub environment: GridConfig,
    pub hyperparams: Hyperparams,
    /// A snapshot is taken at the end of every episode divisible by this.
    pub snapshot_interval: u64,
    pub seed: u64,
    pub layers: LayerConfig,
    pub thresholds: Thresholds,
    pub rule: ActionRule,
    pub auto_label: AutoLabel,
    pub spawn_ghosts: bool,
}

impl SimSettings {
    pub fn new(environment: GridConfig, seed: u64) -> Self {
        SimSettings {
            environment,
            hyperparams: Hyperparams::default(),
            snapshot_interval: 10,
            seed,
            layers: LayerConfig::default(),
            thresholds: Thresholds::default(),
            rule: ActionRule::Plain,
            auto_label: AutoLabel::Every,
            spawn_ghosts: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.hyperparams.validate()?;
        self.layers.validate()?;
        self.thresholds.validate()?;
        if let ActionRule::Conditioned(pc) = &self.rule {
            pc.validate()?;
        }
        if self.snapshot_interval == 0 {
            return Err(Error::Config(
                "agent.snapshot_interval must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Everything that happened at one episode boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub trajectory_id: TrajectoryId,
    pub episode: u64,
    pub outcome: Outcome,
    pub total_return: f64,
    /// Return of one evaluation rollout with exploration disabled.
    pub greedy_return: f64,
    pub epsilon: f64,
    pub classification: Option<(BehaviourMetrics, FailureMode)>,
}

#[derive(Debug)]
pub struct StepReport {
    pub transition: Transition,
    /// Disruptions that landed right before this step.
    pub applied: Vec<Disruption>,
    /// Queued disruptions that no longer validated when their turn came.
    pub rejected: Vec<(DisruptionId, Error)>,
    pub cumulative_return: f64,
    pub episode_end: Option<EpisodeReport>,
}

type Rejections = Vec<(DisruptionId, Error)>;

pub struct Simulation {
    settings: SimSettings,
    config: GridConfig,
    q: QTable,
    db: GhostDatabase,
    streams: Streams,
    state: State,
    transitions: Vec<Transition>,
    cumulative: f64,
    pending: VecDeque<Disruption>,
    disruption_ids: IdSeq,
    snapshot_ids: IdSeq,
    ghosts: Vec<Ghost>,
    /// Greedy path of the last pre-disruption policy in its own world; the
    /// yardstick for drift.
    reference: Option<Trajectory>,
}

impl Simulation {
    pub fn new(settings: SimSettings) -> Result<Self> {
        settings.validate()?;
        let config = settings.environment.clone();
        let state = env::reset(&config, 0)?;
        Ok(Simulation {
            streams: Streams::new(settings.seed),
            config,
            q: QTable::new(),
            db: GhostDatabase::new(),
            state,
            transitions: Vec::new(),
            cumulative: 0.0,
            pending: VecDeque::new(),
            disruption_ids: IdSeq::default(),
            snapshot_ids: IdSeq::default(),
            ghosts: Vec::new(),
            reference: None,
            settings,
        })
    }

    /// Mirrors the database to `dir` from now on.
    pub fn attach_log(&mut self, dir: &Path) -> Result<()> {
        self.db.attach_log(dir)
    }

    pub fn settings(&self) -> &SimSettings {
        &self.settings
    }
    pub fn config(&self) -> &GridConfig {
        &self.config
    }
    pub fn state(&self) -> &State {
        &self.state
    }
    pub fn qtable(&self) -> &QTable {
        &self.q
    }
    pub fn db(&self) -> &GhostDatabase {
        &self.db
    }
    pub fn into_db(self) -> GhostDatabase {
        self.db
    }
    pub fn ghosts(&self) -> &[Ghost] {
        &self.ghosts
    }
    pub fn cumulative_return(&self) -> f64 {
        self.cumulative
    }
    pub fn epsilon(&self) -> f64 {
        self.settings.hyperparams.epsilon_at(self.state.episode)
    }
    pub fn pending_disruptions(&self) -> usize {
        self.pending.len()
    }

    /// The config that results once every queued disruption has landed.
    fn projected_config(&self) -> GridConfig {
        let mut cfg = self.config.clone();
        for d in &self.pending {
            if let Ok(next) = disruption::apply_disruption(&cfg, &d.kind, self.state.agent) {
                cfg = next;
            }
        }
        cfg
    }

    /// Validates `kind` against the environment as it will be after already
    /// queued disruptions, then queues it for the next step.
    pub fn queue_disruption(
        &mut self,
        kind: DisruptionKind,
        author: Author,
    ) -> Result<DisruptionId> {
        disruption::validate(&kind, &self.projected_config(), self.state.agent)?;
        let id = DisruptionId(self.disruption_ids.next_raw());
        self.pending.push_back(Disruption::new(id, kind, author));
        Ok(id)
    }

    pub fn add_label(&mut self, label: LabelRecord) -> Result<()> {
        self.db.add_label(label)
    }

    fn apply_pending(&mut self) -> Result<(Vec<Disruption>, Rejections)> {
        let mut applied = Vec::new();
        let mut rejected = Vec::new();
        while let Some(mut d) = self.pending.pop_front() {
            let next = match disruption::apply_disruption(&self.config, &d.kind, self.state.agent) {
                Ok(next) => next,
                Err(e) => {
                    rejected.push((d.id, e));
                    continue;
                }
            };
            let ctx = DisruptionContext {
                applied: self.db.disruptions().len(),
                about_to_apply: Some(d.id),
            };
            let snap = snapshot_policy(
                &self.q,
                self.state.episode,
                ctx,
                &self.config,
                &mut self.snapshot_ids,
            );
            self.db.add_snapshot(snap)?;
            let start = State {
                agent: self.config.start,
                tick: 0,
                episode: self.state.episode,
            };
            self.reference =
                agent::rollout_greedy(&self.q, &self.config, start, self.config.max_steps).ok();
            d.applied_at_episode = Some(self.state.episode);
            d.applied_at_tick = Some(self.state.tick);
            self.db.log_disruption(d.clone())?;
            self.config = next;
            applied.push(d);
        }
        Ok((applied, rejected))
    }

    /// Applies queued disruptions, then advances the agent one tick.
    pub fn step(&mut self) -> Result<StepReport> {
        let (applied, rejected) = self.apply_pending()?;
        let epsilon = self.epsilon();
        let key = StateKey::new(&self.config, &self.state);
        let action = self.settings.rule.select(
            &self.q,
            &key,
            &self.state,
            &self.db,
            epsilon,
            &mut self.streams.exploration,
        );
        let t = env::step(
            &self.config,
            &self.state,
            action,
            &mut self.streams.environment,
        )?;
        agent::update(&mut self.q, &self.config, &t, &self.settings.hyperparams);
        self.cumulative += t.r;
        let cumulative_return = self.cumulative;
        self.state = t.s_next;
        self.transitions.push(t);
        let episode_end = if t.done {
            Some(self.finish_episode()?)
        } else {
            None
        };
        Ok(StepReport {
            transition: t,
            applied,
            rejected,
            cumulative_return,
            episode_end,
        })
    }

    /// Steps until the current episode ends.
    pub fn run_episode(&mut self) -> Result<EpisodeReport> {
        loop {
            if let Some(end) = self.step()?.episode_end {
                return Ok(end);
            }
        }
    }

    fn should_label(&self) -> bool {
        match self.settings.auto_label {
            AutoLabel::Every => true,
            AutoLabel::AfterDisruption => !self.db.disruptions().is_empty(),
            AutoLabel::Off => false,
        }
    }

    fn finish_episode(&mut self) -> Result<EpisodeReport> {
        let episode = self.state.episode;
        let epsilon = self.epsilon();
        let mut trajectory = Trajectory::new(episode, std::mem::take(&mut self.transitions));
        trajectory.disruptions_active = self.db.disruptions().iter().map(|d| d.id).collect();
        let outcome = trajectory.outcome();
        let total_return = trajectory.total_return();
        let trajectory_id = self.db.record_episode(trajectory)?;

        let classification = if self.should_label() {
            let all = self.db.trajectories();
            let window = self.settings.thresholds.drift_window.max(1);
            let recent: Vec<&Trajectory> = all[all.len().saturating_sub(window)..]
                .iter()
                .map(|st| &st.trajectory)
                .collect();
            classify_latest(&recent, self.reference.as_ref(), &self.settings.thresholds)
        } else {
            None
        };
        if let Some((_, mode)) = classification {
            self.db.add_label(LabelRecord {
                trajectory_id,
                rater_id: AUTO_RATER.into(),
                failure_mode: mode,
                unix_ts: 0,
            })?;
        }

        if episode.is_multiple_of(self.settings.snapshot_interval) {
            let ctx = DisruptionContext {
                applied: self.db.disruptions().len(),
                about_to_apply: None,
            };
            let snap = snapshot_policy(&self.q, episode, ctx, &self.config, &mut self.snapshot_ids);
            self.db.add_snapshot(snap)?;
        }

        let greedy_return = evaluate_greedy(
            &self.settings.rule,
            &self.q,
            &self.db,
            &self.config,
            episode,
            &mut self.streams.evaluation,
        )?;

        self.state = env::reset(&self.config, episode + 1)?;
        self.cumulative = 0.0;
        if self.settings.spawn_ghosts {
            self.ghosts = spawn_ghosts(&self.db, &self.config, &self.state, &self.settings.layers);
        }
        Ok(EpisodeReport {
            trajectory_id,
            episode,
            outcome,
            total_return,
            greedy_return,
            epsilon,
            classification,
        })
    }
}

/// Return of one rollout from `config.start` using `rule` with exploration
/// disabled. Slip stays active and draws from `rng`.
pub fn evaluate_greedy<R: Rng + ?Sized>(
    rule: &ActionRule,
    q: &QTable,
    db: &GhostDatabase,
    config: &GridConfig,
    episode: u64,
    rng: &mut R,
) -> Result<f64> {
    let mut state = env::reset(config, episode)?;
    let mut total = 0.0;
    while !env::is_terminal(config, &state) {
        let key = StateKey::new(config, &state);
        let action = rule.greedy(q, &key, &state, db);
        let t = env::step(config, &state, action, rng)?;
        total += t.r;
        state = t.s_next;
    }
    Ok(total)
}
