//! On-disk layout of a ghost database directory:
//!
//! * `ghosts.jsonl`: one recorded trajectory per line, in id order
//! * `snapshots.jsonl`: one policy snapshot per line
//! * `labels.csv`: `trajectory_id,rater_id,failure_mode,unix_ts`
//! * `disruptions.jsonl`: the applied-disruption journal
//!
//! Labels are kept out of the trajectory lines and re-attached on load.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GhostDatabase, LabelRecord, Outcome, Trajectory};
use crate::agent::PolicySnapshot;
use crate::disruption::Disruption;
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::ids::{DisruptionId, SnapshotId, TrajectoryId};

pub const GHOSTS_FILE: &str = "ghosts.jsonl";
pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const LABELS_FILE: &str = "labels.csv";
pub const DISRUPTIONS_FILE: &str = "disruptions.jsonl";

#[derive(Serialize)]
struct TrajectoryLineRef<'a> {
    id: TrajectoryId,
    episode_index: u64,
    outcome: Outcome,
    total_return: f64,
    snapshot_id: Option<SnapshotId>,
    disruptions_active: &'a [DisruptionId],
    transitions: &'a [Transition],
}

impl<'a> TrajectoryLineRef<'a> {
    fn new(id: TrajectoryId, t: &'a Trajectory) -> Self {
        TrajectoryLineRef {
            id,
            episode_index: t.episode_index,
            outcome: t.outcome(),
            total_return: t.total_return(),
            snapshot_id: t.snapshot_id,
            disruptions_active: &t.disruptions_active,
            transitions: &t.transitions,
        }
    }
}

/// One line of `ghosts.jsonl`. `outcome` and `total_return` are derived and
/// ignored on read.
#[derive(Debug, Clone, Deserialize)]
pub struct TrajectoryLine {
    pub id: TrajectoryId,
    pub episode_index: u64,
    #[serde(default)]
    pub snapshot_id: Option<SnapshotId>,
    #[serde(default)]
    pub disruptions_active: Vec<DisruptionId>,
    pub transitions: Vec<Transition>,
}

impl TrajectoryLine {
    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            episode_index: self.episode_index,
            transitions: self.transitions,
            snapshot_id: self.snapshot_id,
            disruptions_active: self.disruptions_active,
        }
    }
}

pub fn trajectory_line(id: TrajectoryId, t: &Trajectory) -> String {
    serde_json::to_string(&TrajectoryLineRef::new(id, t)).expect("trajectory serializes")
}

fn write_lines<I, F>(path: &Path, items: I, mut line: F) -> Result<()>
where
    I: IntoIterator,
    F: FnMut(I::Item) -> Result<String>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        writeln!(out, "{}", line(item)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value)
        .map_err(|e| Error::validation(format!("serialization failed: {e}")))
}

fn label_writer<W: Write>(w: W, headers: bool) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .has_headers(headers)
        .from_writer(w)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::validation(format!("label serialization failed: {other:?}")),
    }
}

pub fn persist(db: &GhostDatabase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(&dir.join(GHOSTS_FILE), db.trajectories(), |st| {
        Ok(trajectory_line(st.id, &st.trajectory))
    })?;
    write_lines(&dir.join(SNAPSHOTS_FILE), db.snapshots(), |s| json(&**s))?;
    write_lines(&dir.join(DISRUPTIONS_FILE), db.disruptions(), json)?;

    let path = dir.join(LABELS_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_labels(file, db.labels(), &path)
}

/// Writes a complete `labels.csv` (header plus rows) to `w`; `path` is only
/// used in error messages.
pub fn write_labels<W: Write>(w: W, labels: &[LabelRecord], path: &Path) -> Result<()> {
    let mut w = label_writer(w, false);
    w.write_record(["trajectory_id", "rater_id", "failure_mode", "unix_ts"])
        .map_err(|e| csv_err(path, e))?;
    for label in labels {
        w.serialize(label).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every record of a `ghosts.jsonl`-shaped reader, in file order.
pub fn read_trajectories<R: std::io::Read>(
    reader: R,
    name: &str,
) -> Result<Vec<(TrajectoryId, Trajectory)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| parse_error(name, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| parse_error(name, lineno, e.to_string()))?;
        let id = record.id;
        let t = record.into_trajectory();
        t.validate()
            .map_err(|e| parse_error(name, lineno, e.to_string()))?;
        out.push((id, t));
    }
    Ok(out)
}

fn read_jsonl<T, F>(dir: &Path, name: &str, mut each: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<()>,
{
    let path = dir.join(name);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => parse_error(name, lineno, "invalid UTF-8"),
            _ => Error::io(&path, e),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value =
            serde_json::from_str(&line).map_err(|e| parse_error(name, lineno, e.to_string()))?;
        each(lineno, value)?;
    }
    Ok(())
}

fn parse_error(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

/// Reads labels from any `labels.csv`-shaped reader.
pub fn read_labels<R: std::io::Read>(reader: R, name: &str) -> Result<Vec<LabelRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(name, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>()
        != ["trajectory_id", "rater_id", "failure_mode", "unix_ts"]
    {
        return Err(parse_error(
            name,
            1,
            "expected header trajectory_id,rater_id,failure_mode,unix_ts",
        ));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<LabelRecord>() {
        match row {
            Ok(label) => out.push(label),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                return Err(parse_error(name, line, e.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<GhostDatabase> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut db = GhostDatabase::new();
    read_jsonl::<TrajectoryLine, _>(dir, GHOSTS_FILE, |line, record| {
        if record.id.0 != db.len() as u64 {
            return Err(parse_error(
                GHOSTS_FILE,
                line,
                format!("expected trajectory id {}, found {}", db.len(), record.id.0),
            ));
        }
        db.record_episode(record.into_trajectory())
            .map_err(|e| parse_error(GHOSTS_FILE, line, e.to_string()))?;
        Ok(())
    })?;
    read_jsonl::<PolicySnapshot, _>(dir, SNAPSHOTS_FILE, |line, snap| {
        db.add_snapshot(snap)
            .map(drop)
            .map_err(|e| parse_error(SNAPSHOTS_FILE, line, e.to_string()))
    })?;
    read_jsonl::<Disruption, _>(dir, DISRUPTIONS_FILE, |line, d| {
        db.log_disruption(d)
            .map_err(|e| parse_error(DISRUPTIONS_FILE, line, e.to_string()))
    })?;

    let path = dir.join(LABELS_FILE);
    match File::open(&path) {
        Ok(file) => {
            for (i, label) in read_labels(file, LABELS_FILE)?.into_iter().enumerate() {
                db.add_label(label)
                    .map_err(|e| parse_error(LABELS_FILE, i + 2, e.to_string()))?;
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(&path, e)),
    }
    Ok(db)
}

/// Append-mode writers used while a database is attached to a directory.
#[derive(Debug)]
pub(super) struct Sink {
    dir: std::path::PathBuf,
    ghosts: BufWriter<File>,
    snapshots: BufWriter<File>,
    labels: csv::Writer<File>,
    disruptions: BufWriter<File>,
}

impl Sink {
    pub(super) fn open(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let path = dir.join(name);
            OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))
        };
        Ok(Sink {
            dir: dir.to_path_buf(),
            ghosts: BufWriter::new(open(GHOSTS_FILE)?),
            snapshots: BufWriter::new(open(SNAPSHOTS_FILE)?),
            labels: label_writer(open(LABELS_FILE)?, false),
            disruptions: BufWriter::new(open(DISRUPTIONS_FILE)?),
        })
    }

    fn append(dir: &Path, name: &str, w: &mut BufWriter<File>, line: &str) -> Result<()> {
        let path = dir.join(name);
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub(super) fn trajectory(&mut self, id: TrajectoryId, t: &Trajectory) -> Result<()> {
        Self::append(
            &self.dir,
            GHOSTS_FILE,
            &mut self.ghosts,
            &trajectory_line(id, t),
        )
    }

    pub(super) fn snapshot(&mut self, s: &PolicySnapshot) -> Result<()> {
        Self::append(&self.dir, SNAPSHOTS_FILE, &mut self.snapshots, &json(s)?)
    }

    pub(super) fn disruption(&mut self, d: &Disruption) -> Result<()> {
        Self::append(
            &self.dir,
            DISRUPTIONS_FILE,
            &mut self.disruptions,
            &json(d)?,
        )
    }

    pub(super) fn label(&mut self, label: &LabelRecord) -> Result<()> {
        let path = self.dir.join(LABELS_FILE);
        self.labels
            .serialize(label)
            .map_err(|e| csv_err(&path, e))?;
        self.labels.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{snapshot_policy, DisruptionContext, QTable, StateKey};
    use crate::disruption::{Author, DisruptionKind};
    use crate::env::{Action, Cell, GridConfig};
    use crate::ghost::tests::walk;
    use crate::ids::IdSeq;
    use crate::taxonomy::FailureMode;

    fn sample_db() -> GhostDatabase {
        let mut db = GhostDatabase::new();
        for e in 0..3u64 {
            db.record_episode(walk(
                e,
                &[(0, 0), (1, 0), (1, 1)],
                &[Action::Right, Action::Down],
            ))
            .unwrap();
        }
        for (id, rater, mode) in [
            (0, "alice", FailureMode::ObsessiveLoop),
            (2, "bob", FailureMode::None),
        ] {
            db.add_label(LabelRecord {
                trajectory_id: TrajectoryId(id),
                rater_id: rater.into(),
                failure_mode: mode,
                unix_ts: 1_700_000_000 + id,
            })
            .unwrap();
        }
        let mut q = QTable::new();
        q.set(
            StateKey {
                cell: Cell::new(0, 0),
                occluded: false,
            },
            Action::Right,
            0.1 + 0.2,
        );
        db.add_snapshot(snapshot_policy(
            &q,
            2,
            DisruptionContext::default(),
            &GridConfig::default(),
            &mut IdSeq::default(),
        ))
        .unwrap();
        let mut d = Disruption::new(
            DisruptionId(0),
            DisruptionKind::RewardInversion {},
            Author::Human("alice".into()),
        );
        d.applied_at_episode = Some(2);
        d.applied_at_tick = Some(0);
        db.log_disruption(d).unwrap();
        db
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        persist(&GhostDatabase::new(), dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), GhostDatabase::new());
    }

    #[test]
    fn populated_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let db = sample_db();
        persist(&db, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, db);
        assert!(back.index_consistent());
        assert!(back.trajectory(TrajectoryId(0)).unwrap().is_failure());
        assert_eq!(
            back.failure_actions_at(Cell::new(1, 0)),
            db.failure_actions_at(Cell::new(1, 0))
        );
        let header = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert!(header.starts_with("trajectory_id,rater_id,failure_mode,unix_ts\n"));
    }

    #[test]
    fn truncated_file_names_line() {
        let dir = tempfile::tempdir().unwrap();
        persist(&sample_db(), dir.path()).unwrap();
        let path = dir.path().join(GHOSTS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.len() - text.lines().last().unwrap().len() / 2;
        fs::write(&path, &text[..cut]).unwrap();
        match load(dir.path()) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, GHOSTS_FILE);
                assert_eq!(line, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        persist(&sample_db(), dir.path()).unwrap();
        let path = dir.path().join(LABELS_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("1,carol,Sulking,5\n");
        fs::write(&path, text).unwrap();
        match load(dir.path()) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, LABELS_FILE);
                assert_eq!(line, 4);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn attached_log_matches_full_persist() {
        let live = tempfile::tempdir().unwrap();
        let mut db = GhostDatabase::new();
        db.attach_log(live.path()).unwrap();
        let reference = sample_db();
        for st in reference.trajectories() {
            db.record_episode(st.trajectory.clone()).unwrap();
        }
        for s in reference.snapshots() {
            db.add_snapshot((**s).clone()).unwrap();
        }
        for l in reference.labels() {
            db.add_label(l.clone()).unwrap();
        }
        for d in reference.disruptions() {
            db.log_disruption(d.clone()).unwrap();
        }
        let full = tempfile::tempdir().unwrap();
        persist(&reference, full.path()).unwrap();
        for name in [GHOSTS_FILE, SNAPSHOTS_FILE, LABELS_FILE, DISRUPTIONS_FILE] {
            assert_eq!(
                fs::read(live.path().join(name)).unwrap(),
                fs::read(full.path().join(name)).unwrap(),
                "{name}"
            );
        }
        assert_eq!(load(live.path()).unwrap(), reference);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = load(Path::new("/definitely/not/here")).unwrap_err();
        assert_eq!(err.code(), "E_IO");
    }
}
