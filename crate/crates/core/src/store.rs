//! Local append-only event log with periodic snapshots.
//!
//! Layout of a data directory:
//!
//! ```text
//! events.log            one JSON event per line: {"seq","kind","at","payload"}
//! snapshots/00500.json  full state after event 500 (every `snapshot_every` events)
//! ```
//!
//! Loading restores the newest usable snapshot and replays the events after
//! it. An incomplete last line (a write cut short by a crash) is dropped and
//! truncated away; any other damage is reported as [`StoreError::CorruptLog`].

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::filter::{filtering_efficiency, stats_in_range, FilterRecord, FilterStats, RuleId, StatsTable};
use crate::state::{EngineState, Event, EventPayload, EventRecord, StateError};

pub const LOG_FILE: &str = "events.log";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 500;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage is full")]
    StorageFull,
    #[error("payload does not match the {kind} schema: {reason}")]
    SchemaInvalid { kind: String, reason: String },
    #[error("event log is corrupt at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("event {seq} cannot be applied: {source}")]
    Replay { seq: u64, source: StateError },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(e)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Snapshot {
    up_to_seq: u64,
    state: EngineState,
}

#[derive(Debug)]
pub struct EventStore {
    dir: PathBuf,
    log: File,
    last_seq: u64,
    snapshot_every: u64,
}

/// Reads every complete record of `events.log`, truncating a torn tail.
fn read_log(path: &Path) -> Result<Vec<EventRecord>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!("discarding {} bytes of an incomplete final record in {}", bytes.len() - complete, path.display());
        OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
    }
    let text = std::str::from_utf8(&bytes[..complete])
        .map_err(|e| StoreError::CorruptLog { line: 0, reason: e.to_string() })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord =
            serde_json::from_str(line).map_err(|e| StoreError::CorruptLog { line: i + 1, reason: e.to_string() })?;
        let expected = records.len() as u64 + 1;
        if record.seq != expected {
            return Err(StoreError::CorruptLog {
                line: i + 1,
                reason: format!("expected seq {expected}, found {}", record.seq),
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn snapshot_path(dir: &Path, seq: u64) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("{seq:05}.json"))
}

/// Newest snapshot not past `max_seq` that parses; unreadable ones are skipped.
fn latest_snapshot(dir: &Path, max_seq: u64) -> Result<Option<Snapshot>, StoreError> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    let mut seqs: Vec<u64> = match fs::read_dir(&snap_dir) {
        Ok(entries) => entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json")?.parse().ok())
            .filter(|&s| s <= max_seq)
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    seqs.sort_unstable();
    for seq in seqs.into_iter().rev() {
        let path = snapshot_path(dir, seq);
        match fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<Snapshot>(&b).map_err(|e| e.to_string()))
        {
            Ok(snap) if snap.up_to_seq == seq && snap.state.last_seq == seq => return Ok(Some(snap)),
            Ok(_) => log::warn!("ignoring inconsistent snapshot {}", path.display()),
            Err(e) => log::warn!("ignoring unreadable snapshot {}: {e}", path.display()),
        }
    }
    Ok(None)
}

impl EventStore {
    /// Opens (creating if needed) a data directory and rebuilds its state.
    /// `fresh` is the state to start from when there is no snapshot.
    pub fn open(dir: &Path, fresh: EngineState, snapshot_every: u64) -> Result<(Self, EngineState), StoreError> {
        fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
        let log_path = dir.join(LOG_FILE);
        let records = read_log(&log_path)?;
        let last_seq = records.len() as u64;
        let mut state = match latest_snapshot(dir, last_seq)? {
            Some(snap) => snap.state,
            None => fresh,
        };
        for record in &records[state.last_seq as usize..] {
            let event = Event::from_record(record)
                .map_err(|e| StoreError::CorruptLog { line: record.seq as usize, reason: e.to_string() })?;
            state.apply(&event).map_err(|source| StoreError::Replay { seq: event.seq, source })?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let store = Self { dir: dir.to_path_buf(), log, last_seq, snapshot_every: snapshot_every.max(1) };
        Ok((store, state))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Durably appends an event and returns it with its assigned seq.
    pub fn append(&mut self, at: Timestamp, payload: EventPayload) -> Result<Event, StoreError> {
        let event = Event { seq: self.last_seq + 1, at, payload };
        self.write_record(&event.to_record())?;
        Ok(event)
    }

    /// Appends an untyped event after checking its payload against `kind`.
    pub fn append_raw(&mut self, kind: &str, at: Timestamp, payload: Value) -> Result<Event, StoreError> {
        let payload = EventPayload::from_parts(kind, &payload)
            .map_err(|e| StoreError::SchemaInvalid { kind: kind.to_string(), reason: e.to_string() })?;
        self.append(at, payload)
    }

    fn write_record(&mut self, record: &EventRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.last_seq = record.seq;
        Ok(())
    }

    /// Writes a snapshot when `state` sits on a snapshot boundary.
    pub fn maybe_snapshot(&self, state: &EngineState) -> Result<bool, StoreError> {
        if state.last_seq == 0 || !state.last_seq.is_multiple_of(self.snapshot_every) {
            return Ok(false);
        }
        self.snapshot(state)?;
        Ok(true)
    }

    pub fn snapshot(&self, state: &EngineState) -> Result<(), StoreError> {
        let snap = Snapshot { up_to_seq: state.last_seq, state: state.clone() };
        let path = snapshot_path(&self.dir, state.last_seq);
        let tmp = path.with_extension("json.tmp");
        let mut file = File::create(&tmp)?;
        file.write_all(&serde_json::to_vec(&snap).expect("state serializes"))?;
        file.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Every event in the log, in order.
    pub fn events(&self) -> Result<Vec<Event>, StoreError> {
        read_log(&self.dir.join(LOG_FILE))?
            .iter()
            .map(|r| {
                Event::from_record(r)
                    .map_err(|e| StoreError::CorruptLog { line: r.seq as usize, reason: e.to_string() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecordQuery {
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    pub rule_id: Option<RuleId>,
    /// Position to resume from, as returned in [`RecordPage::next_cursor`].
    pub cursor: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecordPage {
    pub records: Vec<FilterRecord>,
    pub next_cursor: Option<usize>,
}

pub const DEFAULT_PAGE_SIZE: usize = 100;

impl RecordQuery {
    fn admits(&self, record: &FilterRecord) -> bool {
        self.from.is_none_or(|f| record.day >= f)
            && self.to.is_none_or(|t| record.day <= t)
            && self.rule_id.is_none_or(|r| record.matched_rule_id == r)
    }
}

/// Filter records in log order, paged by position.
pub fn query_records(records: &[FilterRecord], query: &RecordQuery) -> RecordPage {
    let limit = query.limit.unwrap_or(DEFAULT_PAGE_SIZE).max(1);
    let start = query.cursor.unwrap_or(0);
    let mut page = Vec::new();
    let mut next_cursor = None;
    for (pos, record) in records.iter().enumerate().skip(start) {
        if !query.admits(record) {
            continue;
        }
        if page.len() == limit {
            next_cursor = Some(pos);
            break;
        }
        page.push(record.clone());
    }
    RecordPage { records: page, next_cursor }
}

/// One row of the per-rule, per-day series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatsRow {
    pub rule_id: RuleId,
    pub day: NaiveDate,
    #[serde(rename = "N")]
    pub applied: u64,
    #[serde(rename = "n")]
    pub filtered: u64,
    pub efficiency: Option<f64>,
}

pub fn query_stats(table: &StatsTable, query: &RecordQuery) -> Vec<StatsRow> {
    table
        .iter()
        .filter(|(rule, _)| query.rule_id.is_none_or(|r| r == **rule))
        .flat_map(|(rule, days)| {
            days.iter().filter(|(d, _)| query.from.is_none_or(|f| **d >= f) && query.to.is_none_or(|t| **d <= t)).map(
                move |(day, s)| StatsRow {
                    rule_id: *rule,
                    day: *day,
                    applied: s.applied,
                    filtered: s.filtered,
                    efficiency: s.efficiency(),
                },
            )
        })
        .collect()
}

/// Totals for one rule over the query's date range.
pub fn rule_totals(table: &StatsTable, rule: RuleId, query: &RecordQuery) -> (FilterStats, Option<f64>) {
    let total = stats_in_range(table, rule, query.from, query.to);
    (total, filtering_efficiency(total.filtered, total.applied))
}
