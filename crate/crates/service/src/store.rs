//! File-backed persistence: an append-only JSON-lines event log, periodic
//! state snapshots, and one JSON file per model version.
//!
//! ```text
//! <data dir>/events.jsonl     {"seq":1,"event":{...}}\n ...
//! <data dir>/snapshot.json    {"seq":N,"state":{...}}
//! <data dir>/models/v1.json   model snapshot
//! ```
//!
//! Every append is flushed to disk before it returns, so an acknowledged
//! event survives a crash. A torn final line (crash mid-write) is discarded
//! on open; damage anywhere else is reported as an error.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use docstruct_core::incremental::GroupedClassifier;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Event, State};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt {what} at {path}: {message}")]
    Corrupt {
        what: &'static str,
        path: PathBuf,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    state: State,
}

pub struct Store {
    dir: PathBuf,
    log: File,
    last_seq: u64,
    since_snapshot: u64,
}

const LOG_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const MODELS_DIR: &str = "models";

/// Writes `bytes` to `path` via a synced temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(parent) = path.parent() {
        // make the rename itself durable
        if let Ok(d) = File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

impl Store {
    /// Opens (creating if needed) the store in `dir` and rebuilds the state.
    pub fn open(dir: &Path) -> Result<(Store, State), StoreError> {
        fs::create_dir_all(dir.join(MODELS_DIR)).map_err(io_err(dir))?;

        let snap_path = dir.join(SNAPSHOT_FILE);
        let (mut state, snap_seq) = match fs::read(&snap_path) {
            Ok(bytes) => {
                let s: Snapshot =
                    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                        what: "snapshot",
                        path: snap_path.clone(),
                        message: e.to_string(),
                    })?;
                (s.state, s.seq)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => (State::default(), 0),
            Err(e) => return Err(io_err(&snap_path)(e)),
        };

        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;

        let mut last_seq = snap_seq;
        let mut good_len: u64 = 0;
        let mut replayed = 0;
        {
            let mut reader = BufReader::new(&log);
            let mut line = String::new();
            let mut line_no = 0usize;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io_err(&log_path))?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = line.ends_with('\n');
                match serde_json::from_str::<LogLine>(line.trim_end()) {
                    Ok(entry) if complete => {
                        if entry.seq > snap_seq {
                            if entry.seq != last_seq + 1 {
                                return Err(StoreError::Corrupt {
                                    what: "event log",
                                    path: log_path.clone(),
                                    message: format!(
                                        "line {line_no}: expected seq {}, found {}",
                                        last_seq + 1,
                                        entry.seq
                                    ),
                                });
                            }
                            state.apply(&entry.event);
                            last_seq = entry.seq;
                            replayed += 1;
                        }
                        good_len += n as u64;
                    }
                    Ok(_) | Err(_) => {
                        // only the very last line may be damaged
                        let mut rest = String::new();
                        reader.read_line(&mut rest).map_err(io_err(&log_path))?;
                        if !rest.is_empty() {
                            return Err(StoreError::Corrupt {
                                what: "event log",
                                path: log_path.clone(),
                                message: format!("line {line_no} is unreadable"),
                            });
                        }
                        log::warn!("discarding torn final event log line {line_no}");
                        break;
                    }
                }
            }
        }
        let actual_len = log.metadata().map_err(io_err(&log_path))?.len();
        if actual_len != good_len {
            log.set_len(good_len).map_err(io_err(&log_path))?;
            log.sync_all().map_err(io_err(&log_path))?;
        }
        log.seek(SeekFrom::End(0)).map_err(io_err(&log_path))?;
        log::info!(
            "store opened at {}: snapshot seq {snap_seq}, {replayed} events replayed",
            dir.display()
        );
        Ok((
            Store {
                dir: dir.to_path_buf(),
                log,
                last_seq,
                since_snapshot: replayed,
            },
            state,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Events appended since the last snapshot (including replayed ones).
    pub fn since_snapshot(&self) -> u64 {
        self.since_snapshot
    }

    /// Appends one event and syncs it to disk. Returns its sequence number.
    pub fn append(&mut self, event: &Event) -> Result<u64, StoreError> {
        let seq = self.last_seq + 1;
        let mut line = serde_json::to_string(&LogLine {
            seq,
            event: event.clone(),
        })
        .expect("events serialize");
        line.push('\n');
        let path = self.dir.join(LOG_FILE);
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.last_seq = seq;
        self.since_snapshot += 1;
        Ok(seq)
    }

    /// Persists `state`, which must reflect every appended event.
    pub fn snapshot(&mut self, state: &State) -> Result<(), StoreError> {
        let snap = Snapshot {
            seq: self.last_seq,
            state: state.clone(),
        };
        let bytes = serde_json::to_vec(&snap).expect("state serializes");
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &bytes)?;
        self.since_snapshot = 0;
        Ok(())
    }
}

fn model_path(dir: &Path, version: u32) -> PathBuf {
    dir.join(MODELS_DIR).join(format!("v{version}.json"))
}

/// Writes model `version` under the data directory `dir`. Model files are
/// independent of the log, so they need no store lock.
pub fn write_model(dir: &Path, version: u32, model: &GroupedClassifier) -> Result<(), StoreError> {
    write_atomic(&model_path(dir, version), model.to_json().as_bytes())
}

pub fn read_model(dir: &Path, version: u32) -> Result<Option<GroupedClassifier>, StoreError> {
    let path = model_path(dir, version);
    match fs::read_to_string(&path) {
        Ok(s) => GroupedClassifier::from_json(&s)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                what: "model",
                path,
                message: e.to_string(),
            }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DocumentRecord, Source, Status};
    use docstruct_core::DocumentLayout;

    fn ingest(n: u64) -> Event {
        let page_id = State::page_id_for(n);
        Event::Ingested {
            record: DocumentRecord {
                page_id: page_id.clone(),
                source: Source::Proposals,
                width: 100,
                height: 100,
                proposals: vec![],
                layout: DocumentLayout {
                    page_id,
                    regions: vec![],
                },
                status: Status::Detected,
            },
        }
    }

    #[test]
    fn replay_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut store, mut state) = Store::open(dir.path()).unwrap();
            for n in 0..3 {
                let e = ingest(n);
                store.append(&e).unwrap();
                state.apply(&e);
            }
        }
        let (store, state) = Store::open(dir.path()).unwrap();
        assert_eq!(store.last_seq(), 3);
        assert_eq!(state.documents.len(), 3);
        assert_eq!(state.next_document, 3);
    }

    #[test]
    fn snapshot_then_more_events() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut store, mut state) = Store::open(dir.path()).unwrap();
            for n in 0..2 {
                let e = ingest(n);
                store.append(&e).unwrap();
                state.apply(&e);
            }
            store.snapshot(&state).unwrap();
            let e = ingest(2);
            store.append(&e).unwrap();
        }
        let (store, state) = Store::open(dir.path()).unwrap();
        assert_eq!(store.last_seq(), 3);
        assert_eq!(state.documents.len(), 3);
        assert_eq!(store.since_snapshot(), 1);
    }

    #[test]
    fn torn_tail_is_dropped_but_middle_damage_is_not() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut store, _) = Store::open(dir.path()).unwrap();
            store.append(&ingest(0)).unwrap();
            store.append(&ingest(1)).unwrap();
        }
        let path = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":3,\"event\":{\"ty").unwrap();
        drop(f);
        let (mut store, state) = Store::open(dir.path()).unwrap();
        assert_eq!(state.documents.len(), 2);
        assert_eq!(store.append(&ingest(2)).unwrap(), 3);
        drop(store);
        assert_eq!(Store::open(dir.path()).unwrap().1.documents.len(), 3);

        let text = fs::read_to_string(&path).unwrap();
        let damaged = text.replacen("\"seq\":2", "\"seq\":x", 1);
        fs::write(&path, damaged).unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(StoreError::Corrupt { .. })
        ));
    }

    #[test]
    fn models_round_trip() {
        use docstruct_core::incremental::HeadKind;
        let dir = tempfile::tempdir().unwrap();
        Store::open(dir.path()).unwrap();
        let m = GroupedClassifier::zeros(3, &[4], 2, HeadKind::Softmax).unwrap();
        assert!(read_model(dir.path(), 1).unwrap().is_none());
        write_model(dir.path(), 1, &m).unwrap();
        assert_eq!(read_model(dir.path(), 1).unwrap().unwrap(), m);
    }
}
