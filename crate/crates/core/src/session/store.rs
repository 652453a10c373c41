use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use tracing::warn;

use super::{SessionEvent, SessionState};
use crate::error::{Error, Result};

/// Append-only JSONL event logs, one file per session under `dir`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

/// Outcome of reading a log: the rebuilt state, and whether a corrupt or
/// truncated tail had to be dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub state: SessionState,
    pub recovered: bool,
    /// Byte length of the log prefix that `state` was built from.
    pub valid_len: usize,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn encode(events: &[SessionEvent]) -> Vec<u8> {
    let mut buf = Vec::new();
    for e in events {
        serde_json::to_writer(&mut buf, e).expect("events serialize");
        buf.push(b'\n');
    }
    buf
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SessionStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::NotFound(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.log")))
    }

    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }

    /// Starts a new log. Fails if one already exists for `id`.
    pub fn create(&self, id: &str, opened: &SessionEvent) -> Result<()> {
        let path = self.path(id)?;
        self.ensure_dir()?;
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::InvalidParams(format!("session {id} already exists"))
                }
                _ => Error::io(&path, e),
            })?;
        f.write_all(&encode(std::slice::from_ref(opened)))
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(&path, e))
    }

    /// Appends events in a single write.
    pub fn append(&self, id: &str, events: &[SessionEvent]) -> Result<()> {
        let path = self.path(id)?;
        self.ensure_dir()?;
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode(events))
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(&path, e))
    }

    /// Rewrites the whole log from `state` through a temp file and rename.
    pub fn persist(&self, state: &SessionState) -> Result<()> {
        let path = self.path(&state.session_id)?;
        self.ensure_dir()?;
        let tmp = path.with_extension("log.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&encode(&state.events()))?;
            f.sync_data()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| Error::io(&path, e))
    }

    /// Deletes a session's log if present.
    pub fn remove(&self, id: &str) -> Result<()> {
        let path = self.path(id)?;
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn exists(&self, id: &str) -> bool {
        self.path(id).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Loads a session. A corrupt or truncated tail is dropped back to the
    /// last completed turn and the file is cut to match.
    pub fn load(&self, id: &str) -> Result<SessionState> {
        let path = self.path(id)?;
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(id.to_string()),
            _ => Error::io(&path, e),
        })?;
        let replay = Self::replay(&bytes).map_err(|reason| Error::CorruptLog {
            path: path.clone(),
            reason,
        })?;
        if replay.recovered {
            warn!(
                session = id,
                kept = replay.valid_len,
                dropped = bytes.len() - replay.valid_len,
                "session log had a corrupt tail; recovered to last completed turn"
            );
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.set_len(replay.valid_len as u64)
                .and_then(|_| f.sync_data())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(replay.state)
    }

    /// Folds a raw log. Errors only if the `opened` line itself is unusable.
    pub fn replay(bytes: &[u8]) -> std::result::Result<Replay, String> {
        let mut offset = 0usize;
        let mut state: Option<SessionState> = None;
        // state and byte length at the last turn boundary
        let mut checkpoint: Option<(SessionState, usize)> = None;
        let mut recovered = false;

        while offset < bytes.len() {
            let (line, next) = match bytes[offset..].iter().position(|&b| b == b'\n') {
                Some(p) => (&bytes[offset..offset + p], offset + p + 1),
                None => {
                    recovered = true;
                    break;
                }
            };
            let event: SessionEvent = match serde_json::from_slice(line) {
                Ok(e) => e,
                Err(e) => {
                    if state.is_none() {
                        return Err(format!("unreadable opening event: {e}"));
                    }
                    recovered = true;
                    break;
                }
            };
            match &mut state {
                None => {
                    let s = SessionState::replay([&event]).map_err(|e| e.to_string())?;
                    checkpoint = Some((s.clone(), next));
                    state = Some(s);
                }
                Some(s) => {
                    if s.apply(&event).is_err() {
                        recovered = true;
                        break;
                    }
                    if matches!(event, SessionEvent::TurnCompleted { .. } | SessionEvent::Selected { .. }) {
                        checkpoint = Some((s.clone(), next));
                    }
                }
            }
            offset = next;
        }

        let Some((cp_state, cp_len)) = checkpoint else {
            return Err("log has no opening event".into());
        };
        if recovered {
            Ok(Replay {
                state: cp_state,
                recovered: true,
                valid_len: cp_len,
            })
        } else {
            Ok(Replay {
                state: state.expect("checkpoint implies state"),
                recovered: false,
                valid_len: offset,
            })
        }
    }

    /// Ids of all stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let rd = match fs::read_dir(&self.dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        let mut ids: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".log").map(str::to_string)
            })
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
