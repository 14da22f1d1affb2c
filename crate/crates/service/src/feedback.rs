//! Append-only feedback store: one JSON record per line, written by a single
//! thread that syncs each group of records to disk before acknowledging it.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::thread;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

/// Records drained from the queue per disk sync.
const MAX_GROUP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Feedback,
    Suggestion,
}

/// A record as submitted, before the store assigns an id and timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewRecord {
    pub kind: Kind,
    pub word: Option<String>,
    pub context: Option<String>,
    /// Proposed definition for feedback, free text for suggestions.
    pub text: String,
    pub client_id: Option<String>,
    pub client_timestamp: Option<String>,
}

impl NewRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        let blank = |s: &Option<String>| s.as_deref().is_none_or(|v| v.trim().is_empty());
        if self.text.trim().is_empty() {
            return Err(StoreError::Invalid(match self.kind {
                Kind::Feedback => "proposed_definition is required",
                Kind::Suggestion => "message is required",
            }));
        }
        if self.kind == Kind::Feedback && blank(&self.word) {
            return Err(StoreError::Invalid("word is required for feedback"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub id: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub record: NewRecord,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid record: {0}")]
    Invalid(&'static str),
    #[error("feedback store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("feedback writer has stopped")]
    Closed,
}

/// Reads every complete record, ignoring a trailing line without a newline
/// (a write cut short by a crash). Returns the records and the byte length
/// of the intact prefix.
pub fn read_records(path: &Path) -> Result<(Vec<FeedbackRecord>, u64), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good = 0u64;
    let mut line = Vec::new();
    let mut number = 0;
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 || line.last() != Some(&b'\n') {
            break;
        }
        number += 1;
        let body = &line[..line.len() - 1];
        if !body.iter().all(u8::is_ascii_whitespace) {
            let record: FeedbackRecord = serde_json::from_slice(body).map_err(|e| StoreError::Corrupt {
                line: number,
                reason: e.to_string(),
            })?;
            records.push(record);
        }
        good += n as u64;
    }
    Ok((records, good))
}

type Reply = oneshot::Sender<Result<FeedbackRecord, String>>;

struct Writer {
    file: File,
    next_id: u64,
    last_timestamp: Option<DateTime<Utc>>,
    dedup: HashMap<(String, String), FeedbackRecord>,
    shared: Arc<RwLock<Vec<FeedbackRecord>>>,
}

impl Writer {
    fn dedup_key(r: &NewRecord) -> Option<(String, String)> {
        Some((r.client_id.clone()?, r.client_timestamp.clone()?))
    }

    fn commit(&mut self, batch: Vec<(NewRecord, Reply)>) {
        let mut replies = Vec::with_capacity(batch.len());
        let mut fresh = Vec::new();
        let mut bytes = Vec::new();
        for (new, reply) in batch {
            let key = Self::dedup_key(&new);
            if let Some(existing) = key.as_ref().and_then(|k| self.dedup.get(k)) {
                replies.push((reply, existing.clone(), false));
                continue;
            }
            let now = Utc::now();
            let timestamp = self.last_timestamp.map_or(now, |t| t.max(now));
            self.last_timestamp = Some(timestamp);
            let record = FeedbackRecord {
                id: self.next_id,
                timestamp,
                record: new,
            };
            self.next_id += 1;
            serde_json::to_writer(&mut bytes, &record).expect("record serializes");
            bytes.push(b'\n');
            if let Some(k) = key {
                self.dedup.insert(k, record.clone());
            }
            fresh.push(record.clone());
            replies.push((reply, record, true));
        }
        let written = self
            .file
            .write_all(&bytes)
            .and_then(|_| self.file.flush())
            .and_then(|_| self.file.sync_data());
        match written {
            Ok(()) => {
                self.shared.write().expect("store lock").extend(fresh);
                for (reply, record, _) in replies {
                    let _ = reply.send(Ok(record));
                }
            }
            Err(e) => {
                log::error!("feedback write failed: {e}");
                for (reply, record, is_new) in replies {
                    if is_new {
                        if let Some(k) = Self::dedup_key(&record.record) {
                            self.dedup.remove(&k);
                        }
                        let _ = reply.send(Err(e.to_string()));
                    } else {
                        let _ = reply.send(Ok(record));
                    }
                }
            }
        }
    }

    fn run(mut self, rx: mpsc::Receiver<(NewRecord, Reply)>) {
        while let Ok(first) = rx.recv() {
            let mut batch = vec![first];
            while batch.len() < MAX_GROUP {
                match rx.try_recv() {
                    Ok(item) => batch.push(item),
                    Err(_) => break,
                }
            }
            self.commit(batch);
        }
    }
}

/// Cheap to clone; all clones feed the same writer thread.
#[derive(Clone)]
pub struct FeedbackStore {
    path: PathBuf,
    tx: mpsc::Sender<(NewRecord, Reply)>,
    records: Arc<RwLock<Vec<FeedbackRecord>>>,
}

impl FeedbackStore {
    /// Loads existing records, cuts off a partial trailing record and starts
    /// the writer thread.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let (records, good) = read_records(&path)?;
        let mut file = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(&path)?;
        if file.metadata()?.len() != good {
            log::warn!("dropping partial trailing feedback record in {}", path.display());
            file.set_len(good)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        let dedup = records
            .iter()
            .filter_map(|r| Writer::dedup_key(&r.record).map(|k| (k, r.clone())))
            .collect();
        let shared = Arc::new(RwLock::new(records));
        let writer = Writer {
            file,
            next_id: shared.read().expect("store lock").last().map_or(1, |r| r.id + 1),
            last_timestamp: shared.read().expect("store lock").last().map(|r| r.timestamp),
            dedup,
            shared: shared.clone(),
        };
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("feedback-writer".into())
            .spawn(move || writer.run(rx))?;
        Ok(FeedbackStore {
            path,
            tx,
            records: shared,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Queues `record`; resolves once it is on disk. A repeated
    /// `(client_id, client_timestamp)` returns the original record.
    pub async fn append(&self, record: NewRecord) -> Result<FeedbackRecord, StoreError> {
        self.submit(record)?.await.map_err(|_| StoreError::Closed)?.map_err(io_error)
    }

    pub fn append_blocking(&self, record: NewRecord) -> Result<FeedbackRecord, StoreError> {
        self.submit(record)?.blocking_recv().map_err(|_| StoreError::Closed)?.map_err(io_error)
    }

    fn submit(&self, record: NewRecord) -> Result<oneshot::Receiver<Result<FeedbackRecord, String>>, StoreError> {
        record.validate()?;
        let (reply, rx) = oneshot::channel();
        self.tx.send((record, reply)).map_err(|_| StoreError::Closed)?;
        Ok(rx)
    }

    /// Every acknowledged record, in id order.
    pub fn list(&self) -> Vec<FeedbackRecord> {
        self.records.read().expect("store lock").clone()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_error(message: String) -> StoreError {
    StoreError::Io(io::Error::other(message))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feedback(word: &str, text: &str) -> NewRecord {
        NewRecord {
            kind: Kind::Feedback,
            word: Some(word.into()),
            context: None,
            text: text.into(),
            client_id: None,
            client_timestamp: None,
        }
    }

    #[test]
    fn validation_rules() {
        assert!(feedback("cat", "a pet").validate().is_ok());
        assert!(feedback("cat", " ").validate().is_err());
        assert!(feedback("", "a pet").validate().is_err());
        let suggestion = NewRecord {
            kind: Kind::Suggestion,
            word: None,
            ..feedback("x", "more examples please")
        };
        assert!(suggestion.validate().is_ok());
    }

    #[test]
    fn ids_and_timestamps_are_monotone_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fb.jsonl");
        let store = FeedbackStore::open(&path).unwrap();
        let a = store.append_blocking(feedback("a", "one")).unwrap();
        let b = store.append_blocking(feedback("b", "two")).unwrap();
        assert_eq!((a.id, b.id), (1, 2));
        drop(store);
        let store = FeedbackStore::open(&path).unwrap();
        let c = store.append_blocking(feedback("c", "three")).unwrap();
        assert_eq!(c.id, 3);
        let all = store.list();
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn duplicate_client_submission_is_recorded_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeedbackStore::open(dir.path().join("fb.jsonl")).unwrap();
        let mut r = feedback("a", "one");
        r.client_id = Some("c1".into());
        r.client_timestamp = Some("2024-01-01T00:00:00Z".into());
        let first = store.append_blocking(r.clone()).unwrap();
        let second = store.append_blocking(r).unwrap();
        assert_eq!(first, second);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn partial_trailing_line_is_dropped_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fb.jsonl");
        {
            let store = FeedbackStore::open(&path).unwrap();
            store.append_blocking(feedback("a", "one")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\":2,\"timest").unwrap();
        drop(f);
        let store = FeedbackStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        let next = store.append_blocking(feedback("b", "two")).unwrap();
        assert_eq!(next.id, 2);
        drop(store);
        let (records, _) = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn corrupt_complete_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fb.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(FeedbackStore::open(&path), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
