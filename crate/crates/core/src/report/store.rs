use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{IncidentReport, Rejection, TIMESTAMP_WINDOW_MS};
use crate::contingency::AssetRef;

const REPORTS_FILE: &str = "reports.ndjson";
const REJECTIONS_FILE: &str = "rejections.ndjson";
const PRUNE_EVERY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub report: IncidentReport,
    pub asset: Option<AssetRef>,
    pub accepted_at: i64,
}

/// What the submitter gets back for an accepted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub report_id: Uuid,
    pub asset: Option<AssetRef>,
    pub decision: String,
    pub accepted_at: i64,
}

impl From<&StoredReport> for AcceptanceRecord {
    fn from(s: &StoredReport) -> Self {
        AcceptanceRecord {
            report_id: s.report.report_id,
            asset: s.asset,
            decision: "accepted".into(),
            accepted_at: s.accepted_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub at: i64,
    pub device_key_id: String,
    pub reason: String,
    pub detail: String,
}

#[derive(Debug, Default)]
struct Inner {
    /// (device_key_id, nonce) -> report timestamp
    seen: HashMap<(String, String), i64>,
    reports: Vec<StoredReport>,
    rejections: Vec<RejectionRecord>,
    log: Option<File>,
    rejection_log: Option<File>,
    admitted_since_prune: usize,
}

/// Append-only log of accepted reports plus the replay index.
///
/// Checking the index and appending the report happen under one lock, so
/// concurrent submissions of one envelope yield exactly one acceptance.
#[derive(Debug)]
pub struct ReportStore {
    dir: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ReportStore {
    /// A store that forgets everything when dropped.
    pub fn in_memory() -> Self {
        ReportStore {
            dir: None,
            inner: Mutex::new(Inner::default()),
        }
    }

    /// Opens (or creates) a store directory and rebuilds the replay index
    /// from its log. Any unreadable line aborts the open.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(REPORTS_FILE);
        let mut inner = Inner::default();

        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let stored: StoredReport = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{}: {e}", path.display(), n + 1),
                    )
                })?;
                inner.seen.insert(
                    (
                        stored.report.device_key_id.clone(),
                        stored.report.nonce.clone(),
                    ),
                    stored.report.timestamp,
                );
                inner.reports.push(stored);
            }
        }

        inner.log = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        inner.rejection_log = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(REJECTIONS_FILE))?,
        );
        Ok(ReportStore {
            dir: Some(dir.to_path_buf()),
            inner: Mutex::new(inner),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Records the report unless its (device, nonce) pair was seen before.
    /// The log line is fsynced before the report counts as accepted.
    pub fn admit(
        &self,
        report: IncidentReport,
        asset: Option<AssetRef>,
        now_ms: i64,
    ) -> Result<StoredReport, Rejection> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let key = (report.device_key_id.clone(), report.nonce.clone());
        if inner.seen.contains_key(&key) {
            return Err(Rejection::Replay);
        }

        let stored = StoredReport {
            report,
            asset,
            accepted_at: now_ms,
        };
        if let Some(log) = inner.log.as_mut() {
            let mut line =
                serde_json::to_vec(&stored).map_err(|e| Rejection::Storage(e.to_string()))?;
            line.push(b'\n');
            log.write_all(&line)
                .and_then(|_| log.sync_data())
                .map_err(|e| Rejection::Storage(e.to_string()))?;
        }

        inner.seen.insert(key, stored.report.timestamp);
        inner.reports.push(stored.clone());
        inner.admitted_since_prune += 1;
        if inner.admitted_since_prune >= PRUNE_EVERY {
            prune(&mut inner, now_ms);
        }
        Ok(stored)
    }

    pub fn record_rejection(
        &self,
        device_key_id: &str,
        rejection: &Rejection,
        now_ms: i64,
    ) -> std::io::Result<()> {
        let record = RejectionRecord {
            at: now_ms,
            device_key_id: device_key_id.to_owned(),
            reason: rejection.code().to_owned(),
            detail: rejection.to_string(),
        };
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(log) = inner.rejection_log.as_mut() {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            log.write_all(&line)?;
        }
        inner.rejections.push(record);
        Ok(())
    }

    /// Drops replay-index entries that could no longer pass the timestamp
    /// window. Returns the number removed.
    pub fn prune(&self, now_ms: i64) -> usize {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        prune(&mut inner, now_ms)
    }

    /// Consistent copy of every accepted report, in acceptance order.
    pub fn snapshot(&self) -> Vec<StoredReport> {
        self.inner
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .reports
            .clone()
    }

    pub fn rejections(&self) -> Vec<RejectionRecord> {
        self.inner
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .rejections
            .clone()
    }

    pub fn len(&self) -> usize {
        self.inner
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .reports
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn replay_index_len(&self) -> usize {
        self.inner
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .seen
            .len()
    }

    /// Flushes both logs to disk.
    pub fn sync(&self) -> std::io::Result<()> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(f) = inner.log.as_mut() {
            f.sync_all()?;
        }
        if let Some(f) = inner.rejection_log.as_mut() {
            f.sync_all()?;
        }
        Ok(())
    }
}

fn prune(inner: &mut Inner, now_ms: i64) -> usize {
    let before = inner.seen.len();
    inner
        .seen
        .retain(|_, ts| *ts >= now_ms - TIMESTAMP_WINDOW_MS);
    inner.admitted_since_prune = 0;
    before - inner.seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::tests::sample_report;
    use std::sync::Arc;

    #[test]
    fn replay_is_rejected() {
        let store = ReportStore::in_memory();
        let r = sample_report("dev-1", 0, 1);
        store.admit(r.clone(), None, 0).unwrap();
        assert_eq!(store.admit(r, None, 0), Err(Rejection::Replay));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn same_nonce_other_device_is_fine() {
        let store = ReportStore::in_memory();
        store.admit(sample_report("dev-1", 0, 1), None, 0).unwrap();
        store.admit(sample_report("dev-2", 0, 1), None, 0).unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn concurrent_duplicates_accept_once() {
        let store = Arc::new(ReportStore::in_memory());
        let r = sample_report("dev-1", 0, 1);
        let handles: Vec<_> = (0..64)
            .map(|_| {
                let (store, r) = (store.clone(), r.clone());
                std::thread::spawn(move || store.admit(r, None, 0).is_ok())
            })
            .collect();
        let accepted = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|&ok| ok)
            .count();
        assert_eq!(accepted, 1);
    }

    #[test]
    fn survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report("dev-1", 0, 1);
        {
            let store = ReportStore::open(dir.path()).unwrap();
            store
                .admit(r.clone(), Some(AssetRef::branch(2)), 10)
                .unwrap();
            store
                .record_rejection("dev-9", &Rejection::UnknownKey("dev-9".into()), 11)
                .unwrap();
        }
        let store = ReportStore::open(dir.path()).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.snapshot()[0].asset, Some(AssetRef::branch(2)));
        assert_eq!(store.admit(r, None, 20), Err(Rejection::Replay));
        let rejections = std::fs::read_to_string(dir.path().join(REJECTIONS_FILE)).unwrap();
        assert!(rejections.contains("unknown_key"));
    }

    #[test]
    fn corrupt_log_refuses_to_open() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(REPORTS_FILE), "{\"report\":").unwrap();
        assert!(ReportStore::open(dir.path()).is_err());
    }

    #[test]
    fn pruning_keeps_entries_inside_window() {
        let store = ReportStore::in_memory();
        store.admit(sample_report("dev-1", 0, 1), None, 0).unwrap();
        store
            .admit(sample_report("dev-1", 500_000, 2), None, 500_000)
            .unwrap();
        assert_eq!(store.prune(500_000), 1);
        assert_eq!(store.replay_index_len(), 1);
        // the log itself is untouched
        assert_eq!(store.len(), 2);
    }
}
