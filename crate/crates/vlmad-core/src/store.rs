//! Append-only line-delimited annotation store.
//!
//! One JSON record per line. Appends are serialized through a single
//! writer; scans stream records in file order and can either fail on the
//! first corrupt line or report and skip it in lenient mode.

use serde::{Deserialize, Serialize};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::annotation::{AnnotationRecord, FreeformAnnotation, StructuredActionAnnotation};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRecord {
    schema_version: u32,
    sample_id: String,
    teacher_id: String,
    freeform: StoredFreeform,
    actions: StoredActions,
    raw: StoredRaw,
    created_at: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredFreeform {
    current: String,
    future: String,
    reasoning: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredActions {
    control: String,
    turn: String,
    lane: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRaw {
    p1: String,
    p2: String,
}

impl From<&AnnotationRecord> for StoredRecord {
    fn from(r: &AnnotationRecord) -> Self {
        StoredRecord {
            schema_version: SCHEMA_VERSION,
            sample_id: r.sample_id.clone(),
            teacher_id: r.teacher_id.clone(),
            freeform: StoredFreeform {
                current: r.freeform.current_action.clone(),
                future: r.freeform.future_action.clone(),
                reasoning: r.freeform.reasoning.clone(),
            },
            actions: StoredActions {
                control: r.actions.control_action.clone(),
                turn: r.actions.turn_action.clone(),
                lane: r.actions.lane_action.clone(),
            },
            raw: StoredRaw {
                p1: r.raw_p1.clone(),
                p2: r.raw_p2.clone(),
            },
            created_at: r.created_at.clone(),
        }
    }
}

impl From<StoredRecord> for AnnotationRecord {
    fn from(s: StoredRecord) -> Self {
        AnnotationRecord {
            sample_id: s.sample_id,
            freeform: FreeformAnnotation {
                current_action: s.freeform.current,
                future_action: s.freeform.future,
                reasoning: s.freeform.reasoning,
            },
            actions: StructuredActionAnnotation {
                control_action: s.actions.control,
                turn_action: s.actions.turn,
                lane_action: s.actions.lane,
            },
            teacher_id: s.teacher_id,
            raw_p1: s.raw.p1,
            raw_p2: s.raw.p2,
            created_at: s.created_at,
        }
    }
}

/// Append records to the store file, one JSON line each.
pub fn store_append(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for rec in records {
        buf.push_str(&serde_json::to_string(&StoredRecord::from(rec))?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    Ok(())
}

/// A corrupt line found during a lenient scan.
#[derive(Debug)]
pub struct ScanIssue {
    pub line_number: usize,
    pub message: String,
}

pub struct ScanOutcome {
    pub records: Vec<AnnotationRecord>,
    pub issues: Vec<ScanIssue>,
}

/// Scan the store in file order. In strict mode the first corrupt line or
/// schema mismatch aborts; in lenient mode corrupt lines are reported with
/// their line numbers and skipped.
pub fn store_scan(path: &Path, lenient: bool) -> Result<ScanOutcome> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StoredRecord>(&line) {
            Ok(rec) if rec.schema_version == SCHEMA_VERSION => records.push(rec.into()),
            Ok(rec) => {
                let msg = format!(
                    "line {}: schema version {} (expected {SCHEMA_VERSION})",
                    i + 1,
                    rec.schema_version
                );
                if lenient {
                    issues.push(ScanIssue {
                        line_number: i + 1,
                        message: msg,
                    });
                } else {
                    return Err(Error::Store(msg));
                }
            }
            Err(e) => {
                if lenient {
                    issues.push(ScanIssue {
                        line_number: i + 1,
                        message: e.to_string(),
                    });
                } else {
                    return Err(Error::Store(format!("line {}: {e}", i + 1)));
                }
            }
        }
    }
    Ok(ScanOutcome { records, issues })
}

/// Sample ids already present, for resumable annotation runs.
pub fn existing_ids(path: &Path) -> Result<std::collections::BTreeSet<String>> {
    if !path.exists() {
        return Ok(Default::default());
    }
    let outcome = store_scan(path, true)?;
    Ok(outcome.records.into_iter().map(|r| r.sample_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::*;

    fn record(id: &str) -> AnnotationRecord {
        AnnotationRecord {
            sample_id: id.to_string(),
            freeform: FreeformAnnotation {
                current_action: "going".into(),
                future_action: "stopping".into(),
                reasoning: "red light ahead".into(),
            },
            actions: StructuredActionAnnotation {
                control_action: "go straight".into(),
                turn_action: "none".into(),
                lane_action: "none".into(),
            },
            teacher_id: "mock".into(),
            raw_p1: "1. going\n2. stopping\n3. red light ahead".into(),
            raw_p2: "1. go straight\n2. none\n3. none".into(),
            created_at: "1970-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn append_then_scan_round_trips_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let recs: Vec<_> = ["a", "b", "c"].iter().map(|id| record(id)).collect();
        store_append(&path, &recs).unwrap();
        let outcome = store_scan(&path, false).unwrap();
        assert_eq!(outcome.records, recs);
    }

    #[test]
    fn lenient_scan_reports_corrupt_middle_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        store_append(&path, &[record("a")]).unwrap();
        {
            use std::io::Write;
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            writeln!(f, "{{not json").unwrap();
        }
        store_append(&path, &[record("b")]).unwrap();
        let outcome = store_scan(&path, true).unwrap();
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.issues.len(), 1);
        assert_eq!(outcome.issues[0].line_number, 2);
        assert!(store_scan(&path, false).is_err());
    }

    #[test]
    fn schema_version_mismatch_is_a_store_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut rec = serde_json::to_value(StoredRecord::from(&record("a"))).unwrap();
        rec["schema_version"] = serde_json::json!(99);
        std::fs::write(&path, format!("{rec}\n")).unwrap();
        assert!(store_scan(&path, false).is_err());
    }

    #[test]
    fn large_synthetic_store_scan_count() {
        // size mirrors a production-scale annotation run
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let recs: Vec<_> = (0..28_032).map(|i| record(&format!("s{i:05}"))).collect();
        store_append(&path, &recs).unwrap();
        let outcome = store_scan(&path, false).unwrap();
        assert_eq!(outcome.records.len(), 28_032);
    }
}
