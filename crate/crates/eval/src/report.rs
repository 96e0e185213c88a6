//! Result files: one JSON trace per line, and an accuracy table keyed by
//! (method, bucket).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::cohort::Bucket;
use crate::proxy::{Method, ProxyTrace};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub method: Method,
    /// Bucket label such as `[10, 20)`; `all` for traces without a bucket.
    pub bucket: String,
    pub users: usize,
    pub trials: usize,
    pub correct: usize,
    pub flagged: usize,
    pub accuracy: f64,
}

/// Pools trials per (method, bucket).
pub fn accuracy_table(traces: &[ProxyTrace]) -> Vec<AccuracyRow> {
    let mut groups: BTreeMap<(Method, Option<Bucket>), Vec<&ProxyTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry((t.method, t.bucket)).or_default().push(t);
    }
    groups
        .into_iter()
        .map(|((method, bucket), group)| {
            let trials: usize = group.iter().map(|t| t.steps.len()).sum();
            let correct: usize = group.iter().map(|t| t.correct()).sum();
            let flagged = group.iter().flat_map(|t| &t.steps).filter(|s| s.flag.is_some()).count();
            AccuracyRow {
                method,
                bucket: bucket.map_or_else(|| "all".to_string(), |b| b.to_string()),
                users: group.len(),
                trials,
                correct,
                flagged,
                accuracy: if trials == 0 { 0.0 } else { correct as f64 / trials as f64 },
            }
        })
        .collect()
}

pub fn write_traces<W: Write>(mut out: W, traces: &[ProxyTrace]) -> Result<(), ReportError> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_table<W: Write>(out: W, rows: &[AccuracyRow]) -> Result<(), ReportError> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes `path` (JSON lines) and a sibling `.csv` accuracy table; returns the
/// table.
pub fn write_results(path: &Path, traces: &[ProxyTrace]) -> Result<Vec<AccuracyRow>, ReportError> {
    let rows = accuracy_table(traces);
    write_traces(std::io::BufWriter::new(std::fs::File::create(path)?), traces)?;
    write_table(std::fs::File::create(path.with_extension("csv"))?, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::ProxyStep;
    use crate::trial::TrialSlate;
    use veil_core::profile::Item;

    fn trace(user: &str, method: Method, bucket: Option<Bucket>, correct: &[bool]) -> ProxyTrace {
        let steps = correct
            .iter()
            .map(|&c| ProxyStep {
                slate: TrialSlate {
                    impression_id: "I".into(),
                    candidates: vec![Item::new("a", "a"), Item::new("b", "b")],
                    pos_index: 0,
                },
                predicted_index: Some(if c { 0 } else { 1 }),
                correct: c,
                flag: None,
                profile_version: 0,
                updated_version: 1,
            })
            .collect();
        let mut t = ProxyTrace {
            user_id: user.into(),
            method,
            k: 2,
            bucket,
            steps,
            skipped_impressions: vec![],
            update_failures: vec![],
            accuracy: 0.0,
        };
        t.accuracy = t.recomputed_accuracy();
        t
    }

    #[test]
    fn table_pools_trials_per_group() {
        let traces = vec![
            trace("U1", Method::Full, Some(Bucket(1)), &[true, true, false]),
            trace("U2", Method::Full, Some(Bucket(1)), &[true]),
            trace("U1", Method::A, Some(Bucket(1)), &[false, false, false, true]),
            trace("U3", Method::A, None, &[]),
        ];
        let rows = accuracy_table(&traces);
        assert_eq!(rows.len(), 3);
        assert_eq!(
            (rows[0].method, rows[0].bucket.as_str(), rows[0].trials, rows[0].accuracy),
            (Method::Full, "[10, 20)", 4, 0.75)
        );
        assert_eq!(rows[1].bucket, "all");
        assert_eq!(rows[2].accuracy, 0.25);

        let mut csv_out = Vec::new();
        write_table(&mut csv_out, &rows).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(
            text.starts_with("method,bucket,users,trials,correct,flagged,accuracy\nfull,\"[10, 20)\",2,4,3,0,0.75\n"),
            "{text}"
        );
    }

    #[test]
    fn traces_round_trip_as_json_lines() {
        let traces = vec![trace("U1", Method::C, Some(Bucket(10)), &[true, false])];
        let mut out = Vec::new();
        write_traces(&mut out, &traces).unwrap();
        let line = String::from_utf8(out).unwrap();
        assert_eq!(line.lines().count(), 1);
        let back: ProxyTrace = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, traces[0]);
    }
}
