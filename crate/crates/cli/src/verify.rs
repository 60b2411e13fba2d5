use crate::run::{rank_dir, RunMeta, DROPS_FILE, RUN_META_FILE};
use crate::CliError;
use ringscope::config::RunConfig;
use ringscope::exporter::{read_ndjson_dataset, CaptureRecord, MemorySink, RankCoords, RecordKey};
use ringscope::sim::{run_multirank, DropEntry, Mode};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    /// Records the oracle expects (after drop filtering).
    pub expected: usize,
    /// Records found in the dataset.
    pub found: usize,
    /// Mismatching keys per hook name: missing, extra or differing.
    pub diffs: BTreeMap<String, usize>,
    pub checksum_failures: usize,
    /// Request-steps excluded from the oracle by the drop log.
    pub dropped: usize,
}

impl VerifyReport {
    pub fn total_diffs(&self) -> usize {
        self.diffs.values().sum()
    }

    pub fn identical(&self) -> bool {
        self.total_diffs() == 0 && self.checksum_failures == 0
    }
}

type Key = (RecordKey, (u32, u32));

fn key(r: &CaptureRecord) -> Key {
    (r.key(), r.token_range)
}

fn group(records: Vec<CaptureRecord>) -> BTreeMap<Key, Vec<CaptureRecord>> {
    let mut out: BTreeMap<Key, Vec<CaptureRecord>> = BTreeMap::new();
    for r in records {
        out.entry(key(&r)).or_default().push(r);
    }
    out
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::io(path.display().to_string(), e.into())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path.display().to_string(), e)),
    }
}

/// Compare the dataset in `dataset` against a synchronous re-run of `config`.
/// The seed comes from `seed`, else the dataset's run metadata, else the
/// config. Requests in the dataset's drop log are removed from the oracle.
pub fn cmd_verify(config: &Path, dataset: &Path, seed: Option<u64>) -> Result<VerifyReport, CliError> {
    let mut cfg = RunConfig::load(config)?;
    let meta: Option<RunMeta> = read_json(&dataset.join(RUN_META_FILE))?;
    if let Some(s) = seed.or(meta.as_ref().map(|m| m.seed)) {
        cfg.seed = s;
    }
    let drops: Vec<DropEntry> = read_json(&dataset.join(DROPS_FILE))?.unwrap_or_default();
    let dropped: BTreeSet<(u32, RankCoords, u64)> = drops
        .iter()
        .flat_map(|d| d.requests.iter().map(move |&r| (d.step, d.rank, r)))
        .collect();

    let sim = cfg.sim_config(None)?;
    let oracle = Arc::new(Mutex::new(MemorySink::default()));
    run_multirank(&sim, Mode::Synchronous, |_| Box::new(oracle.clone()))?;
    let expected: Vec<CaptureRecord> = std::mem::take(&mut oracle.lock().unwrap().records)
        .into_iter()
        .filter(|r| !dropped.contains(&(r.step, r.rank, r.request_id)))
        .collect();

    let mut report = VerifyReport {
        expected: expected.len(),
        dropped: dropped.len(),
        ..Default::default()
    };
    let mut found = Vec::new();
    for rank in sim.topology.ranks() {
        let dir = dataset.join(rank_dir(rank));
        if !dir.exists() {
            continue;
        }
        let data = read_ndjson_dataset(&dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
        report.checksum_failures += data.checksum_failures;
        found.extend(data.records);
    }
    report.found = found.len();

    let mut want = group(expected);
    let have = group(found);
    for (k, mut got) in have {
        let mut exp = want.remove(&k).unwrap_or_default();
        got.sort_by(|a, b| a.payload.cmp(&b.payload));
        exp.sort_by(|a, b| a.payload.cmp(&b.payload));
        let same = got.iter().zip(&exp).filter(|(a, b)| a == b).count();
        let bad = got.len().max(exp.len()) - same;
        if bad > 0 {
            *report.diffs.entry(k.0.hook.clone()).or_default() += bad;
        }
    }
    for (k, exp) in want {
        *report.diffs.entry(k.0.hook.clone()).or_default() += exp.len();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_needs_no_diffs_and_no_checksum_failures() {
        let mut r = VerifyReport::default();
        assert!(r.identical());
        r.checksum_failures = 1;
        assert!(!r.identical());
        r.checksum_failures = 0;
        r.diffs.insert("a".into(), 2);
        r.diffs.insert("b".into(), 1);
        assert_eq!(r.total_diffs(), 3);
        assert!(!r.identical());
    }

    #[test]
    fn missing_metadata_reads_as_absent() {
        let dir = tempfile::tempdir().unwrap();
        let got: Option<RunMeta> = read_json(&dir.path().join(RUN_META_FILE)).unwrap();
        assert!(got.is_none());
        fs::write(dir.path().join("bad.json"), "{").unwrap();
        assert!(read_json::<RunMeta>(&dir.path().join("bad.json")).is_err());
    }
}
