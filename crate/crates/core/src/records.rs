//! Saved intervention settings with their outcomes and notes.
//!
//! `records.jsonl` holds a header object (`schema_version`, `next_id`) on its
//! first line and one record per following line. Every mutation rewrites the
//! file through a temporary sibling and an atomic rename, so a reader sees
//! either the old or the new file, never a partial one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RegionSpec;
use crate::intervention::{InterventionScenario, PerturbMode};

pub const RECORDS_FILE: &str = "records.jsonl";
const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 9] = [
    "record_id",
    "created_at",
    "region",
    "duration_years",
    "perturbations",
    "lag_set",
    "ood_any",
    "sites_at_risk",
    "notes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteFlag {
    pub site_id: String,
    pub at_risk: bool,
}

/// A record as submitted, before the store assigns an id and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewRecord {
    pub scenario: InterventionScenario,
    /// Input channel id → out-of-distribution flag.
    #[serde(default)]
    pub ood_flags: BTreeMap<String, bool>,
    #[serde(default)]
    pub tipping_summary: Vec<SiteFlag>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRecord {
    pub record_id: u64,
    pub created_at: DateTime<Utc>,
    pub scenario: InterventionScenario,
    pub ood_flags: BTreeMap<String, bool>,
    pub tipping_summary: Vec<SiteFlag>,
    pub notes: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    next_id: u64,
}

/// Single-writer record store backed by one JSON-lines file.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    records: Vec<InterventionRecord>,
    next_id: u64,
}

impl RecordStore {
    /// Opens `dir/records.jsonl`, creating an empty store if it is absent.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join(RECORDS_FILE);
        // an interrupted rewrite leaves only the temporary file behind
        let _ = fs::remove_file(tmp_path(&path));
        if !path.exists() {
            return Ok(Self { path, records: Vec::new(), next_id: 1 });
        }
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let corrupt = |i: usize, e: serde_json::Error| Error::CorruptFile(format!("{}:{}: {e}", path.display(), i + 1));
        let (i, first) = lines.next().ok_or_else(|| Error::CorruptFile(format!("{} has no header", path.display())))?;
        let header: Header = serde_json::from_str(first).map_err(|e| corrupt(i, e))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("records schema version {}", header.schema_version)));
        }
        let records = lines
            .map(|(i, l)| serde_json::from_str::<InterventionRecord>(l).map_err(|e| corrupt(i, e)))
            .collect::<Result<Vec<_>>>()?;
        if records.windows(2).any(|w| w[0].record_id >= w[1].record_id)
            || records.last().is_some_and(|r| r.record_id >= header.next_id)
        {
            return Err(Error::CorruptFile(format!("{}: record ids are not increasing", path.display())));
        }
        Ok(Self { path, records, next_id: header.next_id })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Records in insertion order.
    pub fn list(&self) -> &[InterventionRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&InterventionRecord> {
        self.records.iter().find(|r| r.record_id == id)
    }

    pub fn append(&mut self, new: NewRecord) -> Result<InterventionRecord> {
        self.append_at(new, Utc::now())
    }

    /// Appends with an explicit timestamp (truncated to milliseconds).
    pub fn append_at(&mut self, new: NewRecord, created_at: DateTime<Utc>) -> Result<InterventionRecord> {
        new.scenario.validate()?;
        let record = InterventionRecord {
            record_id: self.next_id,
            created_at: created_at.trunc_subsecs(3),
            scenario: new.scenario,
            ood_flags: new.ood_flags,
            tipping_summary: new.tipping_summary,
            notes: new.notes,
        };
        let mut records = self.records.clone();
        records.push(record.clone());
        self.persist(&records, self.next_id + 1)?;
        self.records = records;
        self.next_id += 1;
        Ok(record)
    }

    pub fn delete(&mut self, id: u64) -> Result<InterventionRecord> {
        let pos = self
            .records
            .iter()
            .position(|r| r.record_id == id)
            .ok_or_else(|| Error::NotFound(format!("record {id}")))?;
        let mut records = self.records.clone();
        let removed = records.remove(pos);
        self.persist(&records, self.next_id)?;
        self.records = records;
        Ok(removed)
    }

    fn persist(&self, records: &[InterventionRecord], next_id: u64) -> Result<()> {
        let mut buf = serde_json::to_vec(&Header { schema_version: SCHEMA_VERSION, next_id })?;
        buf.push(b'\n');
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let tmp = tmp_path(&self.path);
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().expect("file path").to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Region cell: the name for catalog regions, compact JSON otherwise.
pub fn region_cell(region: &RegionSpec) -> String {
    match region {
        RegionSpec::Named { name } => name.clone(),
        other => serde_json::to_string(other).expect("region serializes"),
    }
}

/// `channel:mode:value` entries joined by `;`, in channel-id order.
pub fn perturbations_cell(s: &InterventionScenario) -> String {
    s.perturbations
        .iter()
        .map(|(id, p)| {
            let mode = match p.mode {
                PerturbMode::Add => "add",
                PerturbMode::Scale => "scale",
            };
            format!("{id}:{mode}:{}", p.value)
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// One CSV row per record in RFC 4180 form (CRLF line ends, quoting only
/// where needed); an empty slice yields just the header.
pub fn export_csv(records: &[InterventionRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(to_err)?;
    for r in records {
        let lags = r
            .scenario
            .lag_set
            .as_ref()
            .map(|l| l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        let at_risk: Vec<&str> =
            r.tipping_summary.iter().filter(|s| s.at_risk).map(|s| s.site_id.as_str()).collect();
        w.write_record([
            r.record_id.to_string(),
            r.created_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            region_cell(&r.scenario.region),
            r.scenario.duration_years.to_string(),
            perturbations_cell(&r.scenario),
            lags,
            r.ood_flags.values().any(|&f| f).to_string(),
            at_risk.join(";"),
            r.notes.clone(),
        ])
        .map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
