mod oracles;

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use mcbw_core::grid::{LatLon, LatLonBox, RegionSpec};
use mcbw_core::intervention::{Aggregation, InterventionScenario, PerturbMode, Perturbation};
use mcbw_core::records::{export_csv, InterventionRecord, NewRecord, RecordStore, SiteFlag, CSV_HEADER};
use mcbw_core::Error;
use proptest::prelude::*;

fn scenario(i: usize) -> InterventionScenario {
    let region = match i % 3 {
        0 => RegionSpec::named("SEP"),
        1 => RegionSpec::LatlonBox { bounds: LatLonBox::new(-10.0, 10.0, 170.0, 200.0) },
        _ => RegionSpec::Polygon {
            vertices: vec![
                LatLon { lat: 0.0, lon: 0.0 },
                LatLon { lat: 0.0, lon: 10.0 },
                LatLon { lat: 10.0, lon: 5.0 },
            ],
        },
    };
    let mut perturbations = BTreeMap::new();
    perturbations.insert("sw_cre_toa".to_string(), Perturbation { mode: PerturbMode::Add, value: -10.5 });
    if i % 2 == 1 {
        perturbations.insert("lw_cre_toa".to_string(), Perturbation { mode: PerturbMode::Scale, value: 1.25 });
    }
    InterventionScenario {
        region,
        duration_years: 1 + i as u32,
        perturbations,
        reference_time: 12 * i,
        lag_set: (i % 2 == 0).then(|| vec![1, 2, 3]),
        aggregation: Aggregation::Sum,
        climatological_baseline: i % 2 == 1,
        taper_km: None,
    }
}

fn new_record(i: usize, notes: &str) -> NewRecord {
    NewRecord {
        scenario: scenario(i),
        ood_flags: [("sw_cre_toa".to_string(), i % 2 == 0)].into_iter().collect(),
        tipping_summary: vec![
            SiteFlag { site_id: "amazon_rainforest".into(), at_risk: i % 3 == 0 },
            SiteFlag { site_id: "coral_triangle".into(), at_risk: true },
        ],
        notes: notes.into(),
    }
}

/// Expected CSV cells, built from the record fields directly.
fn expected_row(r: &InterventionRecord) -> Vec<String> {
    let region = match &r.scenario.region {
        RegionSpec::Named { name } => name.clone(),
        other => serde_json::to_string(other).unwrap(),
    };
    let perturbations: Vec<String> = r
        .scenario
        .perturbations
        .iter()
        .map(|(k, p)| format!("{k}:{}:{}", if p.mode == PerturbMode::Add { "add" } else { "scale" }, p.value))
        .collect();
    vec![
        r.record_id.to_string(),
        r.created_at.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        region,
        r.scenario.duration_years.to_string(),
        perturbations.join(";"),
        r.scenario.lag_set.as_ref().map(|l| l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")).unwrap_or_default(),
        r.ood_flags.values().any(|v| *v).to_string(),
        r.tipping_summary.iter().filter(|s| s.at_risk).map(|s| s.site_id.clone()).collect::<Vec<_>>().join(";"),
        r.notes.clone(),
    ]
}

#[test]
fn append_then_list_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path()).unwrap();
    let t = Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap();
    let r = store.append_at(new_record(0, "first"), t).unwrap();
    assert_eq!(store.list(), &[r.clone()]);
    assert_eq!(r.record_id, 1);
    assert_eq!(r.created_at, t);
    assert_eq!(r.scenario, scenario(0));
    assert_eq!(r.notes, "first");
}

#[test]
fn delete_keeps_order_and_ids_stay_monotonic_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path()).unwrap();
    for i in 0..3 {
        store.append(new_record(i, &format!("n{i}"))).unwrap();
    }
    store.delete(2).unwrap();
    assert_eq!(store.list().iter().map(|r| r.record_id).collect::<Vec<_>>(), vec![1, 3]);
    assert!(matches!(store.delete(2), Err(Error::NotFound(_))));
    store.delete(3).unwrap();
    drop(store);
    let mut store = RecordStore::open(dir.path()).unwrap();
    assert_eq!(store.append(new_record(4, "")).unwrap().record_id, 4);
}

#[test]
fn reload_from_disk_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path()).unwrap();
    for i in 0..5 {
        store.append(new_record(i, "multi\nline, \"quoted\" — ünïcödé ☁")).unwrap();
    }
    store.delete(3).unwrap();
    let reloaded = RecordStore::open(dir.path()).unwrap();
    assert_eq!(reloaded.list(), store.list());
    // the file is line-per-record JSON plus a header
    let text = std::fs::read_to_string(store.path()).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn invalid_scenario_is_not_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path()).unwrap();
    let mut bad = new_record(0, "");
    bad.scenario.perturbations.clear();
    assert!(store.append(bad).is_err());
    assert!(RecordStore::open(dir.path()).unwrap().list().is_empty());
}

#[test]
fn corrupt_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path()).unwrap();
    store.append(new_record(0, "")).unwrap();
    let mut text = std::fs::read_to_string(store.path()).unwrap();
    text.push_str("{\"record_id\": 9, \"trunc");
    std::fs::write(store.path(), text).unwrap();
    assert!(matches!(RecordStore::open(dir.path()), Err(Error::CorruptFile(_))));
}

#[test]
fn csv_round_trips_through_an_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path()).unwrap();
    let notes = ["plain", "cooling, \"strong\"", "line one\nline two\r\nline three", "ünïcödé — 雲 ☁", "", "\"", ","];
    for (i, n) in notes.iter().enumerate() {
        store.append(new_record(i, n)).unwrap();
    }
    let text = String::from_utf8(export_csv(store.list()).unwrap()).unwrap();
    let rows = oracles::parse_csv(&text);
    assert_eq!(rows[0], CSV_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    assert_eq!(rows.len(), 1 + notes.len());
    for (row, rec) in rows[1..].iter().zip(store.list()) {
        assert_eq!(row, &expected_row(rec));
    }
}

#[test]
fn empty_store_exports_header_line_only() {
    let text = String::from_utf8(export_csv(&[]).unwrap()).unwrap();
    assert_eq!(text, "record_id,created_at,region,duration_years,perturbations,lag_set,ood_any,sites_at_risk,notes\r\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn printable_notes_round_trip(notes in "[\\PC\n\",]{0,40}") {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        store.append(new_record(1, &notes)).unwrap();
        let rows = oracles::parse_csv(&String::from_utf8(export_csv(store.list()).unwrap()).unwrap());
        prop_assert_eq!(rows.len(), 2);
        prop_assert_eq!(&rows[1][8], &notes);
        let reloaded = RecordStore::open(dir.path()).unwrap();
        prop_assert_eq!(reloaded.list(), store.list());
    }
}
