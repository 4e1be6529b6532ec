//! Report construction and serialization over real runs.

use std::collections::BTreeSet;

use proptest::prelude::*;

use sdcsim::analytics::{
    build_report, emit_report, markdown_table, partition_of, report_from_json, DetectionSets, ReportFormat,
};
use sdcsim::config::SimConfig;
use sdcsim::model::DefectClass;
use sdcsim::sim::{run, RunOptions};

const ROWS: [&str; 5] = [
    "Total tests executed",
    "Testing time",
    "Performance aware",
    "Unique SDC coverage",
    "Time to equivalent SDC coverage",
];

fn small(defect_rate: f64) -> SimConfig {
    let mut cfg = SimConfig::with_fleet(400);
    cfg.defect_rate = defect_rate;
    cfg.horizon_days = 30.0;
    cfg.defect_mix.insert(DefectClass::BothDetectable, 0.735);
    cfg.defect_mix.insert(DefectClass::RippleRepetition, 0.0);
    cfg
}

#[test]
fn markdown_has_the_five_rows_in_order() {
    let out = run(&small(0.05), RunOptions::lean()).unwrap();
    let table = markdown_table(&build_report(&out).unwrap());
    let labels: Vec<&str> = table
        .lines()
        .skip(2)
        .map(|l| l.trim_start_matches('|').split('|').next().unwrap().trim())
        .collect();
    assert_eq!(labels, ROWS);
    assert!(table.contains("| Performance aware | No | Yes |"));
}

#[test]
fn reports_are_deterministic_and_round_trip() {
    let cfg = small(0.05);
    let a = build_report(&run(&cfg, RunOptions::lean()).unwrap()).unwrap();
    let b = build_report(&run(&cfg, RunOptions::lean()).unwrap()).unwrap();
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        assert_eq!(emit_report(&a, f).unwrap(), emit_report(&b, f).unwrap());
        assert_eq!(emit_report(&a, f).unwrap(), emit_report(&a, f).unwrap());
    }
    let json = emit_report(&a, ReportFormat::Json).unwrap();
    let back = report_from_json(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(emit_report(&back, ReportFormat::Json).unwrap(), json);
}

#[test]
fn csv_has_one_row_per_metric() {
    let out = run(&small(0.05), RunOptions::lean()).unwrap();
    let csv = emit_report(&build_report(&out).unwrap(), ReportFormat::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    let mut seen = BTreeSet::new();
    for line in lines {
        let (metric, _) = line.split_once(',').unwrap();
        assert!(seen.insert(metric.to_string()), "duplicate {metric}");
    }
    for key in ["partition.common", "totals.scanner_tests", "totals.ripple_fleet_seconds", "time_to_common_days.0.70.ripple"] {
        assert!(seen.contains(key), "{key}");
    }
}

#[test]
fn clean_fleet_reports_no_detections() {
    let out = run(&small(0.0), RunOptions::lean()).unwrap();
    let r = build_report(&out).unwrap();
    assert_eq!(r.partition, None);
    assert_eq!(r.partition_status, "no detections");
    assert!(r.detected.values().all(|&n| n == 0));
    assert_eq!(r.defective, 0);
    let md = emit_report(&r, ReportFormat::Markdown).unwrap();
    assert!(md.contains("| Unique SDC coverage | no detections | no detections |"));
    assert!(emit_report(&r, ReportFormat::Csv).unwrap().contains("partition,\n"));

    let mut silent = small(0.0);
    silent.ripple.enabled = false;
    silent.maintenance.mean_interarrival_days = None;
    let r = build_report(&run(&silent, RunOptions::lean()).unwrap()).unwrap();
    assert_eq!(r.totals.scanner_tests + r.totals.ripple_tests + r.totals.confirm_tests, 0);
    assert_eq!(r.totals.scanner_fleet_seconds + r.totals.ripple_fleet_seconds, 0.0);
}

#[test]
fn detections_are_sound_against_ground_truth() {
    let out = run(&small(0.1), RunOptions::lean()).unwrap();
    let sets = DetectionSets::from_run(&out);
    sets.check_soundness().unwrap();
    let r = build_report(&out).unwrap();
    assert!(r.detected["union"] <= r.defective);
    let p = r.partition.unwrap();
    assert!((p.unique_scanner + p.unique_ripple + p.common - 1.0).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn partition_matches_counting(a in prop::collection::btree_set(0u16..200, 0..60), b in prop::collection::btree_set(0u16..200, 0..60)) {
        let u = a.union(&b).count();
        prop_assume!(u > 0);
        let p = partition_of(&a, &b).unwrap();
        let only_a = a.iter().filter(|x| !b.contains(x)).count();
        let only_b = b.iter().filter(|x| !a.contains(x)).count();
        prop_assert_eq!(p.unique_scanner, only_a as f64 / u as f64);
        prop_assert_eq!(p.unique_ripple, only_b as f64 / u as f64);
        prop_assert_eq!(p.common, (u - only_a - only_b) as f64 / u as f64);
    }
}
