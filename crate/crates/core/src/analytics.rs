//! Coverage math and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::CoverageMode;
use crate::error::{Error, Result};
use crate::model::{DefectClass, MachineId, Method, SimTime};
use crate::sim::{MaintenanceStats, RunOutput, TestTotals};

/// Mean days per month used for per-month normalization.
pub const DAYS_PER_MONTH: f64 = 30.4375;

/// Fractions at which time-to-coverage over the common set is reported.
pub const COMMON_FRACTIONS: [f64; 4] = [0.5, 0.7, 0.9, 1.0];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSets {
    pub scanner: BTreeMap<MachineId, SimTime>,
    pub ripple: BTreeMap<MachineId, SimTime>,
    pub ground_truth: BTreeMap<MachineId, DefectClass>,
}

impl DetectionSets {
    pub fn from_run(out: &RunOutput) -> Self {
        DetectionSets {
            scanner: out.method_detections(Method::Scanner).clone(),
            ripple: out.method_detections(Method::Ripple).clone(),
            ground_truth: out.ground_truth.clone(),
        }
    }

    pub fn ids(&self, method: Method) -> BTreeSet<MachineId> {
        match method {
            Method::Scanner => self.scanner.keys().copied().collect(),
            Method::Ripple => self.ripple.keys().copied().collect(),
        }
    }

    pub fn times(&self, method: Method) -> &BTreeMap<MachineId, SimTime> {
        match method {
            Method::Scanner => &self.scanner,
            Method::Ripple => &self.ripple,
        }
    }

    pub fn common(&self) -> BTreeSet<MachineId> {
        self.scanner.keys().filter(|id| self.ripple.contains_key(id)).copied().collect()
    }

    pub fn union(&self) -> BTreeSet<MachineId> {
        self.scanner.keys().chain(self.ripple.keys()).copied().collect()
    }

    /// No detected machine may be defect-free.
    pub fn check_soundness(&self) -> Result<()> {
        match self.union().into_iter().find(|id| !self.ground_truth.contains_key(id)) {
            Some(id) => Err(Error::Invariant(format!("machine {id} detected but never defective"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub unique_scanner: f64,
    pub unique_ripple: f64,
    pub common: f64,
}

/// Split of `a ∪ b` into only-`a`, only-`b` and both.
pub fn partition_of<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<Partition> {
    let both = a.intersection(b).count();
    let only_a = a.len() - both;
    let only_b = b.len() - both;
    let n = only_a + only_b + both;
    if n == 0 {
        return Err(Error::EmptyUnion);
    }
    let n = n as f64;
    Ok(Partition {
        unique_scanner: only_a as f64 / n,
        unique_ripple: only_b as f64 / n,
        common: both as f64 / n,
    })
}

pub fn coverage_partition(sets: &DetectionSets) -> Result<Partition> {
    partition_of(&sets.ids(Method::Scanner), &sets.ids(Method::Ripple))
}

/// Days until `x` of `reference` was detected by the method; `None` if never.
/// Returns the detection time of the `ceil(x * |reference|)`-th reference machine.
pub fn time_to_fraction(times: &BTreeMap<MachineId, SimTime>, reference: &BTreeSet<MachineId>, x: f64) -> Option<f64> {
    assert!(x > 0.0 && x <= 1.0, "fraction must lie in (0, 1]");
    if reference.is_empty() {
        return None;
    }
    let need = ((x * reference.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut hits: Vec<SimTime> = reference.iter().filter_map(|id| times.get(id).copied()).collect();
    if hits.len() < need {
        return None;
    }
    hits.sort_unstable();
    Some(hits[need - 1].days())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerMethod<T> {
    pub scanner: T,
    pub ripple: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerMonth {
    pub months: f64,
    pub scanner_tests: f64,
    pub scanner_fleet_seconds: f64,
    pub ripple_tests: f64,
    pub ripple_fleet_seconds: f64,
    pub assumption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub total_corrupt_results: u64,
    pub defective_machines: usize,
    pub mean_per_defective: f64,
    pub max_per_machine: u64,
    pub undetected_machines: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub seed: u64,
    pub fleet_size: u64,
    pub horizon_days: f64,
    pub coverage_mode: CoverageMode,
    pub defective: usize,
    pub defective_by_class: BTreeMap<DefectClass, usize>,
    pub detected: BTreeMap<String, usize>,
    /// `None` when nothing was detected.
    pub partition: Option<Partition>,
    pub partition_status: String,
    pub recall: PerMethod<Option<f64>>,
    pub recall_union: Option<f64>,
    pub recall_by_class: BTreeMap<DefectClass, PerMethod<Option<f64>>>,
    /// Keyed by fraction, e.g. "0.70".
    pub time_to_common_days: BTreeMap<String, PerMethod<Option<f64>>>,
    /// Days for each method to reach 95% of its own detection set.
    pub time_to_own_95_days: PerMethod<Option<f64>>,
    pub totals: TestTotals,
    pub per_month: PerMonth,
    pub seconds_per_test: PerMethod<Option<f64>>,
    pub seconds_per_test_ratio: Option<f64>,
    pub performance_aware: PerMethod<bool>,
    pub first_detections: PerMethod<usize>,
    pub exposure: ExposureSummary,
    pub maintenance: MaintenanceStats,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn fraction_key(x: f64) -> String {
    format!("{x:.2}")
}

pub fn build_report(out: &RunOutput) -> Result<CoverageReport> {
    let sets = DetectionSets::from_run(out);
    sets.check_soundness()?;
    let cfg = &out.config;
    let scanner_ids = sets.ids(Method::Scanner);
    let ripple_ids = sets.ids(Method::Ripple);
    let common = sets.common();
    let union = sets.union();
    let partition = match coverage_partition(&sets) {
        Ok(p) => Some(p),
        Err(Error::EmptyUnion) => None,
        Err(e) => return Err(e),
    };
    let gt = &sets.ground_truth;

    let mut defective_by_class = BTreeMap::new();
    for c in gt.values() {
        *defective_by_class.entry(*c).or_insert(0) += 1;
    }
    let recall_by_class = DefectClass::ALL
        .iter()
        .map(|&c| {
            let members: Vec<&MachineId> = gt.iter().filter(|(_, k)| **k == c).map(|(id, _)| id).collect();
            let r = |s: &BTreeSet<MachineId>| ratio(members.iter().filter(|id| s.contains(id)).count(), members.len());
            (c, PerMethod {
                scanner: r(&scanner_ids),
                ripple: r(&ripple_ids),
            })
        })
        .collect();

    let time_to_common_days = COMMON_FRACTIONS
        .iter()
        .map(|&x| {
            (fraction_key(x), PerMethod {
                scanner: time_to_fraction(&sets.scanner, &common, x),
                ripple: time_to_fraction(&sets.ripple, &common, x),
            })
        })
        .collect();

    let totals = out.joint.totals.clone();
    let months = cfg.horizon_days / DAYS_PER_MONTH;
    let per_test = |secs: f64, n: u64| (n > 0).then(|| secs / n as f64);
    let seconds_per_test = PerMethod {
        scanner: per_test(totals.scanner_fleet_seconds, totals.scanner_tests),
        ripple: per_test(totals.ripple_fleet_seconds, totals.ripple_tests),
    };
    let seconds_per_test_ratio = match (seconds_per_test.scanner, seconds_per_test.ripple) {
        (Some(s), Some(r)) if r > 0.0 => Some(s / r),
        _ => None,
    };

    let mut first = PerMethod { scanner: 0, ripple: 0 };
    for (method, _) in out.joint.book.first.values() {
        match method {
            Method::Scanner => first.scanner += 1,
            Method::Ripple => first.ripple += 1,
        }
    }

    let ledger = &out.joint.exposure;
    let exposure = ExposureSummary {
        total_corrupt_results: ledger.total(),
        defective_machines: gt.len(),
        mean_per_defective: if gt.is_empty() { 0.0 } else { ledger.total() as f64 / gt.len() as f64 },
        max_per_machine: ledger.entries.values().map(|e| e.count).max().unwrap_or(0),
        undetected_machines: gt.keys().filter(|id| !out.joint.book.first.contains_key(id)).count(),
    };

    Ok(CoverageReport {
        seed: cfg.global_seed,
        fleet_size: cfg.fleet_size,
        horizon_days: cfg.horizon_days,
        coverage_mode: cfg.coverage_mode,
        defective: gt.len(),
        defective_by_class,
        detected: BTreeMap::from([
            ("scanner".to_string(), scanner_ids.len()),
            ("ripple".to_string(), ripple_ids.len()),
            ("common".to_string(), common.len()),
            ("union".to_string(), union.len()),
        ]),
        partition,
        partition_status: if partition.is_some() { "ok" } else { "no detections" }.to_string(),
        recall: PerMethod {
            scanner: ratio(scanner_ids.len(), gt.len()),
            ripple: ratio(ripple_ids.len(), gt.len()),
        },
        recall_union: ratio(union.len(), gt.len()),
        recall_by_class,
        time_to_common_days,
        time_to_own_95_days: PerMethod {
            scanner: time_to_fraction(&sets.scanner, &scanner_ids, 0.95),
            ripple: time_to_fraction(&sets.ripple, &ripple_ids, 0.95),
        },
        per_month: PerMonth {
            months,
            scanner_tests: totals.scanner_tests as f64 / months,
            scanner_fleet_seconds: totals.scanner_fleet_seconds / months,
            ripple_tests: totals.ripple_tests as f64 / months,
            ripple_fleet_seconds: totals.ripple_fleet_seconds / months,
            assumption: "run totals divided by simulated months (30.4375 days each); both methods are active for the whole horizon"
                .to_string(),
        },
        totals,
        seconds_per_test,
        seconds_per_test_ratio,
        performance_aware: PerMethod {
            scanner: false,
            ripple: true,
        },
        first_detections: first,
        exposure,
        maintenance: out.joint.maintenance.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            _ => Err(Error::validation("format", format!("unknown report format `{s}` (json, csv, md)"))),
        }
    }
}

/// Parse a report previously written as JSON.
pub fn report_from_json(v: &Value) -> Result<CoverageReport> {
    Ok(serde_json::from_value(v.clone())?)
}

/// Canonical JSON: keys sorted, pretty-printed, trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_count(n: f64) -> String {
    let digits = format!("{:.0}", n);
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 && c.is_ascii_digit() {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn fmt_days(d: Option<f64>) -> String {
    match d {
        Some(d) => format!("{d:.1} days"),
        None => "not reached".to_string(),
    }
}

fn fmt_pct(x: Option<f64>) -> String {
    match x {
        Some(x) => format!("{:.1} percent", 100.0 * x),
        None => "no detections".to_string(),
    }
}

pub fn markdown_table(r: &CoverageReport) -> String {
    let t = &r.totals;
    let pm = &r.per_month;
    let t70 = r.time_to_common_days.get(&fraction_key(0.7));
    let mut s = String::new();
    let _ = writeln!(s, "| Metric | Fleetscanner | Ripple |");
    let _ = writeln!(s, "|---|---|---|");
    let _ = writeln!(
        s,
        "| Total tests executed | {} (run); {} per month | {} (run); {} per month |",
        fmt_count(t.scanner_tests as f64),
        fmt_count(pm.scanner_tests),
        fmt_count(t.ripple_tests as f64),
        fmt_count(pm.ripple_tests)
    );
    let _ = writeln!(
        s,
        "| Testing time | {} fleet seconds (run); {} per month | {} fleet seconds (run); {} per month |",
        fmt_count(t.scanner_fleet_seconds),
        fmt_count(pm.scanner_fleet_seconds),
        fmt_count(t.ripple_fleet_seconds),
        fmt_count(pm.ripple_fleet_seconds)
    );
    let yes_no = |b: bool| if b { "Yes" } else { "No" };
    let _ = writeln!(
        s,
        "| Performance aware | {} | {} |",
        yes_no(r.performance_aware.scanner),
        yes_no(r.performance_aware.ripple)
    );
    let _ = writeln!(
        s,
        "| Unique SDC coverage | {} | {} |",
        fmt_pct(r.partition.map(|p| p.unique_scanner)),
        fmt_pct(r.partition.map(|p| p.unique_ripple))
    );
    let _ = writeln!(
        s,
        "| Time to equivalent SDC coverage | {} (70 percent) | {} (70 percent) |",
        fmt_days(t70.and_then(|p| p.scanner)),
        fmt_days(t70.and_then(|p| p.ripple))
    );
    s
}

pub fn emit_report(r: &CoverageReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => to_canonical_json(r),
        ReportFormat::Csv => {
            let mut rows = Vec::new();
            flatten("", &serde_json::to_value(r)?, &mut rows);
            let mut s = String::from("metric,value\n");
            for (k, v) in rows {
                let _ = writeln!(s, "{},{}", csv_field(&k), csv_field(&v));
            }
            Ok(s)
        }
        ReportFormat::Markdown => {
            let mut s = format!(
                "# Coverage report (seed {}, {} machines, {} days)\n\n",
                r.seed, r.fleet_size, r.horizon_days
            );
            s += &markdown_table(r);
            let _ = write!(
                s,
                "\nDefective machines: {}. Detected: {} by Fleetscanner, {} by Ripple, {} by both. \
                 Common share of all detected: {}.\n",
                r.defective,
                r.detected["scanner"],
                r.detected["ripple"],
                r.detected["common"],
                fmt_pct(r.partition.map(|p| p.common)),
            );
            Ok(s)
        }
    }
}

/// Mean with a normal-approximation 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci95: [f64; 2],
}

pub fn estimate(xs: &[f64]) -> Option<Estimate> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / n.sqrt();
    Some(Estimate {
        n: xs.len(),
        mean,
        sd,
        ci95: [mean - half, mean + half],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    /// Partition pooled over seeds: detected machines summed before dividing.
    pub pooled_partition: Option<Partition>,
    pub metrics: BTreeMap<&'static str, Option<Estimate>>,
    /// Share of seeds where the ripple reaches 70% of the common set first.
    pub ripple_first_to_70_share: f64,
}

pub fn summarize_sweep(reports: &[CoverageReport]) -> SweepSummary {
    let collect = |f: &dyn Fn(&CoverageReport) -> Option<f64>| -> Option<Estimate> {
        estimate(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    let t70 = |r: &CoverageReport| r.time_to_common_days.get(&fraction_key(0.7)).cloned();
    let mut metrics = BTreeMap::new();
    metrics.insert("unique_scanner", collect(&|r| r.partition.map(|p| p.unique_scanner)));
    metrics.insert("unique_ripple", collect(&|r| r.partition.map(|p| p.unique_ripple)));
    metrics.insert("common", collect(&|r| r.partition.map(|p| p.common)));
    metrics.insert("ripple_days_to_70_common", collect(&|r| t70(r).and_then(|p| p.ripple)));
    metrics.insert("scanner_days_to_70_common", collect(&|r| t70(r).and_then(|p| p.scanner)));
    metrics.insert("scanner_days_to_95_own", collect(&|r| r.time_to_own_95_days.scanner));
    metrics.insert("ripple_days_to_95_own", collect(&|r| r.time_to_own_95_days.ripple));
    metrics.insert("seconds_per_test_ratio", collect(&|r| r.seconds_per_test_ratio));
    metrics.insert("recall_union", collect(&|r| r.recall_union));
    metrics.insert("exposure_per_defective", collect(&|r| Some(r.exposure.mean_per_defective)));

    let (mut a, mut b, mut c) = (0usize, 0usize, 0usize);
    for r in reports {
        let common = r.detected["common"];
        a += r.detected["scanner"] - common;
        b += r.detected["ripple"] - common;
        c += common;
    }
    let n = (a + b + c) as f64;
    let pooled_partition = (n > 0.0).then(|| Partition {
        unique_scanner: a as f64 / n,
        unique_ripple: b as f64 / n,
        common: c as f64 / n,
    });
    let ripple_first = reports
        .iter()
        .filter(|r| match t70(r) {
            Some(PerMethod {
                ripple: Some(rp),
                scanner,
            }) => scanner.map_or(true, |s| rp < s),
            _ => false,
        })
        .count();
    SweepSummary {
        seeds: reports.iter().map(|r| r.seed).collect(),
        pooled_partition,
        metrics,
        ripple_first_to_70_share: if reports.is_empty() { 0.0 } else { ripple_first as f64 / reports.len() as f64 },
    }
}

/// Summary rows for a sweep, one line per metric.
pub fn sweep_markdown(s: &SweepSummary) -> String {
    let mut out = format!("| Metric (over {} seeds) | Mean | 95% CI |\n|---|---|---|\n", s.seeds.len());
    for (k, v) in &s.metrics {
        match v {
            Some(e) => {
                let _ = writeln!(out, "| {k} | {:.4} | [{:.4}, {:.4}] |", e.mean, e.ci95[0], e.ci95[1]);
            }
            None => {
                let _ = writeln!(out, "| {k} | n/a | n/a |");
            }
        }
    }
    out
}

pub fn sweep_json(s: &SweepSummary, reports: &[CoverageReport]) -> Result<String> {
    to_canonical_json(&json!({ "summary": s, "runs": reports }))
}
