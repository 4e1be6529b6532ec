//! Fleet-level behaviour, checked by replaying the event log or by
//! comparing against closed forms.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use sdcsim::config::{presets, AbExperimentConfig, LogLevel, PatternSpec, SimConfig};
use sdcsim::fleet::sample_fleet;
use sdcsim::model::{classify_defect, CorruptionKind, DefectClass, DefectSpec, MachineState};
use sdcsim::pattern::{
    execute_pattern, generate_pattern, manifest_probability_at, PatternFamily, ProfileMode, TestProfile,
    TrialConditions, TrialContext,
};
use sdcsim::ripple::run_shadow_experiment;
use sdcsim::sim::{generate_maintenance, run, RunOptions};
use sdcsim::par::Exec;

use common::machine;

fn mix(both: f64, scanner_only: f64, transition: f64, repetition: f64) -> BTreeMap<DefectClass, f64> {
    BTreeMap::from([
        (DefectClass::BothDetectable, both),
        (DefectClass::ScannerOnly, scanner_only),
        (DefectClass::RippleTransition, transition),
        (DefectClass::RippleRepetition, repetition),
    ])
}

fn lines(log: &[u8]) -> Vec<Value> {
    std::str::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn transitions(v: &Value) -> Vec<(String, String)> {
    v["payload"]["transitions"]
        .as_array()
        .map(|ts| {
            ts.iter()
                .map(|t| (t["from"].as_str().unwrap().to_string(), t["to"].as_str().unwrap().to_string()))
                .collect()
        })
        .unwrap_or_default()
}

#[test]
fn strong_defects_are_caught_in_their_first_window() {
    let mut cfg = SimConfig::with_fleet(400);
    cfg.defect_rate = 0.25;
    cfg.horizon_days = 180.0;
    cfg.defect_mix = mix(0.5, 0.5, 0.0, 0.0);
    for t in [&mut cfg.defect_templates.both_detectable, &mut cfg.defect_templates.scanner_only] {
        t.faulty_fraction = [0.5, 0.5];
        t.base_prob = [0.5, 0.5];
    }
    cfg.defect_templates.scanner_only.soak_min_s = Some([5.0, 5.0]);
    cfg.ripple.enabled = false;
    let drain_ms = (cfg.maintenance.drain_minutes * 60_000.0) as u64;
    let horizon = cfg.horizon_days * 86_400_000.0;

    let (mut defective, mut detected) = (0, 0);
    for seed in 1..=4 {
        cfg.global_seed = seed;
        let out = run(&cfg, RunOptions::lean()).unwrap();
        for &id in out.ground_truth.keys() {
            defective += 1;
            let found = out.joint.book.scanner.get(&id);
            detected += found.is_some() as u32;
            let Some((t, ev)) = generate_maintenance(&cfg, seed, id).next() else {
                continue;
            };
            let window_end = t.ms() + drain_ms + (ev.window_s * 1000.0).ceil() as u64 + 1;
            if (window_end as f64) < horizon {
                let at = found.unwrap_or_else(|| panic!("seed {seed} machine {id} missed in its first window"));
                assert!(at.ms() >= t.ms() && at.ms() <= window_end, "machine {id}: {} not in [{}, {window_end}]", at.ms(), t.ms());
            }
        }
    }
    // Four mean inter-arrivals of horizon: a window arrives with probability 1 - e^-4.
    assert!(detected as f64 >= 0.95 * defective as f64, "{detected}/{defective}");
}

#[test]
fn ripple_slice_volume_matches_cadence() {
    let mut cfg = SimConfig::with_fleet(100);
    cfg.defect_rate = 0.0;
    cfg.horizon_days = 30.0;
    cfg.maintenance.mean_interarrival_days = None;
    cfg.log_level = LogLevel::Full;
    let out = run(&cfg, RunOptions::default()).unwrap();

    let mut attempts: BTreeMap<u64, u64> = BTreeMap::new();
    for v in lines(&out.joint.log) {
        let kind = v["kind"].as_str().unwrap();
        if kind == "ripple_skip" || (kind == "ripple_slice" && v["payload"]["cores"].is_u64()) {
            *attempts.entry(v["machine_id"].as_u64().unwrap()).or_default() += 1;
        }
    }
    // The tax ledger must tell the same story as the log.
    for t in &out.joint.tax {
        let ledger: u64 = t.slices.iter().chain(&t.skipped).map(|&n| n as u64).sum();
        assert_eq!(ledger, attempts.get(&t.machine_id).copied().unwrap_or(0));
    }
    let expected = cfg.ripple.trials_per_day * 30.0;
    let sd = expected.sqrt();
    let within = attempts.values().filter(|&&n| (n as f64 - expected).abs() <= 3.0 * sd).count();
    assert_eq!(attempts.len(), 100);
    assert!(within >= 97, "{within}/100 machines within 3 sigma");
    let total: u64 = attempts.values().sum();
    assert!((total as f64 - 100.0 * expected).abs() <= 3.0 * (100.0 * expected).sqrt(), "{total}");
}

/// Log replay of a full run: state closure and conservation, drain before
/// every scanner test, tests inside their windows, and slices only while in
/// production.
#[test]
fn log_replay_lifecycle_invariants() {
    let mut cfg = SimConfig::with_fleet(300);
    cfg.defect_rate = 0.1;
    cfg.horizon_days = 90.0;
    cfg.log_level = LogLevel::Full;
    let out = run(&cfg, RunOptions::default()).unwrap();
    let total: u64 = out.joint.final_states.values().sum();
    assert_eq!(total, 300);

    let mut state: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let mut window: BTreeMap<u64, f64> = BTreeMap::new();
    let mut drained_at: BTreeMap<u64, u64> = BTreeMap::new();
    let mut test_start: BTreeMap<u64, u64> = BTreeMap::new();
    let mut slice_end: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut tests, mut slices) = (0, 0);

    for v in lines(&out.joint.log) {
        let Some(id) = v["machine_id"].as_u64() else { continue };
        let t = v["t_ms"].as_u64().unwrap();
        let kind = v["kind"].as_str().unwrap();
        let p = &v["payload"];
        let trs = transitions(&v);
        let history = state.entry(id).or_insert_with(|| vec!["production".into()]);
        let before = history.last().unwrap().clone();

        if !trs.is_empty() {
            if let Some(end) = slice_end.remove(&id) {
                assert!(t >= end, "machine {id} left production at {t} during a slice ending {end}");
            }
        }
        for (from, to) in &trs {
            assert_eq!(history.last().unwrap(), from, "machine {id} at {t}");
            assert!(MachineState::legal_by_name(from, to), "{from} -> {to}");
            history.push(to.clone());
            if to == "testing_scanner" {
                let n = history.len();
                assert_eq!(history[n - 4..], ["production", "draining", "maintenance", "testing_scanner"]);
            }
        }
        match kind {
            "maintenance_arrival" if p.get("skipped").is_none() && p.get("deferred_until_ms").is_none() => {
                window.insert(id, p["window_s"].as_f64().unwrap());
            }
            "drain_complete" => {
                drained_at.insert(id, t);
            }
            "scanner_test_start" => {
                tests += 1;
                assert!(t >= drained_at[&id]);
                test_start.insert(id, t);
            }
            "scanner_test_complete" => {
                let end = drained_at[&id] + (window[&id] * 1000.0).ceil() as u64;
                assert!(t >= test_start[&id] && t <= end, "machine {id}: test ends {t}, window ends {end}");
            }
            "ripple_slice" if p["cores"].is_u64() => {
                slices += 1;
                assert_eq!(before, "production", "slice on machine {id} at {t}");
                if trs.is_empty() {
                    let end = t + p["duration_ms"].as_f64().unwrap().ceil() as u64;
                    let e = slice_end.entry(id).or_insert(end);
                    *e = (*e).max(end);
                }
            }
            _ => {}
        }
    }
    assert!(tests > 100 && slices > 100_000, "{tests} tests, {slices} slices");
    let mut finals: BTreeMap<String, u64> = BTreeMap::new();
    for h in state.values() {
        *finals.entry(h.last().unwrap().clone()).or_default() += 1;
    }
    for (name, n) in &out.joint.final_states {
        assert!(finals.get(name).copied().unwrap_or(0) <= *n);
    }
}

#[test]
fn exposure_halts_at_detection_and_ripple_cuts_it() {
    let mut cfg = SimConfig::with_fleet(2000);
    cfg.defect_rate = 0.05;
    cfg.horizon_days = 90.0;
    let with = run(&cfg, RunOptions::lean()).unwrap();
    let step = cfg.workload.exposure_check_hours;
    for (id, e) in &with.joint.exposure.entries {
        if let Some(at) = e.detected_at {
            assert!(e.hours <= at.days() * 24.0 + step, "machine {id} accrued {} h past detection", e.hours);
            assert_eq!(Some(at), with.joint.book.first.get(id).map(|f| f.1));
        }
    }
    cfg.ripple.enabled = false;
    let without = run(&cfg, RunOptions::lean()).unwrap();
    assert_eq!(with.ground_truth, without.ground_truth);
    let (a, b) = (with.joint.exposure.total(), without.joint.exposure.total());
    assert!(a < b, "with ripple {a}, scanner alone {b}");
}

fn ab_cfg(variant_b_iterations: u32) -> (SimConfig, AbExperimentConfig) {
    let mut cfg = SimConfig::with_fleet(8000);
    cfg.defect_rate = 0.05;
    cfg.defect_mix = mix(0.0, 0.0, 0.0, 1.0);
    let variant = |iterations| {
        PatternFamily::ALL
            .iter()
            .map(|&family| PatternSpec { family, iterations })
            .collect::<Vec<_>>()
    };
    let ab = AbExperimentConfig {
        subset_size: 400,
        defective_only: true,
        variant_a: variant(128),
        variant_b: variant(variant_b_iterations),
        experiment_seed: 11,
        duration_days: 10.0,
    };
    (cfg, ab)
}

fn ab_rates(cfg: &SimConfig, ab: &AbExperimentConfig) -> [(usize, usize); 2] {
    let subset: Vec<_> = sample_fleet(cfg, cfg.global_seed)
        .unwrap()
        .into_iter()
        .filter(|m| m.defect.is_some())
        .take(ab.subset_size as usize)
        .collect();
    let report = run_shadow_experiment(cfg, &subset, ab, Exec::Parallel).unwrap();
    assert_eq!(report.verdict, "pass");
    let c = &report.cohorts;
    assert!(c[0].machine_ids.iter().all(|id| !c[1].machine_ids.contains(id)));
    assert_eq!(c[0].machines + c[1].machines, subset.len());
    [(c[0].detections, c[0].defective), (c[1].detections, c[1].defective)]
}

#[test]
fn identical_variants_are_indistinguishable() {
    let (cfg, ab) = ab_cfg(128);
    let [(da, na), (db, nb)] = ab_rates(&cfg, &ab);
    let (pa, pb) = (da as f64 / na as f64, db as f64 / nb as f64);
    let pooled = (da + db) as f64 / (na + nb) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    assert!(((pa - pb) / se).abs() < 3.0, "A {da}/{na}, B {db}/{nb}");
}

#[test]
fn doubled_iterations_find_more_repetition_defects() {
    let (cfg, ab) = ab_cfg(256);
    let [(da, na), (db, nb)] = ab_rates(&cfg, &ab);
    assert!(db as f64 / nb as f64 > da as f64 / na as f64, "A {da}/{na}, B {db}/{nb}");
}

#[test]
fn sampled_classes_match_post_hoc_classification_and_mix() {
    let mut cfg = SimConfig::with_fleet(10_000);
    cfg.defect_rate = 0.05;
    let fleet = sample_fleet(&cfg, 3).unwrap();
    let scanner = cfg.scanner_deep_profile().unwrap();
    let ripple = cfg.ripple_profile().unwrap();
    let mut counts: BTreeMap<DefectClass, usize> = BTreeMap::new();
    for m in &fleet {
        if let Some(spec) = &m.defect {
            let class = classify_defect(spec, &scanner, &ripple, cfg.horizon_days).unwrap();
            assert_eq!(Some(class), m.sampled_class);
            *counts.entry(class).or_default() += 1;
        }
    }
    let n: usize = counts.values().sum();
    assert!(n >= 200);
    for (class, share) in &cfg.defect_mix {
        let got = counts.get(class).copied().unwrap_or(0) as f64 / n as f64;
        assert!((got - share).abs() <= 0.05, "{class:?}: {got} vs {share}");
    }
}

#[test]
fn presets_cover_every_class() {
    let cfg = SimConfig::with_fleet(1);
    let t = &cfg.defect_templates;
    assert_eq!(t.both_detectable, presets::both_detectable());
    assert!(t.scanner_only.soak_min_s.is_some());
    assert!(t.ripple_transition.transition_window_ms.is_some());
}

fn accelerated_spec(alpha: f64, beta: f64, threshold: f64, gamma: f64) -> DefectSpec {
    DefectSpec {
        elec_alpha: alpha,
        elec_beta: beta,
        thermal_threshold_c: threshold,
        thermal_gamma: gamma,
        aging_onset_days: Some(100.0),
        aging_ramp_days: 50.0,
        ..DefectSpec::simple(0.1, 0.02, 1, CorruptionKind::BitFlip(3))
    }
}

fn cond(now_days: f64) -> TrialConditions {
    TrialConditions {
        context: TrialContext::Ripple,
        continuous_test_seconds: 0.0,
        since_transition_ms: Some(0.0),
        now_days,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn manifestation_is_monotone_in_stress(
        alpha in 0.0..2.0f64, beta in 0.0..1.0f64, threshold in 30.0..40.0f64, gamma in 0.0..0.05f64,
        dv in 0.0..0.2f64, ddv in 0.0..0.2f64,
        df in 0.0..0.5f64, ddf in 0.0..0.5f64,
        temp in 20.0..60.0f64, dtemp in 0.0..20.0f64,
        age in 0.0..300.0f64, dage in 0.0..100.0f64,
        up in any::<bool>(),
    ) {
        let spec = accelerated_spec(alpha, beta, threshold, gamma);
        let sign = if up { 1.0 } else { -1.0 };
        let at = |dv: f64, df: f64, temp: f64, age: f64| {
            let mut m = machine(0);
            m.op_point.voltage_v += sign * dv;
            m.op_point.frequency_ghz += sign * df;
            m.env.temperature_c = temp;
            m.age_days = age;
            manifest_probability_at(&spec, &m, &cond(0.0))
        };
        let base = at(dv, df, temp, age);
        prop_assert!(at(dv + ddv, df, temp, age) >= base);
        prop_assert!(at(dv, df + ddf, temp, age) >= base);
        prop_assert!(at(dv, df, temp + dtemp, age) >= base);
        prop_assert!(at(dv, df, temp, age + dage) >= base);
    }

    #[test]
    fn execution_is_reproducible(seed in any::<u64>(), family in 0usize..4, rho in 0.01..1.0f64, p in 0.001..1.0f64) {
        let family = PatternFamily::ALL[family];
        let pattern = generate_pattern(seed, family, 64, 40.0).unwrap();
        let profile = TestProfile {
            name: "r".into(),
            mode: ProfileMode::Ripple,
            test_duration_s: 0.04,
            patterns: vec![pattern.clone()],
            trials_per_day: 40.0,
        };
        let m0 = machine(1).with_defect(DefectSpec::simple(rho, p, seed ^ 5, CorruptionKind::BitFlip(7)));
        let go = || {
            let mut m = m0.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rec = execute_pattern(&mut m, &pattern, &profile, sdcsim::model::SimTime(1_000), &mut rng).unwrap();
            (rec, m.continuous_test_seconds, m.last_transition_ms)
        };
        prop_assert_eq!(go(), go());
    }
}

#[test]
fn clean_fleet_has_no_detections() {
    let mut cfg = SimConfig::with_fleet(500);
    cfg.defect_rate = 0.0;
    cfg.horizon_days = 20.0;
    let out = run(&cfg, RunOptions::lean()).unwrap();
    assert!(out.joint.book.first.is_empty());
    assert_eq!(out.joint.book.mismatches, 0);
    assert!(out.joint.totals.ripple_tests > 0);
}
