//! Out-of-production orchestrator. Piggybacks test sessions on maintenance
//! windows, routes failures to quarantine, confirms and repairs.

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{RepairKind, RepairRule, SimConfig, SnapshotField};
use crate::error::{Error, Result};
use crate::hash::keyed_hash;
use crate::model::{Machine, MachineState, Method, SimTime, MS_PER_HOUR};
use crate::pattern::{execute_pattern, TestExecutionRecord, TestProfile};
use crate::sim::{Ctx, EventKind, MaintenanceEvent};

#[derive(Clone, Debug)]
pub struct ScannerPolicy {
    /// `(min_window_s, profile)`, ascending.
    pub profile_by_window: Vec<(f64, TestProfile)>,
    /// Profile used for quarantine confirmation runs.
    pub confirm_profile: TestProfile,
    pub snapshot_fields: Vec<SnapshotField>,
    pub confirm_repro_runs: u32,
    pub repair_rule: RepairRule,
    pub drain_ms: u64,
    pub undrain_ms: u64,
    pub confirm_delay_ms: u64,
    pub soft_repair_ms: u64,
    pub swap_repair_ms: u64,
}

impl ScannerPolicy {
    pub fn from_config(cfg: &SimConfig) -> Result<Self> {
        let minutes = |m: f64| (m * 60_000.0).round() as u64;
        let hours = |h: f64| (h * MS_PER_HOUR as f64).round() as u64;
        let s = &cfg.scanner;
        Ok(ScannerPolicy {
            profile_by_window: cfg.scanner_profiles()?,
            confirm_profile: cfg.scanner_deep_profile()?,
            snapshot_fields: s.snapshot_fields.clone(),
            confirm_repro_runs: s.confirm_repro_runs,
            repair_rule: s.repair_rule.clone(),
            drain_ms: minutes(cfg.maintenance.drain_minutes),
            undrain_ms: minutes(cfg.maintenance.undrain_minutes),
            confirm_delay_ms: hours(s.confirm_delay_hours),
            soft_repair_ms: hours(s.soft_repair_hours),
            swap_repair_ms: hours(s.swap_repair_hours),
        })
    }
}

/// The profile with the largest minimum window not exceeding `window_s`.
/// The lowest tier is the fallback.
pub fn select_profile(policy: &ScannerPolicy, window_s: f64) -> &TestProfile {
    let tiers = &policy.profile_by_window;
    tiers
        .iter()
        .rev()
        .find(|(min, _)| *min <= window_s)
        .or(tiers.first())
        .map(|(_, p)| p)
        .expect("policy has at least one tier")
}

/// Outcome of one scanner session: the profile's patterns back to back,
/// stopping at the first mismatch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionResult {
    pub profile: String,
    pub executions: u32,
    pub seconds: f64,
    pub elapsed_ms: u64,
    pub mismatch: Option<TestExecutionRecord>,
}

pub fn run_session<R: Rng + ?Sized>(
    machine: &mut Machine,
    profile: &TestProfile,
    start: SimTime,
    rng: &mut R,
) -> Result<SessionResult> {
    let session_seed: u64 = rng.gen();
    let mut out = SessionResult {
        profile: profile.name.clone(),
        executions: 0,
        seconds: 0.0,
        elapsed_ms: 0,
        mismatch: None,
    };
    let mut offset_ms = 0.0f64;
    for (i, pattern) in profile.patterns.iter().enumerate() {
        let pattern = pattern.reseeded(keyed_hash(session_seed, &[i as u64]));
        let at = start.plus_ms(offset_ms.round() as u64);
        let rec = execute_pattern(machine, &pattern, profile, at, rng)?;
        out.executions += 1;
        out.seconds += rec.duration_ms / 1000.0;
        offset_ms += rec.duration_ms;
        if rec.outcome.is_mismatch() {
            out.mismatch = Some(rec);
            break;
        }
    }
    out.elapsed_ms = offset_ms.round() as u64;
    Ok(out)
}

/// A maintenance arrival. Starts the drain, or logs a skip if the machine is
/// not serving.
pub fn on_maintenance_window(ctx: &mut Ctx, machine: &mut Machine, event: &MaintenanceEvent, policy: &ScannerPolicy) -> Result<bool> {
    ctx.note("window_s", json!(event.window_s));
    ctx.note("maintenance_kind", json!(event.kind));
    if machine.state != MachineState::Production {
        ctx.note("skipped", json!(machine.state.name()));
        return Ok(false);
    }
    if !(event.window_s > 0.0) {
        return Err(Error::Invariant(format!("maintenance window {} s", event.window_s)));
    }
    ctx.set_state(machine, MachineState::Draining)?;
    let at = ctx.now.plus_ms(policy.drain_ms);
    ctx.schedule(at, EventKind::DrainComplete(event.clone()), machine.id);
    Ok(true)
}

/// Drained: maintenance work runs first, the test occupies the end of the window.
pub fn on_drain_complete(ctx: &mut Ctx, machine: &mut Machine, event: &MaintenanceEvent, policy: &ScannerPolicy) -> Result<()> {
    ctx.set_state(machine, MachineState::Maintenance(event.kind))?;
    let profile = select_profile(policy, event.window_s);
    let lead_s = (event.window_s - profile.test_duration_s).max(0.0);
    ctx.note("profile", json!(profile.name));
    let at = ctx.now.plus_secs(lead_s);
    ctx.schedule(at, EventKind::MaintenanceWorkDone(event.clone()), machine.id);
    Ok(())
}

fn snapshot(machine: &Machine, fields: &[SnapshotField], now: SimTime) -> Value {
    let mut m = Map::new();
    for f in fields {
        let (k, v) = match f {
            SnapshotField::OpPoint => ("op_point", json!(machine.op_point)),
            SnapshotField::Temperature => ("temperature_c", json!(machine.env.temperature_c)),
            SnapshotField::Humidity => ("humidity_pct", json!(machine.env.humidity_pct)),
            SnapshotField::Hotspot => ("hotspot_factor", json!(machine.env.hotspot_factor)),
            SnapshotField::Age => ("age_days", json!(machine.age_at(now))),
        };
        m.insert(k.to_string(), v);
    }
    Value::Object(m)
}

pub fn on_test_start<R: Rng + ?Sized>(
    ctx: &mut Ctx,
    machine: &mut Machine,
    event: &MaintenanceEvent,
    policy: &ScannerPolicy,
    rng: &mut R,
) -> Result<()> {
    ctx.set_state(machine, MachineState::TestingScanner)?;
    ctx.note("snapshot", snapshot(machine, &policy.snapshot_fields, ctx.now));
    machine.continuous_test_seconds = 0.0;
    let profile = select_profile(policy, event.window_s);
    let result = run_session(machine, profile, ctx.now, rng)?;
    ctx.totals.scanner_sessions += 1;
    ctx.totals.scanner_tests += result.executions as u64;
    ctx.totals.scanner_fleet_seconds += result.seconds;
    let at = ctx.now.plus_ms(result.elapsed_ms);
    ctx.schedule(at, EventKind::ScannerTestComplete(Box::new(result)), machine.id);
    Ok(())
}

pub fn on_test_complete(ctx: &mut Ctx, machine: &mut Machine, result: &SessionResult, policy: &ScannerPolicy) -> Result<()> {
    ctx.note("profile", json!(result.profile));
    ctx.note("executions", json!(result.executions));
    match &result.mismatch {
        Some(rec) => {
            ctx.note("result", json!("mismatch"));
            handle_failure(ctx, machine, rec, Method::Scanner, policy)?;
        }
        None => {
            ctx.note("result", json!("pass"));
            ctx.set_state(machine, MachineState::Undraining)?;
            let at = ctx.now.plus_ms(policy.undrain_ms);
            ctx.schedule(at, EventKind::UndrainComplete, machine.id);
        }
    }
    Ok(())
}

/// Route a mismatch to quarantine. The detection is booked once per method
/// and once overall (first wins); a machine already in quarantine is left alone.
pub fn handle_failure(
    ctx: &mut Ctx,
    machine: &mut Machine,
    record: &TestExecutionRecord,
    method: Method,
    policy: &ScannerPolicy,
) -> Result<bool> {
    if !record.outcome.is_mismatch() {
        return Err(Error::Invariant(format!("handle_failure on a passing record for machine {}", machine.id)));
    }
    if machine.defect.is_none() {
        return Err(Error::Invariant(format!("mismatch on defect-free machine {}", machine.id)));
    }
    ctx.note("mismatch", json!(record));
    let first = ctx.record_detection(machine.id, method);
    if machine.state == MachineState::Quarantine {
        return Ok(false);
    }
    ctx.set_state(machine, MachineState::Quarantine)?;
    ctx.emit(
        "quarantine_enter",
        Some(machine.id),
        json!({ "method": method, "first_detection": first }),
    );
    let at = ctx.now.plus_ms(policy.confirm_delay_ms);
    ctx.schedule(at, EventKind::QuarantineConfirmDue, machine.id);
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfirmOutcome {
    pub runs: u32,
    pub reproductions: u32,
    pub repair: RepairKind,
}

/// Re-test in quarantine, pick the repair, send the machine to repair.
pub fn quarantine_confirm_and_repair<R: Rng + ?Sized>(
    ctx: &mut Ctx,
    machine: &mut Machine,
    policy: &ScannerPolicy,
    rng: &mut R,
) -> Result<ConfirmOutcome> {
    if machine.state != MachineState::Quarantine {
        return Err(Error::Invariant(format!("confirmation on machine {} in {}", machine.id, machine.state)));
    }
    let mut reproductions = 0;
    let mut t = ctx.now;
    for _ in 0..policy.confirm_repro_runs {
        let r = run_session(machine, &policy.confirm_profile, t, rng)?;
        ctx.totals.confirm_tests += r.executions as u64;
        ctx.totals.confirm_fleet_seconds += r.seconds;
        t = t.plus_ms(r.elapsed_ms);
        if r.mismatch.is_some() {
            reproductions += 1;
        }
    }
    let repair = if reproductions > 0 {
        policy.repair_rule.on_repro
    } else {
        policy.repair_rule.on_no_repro
    };
    let outcome = ConfirmOutcome {
        runs: policy.confirm_repro_runs,
        reproductions,
        repair,
    };
    ctx.note("confirm", json!(outcome));
    ctx.note("repro", json!(if reproductions > 0 { "repro" } else { "non-repro" }));
    let repair_ms = match repair {
        RepairKind::ComponentSwap => {
            machine.defect = None;
            policy.swap_repair_ms
        }
        RepairKind::SoftRepair => policy.soft_repair_ms,
    };
    ctx.set_state(machine, MachineState::Repair)?;
    let at = t.plus_ms(repair_ms);
    ctx.schedule(at, EventKind::RepairComplete, machine.id);
    Ok(outcome)
}

pub fn on_repair_complete(ctx: &mut Ctx, machine: &mut Machine, policy: &ScannerPolicy) -> Result<()> {
    ctx.set_state(machine, MachineState::Undraining)?;
    let at = ctx.now.plus_ms(policy.undrain_ms);
    ctx.schedule(at, EventKind::UndrainComplete, machine.id);
    Ok(())
}

pub fn on_undrain_complete(ctx: &mut Ctx, machine: &mut Machine) -> Result<()> {
    ctx.set_state(machine, MachineState::Production)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CorruptionKind, DefectSpec, MaintenanceKind, OperatingPoint};
    use crate::pattern::Outcome;
    use crate::rng::{stream, Purpose};

    fn setup() -> (SimConfig, ScannerPolicy) {
        let cfg = SimConfig::with_fleet(4);
        let policy = ScannerPolicy::from_config(&cfg).unwrap();
        (cfg, policy)
    }

    fn machine(id: u64) -> Machine {
        let nominal = OperatingPoint {
            frequency_ghz: 2.4,
            voltage_v: 0.9,
            current_a: 120.0,
        };
        Machine::new(id, nominal, 64)
    }

    fn mismatch(id: u64) -> TestExecutionRecord {
        let ops = crate::pattern::Operands::Mul { a: 3, b: 5 };
        TestExecutionRecord {
            machine_id: id,
            pattern_id: 1,
            mode: crate::pattern::ProfileMode::Ripple,
            start_time: SimTime::ZERO,
            duration_ms: 1.0,
            outcome: Outcome::Mismatch {
                iteration_index: 0,
                operands: ops,
                expected: crate::pattern::Value::Int(15),
                observed: crate::pattern::Value::Int(12),
            },
        }
    }

    #[test]
    fn tier_selection() {
        let (_, policy) = setup();
        assert_eq!(select_profile(&policy, 90.0).name, "quick");
        assert_eq!(select_profile(&policy, 600.0).name, "deep");
        assert_eq!(select_profile(&policy, 599.9).name, "quick");
        let deep = select_profile(&policy, 1e6);
        assert_eq!(deep.name, "deep");
        assert!(deep.test_duration_s <= 300.0);
        assert_eq!(select_profile(&policy, 3600.0).test_duration_s, 300.0);
    }

    #[test]
    fn window_on_quarantined_machine_is_skipped() {
        let (cfg, policy) = setup();
        let mut ctx = Ctx::for_tests(&cfg);
        let mut m = machine(0);
        m.state = MachineState::Quarantine;
        let ev = MaintenanceEvent {
            machine_id: 0,
            kind: MaintenanceKind::KernelUpgrade,
            window_s: 900.0,
        };
        assert!(!on_maintenance_window(&mut ctx, &mut m, &ev, &policy).unwrap());
        assert_eq!(m.state, MachineState::Quarantine);
        assert_eq!(ctx.pending_events(), 0);
    }

    #[test]
    fn first_detection_wins_and_is_idempotent() {
        let (cfg, policy) = setup();
        let mut ctx = Ctx::for_tests(&cfg);
        let mut m = machine(2).with_defect(DefectSpec::simple(0.1, 0.1, 1, CorruptionKind::BitFlip(1)));
        ctx.now = SimTime(100);
        assert!(handle_failure(&mut ctx, &mut m, &mismatch(2), Method::Ripple, &policy).unwrap());
        assert_eq!(m.state, MachineState::Quarantine);
        ctx.now = SimTime(500);
        assert!(!handle_failure(&mut ctx, &mut m, &mismatch(2), Method::Scanner, &policy).unwrap());
        assert_eq!(ctx.book.first[&2], (Method::Ripple, SimTime(100)));
        assert_eq!(ctx.book.ripple[&2], SimTime(100));
        assert_eq!(ctx.book.ripple.len(), 1);
        assert_eq!(ctx.pending_events(), 1);
    }

    #[test]
    fn swap_removes_defect_and_transition_defect_does_not_repro() {
        let (cfg, policy) = setup();
        let mut ctx = Ctx::for_tests(&cfg);
        let mut rng = stream(1, 1, Purpose::Confirm);

        let mut strong = machine(1).with_defect(DefectSpec::simple(1.0, 1.0, 1, CorruptionKind::BitFlip(4)));
        strong.state = MachineState::Quarantine;
        let out = quarantine_confirm_and_repair(&mut ctx, &mut strong, &policy, &mut rng).unwrap();
        assert_eq!(out.reproductions, 3);
        assert_eq!(out.repair, RepairKind::ComponentSwap);
        assert!(strong.defect.is_none());
        assert_eq!(strong.state, MachineState::Repair);

        let mut spec = DefectSpec::simple(1.0, 1.0, 1, CorruptionKind::BitFlip(4));
        spec.transition_window_ms = Some(1000.0);
        let mut gated = machine(3).with_defect(spec);
        gated.state = MachineState::Quarantine;
        let out = quarantine_confirm_and_repair(&mut ctx, &mut gated, &policy, &mut rng).unwrap();
        assert_eq!(out.reproductions, 0);
        assert_eq!(out.repair, RepairKind::SoftRepair);
        assert!(gated.defect.is_some());
    }

    #[test]
    fn passing_session_drains_back() {
        let (cfg, policy) = setup();
        let mut ctx = Ctx::for_tests(&cfg);
        let mut m = machine(0);
        let ev = MaintenanceEvent {
            machine_id: 0,
            kind: MaintenanceKind::FirmwareUpgrade,
            window_s: 1200.0,
        };
        let mut rng = stream(1, 0, Purpose::ScannerExec);
        on_maintenance_window(&mut ctx, &mut m, &ev, &policy).unwrap();
        on_drain_complete(&mut ctx, &mut m, &ev, &policy).unwrap();
        on_test_start(&mut ctx, &mut m, &ev, &policy, &mut rng).unwrap();
        assert_eq!(ctx.totals.scanner_tests, 5);
        assert!((ctx.totals.scanner_fleet_seconds - 300.0).abs() < 1e-6);
        let res = SessionResult {
            profile: "deep".into(),
            executions: 5,
            seconds: 300.0,
            elapsed_ms: 300_000,
            mismatch: None,
        };
        on_test_complete(&mut ctx, &mut m, &res, &policy).unwrap();
        assert_eq!(m.state, MachineState::Undraining);
        on_undrain_complete(&mut ctx, &mut m).unwrap();
        assert_eq!(m.state, MachineState::Production);
    }
}
