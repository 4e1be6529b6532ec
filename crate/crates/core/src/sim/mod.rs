//! Discrete-event kernel. One run simulates the fleet under both
//! orchestrators (the joint arm) and, by default, once more under each
//! orchestrator alone (the shadow arms) with identical fleets and streams.

pub mod event;
pub mod exposure;
pub mod world;

use std::collections::BTreeMap;
use std::io::Write;

use rand::prelude::*;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use event::{EventKind, EventQueue, MaintenanceEvent, SimEvent};
pub use exposure::{record_exposure, ExposureEntry, ExposureLedger};
pub use world::{generate_maintenance, step_environment, WorkloadModel};

use crate::config::{CoverageMode, LogLevel, SimConfig};
use crate::error::{Error, Result};
use crate::fleet::sample_fleet;
use crate::model::{DefectClass, EnvironmentState, Machine, MachineId, MachineState, Method, SimTime, MS_PER_DAY, MS_PER_HOUR};
use crate::par::Exec;
use crate::ripple::{self, cores_testable, AbReport, RipplePlan, SliceOutcome, TaxWindow};
use crate::rng::{stream, Purpose, Stream};
use crate::scanner::{self, ScannerPolicy};
use world::{hour_index, redraw_hotspot, MaintenanceGen};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Joint,
    ScannerOnly,
    RippleOnly,
}

impl Arm {
    pub fn scanner(self) -> bool {
        self != Arm::RippleOnly
    }

    pub fn ripple(self) -> bool {
        self != Arm::ScannerOnly
    }
}

/// First detection per method, and first overall.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DetectionBook {
    pub scanner: BTreeMap<MachineId, SimTime>,
    pub ripple: BTreeMap<MachineId, SimTime>,
    pub first: BTreeMap<MachineId, (Method, SimTime)>,
    /// Every mismatch routed to quarantine, re-detections included.
    pub mismatches: u64,
}

impl DetectionBook {
    pub fn by(&self, method: Method) -> &BTreeMap<MachineId, SimTime> {
        match method {
            Method::Scanner => &self.scanner,
            Method::Ripple => &self.ripple,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestTotals {
    pub scanner_sessions: u64,
    /// Pattern executions inside maintenance windows.
    pub scanner_tests: u64,
    pub scanner_fleet_seconds: f64,
    /// Pattern executions of quarantine confirmation runs.
    pub confirm_tests: u64,
    pub confirm_fleet_seconds: f64,
    pub ripple_tests: u64,
    pub ripple_fleet_seconds: f64,
    pub ripple_skipped: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceStats {
    pub arrivals: u64,
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DayTally {
    pub slices: u32,
    pub skipped: u32,
    pub busy_core_ms: f64,
}

/// Per-machine daily ripple footprint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MachineTax {
    pub machine_id: MachineId,
    pub core_count: u32,
    pub theta: f64,
    pub slice_ms: f64,
    pub slices: Vec<u32>,
    pub skipped: Vec<u32>,
    pub busy_core_ms: Vec<f64>,
}

/// JSONL event log.
#[derive(Debug, Default)]
pub struct EventLog {
    buf: Option<Vec<u8>>,
    lines: u64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    t_ms: u64,
    seq: u64,
    kind: &'a str,
    machine_id: Option<MachineId>,
    payload: &'a Value,
}

impl EventLog {
    fn enabled(on: bool) -> Self {
        EventLog {
            buf: on.then(Vec::new),
            lines: 0,
        }
    }

    fn write(&mut self, t: SimTime, kind: &str, machine_id: Option<MachineId>, payload: &Value) {
        if let Some(buf) = &mut self.buf {
            let line = LogLine {
                t_ms: t.ms(),
                seq: self.lines,
                kind,
                machine_id,
                payload,
            };
            serde_json::to_writer(&mut *buf, &line).expect("in-memory write");
            buf.push(b'\n');
            self.lines += 1;
        }
    }
}

/// Mutable simulation state shared with the orchestrators' handlers.
pub struct Ctx<'a> {
    pub cfg: &'a SimConfig,
    pub now: SimTime,
    horizon: SimTime,
    queue: EventQueue,
    log: EventLog,
    notes: Map<String, Value>,
    transitions: Vec<Value>,
    extra: Vec<(&'static str, Option<MachineId>, Value)>,
    quiet: bool,
    off_since: Vec<Option<u64>>,
    off_intervals: Vec<Vec<(u64, u64)>>,
    exposure_on: bool,
    pub book: DetectionBook,
    pub totals: TestTotals,
    pub exposure: ExposureLedger,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a SimConfig, log: bool, exposure_on: bool) -> Self {
        let n = cfg.fleet_size as usize;
        Ctx {
            cfg,
            now: SimTime::ZERO,
            horizon: SimTime::from_days(cfg.horizon_days),
            queue: EventQueue::new(),
            log: EventLog::enabled(log),
            notes: Map::new(),
            transitions: Vec::new(),
            extra: Vec::new(),
            quiet: false,
            off_since: vec![None; n],
            off_intervals: vec![Vec::new(); n],
            exposure_on,
            book: DetectionBook::default(),
            totals: TestTotals::default(),
            exposure: ExposureLedger::default(),
        }
    }

    /// A context over `cfg` for exercising handlers directly.
    pub fn for_tests(cfg: &'a SimConfig) -> Self {
        Ctx::new(cfg, true, true)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Queue an event; anything at or past the horizon is dropped.
    pub fn schedule(&mut self, at: SimTime, kind: EventKind, machine: MachineId) {
        if at < self.horizon {
            self.queue.push(at, kind, Some(machine));
        }
    }

    fn schedule_fleet(&mut self, at: SimTime, kind: EventKind) {
        if at < self.horizon {
            self.queue.push(at, kind, None);
        }
    }

    pub fn set_state(&mut self, machine: &mut Machine, to: MachineState) -> Result<()> {
        let from = machine.transition(to, self.now)?;
        self.transitions.push(json!({ "from": from.name(), "to": to.name() }));
        let id = machine.id as usize;
        if let (Some(since), Some(intervals)) = (self.off_since.get_mut(id), self.off_intervals.get_mut(id)) {
            if from == MachineState::Production {
                *since = Some(self.now.ms());
            } else if to == MachineState::Production {
                if let Some(s) = since.take() {
                    intervals.push((s, self.now.ms()));
                }
            }
        }
        Ok(())
    }

    /// Attach a field to the current event's log line.
    pub fn note(&mut self, key: &str, value: Value) {
        self.notes.insert(key.to_string(), value);
    }

    /// An extra log line written right after the current event's line.
    pub fn emit(&mut self, kind: &'static str, machine: Option<MachineId>, payload: Value) {
        self.extra.push((kind, machine, payload));
    }

    /// Book a detection; returns whether it is the machine's first by any method.
    pub fn record_detection(&mut self, id: MachineId, method: Method) -> bool {
        let now = self.now;
        self.book.mismatches += 1;
        match method {
            Method::Scanner => self.book.scanner.entry(id).or_insert(now),
            Method::Ripple => self.book.ripple.entry(id).or_insert(now),
        };
        if self.exposure_on {
            self.exposure.mark_detected(id, now);
        }
        if self.book.first.contains_key(&id) {
            false
        } else {
            self.book.first.insert(id, (method, now));
            true
        }
    }

    fn flush(&mut self, ev: &SimEvent) {
        let notes = std::mem::take(&mut self.notes);
        let transitions = std::mem::take(&mut self.transitions);
        let extra = std::mem::take(&mut self.extra);
        if self.log.buf.is_none() {
            self.quiet = false;
            return;
        }
        if !(self.quiet && transitions.is_empty() && extra.is_empty()) {
            let mut payload = notes;
            payload.insert("event_seq".into(), json!(ev.seq));
            if !transitions.is_empty() {
                payload.insert("transitions".into(), Value::Array(transitions));
            }
            self.log.write(ev.time, ev.kind.tag(), ev.machine_id, &Value::Object(payload));
        }
        for (kind, machine, payload) in extra {
            self.log.write(ev.time, kind, machine, &payload);
        }
        self.quiet = false;
    }
}

struct RippleRt {
    arrivals: Stream,
    exec: Stream,
    exposure: Stream,
    slices: u64,
    tax: TaxWindow,
    /// End of the slice in flight, if any.
    busy_until: SimTime,
}

struct Runtime {
    maintenance: MaintenanceGen,
    env: Stream,
    scanner: Stream,
    ripple: Option<RippleRt>,
    days: Vec<DayTally>,
}

#[derive(Clone, Copy, Debug)]
struct ArmOptions {
    arm: Arm,
    log: bool,
    tax: bool,
}

/// Everything one arm produced.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ArmOutcome {
    pub book: DetectionBook,
    pub totals: TestTotals,
    pub exposure: ExposureLedger,
    pub maintenance: MaintenanceStats,
    pub events_processed: u64,
    pub final_states: BTreeMap<String, u64>,
    #[serde(skip)]
    pub log: Vec<u8>,
    #[serde(skip)]
    pub tax: Vec<MachineTax>,
}

struct Sim<'a> {
    opts: ArmOptions,
    machines: Vec<Machine>,
    rt: Vec<Runtime>,
    tracked: Vec<MachineId>,
    ctx: Ctx<'a>,
    policy: ScannerPolicy,
    plan: RipplePlan,
    workload: WorkloadModel,
    dc_rng: Vec<Stream>,
    days: usize,
    stats: MaintenanceStats,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, fleet: Vec<Machine>, opts: ArmOptions) -> Result<Self> {
        let seed = cfg.global_seed;
        let full = cfg.log_level == LogLevel::Full;
        let days = cfg.horizon_days.ceil() as usize;
        let tracked: Vec<MachineId> = fleet.iter().filter(|m| full || m.defect.is_some()).map(|m| m.id).collect();
        let rt = fleet
            .iter()
            .map(|m| {
                let is_tracked = full || m.defect.is_some();
                Runtime {
                    maintenance: generate_maintenance(cfg, seed, m.id),
                    env: stream(seed, m.id, Purpose::Environment),
                    scanner: stream(seed, m.id, Purpose::ScannerExec),
                    ripple: is_tracked.then(|| RippleRt {
                        arrivals: stream(seed, m.id, Purpose::RippleArrivals),
                        exec: stream(seed, m.id, Purpose::RippleExec),
                        exposure: stream(seed, m.id, Purpose::Exposure),
                        slices: 0,
                        tax: TaxWindow::default(),
                        busy_until: SimTime::ZERO,
                    }),
                    days: if opts.tax && is_tracked {
                        vec![DayTally::default(); days]
                    } else {
                        Vec::new()
                    },
                }
            })
            .collect();
        Ok(Sim {
            opts,
            machines: fleet,
            rt,
            tracked,
            ctx: Ctx::new(cfg, opts.log, opts.arm == Arm::Joint),
            policy: ScannerPolicy::from_config(cfg)?,
            plan: RipplePlan::from_config(cfg)?,
            workload: WorkloadModel::new(&cfg.workload, seed),
            dc_rng: (0..cfg.datacenters.len() as u64).map(|d| stream(seed, d, Purpose::Datacenter)).collect(),
            days,
            stats: MaintenanceStats::default(),
        })
    }

    fn cfg(&self) -> &'a SimConfig {
        self.ctx.cfg
    }

    fn init(&mut self) {
        let cfg = self.cfg();
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        if self.opts.arm.scanner() && cfg.scanner.enabled {
            for (id, rt) in self.rt.iter_mut().enumerate() {
                if let Some((t, ev)) = rt.maintenance.next() {
                    self.ctx.schedule(t, EventKind::MaintenanceArrival(ev), id as MachineId);
                    *counts.entry("maintenance_arrival").or_default() += 1;
                }
            }
        }
        if self.opts.arm.ripple() && cfg.ripple.enabled {
            for &id in &self.tracked {
                let r = self.rt[id as usize].ripple.as_mut().expect("tracked");
                if let Some(t) = self.plan.next_arrival(self.plan.rollout, &mut r.arrivals) {
                    self.ctx.schedule(t, EventKind::TestSliceDue, id);
                    *counts.entry("ripple_slice").or_default() += 1;
                }
            }
        }
        for &id in &self.tracked {
            let m = &mut self.machines[id as usize];
            m.cores_busy = self.workload.busy_cores(id, m.core_count, 0);
        }
        let step = (cfg.environment.step_hours * MS_PER_HOUR as f64).round() as u64;
        self.ctx.schedule_fleet(SimTime(step), EventKind::EnvStep);
        self.ctx.schedule_fleet(SimTime(MS_PER_HOUR), EventKind::WorkloadStep);
        if self.opts.arm == Arm::Joint {
            let every = (cfg.workload.exposure_check_hours * MS_PER_HOUR as f64).round() as u64;
            self.ctx.schedule_fleet(SimTime(every), EventKind::ExposureCheck);
        }
        for (tag, at) in [("env_step", step), ("workload_step", MS_PER_HOUR)] {
            if at < self.ctx.horizon.ms() {
                *counts.entry(tag).or_default() += 1;
            }
        }
        let payload = json!({
            "fleet_size": cfg.fleet_size,
            "seed": cfg.global_seed,
            "horizon_ms": self.ctx.horizon.ms(),
            "defective": self.machines.iter().filter(|m| m.defect.is_some()).count(),
            "scheduled": counts,
        });
        self.ctx.log.write(SimTime::ZERO, "run_start", None, &payload);
    }

    fn run(mut self) -> Result<ArmOutcome> {
        self.init();
        let mut processed = 0u64;
        while let Some(ev) = self.ctx.queue.pop() {
            self.ctx.now = ev.time;
            self.dispatch(&ev).map_err(|e| Error::AtEvent {
                event: format!("{} t_ms={} seq={} machine={:?}", ev.kind.tag(), ev.time.ms(), ev.seq, ev.machine_id),
                source: Box::new(e),
            })?;
            self.ctx.flush(&ev);
            processed += 1;
        }
        self.finish(processed)
    }

    fn dispatch(&mut self, ev: &SimEvent) -> Result<()> {
        let id = ev.machine_id.unwrap_or(0) as usize;
        let Sim {
            machines,
            rt,
            ctx,
            policy,
            ..
        } = self;
        match &ev.kind {
            EventKind::MaintenanceArrival(me) => {
                // A slice in flight finishes before the drain starts.
                let busy_until = rt[id].ripple.as_ref().map_or(SimTime::ZERO, |r| r.busy_until);
                if busy_until > ctx.now && machines[id].state == MachineState::Production {
                    ctx.note("deferred_until_ms", json!(busy_until.ms()));
                    ctx.schedule(busy_until, EventKind::MaintenanceArrival(me.clone()), id as MachineId);
                    return Ok(());
                }
                if let Some((t, next)) = rt[id].maintenance.next() {
                    ctx.schedule(t, EventKind::MaintenanceArrival(next), id as MachineId);
                }
                self.stats.arrivals += 1;
                if !scanner::on_maintenance_window(ctx, &mut machines[id], me, policy)? {
                    self.stats.skipped += 1;
                }
            }
            EventKind::DrainComplete(me) => scanner::on_drain_complete(ctx, &mut machines[id], me, policy)?,
            EventKind::MaintenanceWorkDone(me) => {
                scanner::on_test_start(ctx, &mut machines[id], me, policy, &mut rt[id].scanner)?
            }
            EventKind::ScannerTestComplete(res) => scanner::on_test_complete(ctx, &mut machines[id], res, policy)?,
            EventKind::QuarantineConfirmDue => {
                scanner::quarantine_confirm_and_repair(ctx, &mut machines[id], policy, &mut rt[id].scanner)?;
            }
            EventKind::RepairComplete => scanner::on_repair_complete(ctx, &mut machines[id], policy)?,
            EventKind::UndrainComplete => scanner::on_undrain_complete(ctx, &mut machines[id])?,
            EventKind::TestSliceDue => self.ripple_slice(id)?,
            EventKind::EnvStep => self.env_step(),
            EventKind::WorkloadStep => self.workload_step(),
            EventKind::ExposureCheck => self.exposure_check(),
        }
        Ok(())
    }

    fn day_of(&self, t: SimTime) -> usize {
        ((t.ms() / MS_PER_DAY) as usize).min(self.days.saturating_sub(1))
    }

    fn ripple_slice(&mut self, id: usize) -> Result<()> {
        let now = self.ctx.now;
        let day = self.day_of(now);
        let full = self.cfg().log_level == LogLevel::Full;
        let Sim {
            machines,
            rt,
            ctx,
            policy,
            plan,
            ..
        } = self;
        let runtime = &mut rt[id];
        let r = runtime.ripple.as_mut().expect("slices only for tracked machines");
        if let Some(t) = plan.next_arrival(now, &mut r.arrivals) {
            ctx.schedule(t, EventKind::TestSliceDue, id as MachineId);
        }
        let m = &mut machines[id];
        let outcome = ripple::tick_schedule(m, plan, &mut r.tax, r.slices, now, &mut r.exec)?;
        let tally = runtime.days.get_mut(day);
        match outcome {
            SliceOutcome::BeforeRollout | SliceOutcome::NotInProduction => ctx.quiet = true,
            SliceOutcome::NoFreeCore | SliceOutcome::TaxBudget => {
                ctx.totals.ripple_skipped += 1;
                if let Some(d) = tally {
                    d.skipped += 1;
                }
                let reason = if outcome == SliceOutcome::NoFreeCore { "no_free_core" } else { "tax_budget" };
                ctx.quiet = true;
                ctx.emit("ripple_skip", Some(id as MachineId), json!({ "reason": reason, "cores_busy": m.cores_busy }));
            }
            SliceOutcome::Ran { record, cores } => {
                r.slices += 1;
                r.busy_until = now.plus_ms(record.duration_ms.ceil() as u64);
                ctx.totals.ripple_tests += 1;
                ctx.totals.ripple_fleet_seconds += record.duration_ms / 1000.0;
                if let Some(d) = tally {
                    d.slices += 1;
                    d.busy_core_ms += record.duration_ms * cores as f64;
                }
                ctx.note("cores", json!(cores));
                ctx.note("duration_ms", json!(record.duration_ms));
                ctx.note("pattern_id", json!(record.pattern_id));
                if record.outcome.is_mismatch() {
                    scanner::handle_failure(ctx, m, &record, Method::Ripple, policy)?;
                } else {
                    ctx.quiet = !full;
                }
            }
        }
        Ok(())
    }

    fn env_step(&mut self) {
        let cfg = self.cfg();
        let now = self.ctx.now;
        let temps: Vec<f64> = cfg
            .datacenters
            .iter()
            .zip(self.dc_rng.iter_mut())
            .map(|(dc, rng)| step_environment(dc, &cfg.environment, rng, now))
            .collect();
        let everyone = self.opts.arm == Arm::Joint;
        let ids: Vec<MachineId> = if everyone {
            (0..self.machines.len() as MachineId).collect()
        } else {
            self.tracked.clone()
        };
        for id in ids {
            let m = &mut self.machines[id as usize];
            let hotspot = redraw_hotspot(m.env.hotspot_factor, &cfg.environment, &mut self.rt[id as usize].env);
            let dc = &cfg.datacenters[m.datacenter as usize];
            m.env = EnvironmentState::new(temps[m.datacenter as usize], dc.humidity_pct, hotspot);
        }
        self.ctx.note("temperatures_c", json!(temps));
        let step = (cfg.environment.step_hours * MS_PER_HOUR as f64).round() as u64;
        self.ctx.schedule_fleet(now.plus_ms(step), EventKind::EnvStep);
    }

    fn workload_step(&mut self) {
        let now = self.ctx.now;
        let hour = hour_index(now);
        for &id in &self.tracked {
            let m = &mut self.machines[id as usize];
            m.cores_busy = self.workload.busy_cores(id, m.core_count, hour);
        }
        self.ctx.note("hour", json!(hour));
        self.ctx.note("machines", json!(self.tracked.len()));
        self.ctx.schedule_fleet(now.plus_ms(MS_PER_HOUR), EventKind::WorkloadStep);
    }

    fn exposure_check(&mut self) {
        let cfg = self.cfg();
        let now = self.ctx.now;
        let hours = cfg.workload.exposure_check_hours;
        let mut added = 0;
        for &id in &self.tracked {
            let m = &self.machines[id as usize];
            if m.defect.is_none() {
                continue;
            }
            let r = self.rt[id as usize].ripple.as_mut().expect("tracked");
            added += record_exposure(&mut self.ctx.exposure, m, now, hours, cfg.workload.ops_per_hour, &mut r.exposure);
        }
        self.ctx.note("corrupt_results", json!(added));
        let every = (hours * MS_PER_HOUR as f64).round() as u64;
        self.ctx.schedule_fleet(now.plus_ms(every), EventKind::ExposureCheck);
    }

    fn finish(mut self, processed: u64) -> Result<ArmOutcome> {
        let cfg = self.cfg();
        let horizon = self.ctx.horizon.ms();
        for (since, intervals) in self.ctx.off_since.iter_mut().zip(self.ctx.off_intervals.iter_mut()) {
            if let Some(s) = since.take() {
                intervals.push((s, horizon));
            }
        }
        let mut tax = Vec::new();
        let ripple_on = self.opts.arm.ripple() && cfg.ripple.enabled;
        let theta = |m: &Machine| cfg.ripple.threshold_for(&m.machine_class);
        if ripple_on && self.opts.arm == Arm::Joint {
            // Machines without per-slice simulation: slice counts per day are
            // Poisson in the production time that had a free core.
            let untracked: Vec<MachineId> = self
                .rt
                .iter()
                .enumerate()
                .filter(|(_, r)| r.ripple.is_none())
                .map(|(i, _)| i as MachineId)
                .collect();
            let batch = Exec::Parallel.map(untracked, |id| {
                let m = &self.machines[id as usize];
                let days = self.batch_ripple(m, &self.ctx.off_intervals[id as usize]);
                (id, days)
            });
            for (id, days) in batch {
                for d in &days {
                    self.ctx.totals.ripple_tests += d.slices as u64;
                    self.ctx.totals.ripple_skipped += d.skipped as u64;
                    self.ctx.totals.ripple_fleet_seconds += d.slices as f64 * cfg.ripple.slice_ms / 1000.0;
                }
                if self.opts.tax {
                    self.rt[id as usize].days = days;
                }
            }
        }
        if self.opts.tax && ripple_on {
            for (m, rt) in self.machines.iter().zip(self.rt.iter_mut()) {
                let days = std::mem::take(&mut rt.days);
                tax.push(MachineTax {
                    machine_id: m.id,
                    core_count: m.core_count,
                    theta: theta(m),
                    slice_ms: cfg.ripple.slice_ms,
                    slices: days.iter().map(|d| d.slices).collect(),
                    skipped: days.iter().map(|d| d.skipped).collect(),
                    busy_core_ms: days.iter().map(|d| d.busy_core_ms).collect(),
                });
            }
        }
        let mut final_states = BTreeMap::new();
        for m in &self.machines {
            *final_states.entry(m.state.name().to_string()).or_insert(0) += 1;
        }
        let payload = json!({ "events_processed": processed, "final_states": final_states });
        self.ctx.log.write(self.ctx.horizon, "run_end", None, &payload);
        Ok(ArmOutcome {
            book: self.ctx.book,
            totals: self.ctx.totals,
            exposure: self.ctx.exposure,
            maintenance: self.stats,
            events_processed: processed,
            final_states,
            log: self.ctx.log.buf.unwrap_or_default(),
            tax,
        })
    }

    /// Daily slice tallies for a machine simulated in aggregate.
    fn batch_ripple(&self, m: &Machine, off: &[(u64, u64)]) -> Vec<DayTally> {
        let cfg = self.cfg();
        let rc = &cfg.ripple;
        let horizon = self.ctx.horizon.ms();
        let start = self.plan.rollout.ms();
        let phase = self.workload.phase(m.id);
        let max_cores = rc.max_test_cores as usize;
        let rate_per_ms = rc.trials_per_day / MS_PER_DAY as f64;
        // Half the daily budget per calendar day keeps every 24 h window,
        // which spans at most two days, under the threshold.
        let day_cap = (rc.threshold_for(&m.machine_class) * MS_PER_DAY as f64 * m.core_count as f64 / rc.slice_ms / 2.0)
            .floor()
            .max(1.0) as u64;
        let mut rng = stream(cfg.global_seed, m.id, Purpose::RippleCounts);
        let mut off_i = 0;
        let mut days = vec![DayTally::default(); self.days];
        let mut free = vec![0u64; max_cores + 1];
        for (day, tally) in days.iter_mut().enumerate() {
            free.iter_mut().for_each(|f| *f = 0);
            for h in 0..24u64 {
                let hour = day as u64 * 24 + h;
                let s = (hour * MS_PER_HOUR).max(start);
                let e = ((hour + 1) * MS_PER_HOUR).min(horizon);
                if e <= s {
                    continue;
                }
                while off_i < off.len() && off[off_i].1 <= s {
                    off_i += 1;
                }
                let mut down = 0;
                for &(a, b) in &off[off_i..] {
                    if a >= e {
                        break;
                    }
                    down += b.min(e) - a.max(s);
                }
                let up = e - s - down;
                if up == 0 {
                    continue;
                }
                let bound = self.workload.busy_cores_bound(phase, m.core_count, hour);
                let cores = if cores_testable(m.core_count, bound, rc) as usize == max_cores {
                    max_cores
                } else {
                    cores_testable(m.core_count, self.workload.busy_cores(m.id, m.core_count, hour), rc) as usize
                };
                free[cores] += up;
            }
            let mut draw = |ms: u64| -> u64 {
                let mean = rate_per_ms * ms as f64;
                Poisson::new(mean).map(|p| p.sample(&mut rng) as u64).unwrap_or(0)
            };
            tally.skipped = draw(free[0]) as u32;
            let mut room = day_cap;
            for (cores, &ms) in free.iter().enumerate().skip(1) {
                let n = draw(ms);
                let ran = n.min(room);
                room -= ran;
                tally.skipped += (n - ran) as u32;
                tally.slices += ran as u32;
                tally.busy_core_ms += ran as f64 * rc.slice_ms * cores as f64;
            }
        }
        days
    }
}

/// Options for a full run.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub exec: Exec,
    pub record_log: bool,
    pub record_tax: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            exec: Exec::Parallel,
            record_log: true,
            record_tax: true,
        }
    }
}

impl RunOptions {
    /// No log or tax ledger; for sweeps.
    pub fn lean() -> Self {
        RunOptions {
            record_log: false,
            record_tax: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: SimConfig,
    pub ground_truth: BTreeMap<MachineId, DefectClass>,
    pub joint: ArmOutcome,
    pub scanner_arm: Option<ArmOutcome>,
    pub ripple_arm: Option<ArmOutcome>,
    pub ab: Option<AbReport>,
}

impl RunOutput {
    /// Detection times per method, from the arms the coverage mode selects.
    pub fn method_detections(&self, method: Method) -> &BTreeMap<MachineId, SimTime> {
        let arm = match (self.config.coverage_mode, method) {
            (CoverageMode::ShadowArms, Method::Scanner) => self.scanner_arm.as_ref(),
            (CoverageMode::ShadowArms, Method::Ripple) => self.ripple_arm.as_ref(),
            (CoverageMode::Joint, _) => None,
        };
        arm.unwrap_or(&self.joint).book.by(method)
    }

    pub fn write_log(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.joint.log)
    }

    pub fn write_tax_ledger(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.joint.tax {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Simulate `cfg` (seeded by `cfg.global_seed`).
pub fn run(cfg: &SimConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let fleet = sample_fleet(cfg, cfg.global_seed)?;
    let ground_truth = fleet.iter().filter_map(|m| m.sampled_class.map(|c| (m.id, c))).collect();
    let arm = |arm: Arm, log: bool, tax: bool| {
        let fleet = fleet.clone();
        move || Sim::new(cfg, fleet, ArmOptions { arm, log, tax })?.run()
    };
    let shadow = cfg.coverage_mode == CoverageMode::ShadowArms;
    let (joint, (scanner_arm, ripple_arm)) = opts.exec.join(arm(Arm::Joint, opts.record_log, opts.record_tax), || {
        if shadow {
            let (s, r) = opts.exec.join(arm(Arm::ScannerOnly, false, false), arm(Arm::RippleOnly, false, false));
            (Some(s), Some(r))
        } else {
            (None, None)
        }
    });
    let ab = match &cfg.ab_experiment {
        Some(ab) => {
            let subset: Vec<Machine> = fleet
                .iter()
                .filter(|m| !ab.defective_only || m.defect.is_some())
                .take(ab.subset_size as usize)
                .cloned()
                .collect();
            Some(ripple::run_shadow_experiment(cfg, &subset, ab, opts.exec)?)
        }
        None => None,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        ground_truth,
        joint: joint?,
        scanner_arm: scanner_arm.transpose()?,
        ripple_arm: ripple_arm.transpose()?,
        ab,
    })
}
