//! Machines, defects, operating conditions and the machine lifecycle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{TestProfile, Value};

pub type MachineId = u64;

pub const MS_PER_SECOND: u64 = 1_000;
pub const MS_PER_HOUR: u64 = 3_600_000;
pub const MS_PER_DAY: u64 = 86_400_000;

/// Simulation timestamp in integer milliseconds since the start of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_days(days: f64) -> SimTime {
        SimTime((days * MS_PER_DAY as f64).round() as u64)
    }

    pub fn from_secs(secs: f64) -> SimTime {
        SimTime((secs * MS_PER_SECOND as f64).round() as u64)
    }

    pub fn ms(self) -> u64 {
        self.0
    }

    pub fn days(self) -> f64 {
        self.0 as f64 / MS_PER_DAY as f64
    }

    pub fn plus_ms(self, ms: u64) -> SimTime {
        SimTime(self.0.saturating_add(ms))
    }

    pub fn plus_secs(self, secs: f64) -> SimTime {
        self.plus_ms((secs * 1000.0).round() as u64)
    }
}

/// Electrical operating point: frequency (GHz), voltage (V), current (A).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPoint {
    pub frequency_ghz: f64,
    pub voltage_v: f64,
    pub current_a: f64,
}

/// Allowed operating range and nominal point for one machine class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub min: OperatingPoint,
    pub max: OperatingPoint,
    pub nominal: OperatingPoint,
}

impl Envelope {
    pub fn contains(&self, p: &OperatingPoint) -> bool {
        let inside = |v: f64, lo: f64, hi: f64| v > lo && v < hi;
        inside(p.frequency_ghz, self.min.frequency_ghz, self.max.frequency_ghz)
            && inside(p.voltage_v, self.min.voltage_v, self.max.voltage_v)
            && inside(p.current_a, self.min.current_a, self.max.current_a)
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.nominal;
        if !(n.frequency_ghz > 0.0 && n.voltage_v > 0.0 && n.current_a >= 0.0) {
            return Err(Error::validation("envelope.nominal", "frequency and voltage must be positive, current non-negative"));
        }
        if !self.contains(n) {
            return Err(Error::validation("envelope.nominal", "nominal point must lie strictly inside [min, max]"));
        }
        Ok(())
    }

    /// Clamp a point to just inside the envelope.
    pub fn clamp(&self, p: OperatingPoint) -> OperatingPoint {
        let c = |v: f64, lo: f64, hi: f64| {
            let eps = (hi - lo) * 1e-9;
            v.clamp(lo + eps, hi - eps)
        };
        OperatingPoint {
            frequency_ghz: c(p.frequency_ghz, self.min.frequency_ghz, self.max.frequency_ghz),
            voltage_v: c(p.voltage_v, self.min.voltage_v, self.max.voltage_v),
            current_a: c(p.current_a, self.min.current_a, self.max.current_a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentState {
    pub temperature_c: f64,
    pub humidity_pct: f64,
    /// Multiplier (>= 1) on the datacenter baseline temperature.
    pub hotspot_factor: f64,
}

impl EnvironmentState {
    pub fn new(baseline_c: f64, humidity_pct: f64, hotspot_factor: f64) -> Self {
        debug_assert!((0.0..=100.0).contains(&humidity_pct));
        debug_assert!(hotspot_factor >= 1.0);
        EnvironmentState {
            temperature_c: baseline_c * hotspot_factor,
            humidity_pct,
            hotspot_factor,
        }
    }
}

/// How a manifesting defect rewrites a correct result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Result replaced by a fixed bit pattern.
    ForcedConstant(u64),
    /// One result bit inverted.
    BitFlip(u8),
    /// Raw result bits offset by `delta` (integer off-by-n, float ULP shift).
    OffByDelta(i64),
}

impl CorruptionKind {
    pub fn apply(&self, v: Value) -> Value {
        let bits = v.bits();
        let out = match *self {
            CorruptionKind::ForcedConstant(c) => c,
            CorruptionKind::BitFlip(b) => bits ^ (1u64 << (b & 63)),
            CorruptionKind::OffByDelta(d) => bits.wrapping_add(d as u64),
        };
        v.with_bits(out)
    }
}

/// A silent-data-corruption defect and the conditions under which it shows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSpec {
    /// Fraction of the operand space that can be corrupted.
    pub faulty_fraction: f64,
    pub subset_seed: u64,
    pub corruption: CorruptionKind,
    /// Per-trial manifestation probability with all gates open at nominal conditions.
    pub base_prob: f64,
    pub elec_alpha: f64,
    pub elec_beta: f64,
    pub thermal_threshold_c: f64,
    pub thermal_gamma: f64,
    /// `None` means the defect is not aging-gated.
    pub aging_onset_days: Option<f64>,
    pub aging_ramp_days: f64,
    /// Seconds of continuous testing before the defect can manifest; 0 disables the gate.
    pub soak_min_s: f64,
    /// Manifestation only within this many ms of a workload-to-test switch; `None` disables.
    pub transition_window_ms: Option<f64>,
}

impl DefectSpec {
    /// A gate-free defect with no accelerant sensitivity.
    pub fn simple(faulty_fraction: f64, base_prob: f64, subset_seed: u64, corruption: CorruptionKind) -> Self {
        DefectSpec {
            faulty_fraction,
            subset_seed,
            corruption,
            base_prob,
            elec_alpha: 0.0,
            elec_beta: 0.0,
            thermal_threshold_c: f64::INFINITY,
            thermal_gamma: 0.0,
            aging_onset_days: None,
            aging_ramp_days: 0.0,
            soak_min_s: 0.0,
            transition_window_ms: None,
        }
    }

    pub fn is_soak_gated(&self) -> bool {
        self.soak_min_s > 0.0
    }

    pub fn is_transition_gated(&self) -> bool {
        self.transition_window_ms.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDefect(m.to_string()));
        if !(self.faulty_fraction > 0.0 && self.faulty_fraction <= 1.0) {
            return bad("faulty_fraction must lie in (0, 1]");
        }
        if !(self.base_prob > 0.0 && self.base_prob <= 1.0) {
            return bad("base_prob must lie in (0, 1]");
        }
        if self.elec_alpha < 0.0 || self.elec_beta < 0.0 || self.thermal_gamma < 0.0 {
            return bad("acceleration coefficients must be non-negative");
        }
        if self.soak_min_s < 0.0 {
            return bad("soak_min_s must be non-negative");
        }
        if let Some(w) = self.transition_window_ms {
            if !(w >= 0.0 && w.is_finite()) {
                return bad("transition_window_ms must be finite and non-negative");
            }
        }
        if self.is_soak_gated() && self.is_transition_gated() {
            return bad("a defect cannot be both soak-gated and transition-gated");
        }
        if let Some(onset) = self.aging_onset_days {
            if !(onset >= 0.0) || self.aging_ramp_days < 0.0 {
                return bad("aging onset and ramp must be non-negative");
            }
        }
        match self.corruption {
            CorruptionKind::BitFlip(b) if b > 63 => return bad("bit index must be < 64"),
            CorruptionKind::OffByDelta(0) => return bad("off-by-delta of 0 corrupts nothing"),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    BothDetectable,
    ScannerOnly,
    RippleTransition,
    RippleRepetition,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::BothDetectable,
        DefectClass::ScannerOnly,
        DefectClass::RippleTransition,
        DefectClass::RippleRepetition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectClass::BothDetectable => "both_detectable",
            DefectClass::ScannerOnly => "scanner_only",
            DefectClass::RippleTransition => "ripple_transition",
            DefectClass::RippleRepetition => "ripple_repetition",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaintenanceKind {
    FirmwareUpgrade,
    KernelUpgrade,
    Provisioning,
    Repair,
}

impl MaintenanceKind {
    pub const ALL: [MaintenanceKind; 4] = [
        MaintenanceKind::FirmwareUpgrade,
        MaintenanceKind::KernelUpgrade,
        MaintenanceKind::Provisioning,
        MaintenanceKind::Repair,
    ];
}

/// Which orchestrator produced a detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Scanner,
    Ripple,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Scanner => "scanner",
            Method::Ripple => "ripple",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MachineState {
    Production,
    Draining,
    Maintenance(MaintenanceKind),
    TestingScanner,
    Quarantine,
    Repair,
    Undraining,
}

impl MachineState {
    pub fn name(&self) -> &'static str {
        match self {
            MachineState::Production => "production",
            MachineState::Draining => "draining",
            MachineState::Maintenance(_) => "maintenance",
            MachineState::TestingScanner => "testing_scanner",
            MachineState::Quarantine => "quarantine",
            MachineState::Repair => "repair",
            MachineState::Undraining => "undraining",
        }
    }

    /// The legal-transition relation.
    pub fn can_transition_to(&self, to: &MachineState) -> bool {
        use MachineState::*;
        matches!(
            (self, to),
            (Production, Draining)
                | (Draining, Maintenance(_))
                | (Maintenance(_), TestingScanner)
                | (TestingScanner, Undraining)
                | (Undraining, Production)
                | (Production, Quarantine)
                | (TestingScanner, Quarantine)
                | (Quarantine, Repair)
                | (Repair, Undraining)
        )
    }

    /// Legality check on the logged names, for log replay.
    pub fn legal_by_name(from: &str, to: &str) -> bool {
        matches!(
            (from, to),
            ("production", "draining")
                | ("draining", "maintenance")
                | ("maintenance", "testing_scanner")
                | ("testing_scanner", "undraining")
                | ("undraining", "production")
                | ("production", "quarantine")
                | ("testing_scanner", "quarantine")
                | ("quarantine", "repair")
                | ("repair", "undraining")
        )
    }
}

impl fmt::Display for MachineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MachineState::Maintenance(k) => write!(f, "maintenance({k:?})"),
            s => f.write_str(s.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Machine {
    pub id: MachineId,
    pub machine_class: String,
    pub datacenter: u32,
    pub defect: Option<DefectSpec>,
    /// Class recorded when the defect was sampled; kept after repair as ground truth.
    pub sampled_class: Option<DefectClass>,
    pub op_point: OperatingPoint,
    pub nominal: OperatingPoint,
    pub env: EnvironmentState,
    /// Age at simulation time zero; age at `t` is `age_days + t.days()`.
    pub age_days: f64,
    pub state: MachineState,
    pub core_count: u32,
    pub cores_busy: u32,
    pub continuous_test_seconds: f64,
    pub last_transition_ms: Option<SimTime>,
    pub drain_started: Option<SimTime>,
}

impl Machine {
    /// A defect-free production machine at the nominal point.
    pub fn new(id: MachineId, nominal: OperatingPoint, core_count: u32) -> Self {
        Machine {
            id,
            machine_class: "standard".to_string(),
            datacenter: 0,
            defect: None,
            sampled_class: None,
            op_point: nominal,
            nominal,
            env: EnvironmentState::new(25.0, 40.0, 1.0),
            age_days: 0.0,
            state: MachineState::Production,
            core_count,
            cores_busy: 0,
            continuous_test_seconds: 0.0,
            last_transition_ms: None,
            drain_started: None,
        }
    }

    pub fn with_defect(mut self, defect: DefectSpec) -> Self {
        self.defect = Some(defect);
        self
    }

    pub fn age_at(&self, now: SimTime) -> f64 {
        self.age_days + now.days()
    }

    /// Move to `to` if the lifecycle allows it.
    pub fn transition(&mut self, to: MachineState, now: SimTime) -> Result<MachineState> {
        let from = self.state;
        if !from.can_transition_to(&to) {
            return Err(Error::IllegalTransition {
                machine: self.id,
                from,
                to,
            });
        }
        self.state = to;
        match to {
            MachineState::Draining => self.drain_started = Some(now),
            MachineState::Production => {
                self.continuous_test_seconds = 0.0;
                self.drain_started = None;
            }
            MachineState::Undraining | MachineState::Quarantine => self.continuous_test_seconds = 0.0,
            _ => {}
        }
        Ok(from)
    }
}

/// Probability that a trial budget of `n` independent trials at per-trial
/// probability `x` detects at least once.
pub fn detection_probability(x: f64, n: f64) -> f64 {
    if x <= 0.0 || n <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    -(n * (-x).ln_1p()).exp_m1()
}

/// Which strategy can see a defect, judged from its gates and the two
/// strategies' trial budgets over `horizon_days`.
pub fn classify_defect(
    spec: &DefectSpec,
    scanner: &TestProfile,
    ripple: &TestProfile,
    horizon_days: f64,
) -> Result<DefectClass> {
    for p in [scanner, ripple] {
        if p.iterations_per_execution() == 0 {
            return Err(Error::InvalidProfile(format!("profile `{}` has zero iterations", p.name)));
        }
    }
    let ripple_slice_s = ripple.execution_seconds();
    if spec.is_soak_gated() && spec.soak_min_s > ripple_slice_s && spec.soak_min_s <= scanner.test_duration_s {
        return Ok(DefectClass::ScannerOnly);
    }
    if spec.is_transition_gated() {
        return Ok(DefectClass::RippleTransition);
    }
    if !spec.is_soak_gated() {
        let x = spec.faulty_fraction * spec.base_prob;
        let scanner_p = detection_probability(x, scanner.trials_over(horizon_days));
        let ripple_p = detection_probability(x, ripple.trials_over(horizon_days));
        if scanner_p < 0.5 && ripple_p >= 0.99 {
            return Ok(DefectClass::RippleRepetition);
        }
    }
    Ok(DefectClass::BothDetectable)
}
