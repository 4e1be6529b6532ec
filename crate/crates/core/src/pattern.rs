//! Seeded test patterns, golden-reference evaluation, and pattern execution
//! against a (possibly defective) machine.
//!
//! A pattern is a schedule of operand tuples for one arithmetic family. Each
//! iteration computes the bit-exact reference result and compares it with what
//! the machine "observed". On a simulated machine the observation is the
//! reference unless the machine's defect manifests on that operand tuple; in
//! self-check mode the observation is an independent recomputation on the host.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{below_fraction, keyed_hash, tag, unit_f64};
use crate::model::{DefectSpec, Machine, MachineId, MachineState, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternFamily {
    MulInt64,
    PowFloat64,
    FmaFloat64,
    ShiftXorInt64,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 4] = [
        PatternFamily::MulInt64,
        PatternFamily::PowFloat64,
        PatternFamily::FmaFloat64,
        PatternFamily::ShiftXorInt64,
    ];

    fn word(self) -> u64 {
        match self {
            PatternFamily::MulInt64 => tag("mul_int64"),
            PatternFamily::PowFloat64 => tag("pow_float64"),
            PatternFamily::FmaFloat64 => tag("fma_float64"),
            PatternFamily::ShiftXorInt64 => tag("shift_xor_int64"),
        }
    }
}

/// One operand tuple. The variant fixes the family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operands {
    Mul { a: i64, b: i64 },
    Pow { base: f64, exp: i32 },
    Fma { a: f64, b: f64, c: f64 },
    ShiftXor { a: i64, shift: u32, b: i64 },
}

impl Operands {
    pub fn family(&self) -> PatternFamily {
        match self {
            Operands::Mul { .. } => PatternFamily::MulInt64,
            Operands::Pow { .. } => PatternFamily::PowFloat64,
            Operands::Fma { .. } => PatternFamily::FmaFloat64,
            Operands::ShiftXor { .. } => PatternFamily::ShiftXorInt64,
        }
    }

    /// Canonical encoding used by the faulty-subset predicate.
    pub fn words(&self) -> [u64; 4] {
        let f = self.family().word();
        match *self {
            Operands::Mul { a, b } => [f, a as u64, b as u64, 0],
            Operands::Pow { base, exp } => [f, base.to_bits(), exp as u32 as u64, 0],
            Operands::Fma { a, b, c } => [f, a.to_bits(), b.to_bits(), c.to_bits()],
            Operands::ShiftXor { a, shift, b } => [f, a as u64, shift as u64, b as u64],
        }
    }

    /// Operand tuple `index` of the seeded schedule for `family`.
    pub fn seeded(seed: u64, family: PatternFamily, index: u64) -> Operands {
        let h = |k: u64| keyed_hash(seed, &[family.word(), index, k]);
        match family {
            PatternFamily::MulInt64 => Operands::Mul {
                a: h(0) as i64,
                b: h(1) as i64,
            },
            PatternFamily::PowFloat64 => Operands::Pow {
                base: 0.9 + 0.3 * unit_f64(h(0)),
                exp: 1 + (h(1) % 64) as i32,
            },
            PatternFamily::FmaFloat64 => {
                let scaled = |u: u64, e: u64| (2.0 * unit_f64(u) - 1.0) * 2f64.powi((e % 41) as i32 - 20);
                let (h0, h1, h2, h3) = (h(0), h(1), h(2), h(3));
                Operands::Fma {
                    a: scaled(h0, h3),
                    b: scaled(h1, h3 >> 8),
                    c: scaled(h2, h3 >> 16),
                }
            }
            PatternFamily::ShiftXorInt64 => Operands::ShiftXor {
                a: h(0) as i64,
                shift: (h(1) % 64) as u32,
                b: h(2) as i64,
            },
        }
    }
}

/// A computed result, compared bitwise.
#[derive(Clone, Copy, Debug)]
pub enum Value {
    Int(i64),
    Float(f64),
}

impl Value {
    pub fn bits(&self) -> u64 {
        match *self {
            Value::Int(v) => v as u64,
            Value::Float(v) => v.to_bits(),
        }
    }

    pub fn with_bits(&self, bits: u64) -> Value {
        match self {
            Value::Int(_) => Value::Int(bits as i64),
            Value::Float(_) => Value::Float(f64::from_bits(bits)),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        matches!(
            (self, other),
            (Value::Int(_), Value::Int(_)) | (Value::Float(_), Value::Float(_))
        ) && self.bits() == other.bits()
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(3))?;
        match *self {
            Value::Int(v) => {
                m.serialize_entry("kind", "int")?;
                m.serialize_entry("bits", &format!("{:#018x}", v as u64))?;
                m.serialize_entry("value", &v)?;
            }
            Value::Float(v) => {
                m.serialize_entry("kind", "float")?;
                m.serialize_entry("bits", &format!("{:#018x}", v.to_bits()))?;
                m.serialize_entry("value", &(v.is_finite().then_some(v)))?;
            }
        }
        m.end()
    }
}

// Double-double helpers. `two_prod` is exact because fused multiply-add
// rounds once.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn dd_mul(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let (p, e) = two_prod(x.0, y.0);
    let e = e + (x.0 * y.1 + x.1 * y.0);
    fast_two_sum(p, e)
}

/// `base^exp` carried in double-double (about 100 bits) and rounded once to
/// the nearest double, right-to-left binary exponentiation.
pub fn pow_correctly_rounded(base: f64, exp: u32) -> f64 {
    let mut acc = (1.0, 0.0);
    let mut sq = (base, 0.0);
    let mut n = exp;
    while n > 0 {
        if n & 1 == 1 {
            acc = dd_mul(acc, sq);
        }
        n >>= 1;
        if n > 0 {
            sq = dd_mul(sq, sq);
        }
    }
    acc.0 + acc.1
}

/// Same value as [`pow_correctly_rounded`] via left-to-right exponentiation;
/// a second formulation for the host self-check.
pub fn pow_left_to_right(base: f64, exp: u32) -> f64 {
    if exp == 0 {
        return 1.0;
    }
    let top = 31 - exp.leading_zeros();
    let mut acc = (base, 0.0);
    for bit in (0..top).rev() {
        acc = dd_mul(acc, acc);
        if (exp >> bit) & 1 == 1 {
            acc = dd_mul(acc, (base, 0.0));
        }
    }
    acc.0 + acc.1
}

/// Golden result for one operand tuple: wrapping 64-bit integer arithmetic or
/// round-to-nearest-even double precision.
pub fn reference_eval(ops: &Operands) -> Result<Value> {
    match *ops {
        Operands::Mul { a, b } => Ok(Value::Int(a.wrapping_mul(b))),
        Operands::Pow { base, exp } => {
            if !base.is_finite() {
                return Err(Error::InvalidOperands(format!("non-finite base {base}")));
            }
            if exp < 0 {
                return Err(Error::InvalidOperands(format!("negative exponent {exp}")));
            }
            Ok(Value::Float(pow_correctly_rounded(base, exp as u32)))
        }
        Operands::Fma { a, b, c } => {
            if !(a.is_finite() && b.is_finite() && c.is_finite()) {
                return Err(Error::InvalidOperands("non-finite fma operand".into()));
            }
            Ok(Value::Float(a.mul_add(b, c)))
        }
        Operands::ShiftXor { a, shift, b } => Ok(Value::Int(a.rotate_left(shift) ^ b)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Operand tuples derived from `(seed, family, index)`.
    Seeded { seed: u64, iterations: u32 },
    /// A hand-crafted sequence targeting a known signature.
    Explicit(Vec<Operands>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestPattern {
    pub pattern_id: u64,
    pub family: PatternFamily,
    pub schedule: Schedule,
    pub slice_budget_ms: f64,
}

pub fn generate_pattern(seed: u64, family: PatternFamily, iterations: u32, slice_budget_ms: f64) -> Result<TestPattern> {
    if iterations == 0 {
        return Err(Error::InvalidProfile("pattern needs at least one iteration".into()));
    }
    if !(slice_budget_ms > 0.0) {
        return Err(Error::InvalidProfile("slice budget must be positive".into()));
    }
    Ok(TestPattern {
        pattern_id: keyed_hash(seed, &[family.word(), iterations as u64]) >> 1,
        family,
        schedule: Schedule::Seeded { seed, iterations },
        slice_budget_ms,
    })
}

impl TestPattern {
    pub fn explicit(pattern_id: u64, operands: Vec<Operands>, slice_budget_ms: f64) -> Result<TestPattern> {
        let family = operands
            .first()
            .ok_or_else(|| Error::InvalidProfile("explicit pattern is empty".into()))?
            .family();
        if operands.iter().any(|o| o.family() != family) {
            return Err(Error::InvalidProfile("explicit pattern mixes families".into()));
        }
        Ok(TestPattern {
            pattern_id,
            family,
            schedule: Schedule::Explicit(operands),
            slice_budget_ms,
        })
    }

    pub fn iterations(&self) -> u32 {
        match &self.schedule {
            Schedule::Seeded { iterations, .. } => *iterations,
            Schedule::Explicit(v) => v.len() as u32,
        }
    }

    pub fn operands(&self, index: u32) -> Operands {
        match &self.schedule {
            Schedule::Seeded { seed, .. } => Operands::seeded(*seed, self.family, index as u64),
            Schedule::Explicit(v) => v[index as usize],
        }
    }

    pub fn schedule_vec(&self) -> Vec<Operands> {
        (0..self.iterations()).map(|i| self.operands(i)).collect()
    }

    /// Same shape, fresh operands: used to randomize each execution.
    pub fn reseeded(&self, seed: u64) -> TestPattern {
        match self.schedule {
            Schedule::Seeded { iterations, .. } => TestPattern {
                pattern_id: self.pattern_id,
                family: self.family,
                schedule: Schedule::Seeded { seed, iterations },
                slice_budget_ms: self.slice_budget_ms,
            },
            Schedule::Explicit(_) => self.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    Scanner,
    Ripple,
}

impl ProfileMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileMode::Scanner => "scanner",
            ProfileMode::Ripple => "ripple",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestProfile {
    pub name: String,
    pub mode: ProfileMode,
    /// Scanner: whole session length. Ripple: one slice.
    pub test_duration_s: f64,
    pub patterns: Vec<TestPattern>,
    /// Executions per machine per day.
    pub trials_per_day: f64,
}

impl TestProfile {
    /// Iterations in one execution: a scanner session runs every pattern, a
    /// ripple slice runs one pattern (round-robin), so the mean applies.
    pub fn iterations_per_execution(&self) -> u64 {
        let total: u64 = self.patterns.iter().map(|p| p.iterations() as u64).sum();
        match self.mode {
            ProfileMode::Scanner => total,
            ProfileMode::Ripple if self.patterns.is_empty() => 0,
            ProfileMode::Ripple => total / self.patterns.len() as u64,
        }
    }

    pub fn execution_seconds(&self) -> f64 {
        self.test_duration_s
    }

    /// Expected per-machine trial count over a horizon.
    pub fn trials_over(&self, horizon_days: f64) -> f64 {
        self.trials_per_day * horizon_days * self.iterations_per_execution() as f64
    }

    /// Wall time of one pattern execution in ms.
    pub fn pattern_duration_ms(&self, pattern: &TestPattern) -> f64 {
        match self.mode {
            ProfileMode::Scanner => self.test_duration_s * 1000.0 / self.patterns.len().max(1) as f64,
            ProfileMode::Ripple => pattern.slice_budget_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() || self.iterations_per_execution() == 0 {
            return Err(Error::InvalidProfile(format!("profile `{}` has no iterations", self.name)));
        }
        if !(self.test_duration_s > 0.0) {
            return Err(Error::InvalidProfile(format!("profile `{}` needs a positive duration", self.name)));
        }
        if self.mode == ProfileMode::Ripple && self.patterns.iter().any(|p| p.slice_budget_ms > 1000.0) {
            return Err(Error::InvalidProfile(format!("ripple profile `{}` slice exceeds 1000 ms", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum Outcome {
    Pass,
    Mismatch {
        iteration_index: u32,
        operands: Operands,
        expected: Value,
        observed: Value,
    },
}

impl Outcome {
    pub fn is_mismatch(&self) -> bool {
        matches!(self, Outcome::Mismatch { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestExecutionRecord {
    pub machine_id: MachineId,
    pub pattern_id: u64,
    pub mode: ProfileMode,
    pub start_time: SimTime,
    pub duration_ms: f64,
    pub outcome: Outcome,
}

/// Gate inputs for one trial.
#[derive(Clone, Copy, Debug)]
pub struct TrialConditions {
    pub context: TrialContext,
    pub continuous_test_seconds: f64,
    /// Milliseconds since the last workload-to-test switch, if any happened.
    pub since_transition_ms: Option<f64>,
    pub now_days: f64,
}

/// Where a computation runs. `Workload` models live application code: the
/// transition gate is open and the soak gate closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialContext {
    Scanner,
    Ripple,
    Workload,
}

impl From<ProfileMode> for TrialContext {
    fn from(m: ProfileMode) -> Self {
        match m {
            ProfileMode::Scanner => TrialContext::Scanner,
            ProfileMode::Ripple => TrialContext::Ripple,
        }
    }
}

/// Manifestation probability of `spec` on `machine` under explicit trial conditions.
pub fn manifest_probability_at(spec: &DefectSpec, machine: &Machine, cond: &TrialConditions) -> f64 {
    let g_soak = match cond.context {
        _ if !spec.is_soak_gated() => 1.0,
        TrialContext::Workload => 0.0,
        _ if cond.continuous_test_seconds >= spec.soak_min_s => 1.0,
        _ => 0.0,
    };
    let g_trans = match (spec.transition_window_ms, cond.context) {
        (None, _) | (Some(_), TrialContext::Workload) => 1.0,
        (Some(w), TrialContext::Ripple) => match cond.since_transition_ms {
            Some(dt) if dt <= w => 1.0,
            _ => 0.0,
        },
        (Some(_), TrialContext::Scanner) => 0.0,
    };
    if g_soak == 0.0 || g_trans == 0.0 {
        return 0.0;
    }
    let age = machine.age_days + cond.now_days;
    let g_age = match spec.aging_onset_days {
        None => 1.0,
        Some(onset) if age < onset => 0.0,
        Some(_) if spec.aging_ramp_days <= 0.0 => 1.0,
        Some(onset) => ((age - onset) / spec.aging_ramp_days).min(1.0),
    };
    let (op, nom) = (&machine.op_point, &machine.nominal);
    let electrical = 1.0
        + spec.elec_alpha * (op.voltage_v - nom.voltage_v).abs() / nom.voltage_v
        + spec.elec_beta * (op.frequency_ghz - nom.frequency_ghz).abs() / nom.frequency_ghz;
    let t = machine.env.temperature_c;
    let thermal = if t <= spec.thermal_threshold_c {
        1.0
    } else {
        1.0 + spec.thermal_gamma * (t - spec.thermal_threshold_c)
    };
    (spec.base_prob * electrical * thermal * g_age).clamp(0.0, 1.0)
}

/// Manifestation probability using the machine's current soak and
/// transition state.
pub fn manifest_probability(spec: &DefectSpec, machine: &Machine, mode: ProfileMode, now: SimTime) -> f64 {
    let cond = TrialConditions {
        context: mode.into(),
        continuous_test_seconds: machine.continuous_test_seconds,
        since_transition_ms: machine
            .last_transition_ms
            .filter(|t| *t <= now)
            .map(|t| (now.ms() - t.ms()) as f64),
        now_days: now.days(),
    };
    manifest_probability_at(spec, machine, &cond)
}

/// Probability used for application exposure accrual.
pub fn workload_probability(spec: &DefectSpec, machine: &Machine, now: SimTime) -> f64 {
    let cond = TrialConditions {
        context: TrialContext::Workload,
        continuous_test_seconds: 0.0,
        since_transition_ms: None,
        now_days: now.days(),
    };
    manifest_probability_at(spec, machine, &cond)
}

pub fn in_faulty_subset(spec: &DefectSpec, ops: &Operands) -> bool {
    below_fraction(keyed_hash(spec.subset_seed, &ops.words()), spec.faulty_fraction)
}

/// Run one pattern on `machine` starting at `now`.
///
/// Scanner executions accumulate soak time on the machine; a ripple slice
/// marks a workload-to-test switch at `now` and soaks only for its own
/// length. The first mismatch ends the execution.
pub fn execute_pattern<R: Rng + ?Sized>(
    machine: &mut Machine,
    pattern: &TestPattern,
    profile: &TestProfile,
    now: SimTime,
    rng: &mut R,
) -> Result<TestExecutionRecord> {
    let mode = profile.mode;
    let permitted = match mode {
        ProfileMode::Scanner => matches!(machine.state, MachineState::TestingScanner | MachineState::Quarantine),
        ProfileMode::Ripple => machine.state == MachineState::Production && machine.cores_busy < machine.core_count,
    };
    if !permitted {
        return Err(Error::ModeStateMismatch {
            machine: machine.id,
            state: machine.state,
            mode: mode.as_str(),
        });
    }
    let duration_ms = profile.pattern_duration_ms(pattern);
    let start_soak = match mode {
        ProfileMode::Scanner => machine.continuous_test_seconds,
        ProfileMode::Ripple => {
            machine.last_transition_ms = Some(now);
            0.0
        }
    };
    let since_transition_base = machine
        .last_transition_ms
        .filter(|t| *t <= now)
        .map(|t| (now.ms() - t.ms()) as f64);
    let n = pattern.iterations();
    let context = TrialContext::from(mode);
    let cond_at = |offset_ms: f64| TrialConditions {
        context,
        continuous_test_seconds: start_soak + offset_ms / 1000.0,
        since_transition_ms: since_transition_base.map(|b| b + offset_ms),
        now_days: (now.ms() as f64 + offset_ms) / crate::model::MS_PER_DAY as f64,
    };

    // Gates are monotone over an execution (soak only grows, time since the
    // switch only grows), so the best case is soak at the end and transition
    // at the start. If even that cannot manifest, no iteration can.
    let live_defect = machine.defect.as_ref().filter(|spec| {
        let best = TrialConditions {
            continuous_test_seconds: start_soak + duration_ms / 1000.0,
            since_transition_ms: since_transition_base,
            ..cond_at(duration_ms)
        };
        manifest_probability_at(spec, machine, &best) > 0.0
    });

    // A result can only differ from the golden value on an in-subset operand
    // that manifests, so the golden value is computed only there.
    let mut outcome = Outcome::Pass;
    let mut elapsed_ms = duration_ms;
    if let Some(spec) = live_defect {
        for i in 0..n {
            let ops = pattern.operands(i);
            if !in_faulty_subset(spec, &ops) {
                continue;
            }
            let offset_ms = duration_ms * (i as f64 + 1.0) / n as f64;
            let p = manifest_probability_at(spec, machine, &cond_at(offset_ms));
            if p <= 0.0 || rng.gen::<f64>() >= p {
                continue;
            }
            let expected = reference_eval(&ops)?;
            let observed = spec.corruption.apply(expected);
            if observed != expected {
                outcome = Outcome::Mismatch {
                    iteration_index: i,
                    operands: ops,
                    expected,
                    observed,
                };
                elapsed_ms = offset_ms;
                break;
            }
        }
    }
    machine.continuous_test_seconds = start_soak + elapsed_ms / 1000.0;
    Ok(TestExecutionRecord {
        machine_id: machine.id,
        pattern_id: pattern.pattern_id,
        mode,
        start_time: now,
        duration_ms: elapsed_ms,
        outcome,
    })
}
