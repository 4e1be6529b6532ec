//! In-production orchestrator: millisecond slices next to the workload,
//! footprint-tax enforcement and shadow A/B experiments.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::config::{AbExperimentConfig, PatternSpec, RippleConfig, SimConfig};
use crate::error::{Error, Result};
use crate::hash::{keyed_hash, tag};
use crate::model::{Machine, MachineId, MachineState, SimTime, MS_PER_DAY, MS_PER_HOUR};
use crate::par::Exec;
use crate::pattern::{execute_pattern, generate_pattern, ProfileMode, TestExecutionRecord, TestProfile};
use crate::rng::{stream, Purpose};
use crate::sim::world::{hour_index, WorkloadModel};

/// Concurrent test cores allowed at the current load. Non-increasing in
/// `cores_busy`; zero once the machine is saturated.
pub fn descale(machine: &Machine, cfg: &RippleConfig) -> u32 {
    cores_testable(machine.core_count, machine.cores_busy, cfg)
}

pub fn cores_testable(core_count: u32, busy: u32, cfg: &RippleConfig) -> u32 {
    core_count
        .saturating_sub(busy)
        .saturating_sub(cfg.core_headroom)
        .min(cfg.max_test_cores)
}

/// Sliding 24 h account of test core-milliseconds on one machine.
#[derive(Clone, Debug, Default)]
pub struct TaxWindow {
    slices: VecDeque<(SimTime, f64)>,
    core_ms: f64,
}

impl TaxWindow {
    fn prune(&mut self, now: SimTime) {
        while let Some(&(t, c)) = self.slices.front() {
            if t.ms() + MS_PER_DAY > now.ms() {
                break;
            }
            self.slices.pop_front();
            self.core_ms -= c;
        }
        if self.slices.is_empty() {
            self.core_ms = 0.0;
        }
    }

    /// Tax over the trailing day.
    pub fn current(&mut self, now: SimTime, core_count: u32) -> f64 {
        self.prune(now);
        self.core_ms / (MS_PER_DAY as f64 * core_count as f64)
    }

    pub fn push(&mut self, start: SimTime, core_ms: f64) {
        self.slices.push_back((start, core_ms));
        self.core_ms += core_ms;
    }
}

/// Resolved ripple settings for one run.
#[derive(Clone, Debug)]
pub struct RipplePlan {
    pub cfg: RippleConfig,
    pub profile: TestProfile,
    pub rollout: SimTime,
    gap: Option<Exp<f64>>,
}

impl RipplePlan {
    pub fn from_config(cfg: &SimConfig) -> Result<Self> {
        let rate_per_ms = cfg.ripple.trials_per_day / MS_PER_DAY as f64;
        Ok(RipplePlan {
            cfg: cfg.ripple.clone(),
            profile: cfg.ripple_profile()?,
            rollout: SimTime::from_days(cfg.ripple.rollout_delay_days),
            gap: (rate_per_ms > 0.0).then(|| Exp::new(rate_per_ms).expect("positive rate")),
        })
    }

    /// Next slice arrival after `now` (Poisson process), if ripple runs at all.
    pub fn next_arrival<R: Rng + ?Sized>(&self, now: SimTime, rng: &mut R) -> Option<SimTime> {
        let gap = self.gap.as_ref()?.sample(rng);
        Some(now.plus_ms(gap.ceil().max(1.0) as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SliceOutcome {
    BeforeRollout,
    NotInProduction,
    /// No core free under the descale rule.
    NoFreeCore,
    /// The trailing-day tax already reached the threshold.
    TaxBudget,
    Ran { record: TestExecutionRecord, cores: u32 },
}

/// One due slice on `machine`. Runs the next round-robin pattern if the
/// machine is serving, a core is free and the tax budget allows it.
pub fn tick_schedule<R: Rng + ?Sized>(
    machine: &mut Machine,
    plan: &RipplePlan,
    tax: &mut TaxWindow,
    slice_index: u64,
    now: SimTime,
    rng: &mut R,
) -> Result<SliceOutcome> {
    if now < plan.rollout {
        return Ok(SliceOutcome::BeforeRollout);
    }
    if machine.state != MachineState::Production {
        return Ok(SliceOutcome::NotInProduction);
    }
    if tax.current(now, machine.core_count) >= plan.cfg.threshold_for(&machine.machine_class) {
        return Ok(SliceOutcome::TaxBudget);
    }
    let cores = descale(machine, &plan.cfg);
    if cores == 0 {
        return Ok(SliceOutcome::NoFreeCore);
    }
    let patterns = &plan.profile.patterns;
    let pattern = patterns[(slice_index % patterns.len() as u64) as usize].reseeded(rng.gen());
    let record = execute_pattern(machine, &pattern, &plan.profile, now, rng)?;
    tax.push(now, record.duration_ms * cores as f64);
    Ok(SliceOutcome::Ran { record, cores })
}

/// A test slice as seen by tax accounting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceSpan {
    pub start_ms: u64,
    pub duration_ms: f64,
    pub cores: u32,
}

/// Share of the machine's compute spent on slices inside `[from, to)`.
pub fn compute_tax(slices: &[SliceSpan], core_count: u32, from: u64, to: u64) -> f64 {
    assert!(to > from, "tax window must be non-empty");
    let used: f64 = slices
        .iter()
        .map(|s| {
            let s0 = s.start_ms as f64;
            let s1 = s0 + s.duration_ms;
            let overlap = (s1.min(to as f64) - s0.max(from as f64)).max(0.0);
            overlap * s.cores as f64
        })
        .sum();
    used / ((to - from) as f64 * core_count as f64)
}

/// Largest tax over any window of `window_ms`. Slices must be sorted by
/// start; the maximum is attained by a window starting at a slice start.
pub fn max_sliding_tax(slices: &[SliceSpan], core_count: u32, window_ms: u64) -> f64 {
    let mut best = 0.0f64;
    let mut hi = 0;
    let mut sum = 0.0;
    for lo in 0..slices.len() {
        let end = slices[lo].start_ms + window_ms;
        while hi < slices.len() && slices[hi].start_ms < end {
            sum += slices[hi].duration_ms * slices[hi].cores as f64;
            hi += 1;
        }
        best = best.max(sum);
        sum -= slices[lo].duration_ms * slices[lo].cores as f64;
    }
    best / (window_ms as f64 * core_count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum CohortId {
    A,
    B,
}

/// Cohort of a machine: a pure function of `(machine_id, experiment_seed)`.
pub fn cohort_of(machine_id: MachineId, experiment_seed: u64) -> CohortId {
    if keyed_hash(experiment_seed, &[machine_id, tag("cohort")]) & 1 == 0 {
        CohortId::A
    } else {
        CohortId::B
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortReport {
    pub cohort_id: CohortId,
    pub machine_ids: Vec<MachineId>,
    pub variant: Vec<PatternSpec>,
    pub machines: usize,
    pub defective: usize,
    pub detections: usize,
    pub slices: u64,
    /// Highest trailing-day tax seen on any machine of the cohort.
    pub max_tax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbReport {
    pub experiment_seed: u64,
    pub duration_days: f64,
    pub tax_threshold: f64,
    pub cohorts: Vec<CohortReport>,
    /// Both cohorts stayed within the tax threshold.
    pub verdict: &'static str,
}

struct MachineTrial {
    detected: bool,
    slices: u64,
    max_tax: f64,
}

/// Shadow A/B test of two pattern lists on a fleet subset. Each machine runs
/// its cohort's variant as a ripple-only replay, under the run's ripple
/// settings and workload, until the duration ends or it fails a slice.
pub fn run_shadow_experiment(
    cfg: &SimConfig,
    subset: &[Machine],
    ab: &AbExperimentConfig,
    exec: Exec,
) -> Result<AbReport> {
    if subset.len() < 2 {
        return Err(Error::validation("ab_experiment.subset_size", "needs at least two machines"));
    }
    let build = |specs: &[PatternSpec], salt: u64| -> Result<TestProfile> {
        let patterns = specs
            .iter()
            .enumerate()
            .map(|(i, p)| generate_pattern(ab.experiment_seed ^ salt ^ i as u64, p.family, p.iterations, cfg.ripple.slice_ms))
            .collect::<Result<Vec<_>>>()?;
        Ok(TestProfile {
            name: format!("variant-{salt}"),
            mode: ProfileMode::Ripple,
            test_duration_s: cfg.ripple.slice_ms / 1000.0,
            patterns,
            trials_per_day: cfg.ripple.trials_per_day,
        })
    };
    let profiles = [build(&ab.variant_a, 0xA)?, build(&ab.variant_b, 0xB)?];
    let workload = WorkloadModel::new(&cfg.workload, ab.experiment_seed);
    let horizon = SimTime::from_days(ab.duration_days);
    let theta = cfg.ripple.tax_threshold;

    let trials: Vec<Result<(CohortId, MachineId, bool, MachineTrial)>> = exec.map(subset.to_vec(), |mut m| {
        let cohort = cohort_of(m.id, ab.experiment_seed);
        let mut plan = RipplePlan::from_config(cfg)?;
        plan.profile = profiles[cohort as usize].clone();
        plan.rollout = SimTime::ZERO;
        m.state = MachineState::Production;
        let defective = m.defect.is_some();
        let mut rng = stream(ab.experiment_seed, m.id, Purpose::Shadow);
        let mut tax = TaxWindow::default();
        let mut out = MachineTrial {
            detected: false,
            slices: 0,
            max_tax: 0.0,
        };
        let mut now = SimTime::ZERO;
        let mut index = 0;
        while let Some(t) = plan.next_arrival(now, &mut rng) {
            if t >= horizon {
                break;
            }
            now = t;
            m.cores_busy = workload.busy_cores(m.id, m.core_count, hour_index(now));
            if let SliceOutcome::Ran { record, .. } = tick_schedule(&mut m, &plan, &mut tax, index, now, &mut rng)? {
                index += 1;
                out.slices += 1;
                out.max_tax = out.max_tax.max(tax.current(now, m.core_count));
                if record.outcome.is_mismatch() {
                    out.detected = true;
                    break;
                }
            }
        }
        Ok((cohort, m.id, defective, out))
    });

    let mut cohorts: Vec<CohortReport> = [(CohortId::A, &ab.variant_a), (CohortId::B, &ab.variant_b)]
        .into_iter()
        .map(|(cohort_id, v)| CohortReport {
            cohort_id,
            machine_ids: Vec::new(),
            variant: v.clone(),
            machines: 0,
            defective: 0,
            detections: 0,
            slices: 0,
            max_tax: 0.0,
        })
        .collect();
    for t in trials {
        let (cohort, id, defective, trial) = t?;
        let c = &mut cohorts[cohort as usize];
        c.machine_ids.push(id);
        c.machines += 1;
        c.defective += defective as usize;
        c.detections += trial.detected as usize;
        c.slices += trial.slices;
        c.max_tax = c.max_tax.max(trial.max_tax);
    }
    if cohorts[0].machine_ids.iter().any(|id| cohorts[1].machine_ids.contains(id)) {
        return Err(Error::Invariant("A/B cohorts overlap".into()));
    }
    let safe = cohorts.iter().all(|c| c.max_tax <= theta);
    Ok(AbReport {
        experiment_seed: ab.experiment_seed,
        duration_days: ab.duration_days,
        tax_threshold: theta,
        cohorts,
        verdict: if safe { "pass" } else { "fail" },
    })
}

/// Slices expected per machine per hour at the configured cadence.
pub fn slices_per_hour(cfg: &RippleConfig) -> f64 {
    cfg.trials_per_day * MS_PER_HOUR as f64 / MS_PER_DAY as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CorruptionKind, DefectSpec, OperatingPoint};
    use crate::pattern::PatternFamily;
    use proptest::prelude::{prop_assert, proptest};

    fn machine(busy: u32) -> Machine {
        let nominal = OperatingPoint {
            frequency_ghz: 2.4,
            voltage_v: 0.9,
            current_a: 120.0,
        };
        let mut m = Machine::new(0, nominal, 64);
        m.cores_busy = busy;
        m
    }

    #[test]
    fn descale_edges() {
        let mut cfg = RippleConfig::default();
        cfg.max_test_cores = 4;
        assert_eq!(descale(&machine(0), &cfg), 4);
        assert_eq!(descale(&machine(62), &cfg), 2);
        assert_eq!(descale(&machine(64), &cfg), 0);
    }

    proptest! {
        #[test]
        fn descale_is_non_increasing(max in 1u32..8, headroom in 0u32..4, busy in 0u32..64) {
            let cfg = RippleConfig { max_test_cores: max, core_headroom: headroom, ..RippleConfig::default() };
            prop_assert!(cores_testable(64, busy + 1, &cfg) <= cores_testable(64, busy, &cfg));
        }
    }

    #[test]
    fn saturated_machine_skips() {
        let cfg = SimConfig::with_fleet(1);
        let plan = RipplePlan::from_config(&cfg).unwrap();
        let mut m = machine(64);
        let mut rng = stream(1, 0, Purpose::RippleExec);
        let out = tick_schedule(&mut m, &plan, &mut TaxWindow::default(), 0, SimTime(5), &mut rng).unwrap();
        assert_eq!(out, SliceOutcome::NoFreeCore);
        m.state = MachineState::Repair;
        m.cores_busy = 0;
        let out = tick_schedule(&mut m, &plan, &mut TaxWindow::default(), 0, SimTime(5), &mut rng).unwrap();
        assert_eq!(out, SliceOutcome::NotInProduction);
    }

    #[test]
    fn slice_opens_transition_window() {
        let cfg = SimConfig::with_fleet(1);
        let plan = RipplePlan::from_config(&cfg).unwrap();
        let mut m = machine(10);
        let mut rng = stream(1, 0, Purpose::RippleExec);
        let out = tick_schedule(&mut m, &plan, &mut TaxWindow::default(), 3, SimTime(777), &mut rng).unwrap();
        assert!(matches!(out, SliceOutcome::Ran { cores: 1, .. }));
        assert_eq!(m.last_transition_ms, Some(SimTime(777)));
    }

    #[test]
    fn tax_arithmetic() {
        assert_eq!(compute_tax(&[], 64, 0, MS_PER_DAY), 0.0);
        let slices: Vec<SliceSpan> = (0..40)
            .map(|i| SliceSpan {
                start_ms: i * 2_000_000,
                duration_ms: 40.0,
                cores: 1,
            })
            .collect();
        let tax = compute_tax(&slices, 64, 0, MS_PER_DAY);
        assert!((tax - 2.8935185185185184e-7).abs() < 1e-15, "{tax}");
        assert!((max_sliding_tax(&slices, 64, MS_PER_DAY) - tax).abs() < 1e-18);
    }

    #[test]
    fn sliding_max_matches_brute_force() {
        let mut rng = stream(5, 0, Purpose::RippleArrivals);
        let mut t = 0;
        let slices: Vec<SliceSpan> = (0..300)
            .map(|_| {
                t += rng.gen_range(1..5_000_000u64);
                SliceSpan {
                    start_ms: t,
                    duration_ms: rng.gen_range(1.0..100.0),
                    cores: rng.gen_range(1..4),
                }
            })
            .collect();
        let fast = max_sliding_tax(&slices, 8, MS_PER_DAY);
        let brute = slices
            .iter()
            .map(|s| {
                let sum: f64 = slices
                    .iter()
                    .filter(|o| o.start_ms >= s.start_ms && o.start_ms < s.start_ms + MS_PER_DAY)
                    .map(|o| o.duration_ms * o.cores as f64)
                    .sum();
                sum / (MS_PER_DAY as f64 * 8.0)
            })
            .fold(0.0, f64::max);
        assert!((fast - brute).abs() < 1e-15);
    }

    #[test]
    fn tax_window_guard() {
        let mut cfg = SimConfig::with_fleet(1);
        cfg.ripple.tax_threshold = 1e-9;
        let plan = RipplePlan::from_config(&cfg).unwrap();
        let mut m = machine(0);
        let mut tax = TaxWindow::default();
        let mut rng = stream(1, 0, Purpose::RippleExec);
        let first = tick_schedule(&mut m, &plan, &mut tax, 0, SimTime(0), &mut rng).unwrap();
        assert!(matches!(first, SliceOutcome::Ran { .. }));
        let second = tick_schedule(&mut m, &plan, &mut tax, 1, SimTime(1000), &mut rng).unwrap();
        assert_eq!(second, SliceOutcome::TaxBudget);
        let later = tick_schedule(&mut m, &plan, &mut tax, 1, SimTime(MS_PER_DAY + 1), &mut rng).unwrap();
        assert!(matches!(later, SliceOutcome::Ran { .. }));
    }

    fn ab_fleet(n: u64) -> Vec<Machine> {
        (0..n)
            .map(|id| {
                let mut m = machine(0);
                m.id = id;
                m.with_defect(DefectSpec::simple(0.003, 0.004, id, CorruptionKind::BitFlip(2)))
            })
            .collect()
    }

    fn variant(iterations: u32) -> Vec<PatternSpec> {
        vec![PatternSpec {
            family: PatternFamily::MulInt64,
            iterations,
        }]
    }

    #[test]
    fn cohorts_are_deterministic_and_disjoint() {
        let cfg = SimConfig::with_fleet(1);
        let ab = AbExperimentConfig {
            subset_size: 40,
            defective_only: false,
            variant_a: variant(128),
            variant_b: variant(256),
            experiment_seed: 17,
            duration_days: 2.0,
        };
        let fleet = ab_fleet(40);
        let r1 = run_shadow_experiment(&cfg, &fleet, &ab, Exec::Sequential).unwrap();
        let r2 = run_shadow_experiment(&cfg, &fleet, &ab, Exec::Parallel).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.cohorts[0].machines + r1.cohorts[1].machines, 40);
        assert_eq!(r1.verdict, "pass");
        assert!(run_shadow_experiment(&cfg, &fleet[..1], &ab, Exec::Sequential).is_err());
    }
}
