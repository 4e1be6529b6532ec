use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::model::{Machine, MachineId, MachineState, SimTime};
use crate::pattern::workload_probability;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExposureEntry {
    /// Corrupted application results emitted before the first quarantine.
    pub count: u64,
    pub hours: f64,
    pub detected_at: Option<SimTime>,
}

/// Application-level harm accrued by defective machines while serving
/// undetected. Accrual for a machine stops for good at its first quarantine.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExposureLedger {
    pub entries: BTreeMap<MachineId, ExposureEntry>,
}

impl ExposureLedger {
    pub fn mark_detected(&mut self, id: MachineId, at: SimTime) {
        let e = self.entries.entry(id).or_default();
        e.detected_at.get_or_insert(at);
    }

    pub fn is_halted(&self, id: MachineId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.detected_at.is_some())
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|e| e.count).sum()
    }
}

/// Mean corrupted results over `hours` of production.
pub fn exposure_mean(machine: &Machine, now: SimTime, hours: f64, ops_per_hour: f64) -> f64 {
    match &machine.defect {
        Some(spec) => ops_per_hour * hours * spec.faulty_fraction * workload_probability(spec, machine, now),
        None => 0.0,
    }
}

/// Accrue one check interval of exposure for `machine`. Returns the increment.
pub fn record_exposure<R: Rng + ?Sized>(
    ledger: &mut ExposureLedger,
    machine: &Machine,
    now: SimTime,
    hours: f64,
    ops_per_hour: f64,
    rng: &mut R,
) -> u64 {
    if machine.defect.is_none() || machine.state != MachineState::Production || ledger.is_halted(machine.id) {
        return 0;
    }
    let mean = exposure_mean(machine, now, hours, ops_per_hour);
    let n = match Poisson::new(mean) {
        Ok(d) => d.sample(rng) as u64,
        Err(_) => 0,
    };
    let e = ledger.entries.entry(machine.id).or_default();
    e.count += n;
    e.hours += hours;
    n
}
