use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::model::{MachineId, MaintenanceKind, SimTime};
use crate::scanner::SessionResult;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaintenanceEvent {
    pub machine_id: MachineId,
    pub kind: MaintenanceKind,
    pub window_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    MaintenanceArrival(MaintenanceEvent),
    DrainComplete(MaintenanceEvent),
    /// Maintenance work is done; the scanner takes the rest of the window.
    MaintenanceWorkDone(MaintenanceEvent),
    TestSliceDue,
    ScannerTestComplete(Box<SessionResult>),
    QuarantineConfirmDue,
    RepairComplete,
    UndrainComplete,
    EnvStep,
    WorkloadStep,
    ExposureCheck,
}

impl EventKind {
    /// Log tag.
    pub fn tag(&self) -> &'static str {
        match self {
            EventKind::MaintenanceArrival(_) => "maintenance_arrival",
            EventKind::DrainComplete(_) => "drain_complete",
            EventKind::MaintenanceWorkDone(_) => "scanner_test_start",
            EventKind::TestSliceDue => "ripple_slice",
            EventKind::ScannerTestComplete(_) => "scanner_test_complete",
            EventKind::QuarantineConfirmDue => "quarantine_confirm",
            EventKind::RepairComplete => "repair_done",
            EventKind::UndrainComplete => "undrain_complete",
            EventKind::EnvStep => "env_step",
            EventKind::WorkloadStep => "workload_step",
            EventKind::ExposureCheck => "exposure_check",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub machine_id: Option<MachineId>,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Min-queue on `(time, seq)`. Sequence numbers are assigned at scheduling
/// time, so the order is total.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: SimTime, kind: EventKind, machine_id: Option<MachineId>) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(SimEvent {
            time,
            seq,
            kind,
            machine_id,
        }));
        seq
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
