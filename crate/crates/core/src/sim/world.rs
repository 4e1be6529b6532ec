//! Exogenous dynamics: maintenance arrivals, datacenter temperature, hotspots
//! and the diurnal workload.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::Exp;

use crate::config::{DatacenterConfig, EnvironmentConfig, Range, SimConfig, WorkloadConfig};
use crate::hash::{keyed_hash, splitmix64, tag, unit_f64};
use crate::model::{MachineId, MaintenanceKind, SimTime, MS_PER_HOUR};
use crate::rng::{stream, Purpose, Stream};

use super::event::MaintenanceEvent;

/// Per-machine maintenance arrivals: exponential gaps, then kind, then window
/// length, all from the machine's own stream. Ends at the horizon.
pub struct MaintenanceGen {
    rng: Stream,
    machine_id: MachineId,
    gap: Option<Exp<f64>>,
    kinds: Vec<(MaintenanceKind, Range)>,
    pick: Option<WeightedIndex<f64>>,
    t_days: f64,
    horizon_days: f64,
}

pub fn generate_maintenance(cfg: &SimConfig, seed: u64, machine_id: MachineId) -> MaintenanceGen {
    let m = &cfg.maintenance;
    let rate = cfg.maintenance_rate_per_day();
    let kinds: Vec<(MaintenanceKind, Range)> = m
        .kind_weights
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .filter_map(|(k, _)| m.window_s.get(k).map(|r| (*k, *r)))
        .collect();
    let weights: Vec<f64> = kinds.iter().map(|(k, _)| m.kind_weights[k]).collect();
    MaintenanceGen {
        rng: stream(seed, machine_id, Purpose::Maintenance),
        machine_id,
        gap: (rate > 0.0).then(|| Exp::new(rate).expect("positive rate")),
        pick: WeightedIndex::new(weights).ok(),
        kinds,
        t_days: 0.0,
        horizon_days: cfg.horizon_days,
    }
}

impl Iterator for MaintenanceGen {
    type Item = (SimTime, MaintenanceEvent);

    fn next(&mut self) -> Option<Self::Item> {
        let gap = self.gap.as_ref()?;
        let pick = self.pick.as_ref()?;
        self.t_days += gap.sample(&mut self.rng);
        let (kind, range) = self.kinds[pick.sample(&mut self.rng)];
        let window_s = if range[0] < range[1] {
            self.rng.gen_range(range[0]..range[1])
        } else {
            range[0]
        };
        if self.t_days >= self.horizon_days {
            self.gap = None;
            return None;
        }
        Some((
            SimTime::from_days(self.t_days),
            MaintenanceEvent {
                machine_id: self.machine_id,
                kind,
                window_s,
            },
        ))
    }
}

/// Datacenter air temperature at `now` for a noise draw `u` in [-1, 1].
pub fn datacenter_temperature(dc: &DatacenterConfig, env: &EnvironmentConfig, now: SimTime, u: f64) -> f64 {
    let phase = std::f64::consts::TAU * (now.days() - dc.seasonal_phase_days) / env.seasonal_period_days;
    dc.baseline_c + dc.seasonal_amplitude_c * phase.sin() + dc.noise_c * u
}

pub fn step_environment<R: Rng + ?Sized>(dc: &DatacenterConfig, env: &EnvironmentConfig, rng: &mut R, now: SimTime) -> f64 {
    let u = rng.gen_range(-1.0..=1.0);
    datacenter_temperature(dc, env, now, u)
}

/// Rarely move a machine to a new hotspot factor.
pub fn redraw_hotspot<R: Rng + ?Sized>(current: f64, env: &EnvironmentConfig, rng: &mut R) -> f64 {
    if rng.gen::<f64>() < env.hotspot_redraw_prob {
        let [lo, hi] = env.hotspot_range;
        if lo < hi {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    } else {
        current
    }
}

/// Busy cores per machine-hour: a diurnal curve with a per-machine phase plus
/// keyed noise. A pure function of `(seed, machine, hour)`.
#[derive(Clone, Debug)]
pub struct WorkloadModel {
    seed: u64,
    base: f64,
    amplitude: f64,
    noise: f64,
    curve: [f64; 24],
}

impl WorkloadModel {
    pub fn new(cfg: &WorkloadConfig, global_seed: u64) -> Self {
        let mut curve = [0.0; 24];
        for (h, c) in curve.iter_mut().enumerate() {
            *c = (std::f64::consts::TAU * h as f64 / 24.0).sin();
        }
        WorkloadModel {
            seed: splitmix64(global_seed ^ tag("workload")),
            base: cfg.base_utilization,
            amplitude: cfg.diurnal_amplitude,
            noise: cfg.noise,
            curve,
        }
    }

    pub fn phase(&self, machine: MachineId) -> u64 {
        keyed_hash(self.seed, &[machine, tag("phase")]) % 24
    }

    fn deterministic(&self, phase: u64, hour: u64) -> f64 {
        self.base + self.amplitude * self.curve[((hour + phase) % 24) as usize]
    }

    pub fn utilization(&self, machine: MachineId, hour: u64) -> f64 {
        let u = unit_f64(keyed_hash(self.seed, &[machine, hour]));
        (self.deterministic(self.phase(machine), hour) + self.noise * (2.0 * u - 1.0)).clamp(0.0, 1.0)
    }

    pub fn busy_cores(&self, machine: MachineId, core_count: u32, hour: u64) -> u32 {
        ((self.utilization(machine, hour) * core_count as f64).round() as u32).min(core_count)
    }

    /// Upper bound on busy cores for the hour, without the noise draw.
    pub fn busy_cores_bound(&self, phase: u64, core_count: u32, hour: u64) -> u32 {
        let u = (self.deterministic(phase, hour) + self.noise).clamp(0.0, 1.0);
        ((u * core_count as f64).round() as u32).min(core_count)
    }
}

pub fn hour_index(t: SimTime) -> u64 {
    t.ms() / MS_PER_HOUR
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dc(amplitude: f64, noise: f64) -> DatacenterConfig {
        DatacenterConfig {
            name: "x".into(),
            baseline_c: 25.0,
            seasonal_amplitude_c: amplitude,
            seasonal_phase_days: 0.0,
            noise_c: noise,
            humidity_pct: 40.0,
        }
    }

    #[test]
    fn flat_climate_is_constant() {
        let env = EnvironmentConfig::default();
        let mut rng = stream(1, 0, Purpose::Datacenter);
        let d = dc(0.0, 0.0);
        for h in 0..1000 {
            assert_eq!(step_environment(&d, &env, &mut rng, SimTime(h * 6 * MS_PER_HOUR)), 25.0);
        }
    }

    #[test]
    fn seasonal_range_is_twice_amplitude() {
        let env = EnvironmentConfig::default();
        let d = dc(5.0, 0.0);
        let temps: Vec<f64> =
            (0..=365 * 4).map(|q| datacenter_temperature(&d, &env, SimTime::from_days(q as f64 / 4.0), 0.0)).collect();
        let max = temps.iter().cloned().fold(f64::MIN, f64::max);
        let min = temps.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - min - 10.0).abs() < 1e-3, "{}", max - min);
    }

    #[test]
    fn disabled_maintenance_yields_nothing() {
        let mut cfg = SimConfig::with_fleet(1);
        cfg.maintenance.mean_interarrival_days = None;
        assert_eq!(generate_maintenance(&cfg, 1, 0).count(), 0);
    }

    #[test]
    fn arrivals_stay_inside_horizon_and_windows_inside_ranges() {
        let cfg = SimConfig::with_fleet(1);
        for id in 0..200 {
            let mut last = SimTime::ZERO;
            for (t, ev) in generate_maintenance(&cfg, 4, id) {
                assert!(t >= last && t.days() < cfg.horizon_days);
                let r = cfg.maintenance.window_s[&ev.kind];
                assert!(ev.window_s >= r[0] && ev.window_s <= r[1]);
                last = t;
            }
        }
    }

    #[test]
    fn workload_is_pure_and_bounded() {
        let w = WorkloadModel::new(&WorkloadConfig::default(), 3);
        for m in 0..20 {
            let phase = w.phase(m);
            for h in 0..100 {
                let b = w.busy_cores(m, 64, h);
                assert_eq!(b, w.busy_cores(m, 64, h));
                assert!(b <= w.busy_cores_bound(phase, 64, h));
            }
        }
    }
}
