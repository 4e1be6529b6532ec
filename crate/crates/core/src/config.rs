//! Scenario configuration: one JSON document, every field defaulted except
//! `fleet_size`, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DefectClass, Envelope, MaintenanceKind, OperatingPoint};
use crate::pattern::{generate_pattern, PatternFamily, ProfileMode, TestPattern, TestProfile};

/// Closed range `[lo, hi]`.
pub type Range = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub fleet_size: u64,
    #[serde(default = "defaults::defect_rate")]
    pub defect_rate: f64,
    #[serde(default = "defaults::defect_mix")]
    pub defect_mix: BTreeMap<DefectClass, f64>,
    #[serde(default)]
    pub defect_templates: DefectTemplates,
    #[serde(default = "defaults::horizon_days")]
    pub horizon_days: f64,
    #[serde(default = "defaults::global_seed")]
    pub global_seed: u64,
    #[serde(default)]
    pub maintenance: MaintenanceConfig,
    #[serde(default)]
    pub scanner: ScannerConfig,
    #[serde(default)]
    pub ripple: RippleConfig,
    #[serde(default = "defaults::datacenters")]
    pub datacenters: Vec<DatacenterConfig>,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default = "defaults::machine_classes")]
    pub machine_classes: Vec<MachineClassConfig>,
    #[serde(default)]
    pub coverage_mode: CoverageMode,
    #[serde(default)]
    pub log_level: LogLevel,
    #[serde(default)]
    pub ab_experiment: Option<AbExperimentConfig>,
}

/// How per-strategy detection sets are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// Each strategy also runs alone over the same fleet and random streams;
    /// its detection set comes from that isolated run.
    #[default]
    ShadowArms,
    /// Detection sets come from the combined run only.
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    /// Passing ripple slices are summarized in the tax ledger, not logged.
    #[default]
    Standard,
    /// Every machine is simulated slice by slice and every slice is logged.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectTemplate {
    /// Log-uniform.
    pub faulty_fraction: Range,
    /// Log-uniform.
    pub base_prob: Range,
    #[serde(default = "defaults::alpha")]
    pub elec_alpha: Range,
    #[serde(default = "defaults::beta")]
    pub elec_beta: Range,
    #[serde(default = "defaults::thermal_threshold")]
    pub thermal_threshold_c: Range,
    #[serde(default = "defaults::gamma")]
    pub thermal_gamma: Range,
    #[serde(default)]
    pub aging: Option<AgingTemplate>,
    #[serde(default)]
    pub soak_min_s: Option<Range>,
    #[serde(default)]
    pub transition_window_ms: Option<Range>,
    #[serde(default = "defaults::corruption_weights")]
    pub corruption_weights: CorruptionWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgingTemplate {
    /// Share of drawn defects that are aging-gated.
    pub probability: f64,
    pub onset_days: Range,
    pub ramp_days: Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionWeights {
    pub forced_constant: f64,
    pub bit_flip: f64,
    pub off_by_delta: f64,
}

/// One preset per class; any can be overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectTemplates {
    #[serde(default = "presets::both_detectable")]
    pub both_detectable: DefectTemplate,
    #[serde(default = "presets::scanner_only")]
    pub scanner_only: DefectTemplate,
    #[serde(default = "presets::ripple_transition")]
    pub ripple_transition: DefectTemplate,
    #[serde(default = "presets::ripple_repetition")]
    pub ripple_repetition: DefectTemplate,
}

impl Default for DefectTemplates {
    fn default() -> Self {
        DefectTemplates {
            both_detectable: presets::both_detectable(),
            scanner_only: presets::scanner_only(),
            ripple_transition: presets::ripple_transition(),
            ripple_repetition: presets::ripple_repetition(),
        }
    }
}

impl DefectTemplates {
    pub fn get(&self, class: DefectClass) -> &DefectTemplate {
        match class {
            DefectClass::BothDetectable => &self.both_detectable,
            DefectClass::ScannerOnly => &self.scanner_only,
            DefectClass::RippleTransition => &self.ripple_transition,
            DefectClass::RippleRepetition => &self.ripple_repetition,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaintenanceConfig {
    /// Per-machine mean time between maintenance windows; `null` disables maintenance.
    #[serde(default = "defaults::maintenance_mean")]
    pub mean_interarrival_days: Option<f64>,
    #[serde(default = "defaults::kind_weights")]
    pub kind_weights: BTreeMap<MaintenanceKind, f64>,
    /// Uniform window length range per kind, seconds.
    #[serde(default = "defaults::window_ranges")]
    pub window_s: BTreeMap<MaintenanceKind, Range>,
    #[serde(default = "defaults::drain_minutes")]
    pub drain_minutes: f64,
    #[serde(default = "defaults::undrain_minutes")]
    pub undrain_minutes: f64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        MaintenanceConfig {
            mean_interarrival_days: defaults::maintenance_mean(),
            kind_weights: defaults::kind_weights(),
            window_s: defaults::window_ranges(),
            drain_minutes: defaults::drain_minutes(),
            undrain_minutes: defaults::undrain_minutes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub family: PatternFamily,
    pub iterations: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerTier {
    pub name: String,
    pub min_window_s: f64,
    pub test_duration_s: f64,
    pub patterns: Vec<PatternSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    SoftRepair,
    ComponentSwap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairRule {
    pub on_repro: RepairKind,
    pub on_no_repro: RepairKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerConfig {
    #[serde(default = "defaults::scanner_enabled")]
    pub enabled: bool,
    #[serde(default = "defaults::tiers")]
    pub tiers: Vec<ScannerTier>,
    #[serde(default = "defaults::confirm_runs")]
    pub confirm_repro_runs: u32,
    #[serde(default = "defaults::repair_rule")]
    pub repair_rule: RepairRule,
    #[serde(default = "defaults::snapshot_fields")]
    pub snapshot_fields: Vec<SnapshotField>,
    #[serde(default = "defaults::confirm_delay_hours")]
    pub confirm_delay_hours: f64,
    #[serde(default = "defaults::soft_repair_hours")]
    pub soft_repair_hours: f64,
    #[serde(default = "defaults::swap_repair_hours")]
    pub swap_repair_hours: f64,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        ScannerConfig {
            enabled: defaults::scanner_enabled(),
            tiers: defaults::tiers(),
            confirm_repro_runs: defaults::confirm_runs(),
            repair_rule: defaults::repair_rule(),
            snapshot_fields: defaults::snapshot_fields(),
            confirm_delay_hours: defaults::confirm_delay_hours(),
            soft_repair_hours: defaults::soft_repair_hours(),
            swap_repair_hours: defaults::swap_repair_hours(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotField {
    OpPoint,
    Temperature,
    Humidity,
    Hotspot,
    Age,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RippleConfig {
    #[serde(default = "defaults::ripple_enabled")]
    pub enabled: bool,
    #[serde(default = "defaults::trials_per_day")]
    pub trials_per_day: f64,
    #[serde(default = "defaults::slice_ms")]
    pub slice_ms: f64,
    /// Patterns run round-robin, one per slice.
    #[serde(default = "defaults::ripple_patterns")]
    pub patterns: Vec<PatternSpec>,
    #[serde(default = "defaults::tax_threshold")]
    pub tax_threshold: f64,
    /// Per machine-class threshold overrides.
    #[serde(default)]
    pub tax_threshold_overrides: BTreeMap<String, f64>,
    /// Upper bound on concurrent test cores.
    #[serde(default = "defaults::max_test_cores")]
    pub max_test_cores: u32,
    /// Cores kept free for the workload before testing is allowed.
    #[serde(default)]
    pub core_headroom: u32,
    /// Delay before ripple starts fleetwide.
    #[serde(default)]
    pub rollout_delay_days: f64,
}

impl Default for RippleConfig {
    fn default() -> Self {
        RippleConfig {
            enabled: defaults::ripple_enabled(),
            trials_per_day: defaults::trials_per_day(),
            slice_ms: defaults::slice_ms(),
            patterns: defaults::ripple_patterns(),
            tax_threshold: defaults::tax_threshold(),
            tax_threshold_overrides: BTreeMap::new(),
            max_test_cores: defaults::max_test_cores(),
            core_headroom: 0,
            rollout_delay_days: 0.0,
        }
    }
}

impl RippleConfig {
    pub fn threshold_for(&self, machine_class: &str) -> f64 {
        self.tax_threshold_overrides
            .get(machine_class)
            .copied()
            .unwrap_or(self.tax_threshold)
    }

    /// Steady-state single-core tax implied by cadence and slice length.
    pub fn implied_tax(&self) -> f64 {
        self.trials_per_day * self.slice_ms / 86.4e6
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatacenterConfig {
    pub name: String,
    pub baseline_c: f64,
    #[serde(default = "defaults::seasonal_amplitude")]
    pub seasonal_amplitude_c: f64,
    #[serde(default)]
    pub seasonal_phase_days: f64,
    #[serde(default = "defaults::temp_noise")]
    pub noise_c: f64,
    #[serde(default = "defaults::humidity")]
    pub humidity_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    #[serde(default = "defaults::env_step_hours")]
    pub step_hours: f64,
    #[serde(default = "defaults::seasonal_period")]
    pub seasonal_period_days: f64,
    #[serde(default = "defaults::hotspot_prob")]
    pub hotspot_redraw_prob: f64,
    #[serde(default = "defaults::hotspot_range")]
    pub hotspot_range: Range,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            step_hours: defaults::env_step_hours(),
            seasonal_period_days: defaults::seasonal_period(),
            hotspot_redraw_prob: defaults::hotspot_prob(),
            hotspot_range: defaults::hotspot_range(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default = "defaults::base_util")]
    pub base_utilization: f64,
    #[serde(default = "defaults::diurnal_amp")]
    pub diurnal_amplitude: f64,
    #[serde(default = "defaults::util_noise")]
    pub noise: f64,
    #[serde(default = "defaults::ops_per_hour")]
    pub ops_per_hour: f64,
    #[serde(default = "defaults::exposure_hours")]
    pub exposure_check_hours: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            base_utilization: defaults::base_util(),
            diurnal_amplitude: defaults::diurnal_amp(),
            noise: defaults::util_noise(),
            ops_per_hour: defaults::ops_per_hour(),
            exposure_check_hours: defaults::exposure_hours(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineClassConfig {
    pub name: String,
    #[serde(default = "defaults::one")]
    pub weight: f64,
    #[serde(default = "defaults::core_count")]
    pub core_count: u32,
    #[serde(default = "defaults::envelope")]
    pub envelope: Envelope,
    /// Relative spread of per-machine operating points around nominal.
    #[serde(default = "defaults::op_spread")]
    pub op_spread: f64,
    #[serde(default = "defaults::max_age")]
    pub max_age_days: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbExperimentConfig {
    /// The first `subset_size` machines (by id) take part.
    pub subset_size: u64,
    /// Restrict the subset to defective machines.
    #[serde(default)]
    pub defective_only: bool,
    pub variant_a: Vec<PatternSpec>,
    pub variant_b: Vec<PatternSpec>,
    #[serde(default = "defaults::global_seed")]
    pub experiment_seed: u64,
    pub duration_days: f64,
}

mod defaults {
    use super::*;

    pub fn one() -> f64 {
        1.0
    }
    pub fn defect_rate() -> f64 {
        0.001
    }
    pub fn defect_mix() -> BTreeMap<DefectClass, f64> {
        BTreeMap::from([
            (DefectClass::BothDetectable, 0.70),
            (DefectClass::ScannerOnly, 0.23),
            (DefectClass::RippleTransition, 0.035),
            (DefectClass::RippleRepetition, 0.035),
        ])
    }
    pub fn horizon_days() -> f64 {
        180.0
    }
    pub fn global_seed() -> u64 {
        1
    }
    pub fn alpha() -> Range {
        [0.0, 2.0]
    }
    pub fn beta() -> Range {
        [0.0, 1.0]
    }
    pub fn thermal_threshold() -> Range {
        [32.0, 40.0]
    }
    pub fn gamma() -> Range {
        [0.0, 0.05]
    }
    pub fn corruption_weights() -> CorruptionWeights {
        CorruptionWeights {
            forced_constant: 1.0,
            bit_flip: 2.0,
            off_by_delta: 1.0,
        }
    }
    pub fn maintenance_mean() -> Option<f64> {
        Some(45.0)
    }
    pub fn kind_weights() -> BTreeMap<MaintenanceKind, f64> {
        BTreeMap::from([
            (MaintenanceKind::FirmwareUpgrade, 0.35),
            (MaintenanceKind::KernelUpgrade, 0.35),
            (MaintenanceKind::Provisioning, 0.10),
            (MaintenanceKind::Repair, 0.20),
        ])
    }
    pub fn window_ranges() -> BTreeMap<MaintenanceKind, Range> {
        BTreeMap::from([
            (MaintenanceKind::FirmwareUpgrade, [600.0, 3600.0]),
            (MaintenanceKind::KernelUpgrade, [300.0, 1800.0]),
            (MaintenanceKind::Provisioning, [3600.0, 14400.0]),
            (MaintenanceKind::Repair, [1800.0, 7200.0]),
        ])
    }
    pub fn drain_minutes() -> f64 {
        30.0
    }
    pub fn undrain_minutes() -> f64 {
        10.0
    }
    pub fn scanner_enabled() -> bool {
        true
    }
    pub fn tiers() -> Vec<ScannerTier> {
        let fams = |n: usize, iterations: u32| {
            PatternFamily::ALL
                .iter()
                .cycle()
                .take(n)
                .map(|&family| PatternSpec { family, iterations })
                .collect()
        };
        vec![
            ScannerTier {
                name: "quick".into(),
                min_window_s: 60.0,
                test_duration_s: 60.0,
                patterns: fams(1, 500),
            },
            ScannerTier {
                name: "deep".into(),
                min_window_s: 600.0,
                test_duration_s: 300.0,
                patterns: fams(5, 500),
            },
        ]
    }
    pub fn confirm_runs() -> u32 {
        3
    }
    pub fn repair_rule() -> RepairRule {
        RepairRule {
            on_repro: RepairKind::ComponentSwap,
            on_no_repro: RepairKind::SoftRepair,
        }
    }
    pub fn snapshot_fields() -> Vec<SnapshotField> {
        vec![
            SnapshotField::OpPoint,
            SnapshotField::Temperature,
            SnapshotField::Hotspot,
            SnapshotField::Age,
        ]
    }
    pub fn confirm_delay_hours() -> f64 {
        2.0
    }
    pub fn soft_repair_hours() -> f64 {
        6.0
    }
    pub fn swap_repair_hours() -> f64 {
        48.0
    }
    pub fn ripple_enabled() -> bool {
        true
    }
    pub fn trials_per_day() -> f64 {
        40.0
    }
    pub fn slice_ms() -> f64 {
        40.0
    }
    pub fn ripple_patterns() -> Vec<PatternSpec> {
        PatternFamily::ALL
            .iter()
            .map(|&family| PatternSpec {
                family,
                iterations: 128,
            })
            .collect()
    }
    pub fn tax_threshold() -> f64 {
        0.01
    }
    pub fn max_test_cores() -> u32 {
        1
    }
    pub fn datacenters() -> Vec<DatacenterConfig> {
        [("dc-a", 22.0, 0.0), ("dc-b", 25.0, 60.0), ("dc-c", 28.0, 180.0)]
            .into_iter()
            .map(|(name, baseline_c, phase)| DatacenterConfig {
                name: name.into(),
                baseline_c,
                seasonal_amplitude_c: seasonal_amplitude(),
                seasonal_phase_days: phase,
                noise_c: temp_noise(),
                humidity_pct: humidity(),
            })
            .collect()
    }
    pub fn seasonal_amplitude() -> f64 {
        4.0
    }
    pub fn temp_noise() -> f64 {
        0.5
    }
    pub fn humidity() -> f64 {
        40.0
    }
    pub fn env_step_hours() -> f64 {
        6.0
    }
    pub fn seasonal_period() -> f64 {
        365.0
    }
    pub fn hotspot_prob() -> f64 {
        0.01
    }
    pub fn hotspot_range() -> Range {
        [1.0, 1.15]
    }
    pub fn base_util() -> f64 {
        0.6
    }
    pub fn diurnal_amp() -> f64 {
        0.25
    }
    pub fn util_noise() -> f64 {
        0.15
    }
    pub fn ops_per_hour() -> f64 {
        1e6
    }
    pub fn exposure_hours() -> f64 {
        1.0
    }
    pub fn core_count() -> u32 {
        64
    }
    pub fn envelope() -> Envelope {
        Envelope {
            min: OperatingPoint {
                frequency_ghz: 1.0,
                voltage_v: 0.6,
                current_a: 0.0,
            },
            max: OperatingPoint {
                frequency_ghz: 4.0,
                voltage_v: 1.3,
                current_a: 300.0,
            },
            nominal: OperatingPoint {
                frequency_ghz: 2.4,
                voltage_v: 0.9,
                current_a: 120.0,
            },
        }
    }
    pub fn op_spread() -> f64 {
        0.03
    }
    pub fn max_age() -> f64 {
        1095.0
    }
    pub fn machine_classes() -> Vec<MachineClassConfig> {
        vec![MachineClassConfig {
            name: "standard".into(),
            weight: 1.0,
            core_count: core_count(),
            envelope: envelope(),
            op_spread: op_spread(),
            max_age_days: max_age(),
        }]
    }
}

/// Built-in class templates, calibrated so the default scenario lands on the
/// reference coverage split.
pub mod presets {
    use super::*;

    fn base(faulty_fraction: Range, base_prob: Range) -> DefectTemplate {
        DefectTemplate {
            faulty_fraction,
            base_prob,
            elec_alpha: defaults::alpha(),
            elec_beta: defaults::beta(),
            thermal_threshold_c: defaults::thermal_threshold(),
            thermal_gamma: defaults::gamma(),
            aging: None,
            soak_min_s: None,
            transition_window_ms: None,
            corruption_weights: defaults::corruption_weights(),
        }
    }

    pub fn both_detectable() -> DefectTemplate {
        base([0.02, 0.1], [0.01, 0.05])
    }

    pub fn scanner_only() -> DefectTemplate {
        DefectTemplate {
            soak_min_s: Some([5.0, 45.0]),
            ..base([0.02, 0.1], [0.01, 0.05])
        }
    }

    pub fn ripple_transition() -> DefectTemplate {
        DefectTemplate {
            transition_window_ms: Some([200.0, 2000.0]),
            ..base([0.01, 0.05], [0.01, 0.05])
        }
    }

    pub fn ripple_repetition() -> DefectTemplate {
        base([0.002, 0.004], [0.003, 0.005])
    }
}

impl SimConfig {
    /// Defaults everywhere, given a fleet size.
    pub fn with_fleet(fleet_size: u64) -> SimConfig {
        serde_json::from_value(serde_json::json!({ "fleet_size": fleet_size })).expect("defaults deserialize")
    }

    /// The default scenario: 10,000 machines, 2% defective, 180 days.
    pub fn default_scenario() -> SimConfig {
        let mut c = SimConfig::with_fleet(10_000);
        c.defect_rate = 0.02;
        c
    }

    pub fn maintenance_rate_per_day(&self) -> f64 {
        match self.maintenance.mean_interarrival_days {
            Some(m) if m.is_finite() && m > 0.0 => 1.0 / m,
            _ => 0.0,
        }
    }

    fn build_patterns(specs: &[PatternSpec], seed_base: u64, budget_ms: f64) -> Result<Vec<TestPattern>> {
        specs
            .iter()
            .enumerate()
            .map(|(i, p)| generate_pattern(seed_base.wrapping_add(i as u64), p.family, p.iterations, budget_ms))
            .collect()
    }

    pub fn tier_profile(&self, tier: &ScannerTier) -> Result<TestProfile> {
        let per_pattern_ms = tier.test_duration_s * 1000.0 / tier.patterns.len().max(1) as f64;
        Ok(TestProfile {
            name: tier.name.clone(),
            mode: ProfileMode::Scanner,
            test_duration_s: tier.test_duration_s,
            patterns: Self::build_patterns(&tier.patterns, self.global_seed, per_pattern_ms)?,
            trials_per_day: self.maintenance_rate_per_day(),
        })
    }

    /// Scanner profiles, ascending by minimum window.
    pub fn scanner_profiles(&self) -> Result<Vec<(f64, TestProfile)>> {
        self.scanner
            .tiers
            .iter()
            .map(|t| Ok((t.min_window_s, self.tier_profile(t)?)))
            .collect()
    }

    /// Largest scanner tier: used for confirmation runs and as the scanner
    /// budget when classifying defects.
    pub fn scanner_deep_profile(&self) -> Result<TestProfile> {
        let tier = self
            .scanner
            .tiers
            .last()
            .ok_or_else(|| Error::validation("scanner.tiers", "at least one tier is required"))?;
        self.tier_profile(tier)
    }

    pub fn ripple_profile(&self) -> Result<TestProfile> {
        Ok(TestProfile {
            name: "ripple".into(),
            mode: ProfileMode::Ripple,
            test_duration_s: self.ripple.slice_ms / 1000.0,
            patterns: Self::build_patterns(&self.ripple.patterns, self.global_seed, self.ripple.slice_ms)?,
            trials_per_day: self.ripple.trials_per_day,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let v = |field: &str, reason: &str| Err(Error::validation(field, reason));
        if self.fleet_size == 0 {
            return v("fleet_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.defect_rate) {
            return v("defect_rate", "must lie in [0, 1)");
        }
        let mix_sum: f64 = self.defect_mix.values().sum();
        if (mix_sum - 1.0).abs() > 1e-9 || self.defect_mix.values().any(|f| *f < 0.0) {
            return v("defect_mix", &format!("fractions must be non-negative and sum to 1 (got {mix_sum})"));
        }
        if !(self.horizon_days > 0.0 && self.horizon_days.is_finite()) {
            return v("horizon_days", "must be positive and finite");
        }
        for class in DefectClass::ALL {
            validate_template(self.defect_templates.get(class), class)?;
        }

        let m = &self.maintenance;
        if let Some(mean) = m.mean_interarrival_days {
            if !(mean > 0.0) {
                return v("maintenance.mean_interarrival_days", "must be positive (or null to disable)");
            }
        }
        if m.kind_weights.values().any(|w| *w < 0.0) || m.kind_weights.values().sum::<f64>() <= 0.0 {
            return v("maintenance.kind_weights", "weights must be non-negative with a positive sum");
        }
        for (kind, w) in &m.kind_weights {
            if *w > 0.0 && !m.window_s.contains_key(kind) {
                return v("maintenance.window_s", &format!("missing window range for {kind:?}"));
            }
        }
        for r in m.window_s.values() {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return v("maintenance.window_s", "ranges need 0 < min <= max");
            }
        }
        if m.drain_minutes < 0.0 || m.undrain_minutes < 0.0 {
            return v("maintenance.drain_minutes", "must be non-negative");
        }

        let s = &self.scanner;
        if s.tiers.is_empty() {
            return v("scanner.tiers", "at least one tier is required");
        }
        if s.tiers.windows(2).any(|w| w[0].min_window_s >= w[1].min_window_s) {
            return v("scanner.tiers", "tiers must be sorted strictly ascending by min_window_s");
        }
        for t in &s.tiers {
            if t.patterns.is_empty() || t.patterns.iter().any(|p| p.iterations == 0) {
                return v("scanner.tiers", &format!("tier `{}` needs patterns with iterations >= 1", t.name));
            }
            if !(t.test_duration_s > 0.0 && t.test_duration_s <= t.min_window_s) {
                return v("scanner.tiers", &format!("tier `{}` test must fit its minimum window", t.name));
            }
        }
        let smallest_window = m
            .kind_weights
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .filter_map(|(k, _)| m.window_s.get(k).map(|r| r[0]))
            .fold(f64::INFINITY, f64::min);
        if s.tiers[0].min_window_s > smallest_window {
            return v("scanner.tiers", "lowest tier must fit the smallest maintenance window");
        }
        if s.confirm_repro_runs == 0 {
            return v("scanner.confirm_repro_runs", "must be at least 1");
        }

        let r = &self.ripple;
        if !(r.trials_per_day >= 0.0) {
            return v("ripple.trials_per_day", "must be non-negative");
        }
        if !(r.slice_ms > 0.0 && r.slice_ms <= 1000.0) {
            return v("ripple.slice_ms", "must lie in (0, 1000]");
        }
        if r.patterns.is_empty() || r.patterns.iter().any(|p| p.iterations == 0) {
            return v("ripple.patterns", "need at least one pattern with iterations >= 1");
        }
        if !(r.tax_threshold > 0.0 && r.tax_threshold <= 1.0) {
            return v("ripple.tax_threshold", "must lie in (0, 1]");
        }
        let min_threshold = r
            .tax_threshold_overrides
            .values()
            .copied()
            .fold(r.tax_threshold, f64::min);
        if r.implied_tax() > min_threshold {
            return v("ripple", "trials_per_day * slice_ms exceeds the tax threshold");
        }
        if r.max_test_cores == 0 {
            return v("ripple.max_test_cores", "must be at least 1");
        }
        if r.rollout_delay_days < 0.0 {
            return v("ripple.rollout_delay_days", "must be non-negative");
        }

        if self.datacenters.is_empty() {
            return v("datacenters", "at least one datacenter is required");
        }
        for dc in &self.datacenters {
            if !(0.0..=100.0).contains(&dc.humidity_pct) {
                return v("datacenters.humidity_pct", "must lie in [0, 100]");
            }
            if dc.seasonal_amplitude_c < 0.0 || dc.noise_c < 0.0 {
                return v("datacenters", "amplitude and noise must be non-negative");
            }
        }
        let e = &self.environment;
        if !(e.step_hours > 0.0 && e.seasonal_period_days > 0.0) {
            return v("environment", "step and seasonal period must be positive");
        }
        if !(0.0..=1.0).contains(&e.hotspot_redraw_prob) {
            return v("environment.hotspot_redraw_prob", "must lie in [0, 1]");
        }
        if !(e.hotspot_range[0] >= 1.0 && e.hotspot_range[0] <= e.hotspot_range[1]) {
            return v("environment.hotspot_range", "needs 1 <= min <= max");
        }
        let w = &self.workload;
        if !(w.exposure_check_hours > 0.0) || w.ops_per_hour < 0.0 || w.noise < 0.0 {
            return v("workload", "exposure cadence must be positive, ops and noise non-negative");
        }
        if self.machine_classes.is_empty() || self.machine_classes.iter().all(|c| c.weight <= 0.0) {
            return v("machine_classes", "need at least one class with positive weight");
        }
        for c in &self.machine_classes {
            if c.core_count == 0 {
                return v("machine_classes.core_count", "must be positive");
            }
            c.envelope.validate()?;
            if !(c.op_spread >= 0.0 && c.max_age_days >= 0.0) {
                return v("machine_classes", "op_spread and max_age_days must be non-negative");
            }
        }
        let (scanner, ripple) = (self.scanner_deep_profile()?, self.ripple_profile()?);
        for (&class, &share) in &self.defect_mix {
            let t = self.defect_templates.get(class);
            if self.defect_rate > 0.0 && share > 0.0 && !crate::fleet::template_can_produce(class, t, &scanner, &ripple, self.horizon_days)? {
                return Err(Error::validation(
                    format!("defect_mix.{class}"),
                    format!(
                        "the {class} template cannot produce that class over {} days; set its share to 0, lengthen the horizon or adjust the template",
                        self.horizon_days
                    ),
                ));
            }
        }
        if let Some(ab) = &self.ab_experiment {
            if ab.subset_size < 2 {
                return v("ab_experiment.subset_size", "needs at least two machines");
            }
            if ab.variant_a.is_empty() || ab.variant_b.is_empty() {
                return v("ab_experiment", "variants need at least one pattern");
            }
            if !(ab.duration_days > 0.0) {
                return v("ab_experiment.duration_days", "must be positive");
            }
        }
        Ok(())
    }
}

fn validate_template(t: &DefectTemplate, class: DefectClass) -> Result<()> {
    let field = format!("defect_templates.{class}");
    let ok_range = |r: &Range, lo: f64, hi: f64| r[0] <= r[1] && r[0] >= lo && r[1] <= hi;
    if !ok_range(&t.faulty_fraction, f64::MIN_POSITIVE, 1.0) || !ok_range(&t.base_prob, f64::MIN_POSITIVE, 1.0) {
        return Err(Error::validation(field, "faulty_fraction and base_prob ranges must lie in (0, 1]"));
    }
    if t.soak_min_s.is_some() && t.transition_window_ms.is_some() {
        return Err(Error::validation(field, "a template cannot be both soak- and transition-gated"));
    }
    let w = &t.corruption_weights;
    if w.forced_constant < 0.0 || w.bit_flip < 0.0 || w.off_by_delta < 0.0 || w.forced_constant + w.bit_flip + w.off_by_delta <= 0.0 {
        return Err(Error::validation(field, "corruption weights must be non-negative with a positive sum"));
    }
    Ok(())
}

/// Read, parse and validate a scenario file.
pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<SimConfig> {
    let cfg: SimConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write the fully resolved configuration next to the run outputs.
pub fn write_effective_config(cfg: &SimConfig, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("effective_config.json");
    let value = serde_json::to_value(cfg)?;
    std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults_and_echo() {
        let cfg = parse_config(r#"{"fleet_size": 1000}"#).unwrap();
        assert_eq!(cfg.defect_rate, 0.001);
        assert_eq!(cfg.horizon_days, 180.0);
        assert_eq!(cfg.maintenance.mean_interarrival_days, Some(45.0));
        assert_eq!(cfg.ripple.trials_per_day, 40.0);
        let dir = tempfile::tempdir().unwrap();
        let path = write_effective_config(&cfg, dir.path()).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_mix_names_field() {
        let err = parse_config(
            r#"{"fleet_size": 10, "defect_mix": {"both_detectable": 0.6, "scanner_only": 0.3}}"#,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Validation { field, .. } if field == "defect_mix"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = parse_config(r#"{"fleet_size": 10, "riple": {}}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(err.to_string().contains("riple"));
        let err = parse_config(r#"{"fleet_size": 10, "ripple": {"slice": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_config("{\n  \"fleet_size\": ,\n}").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn tax_invariant_enforced() {
        let mut cfg = SimConfig::with_fleet(10);
        cfg.ripple.trials_per_day = 1e6;
        cfg.ripple.slice_ms = 1000.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::with_fleet(10);
        cfg.ripple.slice_ms = 1500.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tier_rules() {
        let mut cfg = SimConfig::with_fleet(10);
        cfg.scanner.tiers.swap(0, 1);
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::with_fleet(10);
        cfg.scanner.tiers[0].min_window_s = 400.0;
        cfg.scanner.tiers[0].test_duration_s = 60.0;
        // Kernel windows start at 300 s.
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_file_matches_constructor() {
        let text = include_str!("../../../scenarios/default.json");
        assert_eq!(parse_config(text).unwrap(), SimConfig::default_scenario());
    }
}
