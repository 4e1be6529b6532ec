//! Fleet construction: machine classes, placement, operating points, ages and
//! sampled defects.

use rand::distributions::WeightedIndex;
use rand::prelude::*;

use crate::config::{DefectTemplate, Range, SimConfig};
use crate::error::{Error, Result};
use crate::model::{classify_defect, CorruptionKind, DefectClass, DefectSpec, EnvironmentState, Machine, OperatingPoint};
use crate::pattern::TestProfile;
use crate::rng::{stream, Purpose};

/// Redraws allowed before a template is declared unable to produce its class.
pub const TEMPLATE_ATTEMPTS: u32 = 256;

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: Range) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, r: Range) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        uniform(rng, [r[0].ln(), r[1].ln()]).exp()
    }
}

/// One raw draw from a template, unclassified.
pub fn draw_defect<R: Rng + ?Sized>(t: &DefectTemplate, rng: &mut R) -> DefectSpec {
    let w = &t.corruption_weights;
    let corruption = match WeightedIndex::new([w.forced_constant, w.bit_flip, w.off_by_delta])
        .map(|d| d.sample(rng))
        .unwrap_or(1)
    {
        0 => CorruptionKind::ForcedConstant(rng.gen()),
        1 => CorruptionKind::BitFlip(rng.gen_range(0..64)),
        _ => {
            let d: i64 = rng.gen_range(1..=16);
            CorruptionKind::OffByDelta(if rng.gen() { d } else { -d })
        }
    };
    let mut spec = DefectSpec::simple(
        log_uniform(rng, t.faulty_fraction),
        log_uniform(rng, t.base_prob),
        rng.gen(),
        corruption,
    );
    spec.elec_alpha = uniform(rng, t.elec_alpha);
    spec.elec_beta = uniform(rng, t.elec_beta);
    spec.thermal_threshold_c = uniform(rng, t.thermal_threshold_c);
    spec.thermal_gamma = uniform(rng, t.thermal_gamma);
    if let Some(a) = &t.aging {
        if rng.gen::<f64>() < a.probability {
            spec.aging_onset_days = Some(uniform(rng, a.onset_days));
            spec.aging_ramp_days = uniform(rng, a.ramp_days);
        }
    }
    if let Some(s) = t.soak_min_s {
        spec.soak_min_s = uniform(rng, s);
    }
    if let Some(w) = t.transition_window_ms {
        spec.transition_window_ms = Some(uniform(rng, w));
    }
    spec
}

/// Draw from the class template until the draw classifies as `class`.
pub fn sample_defect<R: Rng + ?Sized>(
    class: DefectClass,
    t: &DefectTemplate,
    scanner: &TestProfile,
    ripple: &TestProfile,
    horizon_days: f64,
    rng: &mut R,
) -> Result<DefectSpec> {
    for _ in 0..TEMPLATE_ATTEMPTS {
        let spec = draw_defect(t, rng);
        spec.validate()?;
        if classify_defect(&spec, scanner, ripple, horizon_days)? == class {
            return Ok(spec);
        }
    }
    Err(Error::TemplateExhausted {
        class: class.to_string(),
        attempts: TEMPLATE_ATTEMPTS,
    })
}

/// Whether `t` can yield a defect of `class` at all: classifies a grid of
/// corner and interior points of the template's ranges. Classification only
/// looks at subset size, base probability and the gates, so the grid spans
/// those.
pub fn template_can_produce(
    class: DefectClass,
    t: &DefectTemplate,
    scanner: &TestProfile,
    ripple: &TestProfile,
    horizon_days: f64,
) -> Result<bool> {
    const STEPS: usize = 8;
    let grid = |r: Range, log: bool| -> Vec<f64> {
        (0..=STEPS)
            .map(|i| {
                let f = i as f64 / STEPS as f64;
                if log && r[0] > 0.0 {
                    (r[0].ln() + f * (r[1].ln() - r[0].ln())).exp()
                } else {
                    r[0] + f * (r[1] - r[0])
                }
            })
            .collect()
    };
    let soaks = t.soak_min_s.map(|r| grid(r, false)).unwrap_or_else(|| vec![0.0]);
    for &rho in &grid(t.faulty_fraction, true) {
        for &p in &grid(t.base_prob, true) {
            for &soak in &soaks {
                let mut spec = DefectSpec::simple(rho, p, 0, CorruptionKind::BitFlip(0));
                spec.soak_min_s = soak;
                spec.transition_window_ms = t.transition_window_ms.map(|w| w[0]);
                if classify_defect(&spec, scanner, ripple, horizon_days)? == class {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Build the fleet for `seed`. Machine `i` uses only its own stream, so the
/// fleet is identical however it is later simulated.
pub fn sample_fleet(cfg: &SimConfig, seed: u64) -> Result<Vec<Machine>> {
    let scanner = cfg.scanner_deep_profile()?;
    let ripple = cfg.ripple_profile()?;
    let class_pick = WeightedIndex::new(cfg.machine_classes.iter().map(|c| c.weight.max(0.0)))
        .map_err(|e| Error::validation("machine_classes", e.to_string()))?;
    let mix: Vec<(DefectClass, f64)> = cfg.defect_mix.iter().map(|(k, v)| (*k, *v)).collect();
    let mix_pick = WeightedIndex::new(mix.iter().map(|(_, f)| *f))
        .map_err(|e| Error::validation("defect_mix", e.to_string()))?;
    let dc_count = cfg.datacenters.len();

    (0..cfg.fleet_size)
        .map(|id| {
            let mut rng = stream(seed, id, Purpose::Fleet);
            let class = &cfg.machine_classes[class_pick.sample(&mut rng)];
            let datacenter = rng.gen_range(0..dc_count);
            let nominal = class.envelope.nominal;
            let mut jitter = |v: f64| v * (1.0 + class.op_spread * rng.gen_range(-1.0..=1.0));
            let op_point = class.envelope.clamp(OperatingPoint {
                frequency_ghz: jitter(nominal.frequency_ghz),
                voltage_v: jitter(nominal.voltage_v),
                current_a: jitter(nominal.current_a),
            });
            let dc = &cfg.datacenters[datacenter];
            let mut m = Machine::new(id, nominal, class.core_count);
            m.machine_class = class.name.clone();
            m.datacenter = datacenter as u32;
            m.op_point = op_point;
            m.env = EnvironmentState::new(dc.baseline_c, dc.humidity_pct, 1.0);
            m.age_days = uniform(&mut rng, [0.0, class.max_age_days]);
            if rng.gen::<f64>() < cfg.defect_rate {
                let dclass = mix[mix_pick.sample(&mut rng)].0;
                let spec = sample_defect(
                    dclass,
                    cfg.defect_templates.get(dclass),
                    &scanner,
                    &ripple,
                    cfg.horizon_days,
                    &mut rng,
                )?;
                m.defect = Some(spec);
                m.sampled_class = Some(dclass);
            }
            Ok(m)
        })
        .collect()
}
