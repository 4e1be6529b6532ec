//! Real-host smoke run of the pattern engine.
//!
//! Every golden reference is recomputed on this machine through a second,
//! independent route: 128-bit integer arithmetic for the integer families and
//! exact big-integer arithmetic rounded once to nearest-even for the float
//! families. A disagreement means the host itself computed something wrong;
//! it is reported as an alarm in the result, not as an error.

use std::hint::black_box;
use std::time::Instant;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Zero};
use serde::Serialize;

use crate::error::Result;
use crate::model::{Machine, OperatingPoint, SimTime};
use crate::par::Exec;
use crate::pattern::{
    execute_pattern, generate_pattern, pow_left_to_right, reference_eval, Operands, Outcome, PatternFamily,
    ProfileMode, TestProfile, Value,
};
use crate::rng::{stream, Purpose};

/// Default per-family iteration count; four families make just over 10^6.
pub const DEFAULT_ITERATIONS_PER_FAMILY: u64 = 1 << 18;

const CHUNK: u64 = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HostMismatch {
    pub index: u64,
    pub route: &'static str,
    pub operands: Operands,
    pub golden: Value,
    pub host: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyCheck {
    pub family: PatternFamily,
    pub iterations: u64,
    pub mismatches: u64,
    pub first_mismatch: Option<HostMismatch>,
    /// `execute_pattern` on a defect-free machine returned Pass.
    pub engine_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub seed: u64,
    pub total_iterations: u64,
    pub elapsed_s: f64,
    pub families: Vec<FamilyCheck>,
    /// "pass" or "host_sdc_alarm".
    pub verdict: &'static str,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

/// `(mantissa, exponent)` with `x = ±mantissa * 2^exponent`.
fn decompose(x: f64) -> (bool, u64, i64) {
    let bits = x.to_bits();
    let neg = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1 << 52) - 1);
    if biased == 0 {
        (neg, frac, -1074)
    } else {
        (neg, frac | (1 << 52), biased - 1075)
    }
}

fn ldexp(mut x: f64, mut k: i64) -> f64 {
    while k > 1000 {
        x *= 2f64.powi(1000);
        k -= 1000;
    }
    while k < -1000 {
        x *= 2f64.powi(-1000);
        k += 1000;
    }
    x * 2f64.powi(k as i32)
}

/// Nearest double to `n * 2^exp`, ties to even. Exact for normal results.
pub fn round_exact(n: &BigInt, exp: i64) -> f64 {
    if n.is_zero() {
        return 0.0;
    }
    let neg = n.sign() == Sign::Minus;
    let mag: BigUint = n.magnitude().clone();
    let bits = mag.bits() as i64;
    let (q, shift) = if bits <= 53 {
        (mag, 0)
    } else {
        let shift = bits - 53;
        let mut q: BigUint = &mag >> shift as usize;
        let rem = &mag - (&q << shift as usize);
        let half = BigUint::one() << (shift as usize - 1);
        if rem > half || (rem == half && q.bit(0)) {
            q += 1u32;
        }
        (q, shift)
    };
    let q = q.iter_u64_digits().next().unwrap_or(0) as f64;
    let v = ldexp(q, exp + shift);
    if neg {
        -v
    } else {
        v
    }
}

fn signed(neg: bool, m: BigInt) -> BigInt {
    if neg {
        -m
    } else {
        m
    }
}

/// `base^exp` evaluated exactly, rounded once.
pub fn exact_pow(base: f64, exp: u32) -> f64 {
    if exp == 0 {
        return 1.0;
    }
    let (neg, m, e) = decompose(base);
    let p = BigInt::from(m).pow(exp);
    round_exact(&signed(neg && exp % 2 == 1, p), e * exp as i64)
}

/// `a * b + c` evaluated exactly, rounded once.
pub fn exact_fma(a: f64, b: f64, c: f64) -> f64 {
    let (na, ma, ea) = decompose(a);
    let (nb, mb, eb) = decompose(b);
    let (nc, mc, ec) = decompose(c);
    let prod = signed(na != nb, BigInt::from(ma) * BigInt::from(mb));
    let addend = signed(nc, BigInt::from(mc));
    let ep = ea + eb;
    let emin = ep.min(ec);
    let sum = (prod.clone() << (ep - emin) as usize) + (addend.clone() << (ec - emin) as usize);
    if sum.is_zero() {
        // Exact zero: -0 only when both terms are negative zeros.
        let neg_zero = prod.is_zero() && addend.is_zero() && na != nb && nc;
        return if neg_zero { -0.0 } else { 0.0 };
    }
    round_exact(&sum, emin)
}

/// Independent host routes for one operand tuple.
fn host_routes(ops: &Operands) -> [(&'static str, Value); 2] {
    match *ops {
        Operands::Mul { a, b } => {
            let wide = black_box(a as i128) * black_box(b as i128);
            let lo = black_box(a as u64 & 0xffff_ffff) * black_box(b as u64 & 0xffff_ffff);
            let cross = (a as u64 >> 32).wrapping_mul(b as u64).wrapping_add((a as u64).wrapping_mul(b as u64 >> 32));
            [
                ("i128", Value::Int(wide as i64)),
                ("split32", Value::Int(lo.wrapping_add(cross << 32) as i64)),
            ]
        }
        Operands::Pow { base, exp } => [
            ("exact", Value::Float(exact_pow(black_box(base), exp as u32))),
            ("left_to_right", Value::Float(pow_left_to_right(black_box(base), exp as u32))),
        ],
        Operands::Fma { a, b, c } => [
            ("exact", Value::Float(exact_fma(a, b, c))),
            ("hardware", Value::Float(black_box(a).mul_add(black_box(b), black_box(c)))),
        ],
        Operands::ShiftXor { a, shift, b } => {
            let u = black_box(a as u64);
            let rot = (u << shift) | u.checked_shr(64 - shift).unwrap_or(0);
            let via_wide = ((u as u128) << shift) as u64 | (((u as u128) << shift) >> 64) as u64;
            [
                ("shift_or", Value::Int((rot ^ b as u64) as i64)),
                ("u128", Value::Int((via_wide ^ b as u64) as i64)),
            ]
        }
    }
}

fn check_chunk(seed: u64, family: PatternFamily, start: u64, end: u64) -> Result<(u64, Option<HostMismatch>)> {
    let mut mismatches = 0;
    let mut first = None;
    for index in start..end {
        let ops = Operands::seeded(seed, family, index);
        let golden = reference_eval(&ops)?;
        for (route, host) in host_routes(&ops) {
            if host != golden {
                mismatches += 1;
                first.get_or_insert(HostMismatch {
                    index,
                    route,
                    operands: ops,
                    golden,
                    host,
                });
            }
        }
    }
    Ok((mismatches, first))
}

fn engine_passes(seed: u64, family: PatternFamily) -> Result<bool> {
    let pattern = generate_pattern(seed, family, 4096, 40.0)?;
    let profile = TestProfile {
        name: "selfcheck".into(),
        mode: ProfileMode::Ripple,
        test_duration_s: 0.04,
        patterns: vec![pattern.clone()],
        trials_per_day: 1.0,
    };
    let nominal = OperatingPoint {
        frequency_ghz: 2.0,
        voltage_v: 1.0,
        current_a: 100.0,
    };
    let mut machine = Machine::new(0, nominal, 2);
    let mut rng = stream(seed, 0, Purpose::SelfCheck);
    let record = execute_pattern(&mut machine, &pattern, &profile, SimTime::ZERO, &mut rng)?;
    Ok(record.outcome == Outcome::Pass)
}

pub fn run_selfcheck(seed: u64, iterations_per_family: u64, exec: Exec) -> Result<SelfCheckReport> {
    let started = Instant::now();
    let mut jobs = Vec::new();
    for family in PatternFamily::ALL {
        let mut s = 0;
        while s < iterations_per_family {
            let e = (s + CHUNK).min(iterations_per_family);
            jobs.push((family, s, e));
            s = e;
        }
    }
    let results = exec.map(jobs.clone(), |(family, s, e)| check_chunk(seed, family, s, e));
    let mut families = Vec::new();
    for family in PatternFamily::ALL {
        let mut fc = FamilyCheck {
            family,
            iterations: iterations_per_family,
            mismatches: 0,
            first_mismatch: None,
            engine_pass: engine_passes(seed, family)?,
        };
        for ((f, _, _), r) in jobs.iter().zip(&results) {
            if *f == family {
                let (n, first) = r.as_ref().map_err(|e| crate::Error::Invariant(e.to_string()))?;
                fc.mismatches += n;
                if fc.first_mismatch.is_none() {
                    fc.first_mismatch = first.clone();
                }
            }
        }
        families.push(fc);
    }
    let clean = families.iter().all(|f| f.mismatches == 0 && f.engine_pass);
    Ok(SelfCheckReport {
        seed,
        total_iterations: iterations_per_family * PatternFamily::ALL.len() as u64,
        elapsed_s: started.elapsed().as_secs_f64(),
        families,
        verdict: if clean { "pass" } else { "host_sdc_alarm" },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_routes_on_known_values() {
        assert_eq!(exact_pow(1.5, 2), 2.25);
        assert_eq!(exact_pow(-2.0, 3), -8.0);
        assert_eq!(exact_fma(2.0, 3.0, 1.0), 7.0);
        assert_eq!(exact_fma(1.0, 1.0, -1.0).to_bits(), 0.0f64.to_bits());
        // 1 + 2^-53 is a tie and rounds to even (1.0); one more ulp of the
        // addend breaks the tie upward.
        let e = 2f64.powi(-53);
        assert_eq!(exact_fma(1.0, 1.0, e), 1.0);
        assert_eq!(exact_fma(1.0, 1.0, e * (1.0 + f64::EPSILON)), 1.0 + f64::EPSILON);
        // The fused result keeps the low bits a separate multiply would lose.
        let a = 1.0 + 2f64.powi(-30);
        let c = -(1.0 + 2f64.powi(-29));
        assert_eq!(exact_fma(a, a, c), 2f64.powi(-60));
        assert_eq!(a * a + c, 0.0);
    }

    #[test]
    fn small_run_passes() {
        let r = run_selfcheck(7, 2_000, Exec::Parallel).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.total_iterations, 8_000);
    }
}
