//! Helpers shared by the integration tests. Oracles here are written
//! independently of the crate's own numerics.

#![allow(dead_code)]

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Signed, ToPrimitive, Zero};

use sdcsim::model::{Machine, OperatingPoint};

pub fn nominal() -> OperatingPoint {
    OperatingPoint {
        frequency_ghz: 2.4,
        voltage_v: 0.9,
        current_a: 120.0,
    }
}

pub fn machine(id: u64) -> Machine {
    Machine::new(id, nominal(), 64)
}

const FIX: u64 = 320;

fn to_f64_fixed(x: &BigUint) -> f64 {
    // x / 2^FIX, via the top bits.
    let bits = x.bits();
    if bits == 0 {
        return 0.0;
    }
    let shift = bits.saturating_sub(64);
    let top = (x >> shift).to_u64().unwrap() as f64;
    top * 2f64.powi(shift as i32 - FIX as i32)
}

/// Interval `[lo, hi]` containing `1 - (num/den)^n`, computed in 320-bit
/// fixed point with outward rounding.
pub fn one_minus_pow(num: u64, den: u64, n: u64) -> (f64, f64) {
    one_minus_pow_big(&BigUint::from(num), &BigUint::from(den), n)
}

/// [`one_minus_pow`] for arbitrary-size fractions.
pub fn one_minus_pow_big(num: &BigUint, den: &BigUint, n: u64) -> (f64, f64) {
    assert!(num <= den);
    let scale = BigUint::one() << FIX;
    let x_lo = (&scale * num) / den;
    let x_hi = (&scale * num + den - 1u32) / den;
    let mul_lo = |a: &BigUint, b: &BigUint| (a * b) >> FIX;
    let mul_hi = |a: &BigUint, b: &BigUint| {
        let p = a * b;
        let q = &p >> FIX;
        if (&q << FIX) == p {
            q
        } else {
            q + 1u32
        }
    };
    let (mut acc_lo, mut acc_hi) = (scale.clone(), scale.clone());
    let (mut b_lo, mut b_hi) = (x_lo, x_hi);
    let mut k = n;
    while k > 0 {
        if k & 1 == 1 {
            acc_lo = mul_lo(&acc_lo, &b_lo);
            acc_hi = mul_hi(&acc_hi, &b_hi);
        }
        k >>= 1;
        if k > 0 {
            b_lo = mul_lo(&b_lo, &b_lo);
            b_hi = mul_hi(&b_hi, &b_hi);
        }
    }
    let one = 1.0;
    (one - to_f64_fixed(&acc_hi), one - to_f64_fixed(&acc_lo))
}

/// Midpoint of [`one_minus_pow`] for a probability given as a decimal with
/// `digits` places, e.g. `q = 12345 / 10^5`.
pub fn detect_prob(q_num: u64, q_den: u64, n: u64) -> f64 {
    let (lo, hi) = one_minus_pow(q_den - q_num, q_den, n);
    assert!(hi - lo < 1e-12);
    0.5 * (lo + hi)
}

fn parts(x: f64) -> (BigInt, i64) {
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let e = ((bits >> 52) & 0x7ff) as i64;
    let f = (bits & ((1u64 << 52) - 1)) as i64;
    let (m, e) = if e == 0 { (f, -1074) } else { (f | (1 << 52), e - 1075) };
    (BigInt::from(sign * m), e)
}

/// `a * 2^ea - b * 2^eb`, exactly, as `(value, exponent)`.
fn diff(a: &BigInt, ea: i64, b: &BigInt, eb: i64) -> (BigInt, i64) {
    let e = ea.min(eb);
    ((a << (ea - e) as usize) - (b << (eb - e) as usize), e)
}

fn cmp_abs(x: &(BigInt, i64), y: &(BigInt, i64)) -> std::cmp::Ordering {
    let e = x.1.min(y.1);
    let xa = x.0.abs() << (x.1 - e) as usize;
    let ya = y.0.abs() << (y.1 - e) as usize;
    xa.cmp(&ya)
}

/// Nearest double to the exact value `v * 2^e` (normal range only). The
/// starting point keeps the top 64 bits, which is within an ulp; the search
/// then compares exact errors. Panics on an exact tie, which these tests
/// never hit.
pub fn nearest_double(v: &BigInt, e: i64) -> f64 {
    let bits = v.bits() as i64;
    let shift = (bits - 64).max(0);
    let top = (v.abs() >> shift as usize).to_u64().unwrap() as f64;
    let mut guess = top * 2f64.powi((e + shift) as i32);
    if v.is_negative() {
        guess = -guess;
    }
    let step = |x: f64, d: i64| f64::from_bits((x.to_bits() as i64 + d) as u64);
    let mut best = guess;
    let (gm, ge) = parts(guess);
    let mut best_err = diff(v, e, &gm, ge);
    for d in [-4i64, -3, -2, -1, 1, 2, 3, 4] {
        let c = step(guess, d);
        let (cm, ce) = parts(c);
        let err = diff(v, e, &cm, ce);
        match cmp_abs(&err, &best_err) {
            std::cmp::Ordering::Less => {
                best = c;
                best_err = err;
            }
            std::cmp::Ordering::Equal if !err.0.is_zero() => panic!("exact tie at {c}"),
            _ => {}
        }
    }
    best
}

/// Correctly rounded `base^n` from exact integer arithmetic.
pub fn exact_pow(base: f64, n: u32) -> f64 {
    let (m, e) = parts(base);
    let v = m.pow(n);
    nearest_double(&v, e * n as i64)
}

/// Two-sided normal tolerance for a binomial proportion.
pub fn within_sigmas(hits: u64, n: u64, p: f64, k: f64) -> bool {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - n as f64 * p).abs() <= k * sd.max(0.5)
}
