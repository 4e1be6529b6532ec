//! Counter-based random streams.
//!
//! A stream is a ChaCha8 generator keyed by `(global_seed, entity_id,
//! purpose)`. ChaCha is counter-based, so the values a stream yields depend
//! only on its key and how many values it has produced, never on what other
//! streams did. That is what makes per-machine histories independent of event
//! interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hash::{splitmix64, tag};

/// What a stream is used for. Each purpose gets an independent key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Fleet,
    Maintenance,
    Environment,
    Datacenter,
    RippleArrivals,
    RippleExec,
    RippleCounts,
    ScannerExec,
    Confirm,
    Exposure,
    Shadow,
    SelfCheck,
}

impl Purpose {
    fn word(self) -> u64 {
        match self {
            Purpose::Fleet => tag("fleet"),
            Purpose::Maintenance => tag("maintenance"),
            Purpose::Environment => tag("environment"),
            Purpose::Datacenter => tag("datacenter"),
            Purpose::RippleArrivals => tag("ripple-arrivals"),
            Purpose::RippleExec => tag("ripple-exec"),
            Purpose::RippleCounts => tag("ripple-counts"),
            Purpose::ScannerExec => tag("scanner-exec"),
            Purpose::Confirm => tag("confirm"),
            Purpose::Exposure => tag("exposure"),
            Purpose::Shadow => tag("shadow"),
            Purpose::SelfCheck => tag("selfcheck"),
        }
    }
}

pub type Stream = ChaCha8Rng;

/// Build the stream for `(global_seed, id, purpose)`.
pub fn stream(global_seed: u64, id: u64, purpose: Purpose) -> Stream {
    let mut seed = [0u8; 32];
    let mut x = global_seed;
    for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
        x = splitmix64(x ^ id.rotate_left(17 * i as u32) ^ purpose.word());
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn take(mut s: Stream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn keyed_streams_are_independent() {
        let a = take(stream(1, 2, Purpose::Fleet), 4);
        assert_eq!(a, take(stream(1, 2, Purpose::Fleet), 4));
        assert_ne!(a, take(stream(1, 3, Purpose::Fleet), 4));
        assert_ne!(a, take(stream(1, 2, Purpose::Exposure), 4));
        assert_ne!(a, take(stream(2, 2, Purpose::Fleet), 4));
    }

    #[test]
    fn interleaving_does_not_matter() {
        let mut x = stream(7, 1, Purpose::RippleExec);
        let mut y = stream(7, 2, Purpose::RippleExec);
        let first: Vec<u64> = (0..8).map(|_| x.next_u64()).collect();
        let mut x2 = stream(7, 1, Purpose::RippleExec);
        let mut interleaved = Vec::new();
        for _ in 0..8 {
            y.next_u64();
            interleaved.push(x2.next_u64());
        }
        assert_eq!(first, interleaved);
    }
}
