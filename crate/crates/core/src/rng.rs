//! Counter-based deterministic random streams.
//!
//! A [`SeedPath`] addresses a stream by a sequence of 64-bit indices
//! (run seed, stage, sample, step, ...). The value at position `counter` of a
//! stream depends only on the stream key and the counter, so parallel callers
//! that partition the path space produce bit-identical output in any
//! execution order and with any number of workers.
//!
//! Mixing uses the splitmix64 finalizer; not cryptographic, stable across
//! platforms.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hierarchical stream address. `child(i)` derives an independent sub-stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPath {
    key: u64,
}

impl SeedPath {
    pub fn root(seed: u64) -> Self {
        Self {
            key: splitmix64(seed ^ 0x41D1_FF00_5EED_0001),
        }
    }

    pub fn child(&self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key.rotate_left(17) ^ splitmix64(index ^ GOLDEN)),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }
}

/// Sequential generator over one stream: uniforms in [0,1) and standard
/// normals via Box-Muller.
#[derive(Clone, Debug)]
pub struct NormalStream {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(path: SeedPath) -> Self {
        Self {
            key: path.key,
            counter: 0,
            spare: None,
        }
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.key ^ splitmix64(self.counter));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 shifted into (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }

    pub fn normal_vector(&mut self, n: usize) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_fn(n, |_, _| self.next_normal())
    }
}
