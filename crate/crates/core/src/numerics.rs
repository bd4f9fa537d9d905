//! Vector primitives on the unit hypersphere and a reproducible PRNG.
//!
//! Everything downstream works in f64; embeddings live on the sphere and are
//! re-normalized whenever arithmetic can push them off it.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VdlError};

pub const NORM_EPS: f64 = 1e-12;
pub const UNIT_TOL: f64 = 1e-9;

/// A d-dimensional vector constrained to the unit hypersphere, d >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVec(Array1<f64>);

impl UnitVec {
    /// Normalize an arbitrary vector onto the sphere.
    pub fn normalize(v: ArrayView1<f64>) -> Result<UnitVec> {
        if v.len() < 2 {
            return Err(VdlError::ShapeMismatch {
                expected: ">= 2".into(),
                got: v.len().to_string(),
                context: "UnitVec dimension",
            });
        }
        let n = norm(v);
        if n <= NORM_EPS {
            return Err(VdlError::ZeroVector { norm: n });
        }
        Ok(UnitVec(v.mapv(|x| x / n)))
    }

    pub fn from_vec(v: Vec<f64>) -> Result<UnitVec> {
        Self::normalize(Array1::from_vec(v).view())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }
}

/// Euclidean norm.
pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity between two non-degenerate vectors.
pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu <= NORM_EPS {
        return Err(VdlError::ZeroVector { norm: nu });
    }
    if nv <= NORM_EPS {
        return Err(VdlError::ZeroVector { norm: nv });
    }
    Ok(u.dot(&v) / (nu * nv))
}

pub const RNG_ALGORITHM: &str = "xoshiro256++";

/// xoshiro256++ with splitmix64 seeding.
///
/// Same (algorithm, seed) reproduces an identical stream across platforms.
/// Instances are single-owner; parallel callers take labeled child streams
/// via [`Rng::split`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Rng {
    state: [u64; 4],
    seed: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { state, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state(state: [u64; 4], seed: u64) -> Rng {
        Rng { state, seed }
    }

    /// Derive an independent child stream from a label. Distinct labels on the
    /// same parent give non-overlapping streams.
    pub fn split(&self, label: &str) -> Rng {
        // FNV-1a over the label, folded into the parent seed via splitmix.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut sm = self.seed ^ h.rotate_left(17);
        let child_seed = splitmix64(&mut sm);
        Rng::new(child_seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling over the top to avoid modulo bias.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// One standard normal draw (Box-Muller, second value discarded so the
    /// state stays a pure function of draw count).
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            let u2 = self.next_f64();
            if u1 > 0.0 {
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
}

/// d independent standard-normal draws.
pub fn sample_gaussian(rng: &mut Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.next_normal()))
}

/// Uniform draw on the (d-1)-sphere; retries on a near-zero Gaussian draw.
pub fn sample_unit(rng: &mut Rng, d: usize) -> UnitVec {
    loop {
        let g = sample_gaussian(rng, d);
        if let Ok(u) = UnitVec::normalize(g.view()) {
            return u;
        }
    }
}
