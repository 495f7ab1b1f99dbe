//! Counter-based Gaussian generator shared by encoder and decoder.
//!
//! Every draw is a pure function of `(seed, step, atom, lane)`, so any column
//! of any codebook can be regenerated in isolation and in any order. The
//! bit generator is Philox4x32-10; normals come from a single-precision
//! Box-Muller transform whose logarithm and sine/cosine are fixed `f32`
//! polynomials, so the output does not depend on the platform math library.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Stream domains; the fourth counter word keeps them disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Domain {
    Codebook = 0,
    InitialState = 1,
    PairSampling = 2,
    Auxiliary = 3,
}

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline(always)]
fn seed_key(seed: u64) -> [u32; 2] {
    [seed as u32, (seed >> 32) as u32]
}

const TWO_POW_M24: f32 = 1.0 / 16_777_216.0;

/// Natural log on (0, 1) from exponent extraction and an odd atanh series.
#[inline(always)]
fn ln_unit(u: f32) -> f32 {
    let bits = u.to_bits();
    let mut e = ((bits >> 23) & 0xff) as i32 - 127;
    let mut m = f32::from_bits((bits & 0x007f_ffff) | 0x3f80_0000);
    let big = m > core::f32::consts::SQRT_2;
    m = if big { m * 0.5 } else { m };
    e += big as i32;
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let series = 2.0 + s2 * (2.0 / 3.0 + s2 * (2.0 / 5.0 + s2 * (2.0 / 7.0 + s2 * (2.0 / 9.0))));
    e as f32 * core::f32::consts::LN_2 + s * series
}

/// `(sin, cos)` of `2 pi v` for `v` in [0, 1).
#[inline(always)]
fn sincos_turn(v: f32) -> (f32, f32) {
    let g = v * 4.0;
    let q = g as u32;
    let f = g - q as f32;
    let flip = f >= 0.5;
    let y = (if flip { 1.0 - f } else { f }) * core::f32::consts::FRAC_PI_2;
    let y2 = y * y;
    let sy = y * (1.0 + y2 * (-1.0 / 6.0 + y2 * (1.0 / 120.0 + y2 * (-1.0 / 5040.0 + y2 * (1.0 / 362_880.0)))));
    let cy = 1.0
        + y2 * (-0.5 + y2 * (1.0 / 24.0 + y2 * (-1.0 / 720.0 + y2 * (1.0 / 40_320.0 + y2 * (-1.0 / 3_628_800.0)))));
    let (s1, c1) = if flip { (cy, sy) } else { (sy, cy) };
    let odd = q & 1 == 1;
    let (s2, c2) = (if odd { c1 } else { s1 }, if odd { -s1 } else { c1 });
    let sign = if q & 2 == 2 { -1.0 } else { 1.0 };
    (sign * s2, sign * c2)
}

#[inline(always)]
fn box_muller(a: u32, b: u32) -> (f32, f32) {
    let ua = ((a >> 8) as f32 + 0.5) * TWO_POW_M24;
    let ub = (b >> 8) as f32 * TWO_POW_M24;
    let radius = (-2.0 * ln_unit(ua)).sqrt();
    let (s, c) = sincos_turn(ub);
    (radius * c, radius * s)
}

/// Four standard normals for lanes `4·block .. 4·block+3`.
#[inline]
pub fn gaussian_block(seed: u64, domain: Domain, stream: u32, item: u32, block: u32) -> [f32; 4] {
    let bits = philox4x32([block, item, stream, domain as u32], seed_key(seed));
    let (z0, z1) = box_muller(bits[0], bits[1]);
    let (z2, z3) = box_muller(bits[2], bits[3]);
    [z0, z1, z2, z3]
}

const WIDE: usize = 16;

/// `WIDE` consecutive blocks at once, laid out like repeated `gaussian_block`.
#[inline]
fn gaussian_wide(key: [u32; 2], tail: [u32; 3], first: u32, out: &mut [f32]) {
    let mut c0 = [0u32; WIDE];
    let mut c1 = [tail[0]; WIDE];
    let mut c2 = [tail[1]; WIDE];
    let mut c3 = [tail[2]; WIDE];
    for (l, c) in c0.iter_mut().enumerate() {
        *c = first.wrapping_add(l as u32);
    }
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        for l in 0..WIDE {
            let p0 = u64::from(PHILOX_M0) * u64::from(c0[l]);
            let p1 = u64::from(PHILOX_M1) * u64::from(c2[l]);
            let n0 = ((p1 >> 32) as u32) ^ c1[l] ^ k[0];
            let n2 = ((p0 >> 32) as u32) ^ c3[l] ^ k[1];
            c1[l] = p1 as u32;
            c3[l] = p0 as u32;
            c0[l] = n0;
            c2[l] = n2;
        }
    }
    let mut z = [[0f32; WIDE]; 4];
    for l in 0..WIDE {
        let (a, b) = box_muller(c0[l], c1[l]);
        let (c, d) = box_muller(c2[l], c3[l]);
        z[0][l] = a;
        z[1][l] = b;
        z[2][l] = c;
        z[3][l] = d;
    }
    for l in 0..WIDE {
        for j in 0..4 {
            out[4 * l + j] = z[j][l];
        }
    }
}

/// Fills `out` with lanes `0..out.len()` of the stream `(seed, domain, stream, item)`.
pub fn fill_gaussian(seed: u64, domain: Domain, stream: u32, item: u32, out: &mut [f32]) {
    let key = seed_key(seed);
    let tail = [item, stream, domain as u32];
    let mut chunks = out.chunks_exact_mut(4 * WIDE);
    let mut block = 0u32;
    for chunk in &mut chunks {
        gaussian_wide(key, tail, block, chunk);
        block += WIDE as u32;
    }
    for quad in chunks.into_remainder().chunks_mut(4) {
        let z = gaussian_block(seed, domain, stream, item, block);
        quad.copy_from_slice(&z[..quad.len()]);
        block += 1;
    }
}

/// Uniform integers from the same counter space, used for reproducible sampling.
#[derive(Debug, Clone)]
pub struct CounterStream {
    seed: u64,
    domain: Domain,
    stream: u32,
    index: u64,
    buffer: [u32; 4],
    used: usize,
}

impl CounterStream {
    pub fn new(seed: u64, domain: Domain, stream: u32) -> Self {
        Self {
            seed,
            domain,
            stream,
            index: 0,
            buffer: [0; 4],
            used: 4,
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            let counter = [
                self.index as u32,
                (self.index >> 32) as u32,
                self.stream,
                self.domain as u32,
            ];
            self.buffer = philox4x32(counter, seed_key(self.seed));
            self.index += 1;
            self.used = 0;
        }
        let v = self.buffer[self.used];
        self.used += 1;
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        (u64::from(self.next_u32()) << 32) | u64::from(self.next_u32())
    }

    /// Uniform in `[0, bound)` by rejection; `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Uniform in [0, 1) with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let (a, _) = box_muller(self.next_u32(), self.next_u32());
        f64::from(a)
    }
}
