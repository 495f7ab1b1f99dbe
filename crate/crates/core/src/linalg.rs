//! Fixed-order reductions. Accumulation order is part of the codec contract:
//! encoder and decoder must produce the same bits, so every sum here uses
//! eight interleaved partial sums combined in a fixed tree.

const LANES: usize = 8;

#[inline]
fn combine(acc: [f64; LANES], tail: f64) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(0.0, |s, (&x, &y)| s + f64::from(x) * f64::from(y));
    combine(acc, tail)
}

#[inline]
pub fn dot_mixed(atom: &[f32], v: &[f64]) -> f64 {
    debug_assert_eq!(atom.len(), v.len());
    let mut acc = [0f64; LANES];
    let mut ca = atom.chunks_exact(LANES);
    let mut cb = v.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += f64::from(x[l]) * y[l];
        }
    }
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(0.0, |s, (&x, &y)| s + f64::from(x) * y);
    combine(acc, tail)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(0.0, |s, (x, y)| s + x * y);
    combine(acc, tail)
}

#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    for x in &mut ca {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let tail = ca.remainder().iter().sum::<f64>();
    combine(acc, tail)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Population standard deviation (mean subtracted).
pub fn population_std(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = sum(a) / n;
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    for x in &mut ca {
        for l in 0..LANES {
            let d = x[l] - mean;
            acc[l] += d * d;
        }
    }
    let tail = ca.remainder().iter().fold(0.0, |s, x| s + (x - mean) * (x - mean));
    (combine(acc, tail) / n).sqrt()
}
