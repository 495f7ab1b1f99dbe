//! Seed-addressed Gaussian codebooks.
//!
//! A codebook is never stored or transmitted. `Codebook::atoms(t)` rebuilds
//! the `d x K` matrix for step `t` from the shared seed; columns are generated
//! independently, so the result is identical for any worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{self, CounterStream, Domain};

/// Default cap on materialized entries (1 GiB of `f32`).
pub const DEFAULT_MAX_ENTRIES: usize = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodebookError {
    #[error("step {t} outside the codebook range 2..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("codebook of {dim} x {atoms} exceeds the cap of {cap} entries")]
    Capacity { dim: usize, atoms: usize, cap: usize },
    #[error("cannot orthogonalize {atoms} atoms in dimension {dim}")]
    Overcomplete { dim: usize, atoms: usize },
    #[error("invalid codebook shape: {0}")]
    Shape(String),
}

/// Column-major `dim x count` matrix; column `i` is atom `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomMatrix {
    dim: usize,
    count: usize,
    data: Vec<f32>,
}

impl AtomMatrix {
    pub fn from_columns(dim: usize, columns: &[Vec<f32>]) -> Result<Self, CodebookError> {
        if dim == 0 || columns.iter().any(|c| c.len() != dim) {
            return Err(CodebookError::Shape("all columns must have length dim > 0".into()));
        }
        let data = columns.iter().flatten().copied().collect();
        Ok(Self { dim, count: columns.len(), data })
    }

    pub fn from_column_major(dim: usize, count: usize, data: Vec<f32>) -> Result<Self, CodebookError> {
        if dim == 0 || data.len() != dim * count {
            return Err(CodebookError::Shape(format!(
                "{} values for a {dim} x {count} matrix",
                data.len()
            )));
        }
        Ok(Self { dim, count, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn column(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    seed: u64,
    dim: usize,
    atoms: usize,
    steps: usize,
    max_entries: usize,
}

impl Codebook {
    pub fn new(seed: u64, dim: usize, atoms: usize, steps: usize) -> Result<Self, CodebookError> {
        if dim == 0 || atoms == 0 {
            return Err(CodebookError::Shape("dimension and atom count must be positive".into()));
        }
        if u32::try_from(atoms).is_err() || u32::try_from(dim.div_ceil(4)).is_err() {
            return Err(CodebookError::Shape("shape exceeds the generator counter space".into()));
        }
        Ok(Self { seed, dim, atoms, steps, max_entries: DEFAULT_MAX_ENTRIES })
    }

    pub fn with_max_entries(mut self, max_entries: usize) -> Self {
        self.max_entries = max_entries;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom_count(&self) -> usize {
        self.atoms
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_step(&self, t: usize) -> Result<(), CodebookError> {
        if t < 2 || t > self.steps {
            return Err(CodebookError::StepOutOfRange { t, steps: self.steps });
        }
        Ok(())
    }

    /// One atom without materializing the matrix.
    pub fn atom(&self, t: usize, index: usize) -> Result<Vec<f32>, CodebookError> {
        self.check_step(t)?;
        if index >= self.atoms {
            return Err(CodebookError::Shape(format!("atom {index} >= {}", self.atoms)));
        }
        let mut col = vec![0f32; self.dim];
        rng::fill_gaussian(self.seed, Domain::Codebook, t as u32, index as u32, &mut col);
        Ok(col)
    }

    /// The full matrix `C_t`.
    pub fn atoms(&self, t: usize) -> Result<AtomMatrix, CodebookError> {
        self.check_step(t)?;
        let entries = self
            .dim
            .checked_mul(self.atoms)
            .filter(|&n| n <= self.max_entries)
            .ok_or(CodebookError::Capacity { dim: self.dim, atoms: self.atoms, cap: self.max_entries })?;
        let mut data = vec![0f32; entries];
        let (seed, step) = (self.seed, t as u32);
        data.par_chunks_mut(self.dim).enumerate().for_each(|(i, col)| {
            rng::fill_gaussian(seed, Domain::Codebook, step, i as u32, col);
        });
        Ok(AtomMatrix { dim: self.dim, count: self.atoms, data })
    }

    pub fn gram_schmidt(&self, t: usize) -> Result<AtomMatrix, CodebookError> {
        gram_schmidt(&self.atoms(t)?)
    }

    pub fn orthogonality_report(&self, t: usize, max_pairs: usize) -> Result<OrthogonalityReport, CodebookError> {
        Ok(orthogonality_report(&self.atoms(t)?, max_pairs, self.seed))
    }
}

const GS_BLOCK: usize = 64;

/// Orthogonalizes the columns (block classical Gram-Schmidt, two passes) and
/// rescales each to norm `sqrt(d)`.
pub fn gram_schmidt(atoms: &AtomMatrix) -> Result<AtomMatrix, CodebookError> {
    let (d, k) = (atoms.dim, atoms.count);
    if k > d {
        return Err(CodebookError::Overcomplete { dim: d, atoms: k });
    }
    let mut q: Vec<f64> = atoms.data.iter().map(|&v| f64::from(v)).collect();
    let mut coef = vec![0f64; k * GS_BLOCK];
    let mut start = 0;
    while start < k {
        let width = GS_BLOCK.min(k - start);
        let (done, rest) = q.split_at_mut(start * d);
        let block = &mut rest[..width * d];
        if start > 0 {
            for _ in 0..2 {
                project_out(done, start, block, width, d, &mut coef);
            }
        }
        for j in 0..width {
            for _ in 0..2 {
                let (prev, cur) = block.split_at_mut(j * d);
                let cur = &mut cur[..d];
                for p in prev.chunks_exact(d) {
                    let c = dot64(p, cur);
                    for (x, &y) in cur.iter_mut().zip(p) {
                        *x -= c * y;
                    }
                }
            }
            let col = &mut block[j * d..(j + 1) * d];
            let norm = dot64(col, col).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(CodebookError::Shape(format!("column {} is linearly dependent", start + j)));
            }
            col.iter_mut().for_each(|x| *x /= norm);
        }
        start += width;
    }
    let scale = (d as f64).sqrt();
    let data = q.into_iter().map(|v| (v * scale) as f32).collect();
    Ok(AtomMatrix { dim: d, count: k, data })
}

/// `block -= done * (done^T block)` with `done` holding `n_done` orthonormal columns.
fn project_out(done: &[f64], n_done: usize, block: &mut [f64], width: usize, d: usize, coef: &mut [f64]) {
    let coef = &mut coef[..n_done * width];
    // coef (n_done x width, column-major) = done^T * block
    unsafe {
        matrixmultiply::dgemm(
            n_done, d, width,
            1.0,
            done.as_ptr(), d as isize, 1,
            block.as_ptr(), 1, d as isize,
            0.0,
            coef.as_mut_ptr(), 1, n_done as isize,
        );
        matrixmultiply::dgemm(
            d, n_done, width,
            -1.0,
            done.as_ptr(), 1, d as isize,
            coef.as_ptr(), 1, n_done as isize,
            1.0,
            block.as_mut_ptr(), 1, d as isize,
        );
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityReport {
    pub pairs: usize,
    pub mean_abs_cosine: Option<f64>,
    pub max_abs_cosine: Option<f64>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

/// Cosine statistics over all atom pairs, or over `max_pairs` sampled pairs
/// when there are more.
pub fn orthogonality_report(atoms: &AtomMatrix, max_pairs: usize, sample_seed: u64) -> OrthogonalityReport {
    let norms: Vec<f64> = atoms
        .columns()
        .map(|c| crate::linalg::dot_f32(c, c).sqrt())
        .collect();
    let k = atoms.count;
    let n = k as f64;
    let norm_mean = norms.iter().sum::<f64>() / n;
    let norm_std = (norms.iter().map(|v| (v - norm_mean).powi(2)).sum::<f64>() / n).sqrt();

    let total_pairs = k * k.saturating_sub(1) / 2;
    let cosine = |i: usize, j: usize| {
        (crate::linalg::dot_f32(atoms.column(i), atoms.column(j)) / (norms[i] * norms[j])).abs()
    };
    let cosines: Vec<f64> = if total_pairs <= max_pairs {
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| cosine(i, j))
            .collect()
    } else {
        let mut stream = CounterStream::new(sample_seed, Domain::PairSampling, 0);
        (0..max_pairs)
            .map(|_| {
                let i = stream.below(k as u64) as usize;
                let mut j = stream.below(k as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                cosine(i, j)
            })
            .collect()
    };
    let (mean_abs_cosine, max_abs_cosine) = if cosines.is_empty() {
        (None, None)
    } else {
        (
            Some(cosines.iter().sum::<f64>() / cosines.len() as f64),
            Some(cosines.iter().copied().fold(0.0, f64::max)),
        )
    };
    OrthogonalityReport { pairs: cosines.len(), mean_abs_cosine, max_abs_cosine, norm_mean, norm_std }
}
