//! Per-step noise construction.
//!
//! The thresholding selectors pick `M` atoms in closed form from the inner
//! products `u_i = <z_i, r>`. `mp_select` is the greedy matching-pursuit
//! baseline and `brute_force_oracle` the exhaustive minimizer of
//! `||C s - r||^2` used to check both.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::codebook::AtomMatrix;
use crate::linalg;

/// Upper bound on `C(K, M) * |V|^M` accepted by the oracle.
pub const ORACLE_SEARCH_CAP: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot select {m} of {k} atoms")]
    TooManyAtoms { m: usize, k: usize },
    #[error("selection must contain at least one atom")]
    Empty,
    #[error("invalid quantization set: {0}")]
    InvalidSet(String),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("combined noise has zero variance")]
    ZeroVariance,
    #[error("oracle search space {0} exceeds the cap")]
    SearchSpace(u128),
    #[error("angle is undefined for a zero vector")]
    ZeroVector,
    #[error("non-finite input")]
    NonFinite,
}

/// Ordered set of `2^C` nonzero coefficient values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationSet {
    values: Vec<f64>,
    bits: u8,
}

impl QuantizationSet {
    pub fn new(values: Vec<f64>) -> Result<Self, SelectionError> {
        let n = values.len();
        if n == 0 {
            return Err(SelectionError::InvalidSet("empty".into()));
        }
        if !n.is_power_of_two() || n > 1 << 16 {
            return Err(SelectionError::InvalidSet(format!("size {n} is not 2^C")));
        }
        if values.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Err(SelectionError::InvalidSet("values must be finite and nonzero".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SelectionError::InvalidSet("values must be strictly ascending".into()));
        }
        Ok(Self { bits: n.trailing_zeros() as u8, values })
    }

    /// `[-1, +1]`.
    pub fn sign() -> Self {
        Self { values: vec![-1.0, 1.0], bits: 1 }
    }

    /// The set implied by a bit width when none is given explicitly:
    /// `[+1]` for zero bits, otherwise `2^(C-1)` evenly spaced magnitudes in
    /// `(0, 1]` with both signs.
    pub fn canonical(bits: u8) -> Result<Self, SelectionError> {
        if bits == 0 {
            return Self::new(vec![1.0]);
        }
        if bits > 16 {
            return Err(SelectionError::InvalidSet(format!("{bits} bits per coefficient")));
        }
        let half = 1usize << (bits - 1);
        let mags: Vec<f64> = (1..=half).map(|j| j as f64 / half as f64).collect();
        let values = mags.iter().rev().map(|m| -m).chain(mags.iter().copied()).collect();
        Self::new(values)
    }

    /// Convex-combination weights `j / 2^C`, `j = 1..=2^C`, for matching pursuit.
    pub fn mp_levels(bits: u8) -> Result<Self, SelectionError> {
        if bits > 16 {
            return Err(SelectionError::InvalidSet(format!("{bits} bits per coefficient")));
        }
        let n = 1usize << bits;
        Self::new((1..=n).map(|j| j as f64 / n as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_sign(&self) -> bool {
        self.values == [-1.0, 1.0]
    }

    /// Nearest element; ties go to the smaller value.
    pub fn nearest(&self, x: f64) -> f64 {
        let v = &self.values;
        let idx = v.partition_point(|&q| q < x);
        if idx == 0 {
            return v[0];
        }
        if idx == v.len() {
            return v[v.len() - 1];
        }
        let (lo, hi) = (v[idx - 1], v[idx]);
        if x - lo <= hi - x {
            lo
        } else {
            hi
        }
    }

    pub fn code_of(&self, value: f64) -> Option<u32> {
        self.values.iter().position(|&q| q == value).map(|i| i as u32)
    }

    pub fn value_of(&self, code: u32) -> Option<f64> {
        self.values.get(code as usize).copied()
    }
}

/// `M` atom indices in ascending order with their coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSelection {
    indices: Vec<usize>,
    coefficients: Vec<f64>,
}

impl SparseSelection {
    pub fn new(indices: Vec<usize>, coefficients: Vec<f64>) -> Result<Self, SelectionError> {
        if indices.len() != coefficients.len() {
            return Err(SelectionError::InvalidSelection(format!(
                "{} indices but {} coefficients",
                indices.len(),
                coefficients.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SelectionError::InvalidSelection("indices must be strictly increasing".into()));
        }
        Ok(Self { indices, coefficients })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check(&self, atoms: usize, set: &QuantizationSet) -> Result<(), SelectionError> {
        if let Some(&last) = self.indices.last() {
            if last >= atoms {
                return Err(SelectionError::InvalidSelection(format!("index {last} >= {atoms}")));
            }
        }
        if let Some(c) = self.coefficients.iter().find(|&&c| set.code_of(c).is_none()) {
            return Err(SelectionError::InvalidSelection(format!("coefficient {c} not in the set")));
        }
        Ok(())
    }

    /// Dense coefficient vector of length `k`.
    pub fn to_dense(&self, k: usize) -> Vec<f64> {
        let mut s = vec![0.0; k];
        for (&i, &c) in self.indices.iter().zip(&self.coefficients) {
            s[i] = c;
        }
        s
    }
}

fn check_residual(atoms: &AtomMatrix, r: &[f64]) -> Result<(), SelectionError> {
    if atoms.dim() != r.len() {
        return Err(SelectionError::DimensionMismatch { left: atoms.dim(), right: r.len() });
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(SelectionError::NonFinite);
    }
    Ok(())
}

/// `u_i = <z_i, r>` for every atom.
pub fn inner_products(atoms: &AtomMatrix, r: &[f64]) -> Result<Vec<f64>, SelectionError> {
    check_residual(atoms, r)?;
    Ok((0..atoms.count())
        .into_par_iter()
        .map(|i| linalg::dot_mixed(atoms.column(i), r))
        .collect())
}

/// Least-squares coefficient of each atom alone, `<z_i, r> / ||z_i||^2`.
pub fn projection_coefficients(atoms: &AtomMatrix, r: &[f64]) -> Result<Vec<f64>, SelectionError> {
    check_residual(atoms, r)?;
    Ok((0..atoms.count())
        .into_par_iter()
        .map(|i| {
            let z = atoms.column(i);
            let n = linalg::dot_f32(z, z);
            if n == 0.0 {
                0.0
            } else {
                linalg::dot_mixed(z, r) / n
            }
        })
        .collect())
}

/// Indices of the `m` largest keys (ties broken by `secondary`, then lowest
/// index), returned in ascending index order.
fn top_m(primary: &[f64], secondary: &[f64], m: usize) -> Vec<usize> {
    let order = |&a: &usize, &b: &usize| -> Ordering {
        primary[b]
            .total_cmp(&primary[a])
            .then_with(|| secondary[b].total_cmp(&secondary[a]))
            .then_with(|| a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..primary.len()).collect();
    if m < idx.len() {
        idx.select_nth_unstable_by(m, order);
        idx.truncate(m);
    }
    idx.sort_unstable();
    idx
}

fn check_count(k: usize, m: usize) -> Result<(), SelectionError> {
    if m == 0 {
        return Err(SelectionError::Empty);
    }
    if m > k {
        return Err(SelectionError::TooManyAtoms { m, k });
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `TopM(|u|)` with coefficients `sign(u_i)`; `sign(0) = +1`.
pub fn threshold_select_sign(u: &[f64], m: usize) -> Result<SparseSelection, SelectionError> {
    check_count(u.len(), m)?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(SelectionError::NonFinite);
    }
    let mag: Vec<f64> = u.iter().map(|v| v.abs()).collect();
    let indices = top_m(&mag, &mag, m);
    let coefficients = indices.iter().map(|&i| sign(u[i])).collect();
    Ok(SparseSelection { indices, coefficients })
}

/// Quantized thresholding: each atom's gain is
/// `u_i^2 - (q_i - u_i)^2 = q_i (2 u_i - q_i)` with `q_i` the nearest level;
/// the `m` largest gains are kept. Equal gains prefer the larger `|u_i|`,
/// then the lower index.
pub fn threshold_select_quantized(
    u: &[f64],
    m: usize,
    set: &QuantizationSet,
) -> Result<SparseSelection, SelectionError> {
    check_count(u.len(), m)?;
    if set.is_empty() {
        return Err(SelectionError::InvalidSet("empty".into()));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(SelectionError::NonFinite);
    }
    let levels: Vec<f64> = u.iter().map(|&x| set.nearest(x)).collect();
    let gain: Vec<f64> = u.iter().zip(&levels).map(|(&x, &q)| q * (2.0 * x - q)).collect();
    let mag: Vec<f64> = u.iter().map(|v| v.abs()).collect();
    let indices = top_m(&gain, &mag, m);
    let coefficients = indices.iter().map(|&i| levels[i]).collect();
    Ok(SparseSelection { indices, coefficients })
}

/// The encoder's selection rule: the sign rule on raw inner products for
/// `[-1, +1]`, otherwise quantized thresholding on the per-atom projection
/// coefficients.
pub fn select_atoms(
    atoms: &AtomMatrix,
    r: &[f64],
    m: usize,
    set: &QuantizationSet,
) -> Result<SparseSelection, SelectionError> {
    if set.is_sign() {
        threshold_select_sign(&inner_products(atoms, r)?, m)
    } else {
        threshold_select_quantized(&projection_coefficients(atoms, r)?, m, set)
    }
}

/// `C s / std(C s)` with the population standard deviation.
pub fn combine_and_normalize(atoms: &AtomMatrix, sel: &SparseSelection) -> Result<Vec<f64>, SelectionError> {
    if sel.is_empty() {
        return Err(SelectionError::Empty);
    }
    if let Some(&last) = sel.indices.last() {
        if last >= atoms.count() {
            return Err(SelectionError::InvalidSelection(format!("index {last} >= {}", atoms.count())));
        }
    }
    let mut v = vec![0f64; atoms.dim()];
    for (&i, &c) in sel.indices.iter().zip(&sel.coefficients) {
        for (acc, &z) in v.iter_mut().zip(atoms.column(i)) {
            *acc += c * f64::from(z);
        }
    }
    normalize_unit_std(v)
}

fn normalize_unit_std(mut v: Vec<f64>) -> Result<Vec<f64>, SelectionError> {
    let std = linalg::population_std(&v);
    if !(std > 0.0) || !std.is_finite() {
        return Err(SelectionError::ZeroVariance);
    }
    v.iter_mut().for_each(|x| *x /= std);
    Ok(v)
}

/// Result of greedy matching pursuit: atoms in pick order, the convex weight
/// used at each pick (the first atom enters with weight 1), and the final
/// unit-std combination.
#[derive(Debug, Clone, PartialEq)]
pub struct MpOutcome {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub combined: Vec<f64>,
}

/// Correlation `<v, r> / std(v)` for `v = a * cur + b * z` and each `(a, b)`.
fn score_candidates(cur: &[f64], z: &[f32], r: &[f64], mixes: &[(f64, f64)], out: &mut [f64]) {
    let n = cur.len() as f64;
    for (slot, &(a, b)) in out.iter_mut().zip(mixes) {
        let mut s = [0f64; 4];
        let mut q = [0f64; 4];
        let mut p = [0f64; 4];
        let mut cc = cur.chunks_exact(4);
        let mut cz = z.chunks_exact(4);
        let mut cr = r.chunks_exact(4);
        for ((c4, z4), r4) in (&mut cc).zip(&mut cz).zip(&mut cr) {
            for l in 0..4 {
                let v = a * c4[l] + b * f64::from(z4[l]);
                s[l] += v;
                q[l] += v * v;
                p[l] += v * r4[l];
            }
        }
        let (mut st, mut qt, mut pt) = (0.0, 0.0, 0.0);
        for ((c, zz), rr) in cc.remainder().iter().zip(cz.remainder()).zip(cr.remainder()) {
            let v = a * c + b * f64::from(*zz);
            st += v;
            qt += v * v;
            pt += v * rr;
        }
        let sum = (s[0] + s[1]) + (s[2] + s[3]) + st;
        let sq = (q[0] + q[1]) + (q[2] + q[3]) + qt;
        let dot = (p[0] + p[1]) + (p[2] + p[3]) + pt;
        let mean = sum / n;
        let var = sq / n - mean * mean;
        *slot = if var > 0.0 { dot / var.sqrt() } else { f64::NEG_INFINITY };
    }
}

/// Greedy matching pursuit over convex combinations. Every `(atom, weight)`
/// candidate is materialized and scored, so the cost is `Theta(M 2^C K d)`.
pub fn mp_select(
    atoms: &AtomMatrix,
    r: &[f64],
    m: usize,
    weights: &QuantizationSet,
) -> Result<MpOutcome, SelectionError> {
    check_count(atoms.count(), m)?;
    if weights.values().iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
        return Err(SelectionError::InvalidSet("matching-pursuit weights must lie in (0, 1]".into()));
    }
    let u = inner_products(atoms, r)?;
    let first = (0..u.len())
        .fold(0, |best, i| if u[i] > u[best] { i } else { best });
    let mut chosen = vec![false; atoms.count()];
    chosen[first] = true;
    let mut indices = vec![first];
    let mut picked_weights = vec![1.0];
    let first_sel = SparseSelection { indices: vec![first], coefficients: vec![1.0] };
    let mut cur = combine_and_normalize(atoms, &first_sel)?;

    let mixes: Vec<(f64, f64)> = weights.values().iter().map(|&w| (1.0 - w, w)).collect();
    let mut scores = vec![0f64; mixes.len()];
    for _ in 1..m {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..atoms.count() {
            if chosen[i] {
                continue;
            }
            score_candidates(&cur, atoms.column(i), r, &mixes, &mut scores);
            for (l, &s) in scores.iter().enumerate() {
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, i, l));
                }
            }
        }
        let Some((_, i, l)) = best else { break };
        let (a, b) = mixes[l];
        let next: Vec<f64> = cur
            .iter()
            .zip(atoms.column(i))
            .map(|(&c, &z)| a * c + b * f64::from(z))
            .collect();
        cur = normalize_unit_std(next)?;
        chosen[i] = true;
        indices.push(i);
        picked_weights.push(weights.values()[l]);
    }
    Ok(MpOutcome { indices, weights: picked_weights, combined: cur })
}

/// `||C s - r||^2` evaluated directly.
pub fn objective(atoms: &AtomMatrix, r: &[f64], sel: &SparseSelection) -> Result<f64, SelectionError> {
    check_residual(atoms, r)?;
    let mut v: Vec<f64> = r.iter().map(|x| -x).collect();
    for (&i, &c) in sel.indices.iter().zip(&sel.coefficients) {
        for (acc, &z) in v.iter_mut().zip(atoms.column(i)) {
            *acc += c * f64::from(z);
        }
    }
    Ok(linalg::dot(&v, &v))
}

/// Separable surrogate `sum_{i not in S} u_i^2 + sum_{i in S} (q_i - u_i)^2`.
pub fn surrogate_objective(u: &[f64], sel: &SparseSelection) -> f64 {
    let mut total: f64 = u.iter().map(|x| x * x).sum();
    for (&i, &q) in sel.indices.iter().zip(&sel.coefficients) {
        total += (q - u[i]).powi(2) - u[i] * u[i];
    }
    total
}

fn binomial_u128(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Exhaustive minimizer of `||C s - r||^2` over all size-`m` supports and
/// coefficient assignments. Ties keep the lexicographically first candidate.
pub fn brute_force_oracle(
    atoms: &AtomMatrix,
    r: &[f64],
    m: usize,
    set: &QuantizationSet,
) -> Result<SparseSelection, SelectionError> {
    check_residual(atoms, r)?;
    let k = atoms.count();
    check_count(k, m)?;
    let levels = set.len();
    let space = binomial_u128(k, m)
        .and_then(|b| b.checked_mul((levels as u128).checked_pow(m as u32)?))
        .unwrap_or(u128::MAX);
    if space > ORACLE_SEARCH_CAP {
        return Err(SelectionError::SearchSpace(space));
    }
    let u: Vec<f64> = atoms.columns().map(|z| linalg::dot_mixed(z, r)).collect();
    let gram: Vec<f64> = (0..k * k)
        .map(|idx| linalg::dot_f32(atoms.column(idx / k), atoms.column(idx % k)))
        .collect();
    let rr = linalg::dot(r, r);
    let values = set.values();

    let mut support: Vec<usize> = (0..m).collect();
    let mut best_value = f64::INFINITY;
    let mut best: Option<(Vec<usize>, Vec<usize>)> = None;
    let mut codes = vec![0usize; m];
    loop {
        codes.iter_mut().for_each(|c| *c = 0);
        loop {
            let mut value = rr;
            for a in 0..m {
                let qa = values[codes[a]];
                let ia = support[a];
                value -= 2.0 * qa * u[ia];
                for b in 0..m {
                    value += qa * values[codes[b]] * gram[ia * k + support[b]];
                }
            }
            if value < best_value {
                best_value = value;
                best = Some((support.clone(), codes.clone()));
            }
            // next coefficient assignment (last position fastest)
            let mut pos = m;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                codes[pos] += 1;
                if codes[pos] < levels {
                    break;
                }
                codes[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if pos == usize::MAX {
                break;
            }
        }
        // next support in lexicographic order
        let mut j = m;
        let mut advanced = false;
        while j > 0 {
            j -= 1;
            if support[j] < k - m + j {
                support[j] += 1;
                for l in j + 1..m {
                    support[l] = support[l - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    let (indices, codes) = best.ok_or(SelectionError::NonFinite)?;
    let coefficients = codes.into_iter().map(|c| values[c]).collect();
    Ok(SparseSelection { indices, coefficients })
}

/// Unsigned angle in `[0, pi]`.
pub fn residual_angle(z: &[f64], r: &[f64]) -> Result<f64, SelectionError> {
    if z.len() != r.len() {
        return Err(SelectionError::DimensionMismatch { left: z.len(), right: r.len() });
    }
    let (nz, nr) = (linalg::norm(z), linalg::norm(r));
    if nz == 0.0 || nr == 0.0 {
        return Err(SelectionError::ZeroVector);
    }
    Ok((linalg::dot(z, r) / (nz * nr)).clamp(-1.0, 1.0).acos())
}
