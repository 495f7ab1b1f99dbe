//! Subset ranking, bit packing, the container format and rate accounting.
//!
//! A step record is the lexicographic rank of the selected atom subset in
//! exactly `ceil(log2 C(K, M))` bits followed by `M` coefficient codes of `C`
//! bits each, in ascending atom order. Records are written MSB-first and
//! concatenated in step order `t = T, ..., N + 2`.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigUint;
use num_traits::Zero;
use thiserror::Error;

use crate::selection::{QuantizationSet, SparseSelection};

pub const MAGIC: &[u8; 4] = b"TDCM";
pub const VERSION: u8 = 1;
/// Largest supported codebook size.
pub const MAX_ATOMS: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BitstreamError {
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("rank out of range for C({k}, {m})")]
    RankOutOfRange { k: usize, m: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated container: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("nonzero padding bits")]
    NonzeroPadding,
    #[error("expected {expected} records, got {got}")]
    RecordCount { expected: usize, got: usize },
    #[error("record {step} has {got} atoms, expected {expected}")]
    SelectionSize { step: usize, expected: usize, got: usize },
    #[error("coefficient {0} is not in the quantization set")]
    CoefficientNotInSet(f64),
    #[error("quantization set has {got} values, header needs {expected}")]
    SetSize { expected: usize, got: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

// ---------------------------------------------------------------------------
// Word-limb naturals for the binomial walks. Every update multiplies by a
// packed product of small factors and divides exactly, which keeps the hot
// loop to two linear passes.

#[derive(Clone, Debug, PartialEq, Eq)]
struct Natural(Vec<u64>);

impl Natural {
    fn one() -> Self {
        Natural(vec![1])
    }

    fn zero() -> Self {
        Natural(Vec::new())
    }

    fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    fn trim(&mut self) {
        while self.0.last() == Some(&0) {
            self.0.pop();
        }
    }

    fn mul_small(&mut self, m: u64) {
        if m == 0 {
            self.0.clear();
            return;
        }
        let mut carry = 0u128;
        for limb in &mut self.0 {
            let p = u128::from(*limb) * u128::from(m) + carry;
            *limb = p as u64;
            carry = p >> 64;
        }
        if carry > 0 {
            self.0.push(carry as u64);
        }
    }

    fn shr_small(&mut self, s: u32) {
        if s == 0 {
            return;
        }
        let n = self.0.len();
        for i in 0..n {
            let hi = if i + 1 < n { self.0[i + 1] << (64 - s) } else { 0 };
            self.0[i] = (self.0[i] >> s) | hi;
        }
        self.trim();
    }

    /// Divides by `d` when the division is known to be exact.
    fn div_exact_small(&mut self, d: u64) {
        debug_assert!(d != 0);
        let tz = d.trailing_zeros();
        self.shr_small(tz);
        let d = d >> tz;
        if d == 1 {
            return;
        }
        let mut inv = d;
        for _ in 0..5 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(d.wrapping_mul(inv)));
        }
        let mut borrow = 0u64;
        for limb in &mut self.0 {
            let (s, b) = limb.overflowing_sub(borrow);
            let q = s.wrapping_mul(inv);
            *limb = q;
            borrow = ((u128::from(q) * u128::from(d)) >> 64) as u64 + u64::from(b);
        }
        debug_assert_eq!(borrow, 0);
        self.trim();
    }

    fn cmp_nat(&self, other: &Natural) -> Ordering {
        self.0
            .len()
            .cmp(&other.0.len())
            .then_with(|| self.0.iter().rev().cmp(other.0.iter().rev()))
    }

    fn add_assign(&mut self, other: &Natural) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), 0);
        }
        let mut carry = false;
        for (i, limb) in self.0.iter_mut().enumerate() {
            let o = other.0.get(i).copied().unwrap_or(0);
            if !carry && i >= other.0.len() {
                break;
            }
            let (s1, c1) = limb.overflowing_add(o);
            let (s2, c2) = s1.overflowing_add(u64::from(carry));
            *limb = s2;
            carry = c1 || c2;
        }
        if carry {
            self.0.push(1);
        }
    }

    /// `self -= other`, requires `self >= other`.
    fn sub_assign(&mut self, other: &Natural) {
        let mut borrow = false;
        for (i, limb) in self.0.iter_mut().enumerate() {
            let o = other.0.get(i).copied().unwrap_or(0);
            if !borrow && i >= other.0.len() {
                break;
            }
            let (s1, b1) = limb.overflowing_sub(o);
            let (s2, b2) = s1.overflowing_sub(u64::from(borrow));
            *limb = s2;
            borrow = b1 || b2;
        }
        debug_assert!(!borrow);
        self.trim();
    }

    fn to_biguint(&self) -> BigUint {
        let digits: Vec<u32> = self.0.iter().flat_map(|&l| [l as u32, (l >> 32) as u32]).collect();
        BigUint::new(digits)
    }

    fn from_biguint(v: &BigUint) -> Self {
        let mut n = Natural(v.to_u64_digits());
        n.trim();
        n
    }
}

/// Accumulates the ratio `num / den` of several exact steps in machine words.
struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    fn new() -> Self {
        Ratio { num: 1, den: 1 }
    }

    fn push(&mut self, value: &mut Natural, num: u64, den: u64) {
        match (self.num.checked_mul(num), self.den.checked_mul(den)) {
            (Some(n), Some(d)) => {
                self.num = n;
                self.den = d;
            }
            _ => {
                self.flush(value);
                self.num = num;
                self.den = den;
            }
        }
    }

    fn flush(&mut self, value: &mut Natural) {
        if self.num != 1 {
            value.mul_small(self.num);
        }
        if self.den != 1 {
            value.div_exact_small(self.den);
        }
        self.num = 1;
        self.den = 1;
    }
}

fn binomial_natural(n: usize, k: usize) -> Natural {
    if k > n {
        return Natural::zero();
    }
    let k = k.min(n - k);
    let mut v = Natural::one();
    let mut ratio = Ratio::new();
    for i in 0..k {
        ratio.push(&mut v, (n - i) as u64, (i + 1) as u64);
    }
    ratio.flush(&mut v);
    v
}

/// Exact `C(n, k)`.
pub fn binomial(n: usize, k: usize) -> BigUint {
    binomial_natural(n, k).to_biguint()
}

/// `ceil(log2 C(K, M))`, zero when there is a single subset.
pub fn rank_width(k: usize, m: usize) -> u64 {
    let total = binomial(k, m);
    if total.is_zero() {
        return 0;
    }
    (total - 1u32).bits()
}

/// Rank/unrank for a fixed `(K, M)` with `C(K, M)` computed once.
#[derive(Debug, Clone)]
pub struct RankCodec {
    k: usize,
    m: usize,
    total: Natural,
    width: u64,
}

impl RankCodec {
    pub fn new(k: usize, m: usize) -> Result<Self, BitstreamError> {
        if k == 0 || k > MAX_ATOMS {
            return Err(BitstreamError::InvalidSubset(format!("K = {k} outside 1..={MAX_ATOMS}")));
        }
        if m > k {
            return Err(BitstreamError::InvalidSubset(format!("M = {m} exceeds K = {k}")));
        }
        let total = binomial_natural(k, m);
        let width = {
            let mut t = total.clone();
            t.sub_assign(&Natural::one());
            t.to_biguint().bits()
        };
        Ok(Self { k, m, total, width })
    }

    pub fn atoms(&self) -> usize {
        self.k
    }

    pub fn count(&self) -> usize {
        self.m
    }

    pub fn width(&self) -> u64 {
        self.width
    }

    pub fn total(&self) -> BigUint {
        self.total.to_biguint()
    }

    /// Zero-based lexicographic position of a sorted subset.
    pub fn rank(&self, indices: &[usize]) -> Result<BigUint, BitstreamError> {
        let (k_atoms, m) = (self.k, self.m);
        if indices.len() != m {
            return Err(BitstreamError::InvalidSubset(format!("{} indices, expected {m}", indices.len())));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BitstreamError::InvalidSubset("indices must be strictly increasing".into()));
        }
        if indices.last().is_some_and(|&c| c >= k_atoms) {
            return Err(BitstreamError::InvalidSubset(format!("index out of range for K = {k_atoms}")));
        }
        // Complement positions b_j = K-1-c_j decrease; the lexicographic rank is
        // C(K,M) - 1 - sum_j C(b_j, M - j) (zero-based j).
        let b: Vec<usize> = indices.iter().map(|&c| k_atoms - 1 - c).collect();
        let kk = |j: usize| m - j;
        let mut sum = Natural::zero();
        // Terms with b_j < M - j vanish and form a suffix.
        if let Some(j0) = (0..m).rev().find(|&j| b[j] >= kk(j)) {
            let mut k = kk(j0);
            let mut n = k;
            let mut v = Natural::one();
            let mut ratio = Ratio::new();
            while n < b[j0] {
                ratio.push(&mut v, (n + 1) as u64, (n + 1 - k) as u64);
                n += 1;
            }
            ratio.flush(&mut v);
            sum.add_assign(&v);
            for j in (0..j0).rev() {
                while n < b[j] {
                    ratio.push(&mut v, (n + 1) as u64, (n + 1 - k) as u64);
                    n += 1;
                }
                ratio.push(&mut v, (n - k) as u64, (k + 1) as u64);
                k += 1;
                ratio.flush(&mut v);
                sum.add_assign(&v);
            }
        }
        let mut r = self.total.clone();
        r.sub_assign(&Natural::one());
        r.sub_assign(&sum);
        Ok(r.to_biguint())
    }

    /// Inverse of [`RankCodec::rank`].
    pub fn unrank(&self, rank: &BigUint) -> Result<Vec<usize>, BitstreamError> {
        let (k_atoms, m) = (self.k, self.m);
        let r = Natural::from_biguint(rank);
        if r.cmp_nat(&self.total) != Ordering::Less {
            return Err(BitstreamError::RankOutOfRange { k: k_atoms, m });
        }
        if m == 0 {
            return Ok(Vec::new());
        }
        let mut rest = self.total.clone();
        rest.sub_assign(&Natural::one());
        rest.sub_assign(&r);

        let mut k = m;
        let mut n = k_atoms - 1;
        let mut v = self.total.clone();
        v.mul_small((k_atoms - m) as u64);
        v.div_exact_small(k_atoms as u64);
        let mut b = Vec::with_capacity(m);
        for j in 0..m {
            // largest n with C(n, k) <= rest
            while v.cmp_nat(&rest) == Ordering::Greater {
                let mut steps = 0;
                let (mut num, mut den) = (1u64, 1u64);
                while steps < 4 && n - steps > k {
                    match (num.checked_mul((n - steps - k) as u64), den.checked_mul((n - steps) as u64)) {
                        (Some(a), Some(d)) => {
                            num = a;
                            den = d;
                            steps += 1;
                        }
                        _ => break,
                    }
                }
                if steps > 1 {
                    let mut trial = v.clone();
                    trial.mul_small(num);
                    trial.div_exact_small(den);
                    if trial.cmp_nat(&rest) == Ordering::Greater {
                        v = trial;
                        n -= steps;
                        continue;
                    }
                }
                v.mul_small((n - k) as u64);
                v.div_exact_small(n as u64);
                n -= 1;
            }
            b.push(n);
            rest.sub_assign(&v);
            if j + 1 == m {
                break;
            }
            if v.is_zero() {
                // every remaining position is forced: b = k' - 1
                let mut kk = k - 1;
                while b.len() < m {
                    b.push(kk - 1);
                    kk -= 1;
                }
                break;
            }
            v.mul_small(k as u64);
            v.div_exact_small(n as u64);
            n -= 1;
            k -= 1;
        }
        Ok(b.into_iter().map(|x| k_atoms - 1 - x).collect())
    }
}

/// Zero-based lexicographic rank of a sorted `M`-subset of `0..K`.
pub fn rank(indices: &[usize], k: usize) -> Result<BigUint, BitstreamError> {
    RankCodec::new(k, indices.len())?.rank(indices)
}

/// Inverse of [`rank`].
pub fn unrank(r: &BigUint, k: usize, m: usize) -> Result<Vec<usize>, BitstreamError> {
    RankCodec::new(k, m)?.unrank(r)
}

// ---------------------------------------------------------------------------

/// MSB-first bit writer.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn write_bit(&mut self, bit: bool) {
        if self.bits % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.len() - 1;
            self.bytes[last] |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }

    /// Low `width` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, width: u32) {
        for i in (0..width).rev() {
            self.write_bit((value >> i) & 1 == 1);
        }
    }

    pub fn write_big(&mut self, value: &BigUint, width: u64) {
        for i in (0..width).rev() {
            self.write_bit(value.bit(i));
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit reader.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn read_bit(&mut self) -> Result<bool, BitstreamError> {
        let byte = (self.pos / 8) as usize;
        let Some(&b) = self.bytes.get(byte) else {
            return Err(BitstreamError::Truncated { needed: byte + 1, have: self.bytes.len() });
        };
        let bit = (b >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read_bits(&mut self, width: u32) -> Result<u64, BitstreamError> {
        let mut v = 0u64;
        for _ in 0..width {
            v = (v << 1) | u64::from(self.read_bit()?);
        }
        Ok(v)
    }

    pub fn read_big(&mut self, width: u64) -> Result<BigUint, BitstreamError> {
        let mut v = BigUint::zero();
        for i in (0..width).rev() {
            if self.read_bit()? {
                v.set_bit(i, true);
            }
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------

/// Everything the decoder needs besides the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub steps: u32,
    pub ddim_steps: u32,
    pub atoms: u32,
    pub selected: u32,
    pub bits: u8,
    pub schedule_id: u8,
    pub seed: u64,
    pub height: u32,
    pub width: u32,
    pub channels: u8,
    /// Side of the square average-pooling window between pixels and the
    /// working vector (1 = pixel space).
    pub pool: u8,
}

pub const HEADER_BYTES: usize = 4 + 1 + 4 * 4 + 1 + 1 + 8 + 4 + 4 + 1 + 1;

impl Header {
    pub fn records(&self) -> usize {
        (self.steps - self.ddim_steps - 1) as usize
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }

    /// Working-space dimension implied by the image shape and pooling.
    pub fn dim(&self) -> usize {
        let p = self.pool.max(1) as usize;
        self.channels as usize * (self.height as usize / p) * (self.width as usize / p)
    }

    pub fn record_bits(&self) -> u64 {
        rank_width(self.atoms as usize, self.selected as usize) + u64::from(self.selected) * u64::from(self.bits)
    }

    pub fn payload_bits(&self) -> u64 {
        self.records() as u64 * self.record_bits()
    }

    pub fn validate(&self) -> Result<(), BitstreamError> {
        let bad = |m: &str| Err(BitstreamError::InvalidHeader(m.to_string()));
        if self.version != VERSION {
            return Err(BitstreamError::UnsupportedVersion(self.version));
        }
        if self.steps < 1 {
            return bad("T must be at least 1");
        }
        if self.ddim_steps >= self.steps {
            return bad("N must be below T");
        }
        if self.atoms == 0 || self.atoms as usize > MAX_ATOMS {
            return bad("K out of range");
        }
        if self.selected == 0 || self.selected > self.atoms {
            return bad("M must lie in 1..=K");
        }
        if self.bits > 16 {
            return bad("C above 16");
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("empty image shape");
        }
        if self.pool == 0 || self.height % u32::from(self.pool) != 0 || self.width % u32::from(self.pool) != 0 {
            return bad("pool must divide height and width");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        for v in [self.steps, self.ddim_steps, self.atoms, self.selected] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.push(self.bits);
        out.push(self.schedule_id);
        out.extend_from_slice(&self.seed.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.push(self.channels);
        out.push(self.pool);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        if bytes.len() < HEADER_BYTES {
            return Err(BitstreamError::Truncated { needed: HEADER_BYTES, have: bytes.len() });
        }
        let u32_at = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
        let h = Header {
            version: bytes[4],
            steps: u32_at(5),
            ddim_steps: u32_at(9),
            atoms: u32_at(13),
            selected: u32_at(17),
            bits: bytes[21],
            schedule_id: bytes[22],
            seed: u64::from_be_bytes(bytes[23..31].try_into().unwrap()),
            height: u32_at(31),
            width: u32_at(35),
            channels: bytes[39],
            pool: bytes[40],
        };
        h.validate()?;
        Ok(h)
    }
}

impl fmt::Display for Header {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "version: {}", self.version)?;
        writeln!(f, "T: {}", self.steps)?;
        writeln!(f, "N: {}", self.ddim_steps)?;
        writeln!(f, "K: {}", self.atoms)?;
        writeln!(f, "M: {}", self.selected)?;
        writeln!(f, "C: {}", self.bits)?;
        writeln!(f, "schedule_id: {}", self.schedule_id)?;
        writeln!(f, "seed: {}", self.seed)?;
        writeln!(f, "height: {}", self.height)?;
        writeln!(f, "width: {}", self.width)?;
        writeln!(f, "channels: {}", self.channels)?;
        writeln!(f, "pool: {}", self.pool)?;
        writeln!(f, "dim: {}", self.dim())?;
        writeln!(f, "records: {}", self.records())?;
        writeln!(f, "payload_bits: {}", self.payload_bits())?;
        write!(f, "bpp: {:.6}", bpp_ranked(
            self.steps as usize,
            self.ddim_steps as usize,
            self.atoms as usize,
            self.selected as usize,
            self.bits as u32,
            self.pixels(),
        ))
    }
}

/// A container: header plus packed step records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedImage {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl CompressedImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        let header = Header::from_bytes(bytes)?;
        let bits = header.payload_bits();
        let needed = HEADER_BYTES + bits.div_ceil(8) as usize;
        match bytes.len().cmp(&needed) {
            Ordering::Less => return Err(BitstreamError::Truncated { needed, have: bytes.len() }),
            Ordering::Greater => return Err(BitstreamError::TrailingBytes(bytes.len() - needed)),
            Ordering::Equal => {}
        }
        let payload = bytes[HEADER_BYTES..].to_vec();
        if bits % 8 != 0 {
            let mask = 0xffu8 >> (bits % 8);
            if payload.last().is_some_and(|&b| b & mask != 0) {
                return Err(BitstreamError::NonzeroPadding);
            }
        }
        Ok(Self { header, payload })
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }
}

fn check_set(header: &Header, set: &QuantizationSet) -> Result<(), BitstreamError> {
    let expected = 1usize << header.bits;
    if set.len() != expected {
        return Err(BitstreamError::SetSize { expected, got: set.len() });
    }
    Ok(())
}

/// Packs one record per transmitted step, in step order.
pub fn pack_steps(
    header: Header,
    records: &[SparseSelection],
    set: &QuantizationSet,
) -> Result<CompressedImage, BitstreamError> {
    header.validate()?;
    check_set(&header, set)?;
    let expected = header.records();
    if records.len() != expected {
        return Err(BitstreamError::RecordCount { expected, got: records.len() });
    }
    let codec = RankCodec::new(header.atoms as usize, header.selected as usize)?;
    let mut w = BitWriter::new();
    for (step, rec) in records.iter().enumerate() {
        if rec.len() != codec.count() {
            return Err(BitstreamError::SelectionSize { step, expected: codec.count(), got: rec.len() });
        }
        let r = codec.rank(rec.indices())?;
        w.write_big(&r, codec.width());
        for &c in rec.coefficients() {
            let code = set.code_of(c).ok_or(BitstreamError::CoefficientNotInSet(c))?;
            w.write_bits(u64::from(code), u32::from(header.bits));
        }
    }
    debug_assert_eq!(w.bit_len(), header.payload_bits());
    Ok(CompressedImage { header, payload: w.into_bytes() })
}

/// Inverse of [`pack_steps`].
pub fn unpack_steps(ci: &CompressedImage, set: &QuantizationSet) -> Result<Vec<SparseSelection>, BitstreamError> {
    let header = ci.header;
    header.validate()?;
    check_set(&header, set)?;
    let needed = header.payload_bits().div_ceil(8) as usize;
    if ci.payload.len() < needed {
        return Err(BitstreamError::Truncated { needed: HEADER_BYTES + needed, have: HEADER_BYTES + ci.payload.len() });
    }
    if ci.payload.len() > needed {
        return Err(BitstreamError::TrailingBytes(ci.payload.len() - needed));
    }
    let codec = RankCodec::new(header.atoms as usize, header.selected as usize)?;
    let mut rd = BitReader::new(&ci.payload);
    let mut records = Vec::with_capacity(header.records());
    for _ in 0..header.records() {
        let r = rd.read_big(codec.width())?;
        let indices = codec.unrank(&r)?;
        let mut coefficients = Vec::with_capacity(indices.len());
        for _ in 0..indices.len() {
            let code = rd.read_bits(u32::from(header.bits))? as u32;
            coefficients.push(set.value_of(code).ok_or(BitstreamError::CoefficientNotInSet(f64::from(code)))?);
        }
        records.push(
            SparseSelection::new(indices, coefficients)
                .map_err(|e| BitstreamError::InvalidSubset(e.to_string()))?,
        );
    }
    Ok(records)
}

// ---------------------------------------------------------------------------

/// `(T - N - 1) (ceil(log2 C(K, M)) + M C) / pixels`.
pub fn bpp_ranked(t: usize, n: usize, k: usize, m: usize, c: u32, pixels: u64) -> f64 {
    if n + 1 >= t {
        return 0.0;
    }
    let bits = (t - n - 1) as u64 * (rank_width(k, m) + m as u64 * u64::from(c));
    bits as f64 / pixels as f64
}

/// `ceil(log2 K)`.
pub fn index_bits(k: usize) -> u64 {
    if k <= 1 {
        0
    } else {
        u64::from(usize::BITS - (k - 1).leading_zeros())
    }
}

/// Matching-pursuit bitrate `(T - 1) (ceil(log2 K) M + C (M - 1)) / pixels`.
pub fn bpp_legacy(t: usize, k: usize, m: usize, c: u32, pixels: u64) -> f64 {
    if t <= 1 || m == 0 {
        return 0.0;
    }
    let bits = (t - 1) as u64 * (index_bits(k) * m as u64 + u64::from(c) * (m as u64 - 1));
    bits as f64 / pixels as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitSavingRow {
    pub m: usize,
    pub legacy_bits: u64,
    pub rank_bits: u64,
    pub exact: f64,
    pub approx: f64,
}

/// Index-bit saving of subset ranking over per-atom indices for each `M`.
pub fn bit_saving_study(k: usize, ms: impl IntoIterator<Item = usize>) -> Vec<BitSavingRow> {
    ms.into_iter()
        .map(|m| {
            let legacy_bits = index_bits(k) * m as u64;
            let rank_bits = rank_width(k, m);
            let exact = if legacy_bits == 0 {
                0.0
            } else {
                (legacy_bits as f64 - rank_bits as f64) / legacy_bits as f64
            };
            let approx = (m as f64).log2() / (k as f64).log2();
            BitSavingRow { m, legacy_bits, rank_bits, exact, approx }
        })
        .collect()
}

pub fn bit_saving_csv(rows: &[BitSavingRow]) -> String {
    let mut s = String::from("M,legacy_index_bits,rank_bits,exact_saving,approx_saving\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.m, r.legacy_bits, r.rank_bits, r.exact, r.approx));
    }
    s
}
