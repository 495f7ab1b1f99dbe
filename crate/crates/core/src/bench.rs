//! Timing and accuracy studies of the selection rules.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::codebook::{AtomMatrix, Codebook, CodebookError, DEFAULT_MAX_ENTRIES};
use crate::rng::{self, Domain};
use crate::selection::{self, QuantizationSet, SelectionError, SparseSelection};

pub const CSV_HEADER: &str = "selector,K,M,C,d,trial,wall_time_ns,angle_rad";

/// Residual streams are kept apart from anything else drawn from the auxiliary domain.
const RESIDUAL_STREAM: u32 = 0xBE_0001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("empty grid")]
    EmptyGrid,
    #[error("unknown selector {0:?}")]
    UnknownSelector(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Selector {
    Thresholding,
    /// Top `M` of the signed inner products with unit coefficients.
    ThresholdingPositive,
    Mp,
    Oracle,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selector::Thresholding => "thresholding",
            Selector::ThresholdingPositive => "thresholding_positive",
            Selector::Mp => "mp",
            Selector::Oracle => "oracle",
        })
    }
}

impl FromStr for Selector {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "thresholding" => Ok(Selector::Thresholding),
            "thresholding_positive" => Ok(Selector::ThresholdingPositive),
            "mp" => Ok(Selector::Mp),
            "oracle" => Ok(Selector::Oracle),
            _ => Err(BenchError::UnknownSelector(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub k: usize,
    pub m: usize,
    pub c: u8,
    pub d: usize,
}

/// Cartesian product in `K, M, C, d` order.
pub fn grid(ks: &[usize], ms: &[usize], cs: &[u8], ds: &[usize]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &k in ks {
        for &m in ms {
            for &c in cs {
                for &d in ds {
                    out.push(Cell { k, m, c, d });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub selector: Selector,
    pub k: usize,
    pub m: usize,
    pub c: u8,
    pub d: usize,
    pub trial: usize,
    pub wall_time_ns: u64,
    pub angle_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cell: Cell,
    pub selector: Selector,
    pub error: BenchError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub failures: Vec<CellFailure>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.selector, r.k, r.m, r.c, r.d, r.trial, r.wall_time_ns, r.angle_rad
            ));
        }
        s
    }

    pub fn rows_for(&self, selector: Selector) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.selector == selector)
    }

    /// Mean angle per `(selector, K, M, C, d)` in first-seen order.
    pub fn mean_angles(&self) -> Vec<(Selector, Cell, f64)> {
        self.aggregate(|rows| rows.iter().map(|r| r.angle_rad).sum::<f64>() / rows.len() as f64)
    }

    /// Median wall time per `(selector, K, M, C, d)` over trials.
    pub fn median_times(&self) -> Vec<(Selector, Cell, u64)> {
        self.aggregate(|rows| median(rows.iter().map(|r| r.wall_time_ns).collect()))
    }

    fn aggregate<T>(&self, f: impl Fn(&[&BenchRow]) -> T) -> Vec<(Selector, Cell, T)> {
        let mut keys: Vec<(Selector, Cell)> = Vec::new();
        for r in &self.rows {
            let key = (r.selector, Cell { k: r.k, m: r.m, c: r.c, d: r.d });
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(s, cell)| {
                let rows: Vec<&BenchRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.selector == s && Cell { k: r.k, m: r.m, c: r.c, d: r.d } == cell)
                    .collect();
                (s, cell, f(&rows))
            })
            .collect()
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Repetitions per timing sample, per selector family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub warmup: usize,
    pub reps: usize,
    pub mp_warmup: usize,
    pub mp_reps: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { warmup: 1, reps: 5, mp_warmup: 1, mp_reps: 5 }
    }
}

impl Timing {
    /// A single untimed-quality run, for accuracy studies.
    pub fn single() -> Self {
        Self { warmup: 0, reps: 1, mp_warmup: 0, mp_reps: 1 }
    }

    fn for_selector(&self, s: Selector) -> (usize, usize) {
        match s {
            Selector::Mp => (self.mp_warmup, self.mp_reps.max(1)),
            _ => (self.warmup, self.reps.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub selectors: Vec<Selector>,
    pub trials: usize,
    pub seed: u64,
    pub timing: Timing,
    pub max_entries: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            selectors: vec![Selector::Thresholding, Selector::Mp],
            trials: 1,
            seed: 0,
            timing: Timing::default(),
            max_entries: DEFAULT_MAX_ENTRIES,
        }
    }
}

/// Standard-normal residual shared by every cell with the same `d`.
pub fn residual(seed: u64, d: usize, trial: usize) -> Vec<f64> {
    let mut buf = vec![0f32; d];
    rng::fill_gaussian(seed, Domain::Auxiliary, RESIDUAL_STREAM, trial as u32, &mut buf);
    buf.into_iter().map(f64::from).collect()
}

fn positive_select(u: &[f64], m: usize) -> Result<SparseSelection, SelectionError> {
    if m == 0 || m > u.len() {
        return Err(SelectionError::TooManyAtoms { m, k: u.len() });
    }
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    let coefficients = vec![1.0; m];
    SparseSelection::new(idx, coefficients)
}

/// Runs one selector and returns the unit-std vector it would inject.
pub fn run_selector(
    selector: Selector,
    atoms: &AtomMatrix,
    r: &[f64],
    m: usize,
    c: u8,
) -> Result<Vec<f64>, SelectionError> {
    match selector {
        Selector::Thresholding => {
            let set = QuantizationSet::canonical(c)?;
            let sel = selection::select_atoms(atoms, r, m, &set)?;
            selection::combine_and_normalize(atoms, &sel)
        }
        Selector::ThresholdingPositive => {
            let sel = positive_select(&selection::inner_products(atoms, r)?, m)?;
            selection::combine_and_normalize(atoms, &sel)
        }
        Selector::Mp => Ok(selection::mp_select(atoms, r, m, &QuantizationSet::mp_levels(c)?)?.combined),
        Selector::Oracle => {
            let set = QuantizationSet::canonical(c)?;
            let sel = selection::brute_force_oracle(atoms, r, m, &set)?;
            selection::combine_and_normalize(atoms, &sel)
        }
    }
}

fn timed_run(
    selector: Selector,
    atoms: &AtomMatrix,
    r: &[f64],
    cell: Cell,
    timing: &Timing,
) -> Result<(u64, f64), SelectionError> {
    let (warmup, reps) = timing.for_selector(selector);
    for _ in 0..warmup {
        run_selector(selector, atoms, r, cell.m, cell.c)?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut z = Vec::new();
    for _ in 0..reps {
        let start = Instant::now();
        z = run_selector(selector, atoms, r, cell.m, cell.c)?;
        times.push((start.elapsed().as_nanos() as u64).max(1));
    }
    Ok((median(times), selection::residual_angle(&z, r)?))
}

fn cell_atoms(cell: Cell, opts: &BenchOptions) -> Result<AtomMatrix, CodebookError> {
    Codebook::new(opts.seed, cell.d, cell.k, 2)?.with_max_entries(opts.max_entries).atoms(2)
}

/// Times every selector on every cell, sequentially. A failing
/// `(cell, selector)` is recorded and the rest continue.
pub fn bench_selection(cells: &[Cell], opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    if cells.is_empty() || opts.selectors.is_empty() {
        return Err(BenchError::EmptyGrid);
    }
    let mut report = BenchReport::default();
    for &cell in cells {
        let atoms = match cell_atoms(cell, opts) {
            Ok(a) => a,
            Err(e) => {
                for &selector in &opts.selectors {
                    report.failures.push(CellFailure { cell, selector, error: e.clone().into() });
                }
                continue;
            }
        };
        for &selector in &opts.selectors {
            let mut rows = Vec::new();
            let outcome = (0..opts.trials.max(1)).try_for_each(|trial| {
                let r = residual(opts.seed, cell.d, trial);
                let (wall_time_ns, angle_rad) = timed_run(selector, &atoms, &r, cell, &opts.timing)?;
                rows.push(BenchRow {
                    selector,
                    k: cell.k,
                    m: cell.m,
                    c: cell.c,
                    d: cell.d,
                    trial,
                    wall_time_ns,
                    angle_rad,
                });
                Ok::<_, SelectionError>(())
            });
            match outcome {
                Ok(()) => report.rows.extend(rows),
                Err(e) => report.failures.push(CellFailure { cell, selector, error: e.into() }),
            }
        }
    }
    Ok(report)
}

/// Angles for every `(selector, M, C)` at a fixed `K, d`. One codebook is
/// shared by all cells; with `parallel`, trials run on the rayon pool.
pub fn angle_study(
    k: usize,
    d: usize,
    ms: &[usize],
    cs: &[u8],
    opts: &BenchOptions,
    parallel: bool,
) -> Result<BenchReport, BenchError> {
    let cells = grid(&[k], ms, cs, &[d]);
    if cells.is_empty() || opts.selectors.is_empty() {
        return Err(BenchError::EmptyGrid);
    }
    let atoms = cell_atoms(cells[0], opts)?;
    let trials = opts.trials.max(1);
    let residuals: Vec<Vec<f64>> = (0..trials).map(|t| residual(opts.seed, d, t)).collect();
    let mut report = BenchReport::default();
    for &cell in &cells {
        for &selector in &opts.selectors {
            let one = |trial: usize| -> Result<BenchRow, SelectionError> {
                let start = Instant::now();
                let z = run_selector(selector, &atoms, &residuals[trial], cell.m, cell.c)?;
                let wall_time_ns = (start.elapsed().as_nanos() as u64).max(1);
                Ok(BenchRow {
                    selector,
                    k,
                    m: cell.m,
                    c: cell.c,
                    d,
                    trial,
                    wall_time_ns,
                    angle_rad: selection::residual_angle(&z, &residuals[trial])?,
                })
            };
            let rows: Result<Vec<BenchRow>, SelectionError> = if parallel {
                (0..trials).into_par_iter().map(one).collect()
            } else {
                (0..trials).map(one).collect()
            };
            match rows {
                Ok(rows) => report.rows.extend(rows),
                Err(e) => report.failures.push(CellFailure { cell, selector, error: e.into() }),
            }
        }
    }
    Ok(report)
}
