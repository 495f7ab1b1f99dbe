//! Encoder and decoder loops.
//!
//! Both sides start from the seeded `x_T` and walk `t = T, ..., 1`. Steps
//! `T..=N+2` inject a selected noise combination (chosen by the encoder,
//! replayed by the decoder), steps `N+1..=2` are deterministic DDIM updates
//! and the last step returns the clean estimate. Encoder and decoder share
//! one loop, so the decoder reproduces the encoder-side reconstruction
//! exactly.

use thiserror::Error;

use crate::bitstream::{self, BitstreamError, CompressedImage, Header};
use crate::codebook::{AtomMatrix, Codebook, CodebookError};
use crate::denoiser::{DenoiseError, Denoiser};
use crate::diffusion::{self, DiffusionError, DiffusionSchedule, ScheduleKind};
use crate::selection::{self, QuantizationSet, SelectionError, SparseSelection};

/// Bitrate control list for `T = 20, K = 16384, C = 1`.
pub const DEFAULT_M_LIST: [usize; 19] =
    [5, 8, 12, 17, 23, 30, 37, 45, 55, 65, 85, 105, 125, 145, 200, 275, 350, 500, 700];

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid priority mask: {0}")]
    InvalidMask(String),
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Number of decoder-only DDIM steps for a preliminary bitrate `bpp0`
/// (computed with `N = 0`).
pub fn choose_ddim_steps(bpp0: f64) -> Result<usize, CodecError> {
    if !(bpp0 > 0.0) {
        return Err(CodecError::InvalidParams(format!("bpp0 must be positive, got {bpp0}")));
    }
    Ok(match bpp0 {
        b if b <= 0.016 => 5,
        b if b <= 0.025 => 4,
        b if b <= 0.043 => 3,
        b if b <= 0.062 => 2,
        b if b <= 0.086 => 1,
        _ => 0,
    })
}

/// Pixel geometry behind a working vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: u32,
    pub width: u32,
    pub channels: u8,
    pub pool: u8,
}

impl ImageShape {
    pub fn new(height: u32, width: u32, channels: u8, pool: u8) -> Self {
        Self { height, width, channels, pool }
    }

    /// A bare vector of length `d`, counted as `d` pixels.
    pub fn vector(d: usize) -> Self {
        Self { height: 1, width: d as u32, channels: 1, pool: 1 }
    }

    pub fn dim(&self) -> usize {
        let p = self.pool.max(1) as usize;
        self.channels as usize * (self.height as usize / p) * (self.width as usize / p)
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeParams {
    pub steps: usize,
    pub atoms: usize,
    pub selected: usize,
    pub bits: u8,
    pub seed: u64,
    pub schedule: ScheduleKind,
    /// Coefficient set; `None` uses the canonical set for `bits`.
    pub quantization: Option<QuantizationSet>,
    /// Decoder-only DDIM steps; `None` derives them from the bitrate.
    pub ddim_steps: Option<usize>,
    /// Orthogonalize every codebook before use. Not signalled in the
    /// container; the decoder must be told separately.
    pub orthogonalize: bool,
}

impl Default for EncodeParams {
    fn default() -> Self {
        Self {
            steps: 20,
            atoms: 16384,
            selected: 100,
            bits: 1,
            seed: 0,
            schedule: ScheduleKind::Linear,
            quantization: None,
            ddim_steps: None,
            orthogonalize: false,
        }
    }
}

impl EncodeParams {
    pub fn quantization_set(&self) -> Result<QuantizationSet, CodecError> {
        let set = match &self.quantization {
            Some(s) => s.clone(),
            None => QuantizationSet::canonical(self.bits)?,
        };
        if set.len() != 1usize << self.bits {
            return Err(CodecError::InvalidParams(format!(
                "quantization set has {} values but C = {}",
                set.len(),
                self.bits
            )));
        }
        Ok(set)
    }

    /// `N` for a given selection count and pixel count.
    pub fn resolve_ddim_steps(&self, selected: usize, pixels: u64) -> Result<usize, CodecError> {
        if self.steps == 0 {
            return Err(CodecError::InvalidParams("T must be positive".into()));
        }
        let n = match self.ddim_steps {
            Some(n) => n,
            None if self.steps == 1 => 0,
            None => choose_ddim_steps(bitstream::bpp_ranked(
                self.steps,
                0,
                self.atoms,
                selected,
                u32::from(self.bits),
                pixels,
            ))?
            .min(self.steps - 1),
        };
        if n >= self.steps {
            return Err(CodecError::InvalidParams(format!("N = {n} must be below T = {}", self.steps)));
        }
        Ok(n)
    }

    pub fn header(&self, selected: usize, shape: ImageShape) -> Result<Header, CodecError> {
        let schedule_id = self
            .schedule
            .id()
            .ok_or_else(|| CodecError::InvalidParams("custom schedules cannot be stored".into()))?;
        let n = self.resolve_ddim_steps(selected, shape.pixels())?;
        let to_u32 = |v: usize, name: &str| {
            u32::try_from(v).map_err(|_| CodecError::InvalidParams(format!("{name} = {v} too large")))
        };
        let header = Header {
            version: bitstream::VERSION,
            steps: to_u32(self.steps, "T")?,
            ddim_steps: to_u32(n, "N")?,
            atoms: to_u32(self.atoms, "K")?,
            selected: to_u32(selected, "M")?,
            bits: self.bits,
            schedule_id,
            seed: self.seed,
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            pool: shape.pool,
        };
        header.validate()?;
        Ok(header)
    }
}

/// Nonnegative per-coordinate weights on the residual. Never transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityMask {
    w: Vec<f64>,
}

impl PriorityMask {
    pub fn new(w: Vec<f64>) -> Result<Self, CodecError> {
        if let Some(v) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(CodecError::InvalidMask(format!("weight {v} is not a finite nonnegative number")));
        }
        Ok(Self { w })
    }

    pub fn ones(dim: usize) -> Self {
        Self { w: vec![1.0; dim] }
    }

    /// `1 + priority * m` for a region map `m` in `[0, 1]`.
    pub fn prioritized(region: &[f64], priority: f64) -> Result<Self, CodecError> {
        Self::new(region.iter().map(|&m| 1.0 + priority * m).collect())
    }

    /// Average-pools a single-channel pixel map onto the working grid of
    /// `shape` and repeats it across channels.
    pub fn from_pixel_map(map: &[f64], shape: ImageShape) -> Result<Self, CodecError> {
        let (h, w) = (shape.height as usize, shape.width as usize);
        if map.len() != h * w {
            return Err(CodecError::InvalidMask(format!("map has {} entries, image has {}", map.len(), h * w)));
        }
        let pooled = crate::image_io::pool_mean(map, h, w, 1, shape.pool.max(1) as usize);
        let c = shape.channels as usize;
        Self::new(pooled.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// One image in an encode batch.
#[derive(Debug, Clone, Copy)]
pub struct EncodeJob<'a> {
    pub x0: &'a [f64],
    pub selected: usize,
    pub mask: Option<&'a PriorityMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub container: CompressedImage,
    /// The decoder's output, computed on the encoder side.
    pub reconstruction: Vec<f64>,
    pub selections: Vec<SparseSelection>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeOptions {
    pub quantization: Option<QuantizationSet>,
    pub orthogonalize: bool,
}

enum Mode<'a> {
    Encode { x0: &'a [f64], mask: Option<&'a [f64]>, selected: usize },
    Replay { records: &'a [SparseSelection] },
}

struct Session<'a> {
    mode: Mode<'a>,
    ddim_steps: usize,
    x: Vec<f64>,
    chosen: Vec<SparseSelection>,
    trajectory: Option<Vec<Vec<f64>>>,
}

struct Shared<'a> {
    schedule: &'a DiffusionSchedule,
    codebook: &'a Codebook,
    orthogonalize: bool,
    set: &'a QuantizationSet,
}

fn materialize(shared: &Shared<'_>, t: usize) -> Result<AtomMatrix, CodecError> {
    Ok(if shared.orthogonalize {
        shared.codebook.gram_schmidt(t)?
    } else {
        shared.codebook.atoms(t)?
    })
}

fn drive<D: Denoiser + ?Sized>(
    sessions: &mut [Session<'_>],
    shared: &Shared<'_>,
    denoiser: &mut D,
) -> Result<(), CodecError> {
    let total = shared.schedule.steps();
    let dim = shared.codebook.dim();
    for t in (1..=total).rev() {
        let atoms = if sessions.iter().any(|s| t >= s.ddim_steps + 2) {
            Some(materialize(shared, t)?)
        } else {
            None
        };
        let alpha_bar = shared.schedule.alpha_bar(t);
        for s in sessions.iter_mut() {
            let x0_hat = denoiser.denoise(&s.x, t, alpha_bar)?;
            if x0_hat.len() != dim {
                return Err(DenoiseError::DimensionMismatch { expected: dim, got: x0_hat.len() }.into());
            }
            s.x = if t >= s.ddim_steps + 2 {
                let atoms = atoms.as_ref().expect("codebook materialized for noisy steps");
                let sel = match &s.mode {
                    Mode::Encode { x0, mask, selected } => {
                        let mut r: Vec<f64> = x0.iter().zip(&x0_hat).map(|(a, b)| a - b).collect();
                        if let Some(w) = mask {
                            r.iter_mut().zip(w.iter()).for_each(|(ri, wi)| *ri *= wi);
                        }
                        selection::select_atoms(atoms, &r, *selected, shared.set)?
                    }
                    Mode::Replay { records } => records[total - t].clone(),
                };
                let z = selection::combine_and_normalize(atoms, &sel)?;
                s.chosen.push(sel);
                diffusion::codebook_step(&s.x, &x0_hat, &z, t, shared.schedule)?
            } else {
                diffusion::ddim_step(&s.x, &x0_hat, t, shared.schedule)?
            };
            if let Some(traj) = s.trajectory.as_mut() {
                traj.push(s.x.clone());
            }
        }
    }
    Ok(())
}

fn check_vector(x: &[f64], dim: usize) -> Result<(), CodecError> {
    if x.len() != dim {
        return Err(CodecError::DimensionMismatch { expected: dim, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::InvalidParams("input has non-finite entries".into()));
    }
    Ok(())
}

/// Encodes several images that share every parameter except `M` and the
/// mask. Each codebook is generated once per step for the whole batch.
pub fn encode_batch<D: Denoiser + ?Sized>(
    jobs: &[EncodeJob<'_>],
    shape: ImageShape,
    denoiser: &mut D,
    params: &EncodeParams,
) -> Result<Vec<Encoded>, CodecError> {
    let dim = shape.dim();
    if params.selected == 0 && jobs.is_empty() {
        return Ok(Vec::new());
    }
    let set = params.quantization_set()?;
    let schedule = DiffusionSchedule::new(params.schedule, params.steps)?;
    let codebook = Codebook::new(params.seed, dim, params.atoms, params.steps)?;
    let mut headers = Vec::with_capacity(jobs.len());
    let mut sessions = Vec::with_capacity(jobs.len());
    for job in jobs {
        check_vector(job.x0, dim)?;
        if let Some(m) = job.mask {
            if m.len() != dim {
                return Err(CodecError::InvalidMask(format!("mask has {} weights, expected {dim}", m.len())));
            }
        }
        if job.selected > params.atoms {
            return Err(SelectionError::TooManyAtoms { m: job.selected, k: params.atoms }.into());
        }
        let header = params.header(job.selected, shape)?;
        sessions.push(Session {
            mode: Mode::Encode { x0: job.x0, mask: job.mask.map(PriorityMask::weights), selected: job.selected },
            ddim_steps: header.ddim_steps as usize,
            x: diffusion::initial_state(params.seed, dim),
            chosen: Vec::with_capacity(header.records()),
            trajectory: None,
        });
        headers.push(header);
    }
    let shared = Shared { schedule: &schedule, codebook: &codebook, orthogonalize: params.orthogonalize, set: &set };
    drive(&mut sessions, &shared, denoiser)?;
    sessions
        .into_iter()
        .zip(headers)
        .map(|(s, header)| {
            let container = bitstream::pack_steps(header, &s.chosen, &set)?;
            Ok(Encoded { container, reconstruction: s.x, selections: s.chosen })
        })
        .collect()
}

/// Encodes one image; `mask` weights the residual before selection.
pub fn encode<D: Denoiser + ?Sized>(
    x0: &[f64],
    shape: ImageShape,
    denoiser: &mut D,
    params: &EncodeParams,
    mask: Option<&PriorityMask>,
) -> Result<Encoded, CodecError> {
    let job = EncodeJob { x0, selected: params.selected, mask };
    Ok(encode_batch(&[job], shape, denoiser, params)?.remove(0))
}

/// [`encode`] with a required priority mask.
pub fn encode_priority<D: Denoiser + ?Sized>(
    x0: &[f64],
    shape: ImageShape,
    denoiser: &mut D,
    params: &EncodeParams,
    mask: &PriorityMask,
) -> Result<Encoded, CodecError> {
    encode(x0, shape, denoiser, params, Some(mask))
}

fn decoder_setup(header: &Header, opts: &DecodeOptions) -> Result<(QuantizationSet, DiffusionSchedule, Codebook), CodecError> {
    header.validate()?;
    let set = match &opts.quantization {
        Some(s) => s.clone(),
        None => QuantizationSet::canonical(header.bits)?,
    };
    let kind = ScheduleKind::from_id(header.schedule_id)
        .ok_or_else(|| CodecError::InvalidParams(format!("unknown schedule id {}", header.schedule_id)))?;
    let schedule = DiffusionSchedule::new(kind, header.steps as usize)?;
    let codebook = Codebook::new(header.seed, header.dim(), header.atoms as usize, header.steps as usize)?;
    Ok((set, schedule, codebook))
}

/// Replays `records` under `header` and returns every state from `x_T`
/// down to the output `x_0`.
pub fn replay<D: Denoiser + ?Sized>(
    header: &Header,
    records: &[SparseSelection],
    denoiser: &mut D,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<f64>>, CodecError> {
    let (set, schedule, codebook) = decoder_setup(header, opts)?;
    if records.len() != header.records() {
        return Err(BitstreamError::RecordCount { expected: header.records(), got: records.len() }.into());
    }
    let x = diffusion::initial_state(header.seed, header.dim());
    let mut sessions = [Session {
        mode: Mode::Replay { records },
        ddim_steps: header.ddim_steps as usize,
        trajectory: Some(vec![x.clone()]),
        x,
        chosen: Vec::new(),
    }];
    let shared = Shared { schedule: &schedule, codebook: &codebook, orthogonalize: opts.orthogonalize, set: &set };
    drive(&mut sessions, &shared, denoiser)?;
    let [s] = sessions;
    Ok(s.trajectory.unwrap_or_default())
}

/// Decodes several containers that share seed, `T`, `K`, schedule and shape.
pub fn decode_batch<D: Denoiser + ?Sized>(
    containers: &[CompressedImage],
    denoiser: &mut D,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<f64>>, CodecError> {
    let Some(first) = containers.first() else { return Ok(Vec::new()) };
    let key = |h: &Header| (h.seed, h.steps, h.atoms, h.schedule_id, h.dim(), h.bits);
    if containers.iter().any(|c| key(&c.header) != key(&first.header)) {
        return Err(CodecError::InvalidParams("batched containers must share codebook parameters".into()));
    }
    let (set, schedule, codebook) = decoder_setup(&first.header, opts)?;
    let records = containers
        .iter()
        .map(|c| bitstream::unpack_steps(c, &set))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sessions: Vec<Session<'_>> = containers
        .iter()
        .zip(&records)
        .map(|(c, r)| Session {
            mode: Mode::Replay { records: r },
            ddim_steps: c.header.ddim_steps as usize,
            x: diffusion::initial_state(c.header.seed, c.header.dim()),
            chosen: Vec::new(),
            trajectory: None,
        })
        .collect();
    let shared = Shared { schedule: &schedule, codebook: &codebook, orthogonalize: opts.orthogonalize, set: &set };
    drive(&mut sessions, &shared, denoiser)?;
    Ok(sessions.into_iter().map(|s| s.x).collect())
}

/// Decodes one container. The payload is fully parsed before any
/// denoising, so malformed input yields no partial output.
pub fn decode<D: Denoiser + ?Sized>(
    ci: &CompressedImage,
    denoiser: &mut D,
    opts: &DecodeOptions,
) -> Result<Vec<f64>, CodecError> {
    Ok(decode_batch(std::slice::from_ref(ci), denoiser, opts)?.remove(0))
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}
