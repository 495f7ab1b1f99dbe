//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 file I/O, 4 malformed container or
//! image, 5 denoiser connection, 6 invalid parameters, 7 rate model,
//! 8 benchmark setup.

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::bench::{self, BenchError, BenchOptions, Selector, Timing};
use crate::bitstream::{self, CompressedImage};
use crate::codec::{self, CodecError, DecodeOptions, EncodeParams, ImageShape, PriorityMask, DEFAULT_M_LIST};
use crate::denoiser::{DenoiseError, Denoiser};
use crate::diffusion::ScheduleKind;
use crate::image_io::{ImageError, Raster};
use crate::rate_control::{self, ComplexityProvider, DeflateProvider, RateError, RateModel};
use crate::testbed::{self, GaussianPrior};
use crate::wire::{self, GaussianBackend, IdentityBackend, RemoteDenoiser, WireError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Format(String),
    #[error("denoiser: {0}")]
    Connection(String),
    #[error("{0}")]
    Params(String),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Format(_) => 4,
            CliError::Connection(_) => 5,
            CliError::Params(_) => 6,
            CliError::Rate(_) => 7,
            CliError::Bench(_) => 8,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn image_err(path: &Path, e: ImageError) -> CliError {
    match e {
        ImageError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        ImageError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        other => CliError::Params(other.to_string()),
    }
}

fn wire_err(e: WireError) -> CliError {
    match e {
        WireError::Connection(m) => CliError::Connection(m),
        other => CliError::Connection(other.to_string()),
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Bitstream(b) => CliError::Format(b.to_string()),
            CodecError::Denoise(DenoiseError::Wire(w)) => wire_err(w),
            other => CliError::Params(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tdcm", version, about = "Diffusion-steered image compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a PGM/PPM image into a container.
    Compress(CompressArgs),
    /// Decode a container into a PGM/PPM image.
    Decompress(DecompressArgs),
    /// Print a container header.
    Info {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Time thresholding against matching pursuit.
    Bench(BenchArgs),
    /// Residual angles of the selectors over a grid of M and C.
    AngleStudy(AngleArgs),
    /// Index bits of rank coding against fixed-width indices.
    BitSaving {
        #[arg(long = "K", default_value_t = 16384)]
        k: usize,
        #[arg(long = "M", value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Fit a rate model from `config_id,score,psnr` rows.
    FitRateModel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = rate_control::DEFAULT_OUTLIER_QUANTILE)]
        outlier_quantile: f64,
    },
    /// Choose a config id for an image and a target PSNR.
    SelectRate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target_psnr: f64,
    },
    /// Print the complexity score of an image.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run a denoiser server over TCP or stdio.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Linear,
    Cosine,
}

impl From<ScheduleArg> for ScheduleKind {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Linear => ScheduleKind::Linear,
            ScheduleArg::Cosine => ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "M", default_value_t = 100)]
    pub m: usize,
    #[arg(long = "T", default_value_t = 20)]
    pub t: usize,
    #[arg(long = "K", default_value_t = 16384)]
    pub k: usize,
    #[arg(long = "C", default_value_t = 1)]
    pub c: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decoder-only DDIM steps; derived from the bitrate when omitted.
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub pool: u8,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Linear)]
    pub schedule: ScheduleArg,
    /// Grayscale region map; white pixels are prioritized.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub priority: f64,
    #[arg(long, default_value = "gaussian")]
    pub denoiser: String,
    /// Pick M from a rate model; needs --rate-model.
    #[arg(long, requires = "rate_model")]
    pub target_psnr: Option<f64>,
    #[arg(long)]
    pub rate_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "gaussian")]
    pub denoiser: String,
    /// Original image; prints PSNR against it.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "K", value_delimiter = ',', default_value = "16384")]
    pub k: Vec<usize>,
    #[arg(long = "M", value_delimiter = ',', default_value = "100")]
    pub m: Vec<usize>,
    #[arg(long = "C", value_delimiter = ',', default_value = "2")]
    pub c: Vec<u8>,
    #[arg(long = "d", value_delimiter = ',', default_value = "16384")]
    pub d: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "thresholding,mp")]
    pub selectors: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 5)]
    pub mp_reps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AngleArgs {
    #[arg(long = "K", default_value_t = 1024)]
    pub k: usize,
    #[arg(long = "d", default_value_t = 4096)]
    pub d: usize,
    #[arg(long = "M", value_delimiter = ',', default_value = "1,4,16,64,256")]
    pub m: Vec<usize>,
    #[arg(long = "C", value_delimiter = ',', default_value = "2")]
    pub c: Vec<u8>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "thresholding,mp")]
    pub selectors: Vec<String>,
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Identity,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TCP address to listen on; stdio when omitted.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, value_enum, default_value_t = BackendArg::Gaussian)]
    pub backend: BackendArg,
    /// Vector length served by the gaussian backend.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Stop after this many connections.
    #[arg(long)]
    pub connections: Option<usize>,
}

/// Parses `argv` (including the program name), runs, and returns the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(io_at(Path::new("<stdout>")))
}

fn emit(out: &mut dyn Write, text: &str, path: Option<&Path>) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_at(p)),
        None => out.write_all(text.as_bytes()).map_err(io_at(Path::new("<stdout>"))),
    }
}

fn read_raster(path: &Path) -> Result<Raster, CliError> {
    Raster::read(path).map_err(|e| image_err(path, e))
}

fn open_denoiser(name: &str, dim: usize) -> Result<Box<dyn Denoiser>, CliError> {
    if name == "gaussian" {
        return Ok(Box::new(GaussianPrior::default_ramp(dim)));
    }
    if let Some(addr) = name.strip_prefix("remote:") {
        return Ok(Box::new(RemoteDenoiser::connect(addr).map_err(wire_err)?));
    }
    Err(CliError::Params(format!("unknown denoiser {name:?}; expected gaussian or remote:ADDR")))
}

fn shape_of(r: &Raster, pool: u8) -> Result<ImageShape, CliError> {
    let dim = |v: usize| u32::try_from(v).map_err(|_| CliError::Params("image too large".into()));
    Ok(ImageShape::new(dim(r.height)?, dim(r.width)?, r.channels as u8, pool))
}

fn pixel_psnr(a: &Raster, b: &Raster) -> f64 {
    testbed::psnr(&a.unit(), &b.unit())
}

fn parse_selectors(names: &[String]) -> Result<Vec<Selector>, CliError> {
    Ok(names.iter().map(|s| s.parse()).collect::<Result<Vec<_>, _>>()?)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Compress(a) => compress(a, out),
        Command::Decompress(a) => decompress(a, out),
        Command::Info { input } => {
            let bytes = fs::read(&input).map_err(io_at(&input))?;
            let ci = CompressedImage::from_bytes(&bytes).map_err(|e| CliError::Format(e.to_string()))?;
            say(out, ci.header.to_string())
        }
        Command::Bench(a) => {
            let cells = bench::grid(&a.k, &a.m, &a.c, &a.d);
            let opts = BenchOptions {
                selectors: parse_selectors(&a.selectors)?,
                trials: a.trials,
                seed: a.seed,
                timing: Timing { warmup: 1, reps: a.reps, mp_warmup: 1, mp_reps: a.mp_reps },
                ..Default::default()
            };
            let report = bench::bench_selection(&cells, &opts)?;
            for f in &report.failures {
                eprintln!("cell K={} M={} C={} d={} {}: {}", f.cell.k, f.cell.m, f.cell.c, f.cell.d, f.selector, f.error);
            }
            emit(out, &report.to_csv(), a.out.as_deref())
        }
        Command::AngleStudy(a) => {
            let opts = BenchOptions {
                selectors: parse_selectors(&a.selectors)?,
                trials: a.trials,
                seed: a.seed,
                timing: Timing::single(),
                ..Default::default()
            };
            let report = bench::angle_study(a.k, a.d, &a.m, &a.c, &opts, a.parallel)?;
            for f in &report.failures {
                eprintln!("cell M={} C={} {}: {}", f.cell.m, f.cell.c, f.selector, f.error);
            }
            emit(out, &report.to_csv(), a.out.as_deref())
        }
        Command::BitSaving { k, m } => {
            let ms = if m.is_empty() { DEFAULT_M_LIST.to_vec() } else { m };
            if ms.iter().any(|&v| v == 0 || v > k) {
                return Err(CliError::Params(format!("every M must lie in 1..={k}")));
            }
            emit(out, &bitstream::bit_saving_csv(&bitstream::bit_saving_study(k, ms)), None)
        }
        Command::FitRateModel { input, out: path, outlier_quantile } => {
            let text = fs::read_to_string(&input).map_err(io_at(&input))?;
            let rows = rate_control::parse_observations(&text)?;
            let kept = rate_control::filter_outliers(&rows, outlier_quantile);
            let model = rate_control::fit(&kept, &DeflateProvider::default().id())?;
            fs::write(&path, model.to_text()).map_err(io_at(&path))?;
            say(out, format!("fit {} configs from {} of {} rows", model.entries.len(), kept.len(), rows.len()))
        }
        Command::SelectRate { input, model, target_psnr } => {
            let (id, score) = select_for(&read_raster(&input)?, &model, target_psnr)?;
            say(out, format!("score: {score}\nconfig_id: {id}"))
        }
        Command::Score { input } => {
            let score = DeflateProvider::default().score(&read_raster(&input)?)?;
            say(out, format!("{score}"))
        }
        Command::Serve(a) => serve(a),
    }
}

fn select_for(image: &Raster, model_path: &Path, target: f64) -> Result<(u32, u64), CliError> {
    let text = fs::read_to_string(model_path).map_err(io_at(model_path))?;
    let model = RateModel::from_text(&text)?;
    let provider = DeflateProvider::default();
    rate_control::check_provider(&model, &provider)?;
    let score = provider.score(image)?;
    Ok((rate_control::select_bitrate(&model, score as f64, target), score))
}

fn compress(a: CompressArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let image = read_raster(&a.input)?;
    let shape = shape_of(&image, a.pool)?;
    let x0 = image.to_working(a.pool as usize).map_err(|e| image_err(&a.input, e))?;
    let mut selected = a.m;
    if let (Some(target), Some(model)) = (a.target_psnr, a.rate_model.as_deref()) {
        let (id, score) = select_for(&image, model, target)?;
        say(out, format!("score: {score}"))?;
        selected = id as usize;
    }
    let mask = match &a.mask {
        Some(p) => {
            let m = read_raster(p)?;
            if m.channels != 1 || m.width != image.width || m.height != image.height {
                return Err(CliError::Params("mask must be a grayscale image of the input's size".into()));
            }
            let map: Vec<f64> = m.unit().iter().map(|&v| 1.0 + a.priority * v).collect();
            Some(PriorityMask::from_pixel_map(&map, shape)?)
        }
        None => None,
    };
    let params = EncodeParams {
        steps: a.t,
        atoms: a.k,
        selected,
        bits: a.c,
        seed: a.seed,
        schedule: a.schedule.into(),
        ddim_steps: a.n,
        ..Default::default()
    };
    let mut den = open_denoiser(&a.denoiser, shape.dim())?;
    let enc = codec::encode(&x0, shape, &mut den, &params, mask.as_ref())?;
    fs::write(&a.out, enc.container.to_bytes()).map_err(io_at(&a.out))?;
    let h = &enc.container.header;
    let recon = Raster::from_working(&enc.reconstruction, image.width, image.height, image.channels, a.pool as usize)
        .map_err(|e| image_err(&a.out, e))?;
    let bpp = bitstream::bpp_ranked(
        h.steps as usize,
        h.ddim_steps as usize,
        h.atoms as usize,
        h.selected as usize,
        u32::from(h.bits),
        h.pixels(),
    );
    say(out, format!("M: {}\nN: {}\nbytes: {}\nbpp: {bpp:.6}\npsnr: {:.4}", h.selected, h.ddim_steps, enc.container.byte_len(), pixel_psnr(&image, &recon)))
}

fn decompress(a: DecompressArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = fs::read(&a.input).map_err(io_at(&a.input))?;
    let ci = CompressedImage::from_bytes(&bytes).map_err(|e| CliError::Format(e.to_string()))?;
    let h = ci.header;
    let mut den = open_denoiser(&a.denoiser, h.dim())?;
    let x = codec::decode(&ci, &mut den, &DecodeOptions::default())?;
    let image = Raster::from_working(&x, h.width as usize, h.height as usize, h.channels as usize, h.pool as usize)
        .map_err(|e| image_err(&a.out, e))?;
    image.write(&a.out).map_err(|e| image_err(&a.out, e))?;
    if let Some(r) = &a.reference {
        let reference = read_raster(r)?;
        if reference.data.len() != image.data.len() {
            return Err(CliError::Params("reference size differs from the decoded image".into()));
        }
        say(out, format!("psnr: {:.4}", pixel_psnr(&reference, &image)))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let backend = |dim: Option<usize>| -> Result<Box<dyn wire::Backend>, CliError> {
        Ok(match a.backend {
            BackendArg::Identity => Box::new(IdentityBackend),
            BackendArg::Gaussian => {
                let d = dim.ok_or_else(|| CliError::Params("the gaussian backend needs --dim".into()))?;
                Box::new(GaussianBackend(GaussianPrior::default_ramp(d)))
            }
        })
    };
    match &a.listen {
        None => {
            let mut b = backend(a.dim)?;
            let (stdin, stdout) = (io::stdin(), io::stdout());
            wire::serve(&mut BufReader::new(stdin.lock()), &mut BufWriter::new(stdout.lock()), &mut *b).map_err(wire_err)
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::Connection(e.to_string()))?;
            let local = listener.local_addr().map_err(|e| CliError::Connection(e.to_string()))?;
            eprintln!("listening on {local}");
            for (n, stream) in listener.incoming().enumerate() {
                let stream = stream.map_err(|e| CliError::Connection(e.to_string()))?;
                let mut b = backend(a.dim)?;
                let reader = stream.try_clone().map_err(|e| CliError::Connection(e.to_string()))?;
                if let Err(e) = wire::serve(&mut BufReader::new(reader), &mut BufWriter::new(stream), &mut *b) {
                    eprintln!("connection ended: {e}");
                }
                if a.connections.is_some_and(|c| n + 1 >= c) {
                    break;
                }
            }
            Ok(())
        }
    }
}
