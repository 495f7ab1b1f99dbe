//! Choosing a bitrate for a target PSNR from a cheap complexity score.
//!
//! For each bitrate configuration a line `psnr ~ slope * score + intercept`
//! is fit over a training corpus. At encode time the image's score gives a
//! predicted PSNR per configuration, and the cheapest configuration predicted
//! to reach the target is used.

use std::collections::BTreeMap;
use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::image_io::Raster;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("config {0} needs at least two rows with distinct scores")]
    Degenerate(u32),
    #[error("no observations")]
    Empty,
    #[error("non-finite observation")]
    NonFinite,
    #[error("malformed model file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("model was fit with provider {model}, scoring uses {provider}")]
    ProviderMismatch { model: String, provider: String },
    #[error("complexity provider failed: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub config_id: u32,
    pub score: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEntry {
    pub config_id: u32,
    pub slope: f64,
    pub intercept: f64,
    pub mean_psnr: f64,
}

impl RateEntry {
    pub fn predict(&self, score: f64) -> f64 {
        self.slope * score + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    pub provider: String,
    /// Sorted by `config_id`.
    pub entries: Vec<RateEntry>,
}

/// Ordinary least squares per configuration.
pub fn fit(rows: &[Observation], provider: &str) -> Result<RateModel, RateError> {
    if rows.is_empty() {
        return Err(RateError::Empty);
    }
    if rows.iter().any(|r| !r.score.is_finite() || !r.psnr.is_finite()) {
        return Err(RateError::NonFinite);
    }
    let mut groups: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.config_id).or_default().push((r.score, r.psnr));
    }
    let entries = groups
        .into_iter()
        .map(|(config_id, pts)| {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            if pts.len() < 2 || sxx <= f64::EPSILON * mx.abs().max(1.0).powi(2) * n {
                return Err(RateError::Degenerate(config_id));
            }
            let slope = sxy / sxx;
            Ok(RateEntry { config_id, slope, intercept: my - slope * mx, mean_psnr: my })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RateModel { provider: provider.to_string(), entries })
}

impl RateModel {
    pub fn entry(&self, config_id: u32) -> Option<&RateEntry> {
        self.entries.iter().find(|e| e.config_id == config_id)
    }

    /// Line-oriented text: `provider=<tag>` then `config_id,slope,intercept,mean_psnr`.
    pub fn to_text(&self) -> String {
        let mut s = format!("provider={}\n", self.provider);
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.config_id, e.slope, e.intercept, e.mean_psnr));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RateError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(RateError::Empty)?;
        let provider = first
            .strip_prefix("provider=")
            .ok_or_else(|| RateError::Parse { line: 1, message: "missing provider line".into() })?
            .trim()
            .to_string();
        let mut entries = Vec::new();
        for (i, line) in lines {
            let err = |message: &str| RateError::Parse { line: i + 1, message: message.to_string() };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err("expected four fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            entries.push(RateEntry {
                config_id: f[0].parse().map_err(|_| err("bad config id"))?,
                slope: num(f[1])?,
                intercept: num(f[2])?,
                mean_psnr: num(f[3])?,
            });
        }
        if entries.is_empty() {
            return Err(RateError::Empty);
        }
        entries.sort_by_key(|e| e.config_id);
        if entries.windows(2).any(|w| w[0].config_id == w[1].config_id) {
            return Err(RateError::Parse { line: 0, message: "duplicate config id".into() });
        }
        Ok(Self { provider, entries })
    }
}

/// Cheapest configuration predicted to reach `target`; if none does, the
/// one with the highest prediction. Ties go to the lower config id.
pub fn select_bitrate(model: &RateModel, score: f64, target: f64) -> u32 {
    let preds = model.entries.iter().map(|e| (e.config_id, e.predict(score)));
    let qualifying = preds
        .clone()
        .filter(|&(_, p)| p >= target)
        .fold(None, |best: Option<(u32, f64)>, (id, p)| match best {
            Some((_, bp)) if bp <= p => best,
            _ => Some((id, p)),
        });
    if let Some((id, _)) = qualifying {
        return id;
    }
    preds
        .fold(None, |best: Option<(u32, f64)>, (id, p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((id, p)),
        })
        .map(|(id, _)| id)
        .expect("nonempty model")
}

/// Configuration whose mean training PSNR is closest to `target`.
pub fn select_bitrate_naive(model: &RateModel, target: f64) -> u32 {
    model
        .entries
        .iter()
        .fold(None, |best: Option<(u32, f64)>, e| {
            let gap = (e.mean_psnr - target).abs();
            match best {
                Some((_, bg)) if bg <= gap => best,
                _ => Some((e.config_id, gap)),
            }
        })
        .map(|(id, _)| id)
        .expect("nonempty model")
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.96;

/// Drops rows whose score exceeds the `q`-quantile of all scores.
pub fn filter_outliers(rows: &[Observation], q: f64) -> Vec<Observation> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    match quantile(&scores, q) {
        Some(cut) => rows.iter().copied().filter(|r| r.score <= cut).collect(),
        None => Vec::new(),
    }
}

/// A cheap reference compressor whose output size tracks image complexity.
pub trait ComplexityProvider {
    fn id(&self) -> String;
    fn score(&self, image: &Raster) -> Result<u64, RateError>;
}

/// Size of the raw samples under DEFLATE.
#[derive(Debug, Clone, Copy)]
pub struct DeflateProvider {
    pub level: u32,
}

impl Default for DeflateProvider {
    fn default() -> Self {
        Self { level: 9 }
    }
}

impl ComplexityProvider for DeflateProvider {
    fn id(&self) -> String {
        format!("deflate-raw-l{}", self.level)
    }

    fn score(&self, image: &Raster) -> Result<u64, RateError> {
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(self.level));
        enc.write_all(&image.data).map_err(|e| RateError::Provider(e.to_string()))?;
        let out = enc.finish().map_err(|e| RateError::Provider(e.to_string()))?;
        Ok(out.len() as u64)
    }
}

pub fn check_provider(model: &RateModel, provider: &dyn ComplexityProvider) -> Result<(), RateError> {
    let id = provider.id();
    if model.provider != id {
        return Err(RateError::ProviderMismatch { model: model.provider.clone(), provider: id });
    }
    Ok(())
}

/// Parses `config_id,score,psnr` rows; a non-numeric first line is a header.
pub fn parse_observations(text: &str) -> Result<Vec<Observation>, RateError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = (f.len() == 3)
            .then(|| Some((f[0].parse::<u32>().ok()?, f[1].parse::<f64>().ok()?, f[2].parse::<f64>().ok()?)))
            .flatten();
        match parsed {
            Some((config_id, score, psnr)) => out.push(Observation { config_id, score, psnr }),
            None if i == 0 => continue,
            None => return Err(RateError::Parse { line: i + 1, message: "expected config_id,score,psnr".into() }),
        }
    }
    Ok(out)
}
