//! 8-bit PGM/PPM rasters and their mapping to working vectors in `[-1, 1]`.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Format(String),
    #[error("pool {pool} does not divide {height}x{width}")]
    Pool { pool: usize, height: usize, width: usize },
    #[error("vector of length {got} does not match {expected}")]
    Length { expected: usize, got: usize },
}

/// Interleaved `height x width x channels` samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Format(format!("{channels} channels")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(ImageError::Format("sample count does not match the shape".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn read(path: &Path) -> Result<Self, ImageError> {
        parse_pnm(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_pnm())?;
        Ok(())
    }

    /// Binary P5 for grayscale, P6 for RGB.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Mean over `pool x pool` blocks, mapped to `[-1, 1]`.
    pub fn to_working(&self, pool: usize) -> Result<Vec<f64>, ImageError> {
        let p = pool.max(1);
        if self.height % p != 0 || self.width % p != 0 {
            return Err(ImageError::Pool { pool: p, height: self.height, width: self.width });
        }
        let unit: Vec<f64> = self.data.iter().map(|&v| f64::from(v) / 255.0).collect();
        Ok(pool_mean(&unit, self.height, self.width, self.channels, p)
            .into_iter()
            .map(|v| 2.0 * v - 1.0)
            .collect())
    }

    /// Inverse of [`Raster::to_working`] up to pooling: each working value is
    /// replicated over its block and rounded to 8 bits.
    pub fn from_working(
        x: &[f64],
        width: usize,
        height: usize,
        channels: usize,
        pool: usize,
    ) -> Result<Self, ImageError> {
        let p = pool.max(1);
        if height % p != 0 || width % p != 0 {
            return Err(ImageError::Pool { pool: p, height, width });
        }
        let (ph, pw) = (height / p, width / p);
        let expected = ph * pw * channels;
        if x.len() != expected {
            return Err(ImageError::Length { expected, got: x.len() });
        }
        let mut data = vec![0u8; width * height * channels];
        for y in 0..height {
            for xx in 0..width {
                for c in 0..channels {
                    let v = x[((y / p) * pw + xx / p) * channels + c];
                    let q = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round();
                    data[(y * width + xx) * channels + c] = q as u8;
                }
            }
        }
        Raster::new(width, height, channels, data)
    }

    /// Samples scaled to `[0, 1]`.
    pub fn unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }
}

/// Block mean of an interleaved `h x w x c` array.
pub fn pool_mean(values: &[f64], height: usize, width: usize, channels: usize, pool: usize) -> Vec<f64> {
    let p = pool.max(1);
    let (ph, pw) = (height / p, width / p);
    let mut out = vec![0f64; ph * pw * channels];
    for y in 0..ph * p {
        for x in 0..pw * p {
            for c in 0..channels {
                out[((y / p) * pw + x / p) * channels + c] += values[(y * width + x) * channels + c];
            }
        }
    }
    let area = (p * p) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Format("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize, ImageError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Format(format!("bad number {:?}", String::from_utf8_lossy(tok))))
}

/// Parses P2/P3 (ASCII) and P5/P6 (binary) with `maxval <= 255`.
pub fn parse_pnm(bytes: &[u8]) -> Result<Raster, ImageError> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        _ => return Err(ImageError::Format("not a PGM/PPM file".into())),
    };
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Format(format!("maxval {maxval} is not 8-bit")));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageError::Format("image too large".into()))?;
    let scale = |v: usize| -> u8 { ((v * 255 + maxval / 2) / maxval) as u8 };
    let data = if binary {
        pos += 1;
        let body = bytes
            .get(pos..pos + count)
            .ok_or_else(|| ImageError::Format("truncated pixel data".into()))?;
        body.iter().map(|&v| scale(usize::from(v).min(maxval))).collect()
    } else {
        (0..count)
            .map(|_| number(bytes, &mut pos).map(|v| scale(v.min(maxval))))
            .collect::<Result<Vec<u8>, _>>()?
    };
    Raster::new(width, height, channels, data)
}
