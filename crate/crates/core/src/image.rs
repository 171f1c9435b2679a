//! Single-channel images and their file formats: `image v1` (text header,
//! little-endian `f32` pixels) and 16-bit binary PGM.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-major image, `height` rows of `width` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Dimension(format!(
                "image {width}x{height} cannot hold {} pixels",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// `[1, 1, height, width]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("image dims are positive")
    }

    /// Inverse of [`Image::to_tensor`] for a single-sample, single-channel tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::Dimension(format!(
                "expected a [1,1,H,W] tensor, got {:?}",
                t.shape()
            )));
        }
        Image::new(w, h, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("image v1 {} {}\n", self.width, self.height).into_bytes();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut header = String::new();
        r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = header.trim_end_matches('\n').split(' ').collect();
        let [ "image", "v1", w, h] = fields[..] else {
            return Err(Error::format(path, format!("expected 'image v1 <nu> <nv>', got '{}'", header.trim_end())));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::format(path, format!("bad image dimension '{s}': {e}")))
        };
        let (w, h) = (parse(w)?, parse(h)?);
        let mut raw = vec![0u8; w * h * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format(path, "image data truncated"))?;
        if r.position() as usize != bytes.len() {
            return Err(Error::format(path, "trailing bytes after image data"));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Image::new(w, h, data).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Quantizes `[lo, hi]` linearly onto `0..=65535` (values clamped).
    pub fn to_pgm16(&self, lo: f32, hi: f32) -> Pgm16 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels = self
            .data
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Pgm16 {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Binary (P5) PGM with maxval 65535, samples stored big-endian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm16 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

impl Pgm16 {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = BufReader::new(bytes);
        let mut tokens = Vec::new();
        // magic, width, height, maxval separated by whitespace; comments skipped
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(Error::format(path, "truncated PGM header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P5" || tokens.len() != 4 {
            return Err(Error::format(path, "expected a P5 PGM header"));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::format(path, format!("bad PGM header field '{s}': {e}")))
        };
        let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 65535 {
            return Err(Error::format(path, format!("expected maxval 65535, got {maxval}")));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        if raw.len() != w * h * 2 {
            return Err(Error::format(path, format!("expected {} sample bytes, got {}", w * h * 2, raw.len())));
        }
        let pixels = raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        Ok(Pgm16 {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
