//! `volume v1` files: a five-line text header followed by little-endian `f32`
//! voxels, one full channel after the other.
//!
//! ```text
//! volume v1
//! dims <nx> <ny> <nz>
//! spacing <sx> <sy> <sz>
//! origin <ox> <oy> <oz>
//! channels mr mu
//! ```

use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use super::{Channel, Volume};
use crate::error::{Error, Result};

const CHANNELS: [Channel; 2] = [Channel::Mr, Channel::Attenuation];

pub fn to_bytes(vol: &Volume) -> Vec<u8> {
    let [nx, ny, nz] = vol.dims();
    let [sx, sy, sz] = vol.spacing();
    let [ox, oy, oz] = vol.origin();
    let mut out = format!(
        "volume v1\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\norigin {ox} {oy} {oz}\nchannels {} {}\n",
        CHANNELS[0].name(),
        CHANNELS[1].name()
    )
    .into_bytes();
    for ch in CHANNELS {
        for v in vol.channel(ch) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn field<'a>(line: &'a str, key: &str, path: &Path) -> Result<Vec<&'a str>> {
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err(Error::format(path, format!("expected '{key}' line, got '{line}'")));
    }
    let rest: Vec<&str> = parts.collect();
    if rest.len() != 3 && key != "channels" {
        return Err(Error::format(path, format!("'{key}' needs three values, got '{line}'")));
    }
    Ok(rest)
}

fn triple<T: std::str::FromStr>(vals: &[&str], path: &Path) -> Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let mut out = Vec::with_capacity(3);
    for v in vals {
        out.push(
            v.parse::<T>()
                .map_err(|e| Error::format(path, format!("bad header value '{v}': {e}")))?,
        );
    }
    out.try_into()
        .map_err(|_| Error::format(path, "expected three header values"))
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Volume> {
    let mut r = Cursor::new(bytes);
    let mut lines = Vec::with_capacity(5);
    for _ in 0..5 {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if !line.ends_with('\n') {
            return Err(Error::format(path, "truncated volume header"));
        }
        line.pop();
        lines.push(line);
    }
    if lines[0] != "volume v1" {
        return Err(Error::format(path, format!("expected 'volume v1', got '{}'", lines[0])));
    }
    let dims: [usize; 3] = triple(&field(&lines[1], "dims", path)?, path)?;
    let spacing: [f64; 3] = triple(&field(&lines[2], "spacing", path)?, path)?;
    let origin: [f64; 3] = triple(&field(&lines[3], "origin", path)?, path)?;
    let names = field(&lines[4], "channels", path)?;
    if names != [CHANNELS[0].name(), CHANNELS[1].name()] {
        return Err(Error::format(path, format!("unsupported channel list '{}'", lines[4])));
    }
    let n: usize = dims.iter().product();
    let mut read_channel = || -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format(path, "volume data truncated"))?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let mr = read_channel()?;
    let mu = read_channel()?;
    if r.position() as usize != bytes.len() {
        return Err(Error::format(path, "trailing bytes after volume data"));
    }
    Volume::from_channels(dims, spacing, origin, mr, mu).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save(vol: &Volume, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(vol)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
