//! Binary PGM (P5) / PPM (P6) with maxval 300 and big-endian 16-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAXVAL: u16 = 300;

/// Decoded raster: height, width, channel count and interleaved samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<u16>,
}

pub fn encode(raster: &Raster) -> Result<Vec<u8>> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("cannot encode {c}-channel raster"))),
    };
    if raster.samples.len() != raster.height * raster.width * raster.channels {
        return Err(Error::Shape("raster sample count does not match its dimensions".into()));
    }
    if let Some(s) = raster.samples.iter().find(|&&s| s > MAXVAL) {
        return Err(Error::InvalidArgument(format!("sample {s} exceeds maxval {MAXVAL}")));
    }
    let mut out = Vec::with_capacity(raster.samples.len() * 2 + 32);
    write!(out, "{magic}\n{} {}\n{MAXVAL}\n", raster.width, raster.height).expect("write to Vec");
    for s in &raster.samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Raster> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(origin, "truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(origin, "non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(origin, format!("unsupported magic {m}"))),
    };
    let parse = |t: &str, what: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::format(origin, format!("bad {what} {t:?}")))
    };
    let width = parse(tokens[1], "width")?;
    let height = parse(tokens[2], "height")?;
    let maxval = parse(tokens[3], "maxval")?;
    if maxval != MAXVAL as usize {
        return Err(Error::format(origin, format!("maxval {maxval}, expected {MAXVAL}")));
    }
    let n = width * height * channels;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 2 * n {
        return Err(Error::format(
            origin,
            format!("expected {} raster bytes, found {}", 2 * n, body.len()),
        ));
    }
    let samples: Vec<u16> = body.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    if samples.iter().any(|&s| s > MAXVAL) {
        return Err(Error::format(origin, "sample exceeds maxval"));
    }
    Ok(Raster {
        height,
        width,
        channels,
        samples,
    })
}

pub fn write(path: &Path, raster: &Raster) -> Result<()> {
    let bytes = encode(raster)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
