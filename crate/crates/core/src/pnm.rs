//! Binary Netpbm (P5 grayscale / P6 RGB, maxval 255) and raw sample I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Parses a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn decode(data: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0;
    let magic = next_token(data, &mut pos)?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::InvalidInput(format!(
                "unsupported netpbm magic {:?}, expected P5 or P6",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = parse_number(next_token(data, &mut pos)?)?;
    let height = parse_number(next_token(data, &mut pos)?)?;
    let maxval = parse_number(next_token(data, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::InvalidInput(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::InvalidInput("truncated netpbm header".into()));
    }
    pos += 1;

    let len = width as usize * height as usize * channels as usize;
    let raster = data
        .get(pos..pos + len)
        .ok_or_else(|| Error::InvalidInput(format!("netpbm raster truncated, need {len} bytes")))?;
    ImageBuffer::new(width, height, channels, raster.to_vec())
}

fn next_token<'a>(data: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() && data[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::InvalidInput("truncated netpbm header".into()));
    }
    Ok(&data[start..*pos])
}

fn parse_number(token: &[u8]) -> Result<u32> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "bad netpbm header field {:?}",
                String::from_utf8_lossy(token)
            ))
        })
}

/// Serializes as P6 for RGB images and P5 for grayscale.
pub fn encode(image: &ImageBuffer) -> Vec<u8> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = Vec::with_capacity(image.subpixel_count() + 20);
    write!(out, "{magic}\n{} {}\n255\n", image.width(), image.height()).unwrap();
    out.extend_from_slice(image.samples());
    out
}

pub fn read(path: &Path) -> Result<ImageBuffer> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, image: &ImageBuffer) -> Result<()> {
    fs::write(path, encode(image))?;
    Ok(())
}

/// Geometry for headerless sample files, written `WxHxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawGeometry {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

impl std::str::FromStr for RawGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let bad = || Error::Config(format!("raw geometry must look like WxHxC, got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(RawGeometry {
            width: parts[0].parse().map_err(|_| bad())?,
            height: parts[1].parse().map_err(|_| bad())?,
            channels: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

pub fn decode_raw(data: &[u8], geometry: RawGeometry) -> Result<ImageBuffer> {
    ImageBuffer::new(
        geometry.width,
        geometry.height,
        geometry.channels,
        data.to_vec(),
    )
}
