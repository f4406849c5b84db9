//! Binary 8-bit PPM (P6) and PGM (P5).
//!
//! Images load as `[H, W, C]` arrays of `f64` with `C = 3` for P6 and
//! `C = 1` for P5. Other formats can be converted beforehand, for example
//! `convert input.jpg -depth 8 output.ppm` with ImageMagick.

use std::path::Path;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::geometry::ImageSize;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format(
            "unsupported image format: file too short".into(),
        ));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Format(format!(
                "unsupported image format {:?}; expected binary PPM (P6) or PGM (P5)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PNM header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("PNM header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PNM header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("PNM image has zero size".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "only 8-bit PNM is supported, got maxval {maxval}"
        )));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval: maxval as u32,
        data_offset: pos + 1,
    })
}

pub fn read_pnm(bytes: &[u8]) -> Result<Array3<f64>> {
    let h = parse_header(bytes)?;
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(h.channels))
        .ok_or_else(|| Error::Format("PNM image too large".into()))?;
    let data = bytes
        .get(h.data_offset..h.data_offset.saturating_add(n))
        .ok_or_else(|| Error::Format("unexpected end of pixel data".into()))?;
    if data.iter().any(|&v| v as u32 > h.maxval) {
        return Err(Error::Format("pixel value exceeds maxval".into()));
    }
    let values = data.iter().map(|&v| v as f64).collect();
    Ok(Array3::from_shape_vec((h.height, h.width, h.channels), values).expect("length checked"))
}

/// Image size from the header alone.
pub fn read_pnm_size(bytes: &[u8]) -> Result<ImageSize> {
    let h = parse_header(bytes)?;
    ImageSize::new(h.width, h.height)
}

fn encode(img: &Array3<f64>, magic: &str, channels: usize) -> Result<Vec<u8>> {
    let (h, w, c) = img.dim();
    if c != channels {
        return Err(Error::shape(format!(
            "{magic} needs {channels} channels, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot encode an empty image"));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * c);
    for &v in img.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("image data".into()));
        }
        out.push(v.round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

/// Values are rounded and clamped to `0..=255`.
pub fn write_ppm(img: &Array3<f64>) -> Result<Vec<u8>> {
    encode(&img.as_standard_layout().into_owned(), "P6", 3)
}

pub fn write_pgm(img: &Array3<f64>) -> Result<Vec<u8>> {
    encode(&img.as_standard_layout().into_owned(), "P5", 1)
}

/// Writes P6 for three channels and P5 for one.
pub fn write_pnm(img: &Array3<f64>) -> Result<Vec<u8>> {
    match img.dim().2 {
        1 => write_pgm(img),
        _ => write_ppm(img),
    }
}

/// Loads a PNM file as three channels, replicating gray images.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = read_pnm(&std::fs::read(path)?)?;
    Ok(if img.dim().2 == 1 {
        ndarray::concatenate(Axis(2), &[img.view(), img.view(), img.view()]).expect("same shapes")
    } else {
        img
    })
}

pub fn save_pnm(path: impl AsRef<Path>, img: &Array3<f64>) -> Result<()> {
    std::fs::write(path, write_pnm(img)?)?;
    Ok(())
}
