//! Binary PPM (P6) and PBM (P4) readers/writers.
//!
//! Images live in memory as `[h, w, 3]` tensors with values in [0, 1];
//! quantization is round(v * 255), so any pixel of the form k/255 survives
//! a write/read round trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::Dim(format!("write_ppm: shape {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend(img.data().iter().map(|&v| quantize(v)));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (magic, rest) = take_token(&bytes)?;
    if magic != b"P6" {
        return Err(Error::Data(format!("{}: not a P6 PPM", path.display())));
    }
    let (w, rest) = take_usize(rest)?;
    let (h, rest) = take_usize(rest)?;
    let (maxval, rest) = take_usize(rest)?;
    if maxval != 255 {
        return Err(Error::Data(format!("{}: maxval {maxval} unsupported", path.display())));
    }
    // exactly one whitespace byte separates header from raster
    let raster = &rest[1..];
    if raster.len() < w * h * 3 {
        return Err(Error::Data(format!("{}: truncated raster", path.display())));
    }
    let data = raster[..w * h * 3]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Binary mask `[h, w]` of 0/1 values as PBM P4 (1 = edit region = black).
pub fn write_pbm(path: &Path, mask: &Tensor) -> Result<()> {
    if mask.shape().len() != 2 {
        return Err(Error::Dim(format!("write_pbm: shape {:?}", mask.shape())));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut buf = format!("P4\n{w} {h}\n").into_bytes();
    for y in 0..h {
        let mut byte = 0u8;
        for x in 0..w {
            if mask.data()[y * w + x] >= 0.5 {
                byte |= 0x80 >> (x % 8);
            }
            if x % 8 == 7 {
                buf.push(byte);
                byte = 0;
            }
        }
        if w % 8 != 0 {
            buf.push(byte);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pbm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (magic, rest) = take_token(&bytes)?;
    if magic != b"P4" {
        return Err(Error::Data(format!("{}: not a P4 PBM", path.display())));
    }
    let (w, rest) = take_usize(rest)?;
    let (h, rest) = take_usize(rest)?;
    let raster = &rest[1..];
    let row_bytes = w.div_ceil(8);
    if raster.len() < h * row_bytes {
        return Err(Error::Data(format!("{}: truncated raster", path.display())));
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let b = raster[y * row_bytes + x / 8];
            if b & (0x80 >> (x % 8)) != 0 {
                data[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Red tint at 50% opacity over the source wherever the mask is set.
pub fn mask_overlay(src: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if src.shape().len() != 3
        || mask.shape().len() != 2
        || src.shape()[0] != mask.shape()[0]
        || src.shape()[1] != mask.shape()[1]
    {
        return Err(Error::Dim("mask_overlay: shape mismatch".into()));
    }
    let mut out = src.clone();
    let red = [1.0, 0.0, 0.0];
    for (p, m) in mask.data().iter().enumerate() {
        if *m >= 0.5 {
            for c in 0..3 {
                out.data_mut()[p * 3 + c] = 0.5 * src.data()[p * 3 + c] + 0.5 * red[c];
            }
        }
    }
    Ok(out)
}

fn take_token(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let mut i = 0;
    while i < bytes.len() && bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    let start = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    if start == i {
        return Err(Error::Data("unexpected end of netpbm header".into()));
    }
    Ok((&bytes[start..i], &bytes[i..]))
}

fn take_usize(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let (tok, rest) = take_token(bytes)?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::Data("bad netpbm header".into()))?;
    let v = s
        .parse()
        .map_err(|_| Error::Data(format!("bad netpbm header field `{s}`")))?;
    Ok((v, rest))
}
