//! Binary 8-bit PGM (P5) and PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a 1-channel image as P5 or a 3-channel image as P6, clipping to
/// `[0, 1]` and rounding to 8 bits.
pub fn export_pnm(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = x.image_dims()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::UnsupportedChannels(c)),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            let v = x.data()[ch * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_tokens(buf: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, pos + 1))
}

/// Reads a P5/P6 file with maxval 255 into a `(C, H, W)` tensor in `[0, 1]`.
pub fn import_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let buf = fs::read(path)?;
    let (tokens, start) = header_tokens(&buf, 4)?;
    let c = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field '{s}'")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PNM supported, maxval {maxval}")));
    }
    let plane = h * w;
    let raster = buf.get(start..start + c * plane).ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    let mut data = vec![0.0; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = raster[p * c + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}
