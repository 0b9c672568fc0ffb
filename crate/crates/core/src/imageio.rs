//! Minimal netpbm and PFM readers/writers.
//!
//! * PGM (`P5`): 16-bit big-endian samples, used for instance label maps.
//! * PPM (`P6`): 8-bit RGB, values in `[0, 1]` quantized on write.
//! * PFM (`Pf`): single-channel little-endian float depth, bottom row first.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::grad::Tensor;

pub fn write_pgm16(w: &mut impl Write, height: usize, width: usize, data: &[u16]) -> Result<()> {
    check_len(data.len(), height * width)?;
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for v in data {
        w.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Reads 8- or 16-bit `P5` data; returns `(height, width, samples)`.
pub fn read_pgm(r: &mut impl BufRead) -> Result<(usize, usize, Vec<u16>)> {
    let (magic, width, height, maxval) = read_header(r)?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5, found {magic}")));
    }
    let n = width * height;
    if maxval < 256 {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)?;
        Ok((height, width, buf.into_iter().map(u16::from).collect()))
    } else {
        let mut buf = vec![0u8; 2 * n];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Ok((height, width, data))
    }
}

/// Writes an `[H×W×3]` image with values in `[0, 1]`.
pub fn write_ppm(w: &mut impl Write, image: &Tensor) -> Result<()> {
    let (h, wd) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Format(format!("PPM needs [H, W, 3], got {s:?}"))),
    };
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(r: &mut impl BufRead) -> Result<Tensor> {
    let (magic, width, height, maxval) = read_header(r)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::Format(format!("expected 8-bit P6, found {magic} max {maxval}")));
    }
    let mut buf = vec![0u8; width * height * 3];
    r.read_exact(&mut buf)?;
    Tensor::new(
        vec![height, width, 3],
        buf.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    )
}

/// Writes an `[H×W]` map as a little-endian PFM (`scale = -1.0`).
pub fn write_pfm(w: &mut impl Write, map: &Tensor) -> Result<()> {
    let (h, wd) = map.dims2("write_pfm")?;
    write!(w, "Pf\n{wd} {h}\n-1.0\n")?;
    for row in (0..h).rev() {
        for v in &map.data()[row * wd..(row + 1) * wd] {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pfm(r: &mut impl BufRead) -> Result<Tensor> {
    let magic = token(r)?;
    if magic != "Pf" {
        return Err(Error::Format(format!("expected Pf, found {magic}")));
    }
    let width = parse_usize(&token(r)?)?;
    let height = parse_usize(&token(r)?)?;
    let scale: f64 = token(r)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    let mut buf = vec![0u8; width * height * 4];
    r.read_exact(&mut buf)?;
    let decode = |c: &[u8]| {
        let b = [c[0], c[1], c[2], c[3]];
        f64::from(if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) })
    };
    let rows: Vec<f64> = buf.chunks_exact(4).map(decode).collect();
    let mut data = Vec::with_capacity(rows.len());
    for row in (0..height).rev() {
        data.extend_from_slice(&rows[row * width..(row + 1) * width]);
    }
    Tensor::new(vec![height, width], data)
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!("expected {want} samples, got {got}")));
    }
    Ok(())
}

fn read_header(r: &mut impl BufRead) -> Result<(String, usize, usize, usize)> {
    let magic = token(r)?;
    let width = parse_usize(&token(r)?)?;
    let height = parse_usize(&token(r)?)?;
    let maxval = parse_usize(&token(r)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad maxval {maxval}")));
    }
    Ok((magic, width, height, maxval))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad header field `{s}`")))
}

/// Next whitespace-delimited header token, skipping `#` comments. Consumes
/// exactly one trailing whitespace byte.
fn token(r: &mut impl BufRead) -> Result<String> {
    let mut out = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if out.is_empty() {
                Err(Error::Format("truncated header".into()))
            } else {
                Ok(out)
            };
        }
        let c = byte[0];
        if c == b'#' && out.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if c.is_ascii_whitespace() {
            if !out.is_empty() {
                return Ok(out);
            }
        } else {
            out.push(c as char);
        }
    }
}
