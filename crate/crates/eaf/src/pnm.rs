//! Binary PGM (P5) and PPM (P6) encoding, 8 bits per sample.

use std::io::Write;
use std::path::Path;

use eaf_core::synth::Image;

use crate::{CliError, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale image of values in `[0, 1]`, row-major; `1.0` maps to 255.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "PGM data size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| to_byte(*v)));
    out
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM needs three channels");
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| to_byte(*v)));
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

/// Parses a P5/P6 header and returns `(magic, width, height, pixel bytes)`.
pub fn decode(bytes: &[u8]) -> Option<(&str, usize, usize, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    let magic = fields[0];
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    if fields[3] != "255" || !(magic == "P5" || magic == "P6") {
        return None;
    }
    let data = bytes.get(pos + 1..)?;
    let expect = w * h * if magic == "P6" { 3 } else { 1 };
    (data.len() == expect).then_some((magic, w, h, data))
}
