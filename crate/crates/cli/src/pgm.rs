//! Binary (P5) 8-bit PGM output.

use std::fs;
use std::io;
use std::path::Path;

/// Maps values in `[0,1]` linearly to `0..=255` (clamped, rounded).
pub fn encode_unit_map(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_unit_map(path: &Path, values: &[f64], height: usize, width: usize) -> io::Result<()> {
    fs::write(path, encode_unit_map(values, height, width))
}
