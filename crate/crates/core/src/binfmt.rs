//! Flat f32 matrix files: `u32 rows, u32 cols` (little-endian) followed by
//! `rows * cols` little-endian f32 values, row-major. Used for spectrograms
//! (`[T × F]`) and feature matrices (`[n × d_model]`).

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(8 + 4 * rows * cols);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 8 {
        return Err(Error::Shape(format!(
            "matrix file needs an 8-byte header, got {} bytes",
            bytes.len()
        )));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Shape(format!(
            "header says {rows}x{cols} ({} bytes) but body has {} bytes",
            rows * cols * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub fn write_spectrogram(path: impl AsRef<Path>, s: &Spectrogram) -> Result<()> {
    write_matrix(path, &s.values)
}

pub fn read_spectrogram(path: impl AsRef<Path>) -> Result<Spectrogram> {
    read_matrix(path).map(Spectrogram::new)
}
