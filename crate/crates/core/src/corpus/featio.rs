//! Feature file layout (all integers and floats little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `FHVF`                   |
//! | 4      | 4    | format version (u32, = 1)      |
//! | 8      | 4    | rows (u32): frames or segments |
//! | 12     | 4    | cols (u32): feature dimension  |
//! | 16     | 4·rows·cols | row-major f32 values    |

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::FeatureMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FHVF";
const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn write_matrix_file(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER + 4 * m.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(Error::at_path(path))?;
    f.write_all(&buf).map_err(Error::at_path(path))?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
    decode(&bytes).map_err(|detail| Error::Format {
        what: "feature file",
        detail: format!("{}: {detail}", path.display()),
    })
}

fn decode(bytes: &[u8]) -> std::result::Result<Array2<f32>, String> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err("missing FHVF header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(format!("version {version}, expected {VERSION}"));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = HEADER + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(format!("{} bytes, header implies {expected}", bytes.len()));
    }
    let values = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

pub fn write_feature_file(path: &Path, feat: &FeatureMatrix) -> Result<()> {
    write_matrix_file(path, &feat.frames)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::new(read_matrix_file(path)?)
}
