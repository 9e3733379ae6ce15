//! Binary tensor files and versioned manifests for model/index artifacts.
//!
//! One file per named parameter: a `HSNT` magic, a dims header, then the
//! little-endian 64-bit float payload. Manifests are JSON alongside.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HSNT";

/// Writes `data` with shape `dims` to `path`.
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if expect != data.len() {
        return Err(Error::dim("write_tensor", expect, data.len()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor file written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Artifact(format!("{}: bad magic", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let ndims = u32::from_le_bytes(b4) as usize;
    if ndims > 8 {
        return Err(Error::Artifact(format!("{}: implausible rank {ndims}", path.display())));
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut b8 = [0u8; 8];
    for _ in 0..ndims {
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok((dims, data))
}

/// Replaces characters that cannot appear in file names.
pub fn tensor_file_name(tensor_name: &str) -> String {
    format!("{}.bin", tensor_name.replace(['/', '\\'], "_"))
}

pub fn write_manifest<T: serde::Serialize>(path: &Path, manifest: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(manifest).map_err(|e| Error::Artifact(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}
