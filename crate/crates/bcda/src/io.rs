//! Flat binary serialization helpers: dimension headers followed by
//! row-major 64-bit little-endian reals.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::io::{Read, Write};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub fn read_magic<R: Read>(r: &mut R, expected: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != expected {
        return Err(Error::NumericalFailure(format!(
            "bad file magic: expected {:?}, found {:?}",
            std::str::from_utf8(expected).unwrap_or("?"),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    write_u64(w, m.nrows() as u64)?;
    write_u64(w, m.ncols() as u64)?;
    for row in m.rows() {
        for v in row {
            write_f64(w, *v)?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows.checked_mul(cols).is_none_or(|n| n > (1 << 32)) {
        return Err(Error::NumericalFailure(format!(
            "implausible matrix header {rows}x{cols}"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r)?);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::NumericalFailure(format!("matrix shape: {e}")))
}

pub fn write_vector<W: Write>(w: &mut W, v: &Array1<f64>) -> Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        write_f64(w, *x)?;
    }
    Ok(())
}

pub fn read_vector<R: Read>(r: &mut R) -> Result<Array1<f64>> {
    let len = read_u64(r)? as usize;
    if len > (1 << 32) {
        return Err(Error::NumericalFailure(format!("implausible vector length {len}")));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_f64(r)?);
    }
    Ok(Array1::from_vec(data))
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > (1 << 24) {
        return Err(Error::NumericalFailure(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::NumericalFailure(format!("string decode: {e}")))
}
