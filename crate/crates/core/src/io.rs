//! Binary checkpoints and CSV export.
//!
//! Checkpoint layout, all little-endian: `n` as `u64`, then `L` and `t` as
//! `f64`, then `n` interleaved `(re, im)` pairs of `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Grid1D, WaveField};
use crate::groundstate::SolitonProfile;

/// Fixed 17-significant-digit rendering used by every CSV writer.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_checkpoint<W: Write>(mut w: W, field: &WaveField) -> Result<()> {
    w.write_all(&(field.grid.n() as u64).to_le_bytes())?;
    w.write_all(&field.grid.length().to_le_bytes())?;
    w.write_all(&field.time.to_le_bytes())?;
    for v in &field.values {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<WaveField> {
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
            _ => Error::Io(e),
        })?;
        Ok(word)
    };
    let n = u64::from_le_bytes(next(&mut r)?);
    let n = usize::try_from(n).map_err(|_| Error::Format(format!("sample count {n} overflows")))?;
    let length = f64::from_le_bytes(next(&mut r)?);
    let time = f64::from_le_bytes(next(&mut r)?);
    let grid = Grid1D::new(n, length).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let re = f64::from_le_bytes(next(&mut r)?);
        let im = f64::from_le_bytes(next(&mut r)?);
        values.push(Complex64::new(re, im));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    WaveField::new(grid, values, time)
}

pub fn save_checkpoint(path: impl AsRef<Path>, field: &WaveField) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), field)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WaveField> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Writes a header line and one comma-separated line per row.
pub fn write_csv<W, I>(mut w: W, header: &[&str], rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = Vec<f64>>,
{
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Dimension(format!(
                "csv row has {} columns, header has {}",
                row.len(),
                header.len()
            )));
        }
        let line: Vec<String> = row.into_iter().map(format_float).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `x, re, im`.
pub fn write_field_csv<W: Write>(w: W, field: &WaveField) -> Result<()> {
    let grid = field.grid;
    write_csv(
        w,
        &["x", "re", "im"],
        field.values.iter().enumerate().map(|(j, v)| vec![grid.x(j), v.re, v.im]),
    )
}

/// Columns `x, phi`.
pub fn write_profile_csv<W: Write>(w: W, profile: &SolitonProfile) -> Result<()> {
    let grid = profile.grid;
    write_csv(
        w,
        &["x", "phi"],
        profile.profile.iter().enumerate().map(|(j, &v)| vec![grid.x(j), v]),
    )
}
