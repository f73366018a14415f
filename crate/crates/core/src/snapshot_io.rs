//! Snapshot files: `DOAS`, version byte, `M` and `N` as little-endian
//! `u32`, then `N` snapshots of `M` complex values as interleaved `f64`
//! (real, imaginary).

use std::io::{Read, Write};

use num_complex::Complex;

use crate::array::SnapshotBatch;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"DOAS";
pub const SNAPSHOT_VERSION: u8 = 1;

const HEADER_LEN: u64 = 13;

pub fn write_snapshots<T: Real, W: Write>(batch: &SnapshotBatch<T>, mut out: W) -> Result<()> {
    let m = u32::try_from(batch.antennas()).map_err(|_| Error::Dimension("M exceeds 32 bits".into()))?;
    let n = u32::try_from(batch.len()).map_err(|_| Error::Dimension("N exceeds 32 bits".into()))?;
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&[SNAPSHOT_VERSION])?;
    out.write_all(&m.to_le_bytes())?;
    out.write_all(&n.to_le_bytes())?;
    let mut buf = Vec::with_capacity(16 * batch.antennas() * batch.len());
    for snap in &batch.snapshots {
        for z in snap {
            buf.extend_from_slice(&z.re.to_f64_lossy().to_le_bytes());
            buf.extend_from_slice(&z.im.to_f64_lossy().to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn format_err(what: &'static str, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        offset,
        detail: detail.into(),
    }
}

/// Reads a whole snapshot file. Errors carry the byte offset of the problem.
pub fn read_snapshots<T: Real, R: Read>(mut input: R) -> Result<SnapshotBatch<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(format_err("magic", bytes.len() as u64, "file shorter than the magic string"));
    }
    if &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(format_err("magic", 0, format!("expected DOAS, found {:?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(format_err("header", bytes.len() as u64, "truncated header"));
    }
    if bytes[4] != SNAPSHOT_VERSION {
        return Err(format_err("version", 4, format!("unsupported snapshot version {}", bytes[4])));
    }
    let m = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as u64;
    let n = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as u64;
    if m == 0 {
        return Err(format_err("antennas", 5, "M must be positive"));
    }
    if n == 0 {
        return Err(format_err("snapshots", 9, "N must be positive"));
    }
    let expected = HEADER_LEN + 16 * m * n;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(format_err(
            "payload",
            actual,
            format!("truncated: M={m}, N={n} needs {expected} bytes, file has {actual}"),
        ));
    }
    if actual > expected {
        return Err(format_err("trailer", expected, format!("{} trailing bytes", actual - expected)));
    }
    let mut snapshots = Vec::with_capacity(n as usize);
    let mut pos = HEADER_LEN as usize;
    let f = |pos: &mut usize| -> Result<T> {
        let v = f64::from_le_bytes(bytes[*pos..*pos + 8].try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(format_err("payload", *pos as u64, format!("non-finite value {v}")));
        }
        *pos += 8;
        Ok(T::lit(v))
    };
    for _ in 0..n {
        let mut snap = Vec::with_capacity(m as usize);
        for _ in 0..m {
            let re = f(&mut pos)?;
            let im = f(&mut pos)?;
            snap.push(Complex::new(re, im));
        }
        snapshots.push(snap);
    }
    SnapshotBatch::from_snapshots(snapshots)
}
