//! IDX binary format: big-endian u32 headers, unsigned-byte payload.
//!
//! Images use magic `0x00000803` (three dimension fields: count, rows, cols);
//! labels use magic `0x00000801` (one dimension field). Reads transparently
//! accept gzip-compressed files; writes always produce the raw format.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image payload with its dimensions.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let buf = read_file(path)?;
    let mut cur = buf.as_slice();
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(path))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected image magic {IMAGES_MAGIC:#010x}, found {magic:#010x}",
            path.display()
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format(format!("{}: dimension overflow", path.display())))?;
    if cur.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes, header promises {expected}",
            path.display(),
            cur.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: cur.to_vec(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    let mut cur = buf.as_slice();
    let magic = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic {LABELS_MAGIC:#010x}, found {magic:#010x}",
            path.display()
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    if cur.len() != count {
        return Err(Error::Format(format!(
            "{}: payload holds {} labels, header promises {count}",
            path.display(),
            cur.len()
        )));
    }
    Ok(cur.to_vec())
}

pub fn write_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows == 0 || cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel buffer of {} bytes is not a whole number of {rows}x{cols} images",
            pixels.len()
        )));
    }
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    out.write_u32::<BigEndian>(count as u32)?;
    out.write_u32::<BigEndian>(rows as u32)?;
    out.write_u32::<BigEndian>(cols as u32)?;
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

fn truncated(path: &Path) -> Error {
    Error::Format(format!("{}: truncated header", path.display()))
}
