//! `BMK1` scan files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "BMK1" | version u32 | rows u32 | cols u32 | resolution f64
//!        | gun_len u32 | casing_len u32 | source_len u32
//!        | gun_id | casing_id | source_path        (UTF-8)
//!        | heights: rows*cols f64, row-major
//!        | mask: ceil(rows*cols/8) bytes, LSB-first, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ScanIoError, ScanRecord};
use crate::surface::SurfaceMatrix;

pub const INTERNAL_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BMK1";

pub fn write_internal(scan: &ScanRecord, path: &Path) -> Result<(), ScanIoError> {
    atomic_write(path, &encode(scan)).map_err(|e| ScanIoError::io(path, e))
}

pub fn read_internal(path: &Path) -> Result<ScanRecord, ScanIoError> {
    let bytes = fs::read(path).map_err(|e| ScanIoError::io(path, e))?;
    decode(&bytes)
}

/// Writes through a sibling `.partial` file and renames it into place, so
/// readers never observe a half-written file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("partial");
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path)
}

fn encode(scan: &ScanRecord) -> Vec<u8> {
    let s = &scan.surface;
    let n = s.rows() * s.cols();
    let mut out = Vec::with_capacity(48 + n * 8 + n / 8 + 1);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&INTERNAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(s.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(s.cols() as u32).to_le_bytes());
    out.extend_from_slice(&s.resolution().to_le_bytes());
    for label in [&scan.gun_id, &scan.casing_id, &scan.source_path] {
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
    }
    for label in [&scan.gun_id, &scan.casing_id, &scan.source_path] {
        out.extend_from_slice(label.as_bytes());
    }
    for h in s.heights() {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&pack_bits(s.mask()));
    out
}

fn decode(bytes: &[u8]) -> Result<ScanRecord, ScanIoError> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    if &magic != MAGIC {
        return Err(ScanIoError::BadMagic {
            expected: "BMK1",
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != INTERNAL_VERSION {
        return Err(ScanIoError::Version {
            found: version,
            expected: INTERNAL_VERSION,
        });
    }
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let resolution = r.f64("resolution")?;
    let gun_len = r.u32("label lengths")? as usize;
    let casing_len = r.u32("label lengths")? as usize;
    let source_len = r.u32("label lengths")? as usize;
    let gun_id = r.utf8(gun_len)?;
    let casing_id = r.utf8(casing_len)?;
    let source_path = r.utf8(source_len)?;
    let n = rows * cols;
    let heights = r.f64_vec(n, "heights")?;
    let mask = unpack_bits(r.take(n.div_ceil(8), "mask")?, n);
    r.finish()?;
    let surface = SurfaceMatrix::new(rows, cols, resolution, heights, mask)?;
    ScanRecord::new(surface, gun_id, casing_id, source_path)
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// Cursor over a little-endian byte buffer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ScanIoError> {
        let end = self.pos.checked_add(n).ok_or(ScanIoError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(ScanIoError::Truncated(what));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn magic(&mut self) -> Result<[u8; 4], ScanIoError> {
        let b = self.take(4, "magic")?;
        Ok([b[0], b[1], b[2], b[3]])
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, ScanIoError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64, ScanIoError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64_vec(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, ScanIoError> {
        let b = self.take(n.checked_mul(8).ok_or(ScanIoError::Truncated(what))?, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn utf8(&mut self, n: usize) -> Result<String, ScanIoError> {
        let b = self.take(n, "label")?;
        String::from_utf8(b.to_vec()).map_err(|_| ScanIoError::Utf8)
    }

    /// Fails unless the whole buffer has been consumed.
    pub(crate) fn finish(&self) -> Result<(), ScanIoError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ScanIoError::TrailingBytes(n)),
        }
    }
}
