//! Little-endian primitives shared by the binary formats.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len().min(1 << 16) * 4);
    for chunk in values.chunks(1 << 16) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads exactly `N` bytes, reporting a short read as corruption.
pub(crate) fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r, what)?))
}

/// Reads `count` f32 values. Fails if the stream ends early.
pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(count.min(1 << 24));
    let mut buf = vec![0u8; 4 * count.min(1 << 16)];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(1 << 16);
        let bytes = &mut buf[..4 * n];
        r.read_exact(bytes).map_err(|e| truncated(e, what))?;
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        remaining -= n;
    }
    Ok(out)
}

/// Fails with a corruption error unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Corruption(format!("{what}: trailing bytes after payload"))),
    }
}

fn truncated(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Corruption(format!("{what}: truncated"))
    } else {
        Error::Io(e)
    }
}

pub(crate) fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{what}: missing magic bytes")))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partially written file.
pub(crate) fn write_atomic<F>(path: &Path, body: F) -> Result<u64>
where
    F: FnOnce(&mut BufWriter<&mut fs::File>) -> Result<u64>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    let written = {
        let mut w = BufWriter::new(tmp.as_file_mut());
        let n = body(&mut w)?;
        w.flush()?;
        n
    };
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(written)
}

pub(crate) fn open_buffered(path: &Path) -> Result<io::BufReader<fs::File>> {
    Ok(io::BufReader::new(fs::File::open(path)?))
}
