//! `.dtcb` codebook files and their JSON training sidecar.
//!
//! Layout (little-endian): magic `DTCB`, u32 version, u32 kind
//! (0 plain, 1 grouped, 2 residual), u32 codebook count (1, G or Q),
//! count × u32 entry counts, u32 input dimension F, then every codebook's
//! centroids as f32 rows in order. Grouped codebooks have rows of F/G values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Codebook, GroupedCodebook, KMeansConfig, KMeansReport, Quantizer, QuantizerKind, ResidualStack};
use crate::error::{Error, Result};
use crate::io_util;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"DTCB";
pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QuantizerHeader {
    pub version: u32,
    pub kind: QuantizerKind,
    pub entries: Vec<u32>,
    pub dim: usize,
}

pub fn write_quantizer_to<W: Write>(q: &Quantizer, w: &mut W) -> Result<u64> {
    let books = q.codebooks();
    w.write_all(CODEBOOK_MAGIC)?;
    io_util::write_u32(w, CODEBOOK_VERSION)?;
    io_util::write_u32(w, q.kind().code())?;
    io_util::write_u32(w, books.len() as u32)?;
    for b in books {
        io_util::write_u32(w, b.len() as u32)?;
    }
    io_util::write_u32(w, q.dim() as u32)?;
    let mut n = 20 + 4 * books.len() as u64;
    for b in books {
        io_util::write_f32s(w, b.centroids())?;
        n += 4 * b.centroids().len() as u64;
    }
    Ok(n)
}

pub fn write_quantizer(q: &Quantizer, destination: &Path) -> Result<u64> {
    io_util::write_atomic(destination, |w| write_quantizer_to(q, w))
}

fn read_header<R: Read>(r: &mut R) -> Result<QuantizerHeader> {
    io_util::check_magic(r, CODEBOOK_MAGIC, "codebook file")?;
    let version = io_util::read_u32(r, "codebook header")?;
    if version != CODEBOOK_VERSION {
        return Err(Error::Format(format!("unsupported codebook file version {version}")));
    }
    let code = io_util::read_u32(r, "codebook header")?;
    let kind = QuantizerKind::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown codebook kind {code}")))?;
    let count = io_util::read_u32(r, "codebook header")? as usize;
    if count == 0 || (kind == QuantizerKind::Plain && count != 1) {
        return Err(Error::Corruption(format!("{kind:?} codebook file lists {count} tables")));
    }
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let k = io_util::read_u32(r, "codebook header")?;
        if k == 0 {
            return Err(Error::Corruption("codebook with zero entries".into()));
        }
        entries.push(k);
    }
    let dim = io_util::read_u32(r, "codebook header")? as usize;
    if dim == 0 || (kind == QuantizerKind::Grouped && !dim.is_multiple_of(count)) {
        return Err(Error::Corruption(format!(
            "dimension {dim} invalid for {count} {kind:?} tables"
        )));
    }
    Ok(QuantizerHeader {
        version,
        kind,
        entries,
        dim,
    })
}

pub fn read_quantizer_from<R: Read>(r: &mut R) -> Result<Quantizer> {
    let h = read_header(r)?;
    let book_dim = match h.kind {
        QuantizerKind::Grouped => h.dim / h.entries.len(),
        _ => h.dim,
    };
    let mut books = Vec::with_capacity(h.entries.len());
    for &k in &h.entries {
        let data = io_util::read_f32s(r, k as usize * book_dim, "codebook payload")?;
        books.push(Codebook::new(data, book_dim).map_err(|e| Error::Corruption(e.to_string()))?);
    }
    io_util::expect_eof(r, "codebook payload")?;
    Ok(match h.kind {
        QuantizerKind::Plain => Quantizer::Plain(books.pop().expect("one table")),
        QuantizerKind::Grouped => Quantizer::Grouped(GroupedCodebook::new(books)?),
        QuantizerKind::Residual => Quantizer::Residual(ResidualStack::new(books)?),
    })
}

pub fn read_quantizer(source: &Path) -> Result<Quantizer> {
    read_quantizer_from(&mut io_util::open_buffered(source)?)
}

impl QuantizerHeader {
    pub fn read(source: &Path) -> Result<Self> {
        read_header(&mut io_util::open_buffered(source)?)
    }
}

/// Where the training sidecar for a codebook file lives: `<file>.json`.
pub fn sidecar_path(codebook: &Path) -> PathBuf {
    let mut s = codebook.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// JSON sidecar describing how a codebook file was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub kind: QuantizerKind,
    pub seed: u64,
    pub config: KMeansConfig,
    pub entries: Vec<u32>,
    pub dim: usize,
    pub trained_on_frames: usize,
    /// One report per table (group or stage).
    pub reports: Vec<KMeansReport>,
    /// Residual stacks only: mean residual energy after each stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_energy: Option<Vec<f64>>,
    /// Free-form provenance such as the training subset summary.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl TrainingMetadata {
    pub fn save(&self, path: &Path) -> Result<u64> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        io_util::write_atomic(path, |w| {
            w.write_all(text.as_bytes())?;
            Ok(text.len() as u64)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
