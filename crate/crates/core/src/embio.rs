//! Embedding matrices on disk, utterance manifests and training-data sampling.
//!
//! The `.dtek` layout is fixed and little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `DTEK`                  |
//! | 4      | 4    | u32 version (= 1)             |
//! | 8      | 4    | u32 feature dimension F       |
//! | 12     | 8    | f64 frame rate (Hz)           |
//! | 20     | 8    | u64 frame count T             |
//! | 28     | 4·T·F| f32 payload, row-major frames |

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DTEK";
pub const EMBEDDING_VERSION: u32 = 1;
/// Size in bytes of the fixed `.dtek` header.
pub const EMBEDDING_HEADER_LEN: u64 = 28;

/// A `T×F` sequence of finite feature frames sampled at `frame_rate` Hz.
///
/// Also used for post-embedding feature sequences, see
/// [`crate::frontend::FeatureSequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    frame_rate: f64,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data. `data.len()` must be a multiple of `dim`.
    pub fn new(data: Vec<f32>, dim: usize, frame_rate: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("feature dimension must be at least 1".into()));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Validation(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at frame {}, dim {}",
                data[pos],
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            dim,
            frame_rate,
            data,
        })
    }

    pub fn zeros(frames: usize, dim: usize, frame_rate: f64) -> Result<Self> {
        Self::new(vec![0.0; frames * dim], dim, frame_rate)
    }

    /// Builds a matrix from a list of equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>], frame_rate: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("rows have unequal lengths".into()));
        }
        Self::new(rows.concat(), dim, frame_rate)
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Duration covered by the frames, in seconds.
    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.frame_rate.to_bits() == other.frame_rate.to_bits()
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Mutable access for in-place transforms. Callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Serializes `matrix` in `.dtek` layout. Returns the number of bytes written.
pub fn write_embedding_to<W: Write>(matrix: &EmbeddingMatrix, w: &mut W) -> Result<u64> {
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("matrix contains non-finite values".into()));
    }
    w.write_all(EMBEDDING_MAGIC)?;
    io_util::write_u32(w, EMBEDDING_VERSION)?;
    io_util::write_u32(w, dim_to_u32(matrix.dim)?)?;
    io_util::write_f64(w, matrix.frame_rate)?;
    io_util::write_u64(w, matrix.frames() as u64)?;
    io_util::write_f32s(w, &matrix.data)?;
    Ok(EMBEDDING_HEADER_LEN + 4 * matrix.data.len() as u64)
}

/// Writes a `.dtek` file atomically.
pub fn write_embedding(matrix: &EmbeddingMatrix, destination: &Path) -> Result<u64> {
    io_util::write_atomic(destination, |w| write_embedding_to(matrix, w))
}

/// Header fields of a `.dtek` stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingHeader {
    pub version: u32,
    pub dim: usize,
    pub frame_rate: f64,
    pub frames: u64,
}

impl EmbeddingHeader {
    pub fn payload_len(&self) -> u64 {
        4 * self.frames * self.dim as u64
    }
}

pub fn read_embedding_header<R: Read>(r: &mut R) -> Result<EmbeddingHeader> {
    io_util::check_magic(r, EMBEDDING_MAGIC, "embedding file")?;
    let version = io_util::read_u32(r, "embedding header")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding file version {version}"
        )));
    }
    let dim = io_util::read_u32(r, "embedding header")? as usize;
    let frame_rate = io_util::read_f64(r, "embedding header")?;
    let frames = io_util::read_u64(r, "embedding header")?;
    if dim == 0 {
        return Err(Error::Corruption("embedding header has F = 0".into()));
    }
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(Error::Corruption(format!(
            "embedding header has invalid frame rate {frame_rate}"
        )));
    }
    Ok(EmbeddingHeader {
        version,
        dim,
        frame_rate,
        frames,
    })
}

/// Parses a complete `.dtek` stream. Trailing bytes are rejected.
pub fn read_embedding_from<R: Read>(r: &mut R) -> Result<EmbeddingMatrix> {
    let header = read_embedding_header(r)?;
    let count = usize::try_from(header.frames)
        .ok()
        .and_then(|t| t.checked_mul(header.dim))
        .ok_or_else(|| Error::Corruption("embedding header frame count overflows".into()))?;
    let data = io_util::read_f32s(r, count, "embedding payload")?;
    io_util::expect_eof(r, "embedding payload")?;
    EmbeddingMatrix::new(data, header.dim, header.frame_rate)
}

pub fn read_embedding(source: &Path) -> Result<EmbeddingMatrix> {
    let mut r = io_util::open_buffered(source)?;
    let header = read_embedding_header(&mut r)?;
    let actual = fs::metadata(source)?.len();
    if actual != EMBEDDING_HEADER_LEN + header.payload_len() {
        return Err(Error::Corruption(format!(
            "{}: header declares {} frames × {} dims ({} payload bytes) but file has {} payload bytes",
            source.display(),
            header.frames,
            header.dim,
            header.payload_len(),
            actual.saturating_sub(EMBEDDING_HEADER_LEN)
        )));
    }
    let data = io_util::read_f32s(&mut r, (header.frames as usize) * header.dim, "embedding payload")?;
    EmbeddingMatrix::new(data, header.dim, header.frame_rate)
}

fn dim_to_u32(dim: usize) -> Result<u32> {
    u32::try_from(dim).map_err(|_| Error::Validation(format!("dimension {dim} exceeds u32")))
}

/// One utterance in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// File reference, resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub frames: u64,
    pub frame_rate: f64,
    pub duration_s: f64,
    /// Per-frame integer phone labels; see [`PhoneInventory`] for names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phone_alignment: Option<Vec<u32>>,
}

impl ManifestEntry {
    fn validate(&self) -> Result<()> {
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Validation(format!(
                "{}: frame rate must be positive",
                self.utt_id
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(Error::Validation(format!(
                "{}: duration must be non-negative",
                self.utt_id
            )));
        }
        let period = 1.0 / self.frame_rate;
        let implied = self.frames as f64 / self.frame_rate;
        if (implied - self.duration_s).abs() > period {
            return Err(Error::Validation(format!(
                "{}: duration {} s disagrees with {} frames at {} Hz",
                self.utt_id, self.duration_s, self.frames, self.frame_rate
            )));
        }
        if let Some(align) = &self.phone_alignment {
            if align.len() as u64 != self.frames {
                return Err(Error::Validation(format!(
                    "{}: phone alignment has {} labels for {} frames",
                    self.utt_id,
                    align.len(),
                    self.frames
                )));
            }
        }
        Ok(())
    }
}

/// Utterance catalog, stored as JSON lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            e.validate()?;
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::Validation(format!("duplicate utt_id {:?}", e.utt_id)));
            }
        }
        Ok(Self {
            entries,
            base_dir: None,
        })
    }

    /// Sets the directory that relative entry paths are resolved against.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_s).sum()
    }

    pub fn total_frames(&self) -> u64 {
        self.entries.iter().map(|e| e.frames).sum()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    /// Absolute (or base-relative) location of an entry's file.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        match &self.base_dir {
            Some(base) if entry.path.is_relative() => base.join(&entry.path),
            _ => entry.path.clone(),
        }
    }

    pub fn from_reader<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|source| Error::Manifest {
                line: i + 1,
                source,
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    /// Loads a JSON-lines manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::from_reader(io_util::open_buffered(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m.with_base_dir(base))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<u64> {
        let mut n = 0u64;
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| Error::Validation(e.to_string()))?;
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
            n += line.len() as u64 + 1;
        }
        Ok(n)
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        io_util::write_atomic(path, |w| self.write_to(w))
    }
}

/// Names for the integer phone labels used in manifest alignments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneInventory {
    pub phones: Vec<String>,
}

impl PhoneInventory {
    pub fn label(&self, id: u32) -> Option<&str> {
        self.phones.get(id as usize).map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        io_util::write_atomic(path, |w| {
            w.write_all(text.as_bytes())?;
            Ok(text.len() as u64)
        })
    }
}

/// Randomly selects utterances until their total duration reaches `target_hours`.
///
/// The result is the shortest prefix of a seeded uniform permutation whose
/// duration is at least the target, so dropping its last entry would fall
/// below the target.
pub fn sample_subset(manifest: &Manifest, target_hours: f64, seed: u64) -> Result<Manifest> {
    if !(target_hours.is_finite() && target_hours > 0.0) {
        return Err(Error::Config(format!(
            "target hours must be positive, got {target_hours}"
        )));
    }
    let target_s = target_hours * 3600.0;
    let total = manifest.total_duration_s();
    if total < target_s {
        return Err(Error::Capacity(format!(
            "manifest holds {:.3} h, fewer than the requested {target_hours} h",
            total / 3600.0
        )));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut acc = 0.0;
    let mut picked = Vec::new();
    for i in order {
        picked.push(manifest.entries[i].clone());
        acc += manifest.entries[i].duration_s;
        if acc >= target_s {
            break;
        }
    }
    Ok(Manifest {
        entries: picked,
        base_dir: manifest.base_dir.clone(),
    })
}

/// Which frames of each utterance feed training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameSampler {
    All,
    /// Keep each frame independently with this probability.
    Bernoulli(f64),
}

impl FrameSampler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FrameSampler::Bernoulli(p) if !(0.0..=1.0).contains(&p) => Err(Error::Config(
                format!("bernoulli probability must be in [0, 1], got {p}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for FrameSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameSampler::All => f.write_str("all"),
            FrameSampler::Bernoulli(p) => write!(f, "bernoulli:{p}"),
        }
    }
}

impl FromStr for FrameSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sampler = match s.split_once(':') {
            None if s == "all" => FrameSampler::All,
            Some(("bernoulli", p)) => FrameSampler::Bernoulli(
                p.parse()
                    .map_err(|_| Error::Config(format!("bad bernoulli probability {p:?}")))?,
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown frame sampler {s:?}; expected `all` or `bernoulli:<p>`"
                )))
            }
        };
        sampler.validate()?;
        Ok(sampler)
    }
}

/// Streams frames from every utterance of a manifest, in manifest order.
///
/// Files are loaded one at a time. The first error ends the stream.
pub struct FrameStream<'a> {
    manifest: &'a Manifest,
    sampler: FrameSampler,
    rng: ChaCha8Rng,
    next_entry: usize,
    current: Option<EmbeddingMatrix>,
    cursor: usize,
    dim: Option<usize>,
    failed: bool,
}

impl FrameStream<'_> {
    /// Feature dimension, known once the first file is opened.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn load_next(&mut self) -> Result<bool> {
        let Some(entry) = self.manifest.entries.get(self.next_entry) else {
            return Ok(false);
        };
        self.next_entry += 1;
        let path = self.manifest.resolve(entry);
        let m = read_embedding(&path)?;
        match self.dim {
            Some(d) if d != m.dim() => {
                return Err(Error::Schema(format!(
                    "{}: dimension {} differs from {d} of earlier files",
                    entry.utt_id,
                    m.dim()
                )))
            }
            _ => self.dim = Some(m.dim()),
        }
        if m.frames() as u64 != entry.frames {
            return Err(Error::Schema(format!(
                "{}: manifest lists {} frames, file has {}",
                entry.utt_id,
                entry.frames,
                m.frames()
            )));
        }
        self.current = Some(m);
        self.cursor = 0;
        Ok(true)
    }
}

impl Iterator for FrameStream<'_> {
    type Item = Result<Vec<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(m) = &self.current {
                while self.cursor < m.frames() {
                    let t = self.cursor;
                    self.cursor += 1;
                    let keep = match self.sampler {
                        FrameSampler::All => true,
                        FrameSampler::Bernoulli(p) => self.rng.random_bool(p),
                    };
                    if keep {
                        return Some(Ok(m.row(t).to_vec()));
                    }
                }
                self.current = None;
            }
            match self.load_next() {
                Ok(true) => continue,
                Ok(false) => return None,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Streams frames from the manifest's utterances under a sampling policy.
pub fn iterate_frames(manifest: &Manifest, sampler: FrameSampler, seed: u64) -> Result<FrameStream<'_>> {
    sampler.validate()?;
    Ok(FrameStream {
        manifest,
        sampler,
        rng: ChaCha8Rng::seed_from_u64(seed),
        next_entry: 0,
        current: None,
        cursor: 0,
        dim: None,
        failed: false,
    })
}

/// A flat, in-memory collection of equally sized training frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    dim: usize,
    data: Vec<f32>,
}

impl FrameSet {
    pub fn new(data: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("frame dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("frames contain non-finite values".into()));
        }
        Ok(Self { dim, data })
    }

    /// Gathers a frame stream. An empty stream is an input error since no
    /// dimension can be inferred.
    pub fn collect<I>(frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = Result<Vec<f32>>>,
    {
        let mut dim = None;
        let mut data = Vec::new();
        for frame in frames {
            let frame = frame?;
            match dim {
                None => dim = Some(frame.len()),
                Some(d) if d != frame.len() => {
                    return Err(Error::Schema(format!(
                        "frame of length {} in a stream of dimension {d}",
                        frame.len()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(&frame);
        }
        match dim {
            None => Err(Error::Input("frame stream is empty".into())),
            Some(d) => Self::new(data, d),
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        Self::collect(rows.iter().cloned().map(Ok))
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Self {
        Self {
            dim: m.dim(),
            data: m.data().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Contiguous feature slice `[start, start + width)` of every frame.
    pub fn slice_dims(&self, start: usize, width: usize) -> Result<Self> {
        if width == 0 || start + width > self.dim {
            return Err(Error::Schema(format!(
                "dims [{start}, {}) outside frame dimension {}",
                start + width,
                self.dim
            )));
        }
        let data = self
            .rows()
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        Ok(Self { dim: width, data })
    }

    /// Number of bitwise-distinct frames, counting no further than `limit`.
    pub fn count_distinct(&self, limit: usize) -> usize {
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        for r in self.rows() {
            seen.insert(r.iter().map(|v| canonical_bits(*v)).collect());
            if seen.len() >= limit {
                break;
            }
        }
        seen.len()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

// -0.0 and 0.0 are the same point.
fn canonical_bits(v: f32) -> u32 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}
