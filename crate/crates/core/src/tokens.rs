//! Token sequences, run-length coding, bitrate accounting and `.dtts` files.
//!
//! `.dtts` layout (little-endian): magic `DTTS`, u32 version, u32 stream
//! count S, u64 frame count T, f64 frame rate, S × u32 vocabulary sizes,
//! then the S streams back to back. Each token takes the smallest whole
//! number of bytes that can hold `vocab - 1` (at least one byte).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

pub const TOKEN_MAGIC: &[u8; 4] = b"DTTS";
pub const TOKEN_VERSION: u32 = 1;

/// Frame-synchronous integer token streams sharing one frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    frame_rate: f64,
    vocab_sizes: Vec<u32>,
    streams: Vec<Vec<u32>>,
}

impl TokenSequence {
    pub fn new(streams: Vec<Vec<u32>>, vocab_sizes: Vec<u32>, frame_rate: f64) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Validation("token sequence needs at least one stream".into()));
        }
        if streams.len() != vocab_sizes.len() {
            return Err(Error::Validation(format!(
                "{} streams but {} vocabulary sizes",
                streams.len(),
                vocab_sizes.len()
            )));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Validation(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        let frames = streams[0].len();
        for (s, (stream, &vocab)) in streams.iter().zip(&vocab_sizes).enumerate() {
            if vocab == 0 {
                return Err(Error::Validation(format!("stream {s} has empty vocabulary")));
            }
            if stream.len() != frames {
                return Err(Error::Validation(format!(
                    "stream {s} has {} frames, stream 0 has {frames}",
                    stream.len()
                )));
            }
            if let Some(t) = stream.iter().position(|&tok| tok >= vocab) {
                return Err(Error::Validation(format!(
                    "stream {s} frame {t}: token {} outside vocabulary {vocab}",
                    stream[t]
                )));
            }
        }
        Ok(Self {
            frame_rate,
            vocab_sizes,
            streams,
        })
    }

    pub fn single(tokens: Vec<u32>, vocab: u32, frame_rate: f64) -> Result<Self> {
        Self::new(vec![tokens], vec![vocab], frame_rate)
    }

    pub fn frames(&self) -> usize {
        self.streams[0].len()
    }

    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn vocab_sizes(&self) -> &[u32] {
        &self.vocab_sizes
    }

    pub fn stream(&self, s: usize) -> &[u32] {
        &self.streams[s]
    }

    pub fn streams(&self) -> &[Vec<u32>] {
        &self.streams
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate
    }

    /// Tokens of all streams at frame `t`.
    pub fn frame(&self, t: usize) -> Vec<u32> {
        self.streams.iter().map(|s| s[t]).collect()
    }

    /// New sequence whose frame `j` is this sequence's frame `indices[j]`,
    /// applied to every stream alike.
    pub fn gather(&self, indices: &[usize]) -> Self {
        Self {
            frame_rate: self.frame_rate,
            vocab_sizes: self.vocab_sizes.clone(),
            streams: self
                .streams
                .iter()
                .map(|s| indices.iter().map(|&i| s[i]).collect())
                .collect(),
        }
    }

    /// Sets frames `[start, start + width)` of every stream to `value`.
    /// `value` must fit every vocabulary.
    pub(crate) fn fill_frames(&mut self, start: usize, width: usize, value: u32) {
        for s in &mut self.streams {
            s[start..start + width].fill(value);
        }
    }

    /// Information rate of these streams in kbps.
    pub fn bandwidth_kbps(&self) -> f64 {
        bandwidth_kbps(&self.vocab_sizes, self.frame_rate)
    }
}

/// Information-theoretic rate: `frame_rate · Σ log2(vocab) / 1000`.
///
/// Vocabularies should hold at least two symbols; a vocabulary of one
/// carries no information and contributes zero.
pub fn bandwidth_kbps(vocab_sizes: &[u32], frame_rate: f64) -> f64 {
    let bits_per_frame: f64 = vocab_sizes.iter().map(|&v| f64::from(v).log2()).sum();
    frame_rate * bits_per_frame / 1000.0
}

/// Rate of an uncompressed continuous feature stream, e.g. 80-dim f32 FBank.
pub fn continuous_bandwidth_kbps(dims: u32, bits_per_value: u32, frame_rate: f64) -> f64 {
    f64::from(dims) * f64::from(bits_per_value) * frame_rate / 1000.0
}

/// Rounds half away from zero toward +∞ at `decimals` places (half-up for
/// the non-negative rates this is used on).
pub fn round_half_up(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale + 0.5).floor() / scale
}

/// Table-style rendering: two decimals, half-up.
pub fn format_kbps(kbps: f64) -> String {
    format!("{:.2}", round_half_up(kbps, 2))
}

/// A maximal run of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub token: u32,
    pub count: u64,
}

/// Per-stream run-length form of a [`TokenSequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunLengthSequence {
    pub frame_rate: f64,
    pub vocab_sizes: Vec<u32>,
    pub original_frames: usize,
    pub streams: Vec<Vec<Run>>,
}

impl RunLengthSequence {
    /// Tokens of each stream with consecutive repeats removed.
    pub fn unique_tokens(&self, s: usize) -> Vec<u32> {
        self.streams[s].iter().map(|r| r.token).collect()
    }
}

/// Collapses consecutive repeats in each stream independently.
pub fn deduplicate(seq: &TokenSequence) -> RunLengthSequence {
    let streams = seq
        .streams
        .iter()
        .map(|stream| {
            let mut runs: Vec<Run> = Vec::new();
            for &token in stream {
                match runs.last_mut() {
                    Some(run) if run.token == token => run.count += 1,
                    _ => runs.push(Run { token, count: 1 }),
                }
            }
            runs
        })
        .collect();
    RunLengthSequence {
        frame_rate: seq.frame_rate,
        vocab_sizes: seq.vocab_sizes.clone(),
        original_frames: seq.frames(),
        streams,
    }
}

/// Expands runs back into frames. Inverse of [`deduplicate`].
pub fn inflate(runs: &RunLengthSequence) -> Result<TokenSequence> {
    if runs.streams.len() != runs.vocab_sizes.len() {
        return Err(Error::Validation(format!(
            "{} run streams but {} vocabulary sizes",
            runs.streams.len(),
            runs.vocab_sizes.len()
        )));
    }
    let mut streams = Vec::with_capacity(runs.streams.len());
    for (s, stream) in runs.streams.iter().enumerate() {
        let mut out = Vec::with_capacity(runs.original_frames);
        for (i, run) in stream.iter().enumerate() {
            if run.count == 0 {
                return Err(Error::Validation(format!("stream {s} run {i} has count 0")));
            }
            if i > 0 && stream[i - 1].token == run.token {
                return Err(Error::Validation(format!(
                    "stream {s} runs {} and {i} repeat token {}",
                    i - 1,
                    run.token
                )));
            }
            if out.len() as u64 + run.count > runs.original_frames as u64 {
                return Err(Error::Validation(format!(
                    "stream {s} runs exceed {} frames",
                    runs.original_frames
                )));
            }
            out.extend(std::iter::repeat_n(run.token, run.count as usize));
        }
        if out.len() != runs.original_frames {
            return Err(Error::Validation(format!(
                "stream {s} runs cover {} of {} frames",
                out.len(),
                runs.original_frames
            )));
        }
        streams.push(out);
    }
    TokenSequence::new(streams, runs.vocab_sizes.clone(), runs.frame_rate)
}

/// Bytes per stored token for a vocabulary: `⌈bits(vocab − 1) / 8⌉`, min 1.
pub fn token_width(vocab: u32) -> usize {
    let bits = 32 - vocab.saturating_sub(1).leading_zeros() as usize;
    bits.div_ceil(8).max(1)
}

pub fn write_tokens_to<W: Write>(seq: &TokenSequence, w: &mut W) -> Result<u64> {
    w.write_all(TOKEN_MAGIC)?;
    io_util::write_u32(w, TOKEN_VERSION)?;
    io_util::write_u32(w, seq.num_streams() as u32)?;
    io_util::write_u64(w, seq.frames() as u64)?;
    io_util::write_f64(w, seq.frame_rate)?;
    for &v in &seq.vocab_sizes {
        io_util::write_u32(w, v)?;
    }
    let mut written = 4 + 4 + 4 + 8 + 8 + 4 * seq.num_streams() as u64;
    let mut buf = Vec::new();
    for (stream, &vocab) in seq.streams.iter().zip(&seq.vocab_sizes) {
        let width = token_width(vocab);
        buf.clear();
        buf.reserve(stream.len() * width);
        for tok in stream {
            buf.extend_from_slice(&tok.to_le_bytes()[..width]);
        }
        w.write_all(&buf)?;
        written += buf.len() as u64;
    }
    Ok(written)
}

pub fn write_tokens(seq: &TokenSequence, destination: &Path) -> Result<u64> {
    io_util::write_atomic(destination, |w| write_tokens_to(seq, w))
}

pub fn read_tokens_from<R: Read>(r: &mut R) -> Result<TokenSequence> {
    io_util::check_magic(r, TOKEN_MAGIC, "token file")?;
    let version = io_util::read_u32(r, "token header")?;
    if version != TOKEN_VERSION {
        return Err(Error::Format(format!("unsupported token file version {version}")));
    }
    let num_streams = io_util::read_u32(r, "token header")? as usize;
    let frames = io_util::read_u64(r, "token header")?;
    let frame_rate = io_util::read_f64(r, "token header")?;
    if num_streams == 0 {
        return Err(Error::Corruption("token file declares zero streams".into()));
    }
    let frames = usize::try_from(frames)
        .map_err(|_| Error::Corruption("token frame count overflows".into()))?;
    let mut vocab_sizes = Vec::with_capacity(num_streams.min(1024));
    for _ in 0..num_streams {
        vocab_sizes.push(io_util::read_u32(r, "token header")?);
    }
    let mut streams = Vec::with_capacity(num_streams);
    for (s, &vocab) in vocab_sizes.iter().enumerate() {
        if vocab == 0 {
            return Err(Error::Corruption(format!("stream {s} has vocabulary 0")));
        }
        let width = token_width(vocab);
        let mut bytes = Vec::new();
        r.by_ref()
            .take((frames * width) as u64)
            .read_to_end(&mut bytes)?;
        if bytes.len() != frames * width {
            return Err(Error::Corruption(format!("token stream {s}: truncated")));
        }
        let mut stream = Vec::with_capacity(frames);
        for (t, chunk) in bytes.chunks_exact(width).enumerate() {
            let mut le = [0u8; 4];
            le[..width].copy_from_slice(chunk);
            let tok = u32::from_le_bytes(le);
            if tok >= vocab {
                return Err(Error::Corruption(format!(
                    "stream {s} frame {t}: token {tok} outside vocabulary {vocab}"
                )));
            }
            stream.push(tok);
        }
        streams.push(stream);
    }
    io_util::expect_eof(r, "token payload")?;
    TokenSequence::new(streams, vocab_sizes, frame_rate)
        .map_err(|e| Error::Corruption(e.to_string()))
}

pub fn read_tokens(source: &Path) -> Result<TokenSequence> {
    read_tokens_from(&mut io_util::open_buffered(source)?)
}

/// One utterance in the JSON-lines interchange form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub utt_id: String,
    pub frame_rate: f64,
    pub vocab_sizes: Vec<u32>,
    pub streams: Vec<Vec<u32>>,
}

impl TokenRecord {
    pub fn from_sequence(utt_id: impl Into<String>, seq: &TokenSequence) -> Self {
        Self {
            utt_id: utt_id.into(),
            frame_rate: seq.frame_rate,
            vocab_sizes: seq.vocab_sizes.clone(),
            streams: seq.streams.clone(),
        }
    }

    pub fn into_sequence(self) -> Result<TokenSequence> {
        TokenSequence::new(self.streams, self.vocab_sizes, self.frame_rate)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("token record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format(format!("token record: {e}")))
    }
}
