//! Token embedding lookup, multi-stream fusion and frame-rate resampling.
//!
//! `.dtem` layout (little-endian): magic `DTEM`, u32 version, u32 vocab K,
//! u32 output dimension D, u32 init mode (0 random, 1 codebook-projected).
//! Codebook-projected tables then carry u32 codebook dimension C and a
//! `C×D` f32 projection block. The `K×D` f32 weight rows follow.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::io_util;
use crate::quantize::Codebook;
use crate::tokens::TokenSequence;

pub const TABLE_MAGIC: &[u8; 4] = b"DTEM";
pub const TABLE_VERSION: u32 = 1;
/// Default embedding width for token features.
pub const DEFAULT_EMBED_DIM: usize = 80;

/// Dense per-frame features produced from tokens. Same representation and
/// invariants as an embedding matrix.
pub type FeatureSequence = EmbeddingMatrix;

/// Row-major `rows × cols` matrix applied as `y = x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    rows: usize,
    cols: usize,
    weights: Vec<f32>,
}

impl LinearMap {
    pub fn new(weights: Vec<f32>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols {
            return Err(Error::Validation(format!(
                "{} weights do not form a {rows}×{cols} matrix",
                weights.len()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("linear map contains non-finite values".into()));
        }
        Ok(Self { rows, cols, weights })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Self::new(w, n, n)
    }

    /// I.i.d. uniform entries in `[-1/√rows, 1/√rows]`.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (rows.max(1) as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(w, rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.weights[r * self.cols + c]
    }

    /// `x · W` for a row vector of length `rows`, accumulated in f64.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.rows);
        let mut acc = vec![0f64; self.cols];
        for (&xi, row) in x.iter().zip(self.weights.chunks_exact(self.cols)) {
            if xi == 0.0 {
                continue;
            }
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += f64::from(xi) * f64::from(w);
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Free weights, uniform in `[-1/√D, 1/√D]` when drawn by [`EmbeddingTable::random`].
    Random,
    /// Rows are k-means centroids passed through a linear projection.
    CodebookProjected,
}

/// `K×D` lookup table mapping tokens to dense features.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    weights: LinearMap,
    init_mode: InitMode,
    projection: Option<LinearMap>,
}

impl EmbeddingTable {
    pub fn random(vocab: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (out_dim.max(1) as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..vocab * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            weights: LinearMap::new(w, vocab, out_dim)?,
            init_mode: InitMode::Random,
            projection: None,
        })
    }

    /// A table with explicitly given rows, treated as free (random-mode) weights.
    pub fn from_weights(weights: Vec<f32>, vocab: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weights: LinearMap::new(weights, vocab, out_dim)?,
            init_mode: InitMode::Random,
            projection: None,
        })
    }

    /// Rows are `centroids · projection`.
    pub fn codebook_projected(codebook: &Codebook, projection: LinearMap) -> Result<Self> {
        if projection.rows() != codebook.dim() {
            return Err(Error::Config(format!(
                "projection has {} rows for codebook dimension {}",
                projection.rows(),
                codebook.dim()
            )));
        }
        let mut w = Vec::with_capacity(codebook.len() * projection.cols());
        for c in codebook.rows() {
            w.extend(projection.apply(c));
        }
        Ok(Self {
            weights: LinearMap::new(w, codebook.len(), projection.cols())?,
            init_mode: InitMode::CodebookProjected,
            projection: Some(projection),
        })
    }

    pub fn vocab(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn projection(&self) -> Option<&LinearMap> {
        self.projection.as_ref()
    }

    pub fn weights(&self) -> &[f32] {
        self.weights.weights()
    }

    pub fn row(&self, token: usize) -> &[f32] {
        let d = self.out_dim();
        &self.weights.weights()[token * d..(token + 1) * d]
    }

    /// Scales every weight by `alpha`.
    pub fn scaled(&self, alpha: f32) -> Result<Self> {
        Ok(Self {
            weights: LinearMap::new(
                self.weights.weights().iter().map(|w| w * alpha).collect(),
                self.vocab(),
                self.out_dim(),
            )?,
            init_mode: self.init_mode,
            projection: self.projection.clone(),
        })
    }

    /// Index of the row closest to `feature` (lowest index on ties).
    pub fn nearest_row(&self, feature: &[f32]) -> usize {
        let d = self.out_dim();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.weights.weights().chunks_exact(d).enumerate() {
            let dist = crate::quantize::squared_distance(feature, row);
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        best
    }

    fn check_token(&self, t: usize, tok: u32) -> Result<()> {
        if tok as usize >= self.vocab() {
            return Err(Error::Range(format!(
                "frame {t}: token {tok} outside embedding table of {}",
                self.vocab()
            )));
        }
        Ok(())
    }
}

/// Looks up one feature row per token of a single-stream sequence.
pub fn embed_tokens(seq: &TokenSequence, table: &EmbeddingTable) -> Result<FeatureSequence> {
    if seq.num_streams() != 1 {
        return Err(Error::Schema(format!(
            "embed_tokens takes one stream, got {}; use fuse_groups",
            seq.num_streams()
        )));
    }
    let mut data = Vec::with_capacity(seq.frames() * table.out_dim());
    for (t, &tok) in seq.stream(0).iter().enumerate() {
        table.check_token(t, tok)?;
        data.extend_from_slice(table.row(tok as usize));
    }
    FeatureSequence::new(data, table.out_dim(), seq.frame_rate())
}

/// Embeds each stream with its own table, concatenates per frame and maps
/// the concatenation through `projection`.
pub fn fuse_groups(
    seq: &TokenSequence,
    tables: &[EmbeddingTable],
    projection: &LinearMap,
) -> Result<FeatureSequence> {
    if tables.len() != seq.num_streams() {
        return Err(Error::Config(format!(
            "{} embedding tables for {} token streams",
            tables.len(),
            seq.num_streams()
        )));
    }
    let concat_dim: usize = tables.iter().map(EmbeddingTable::out_dim).sum();
    if projection.rows() != concat_dim {
        return Err(Error::Config(format!(
            "fusion projection has {} rows, concatenated embeddings have {concat_dim}",
            projection.rows()
        )));
    }
    let mut data = Vec::with_capacity(seq.frames() * projection.cols());
    let mut concat = Vec::with_capacity(concat_dim);
    for t in 0..seq.frames() {
        concat.clear();
        for (s, table) in tables.iter().enumerate() {
            let tok = seq.stream(s)[t];
            table.check_token(t, tok)?;
            concat.extend_from_slice(table.row(tok as usize));
        }
        data.extend(projection.apply(&concat));
    }
    FeatureSequence::new(data, projection.cols(), seq.frame_rate())
}

/// Source index for output frame `j` when stretching `in_len` frames to
/// `out_len`: `min(⌊j · in_len / out_len⌋, in_len − 1)`.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    if in_len == 0 {
        return Vec::new();
    }
    (0..out_len)
        .map(|j| ((j as u128 * in_len as u128 / out_len as u128) as usize).min(in_len - 1))
        .collect()
}

/// Output length and source indices for rate conversion.
pub fn rate_indices(frames: usize, source_rate: f64, target_rate: f64) -> Result<Vec<usize>> {
    if !(source_rate > 0.0 && target_rate > 0.0 && source_rate.is_finite() && target_rate.is_finite()) {
        return Err(Error::Config(format!(
            "rates must be positive, got {source_rate} → {target_rate}"
        )));
    }
    if frames == 0 {
        return Ok(Vec::new());
    }
    if source_rate == target_rate {
        return Ok((0..frames).collect());
    }
    let out_len = (frames as f64 * target_rate / source_rate).round() as usize;
    Ok((0..out_len)
        .map(|j| (((j as f64 * source_rate) / target_rate).floor() as usize).min(frames - 1))
        .collect())
}

/// Nearest-neighbour conversion to `target_rate`.
pub fn resample_nearest(seq: &FeatureSequence, target_rate: f64) -> Result<FeatureSequence> {
    let idx = rate_indices(seq.frames(), seq.frame_rate(), target_rate)?;
    let mut data = Vec::with_capacity(idx.len() * seq.dim());
    for i in idx {
        data.extend_from_slice(seq.row(i));
    }
    FeatureSequence::new(data, seq.dim(), target_rate)
}

/// Token-level counterpart of [`resample_nearest`].
pub fn resample_tokens(seq: &TokenSequence, target_rate: f64) -> Result<TokenSequence> {
    let idx = rate_indices(seq.frames(), seq.frame_rate(), target_rate)?;
    let g = seq.gather(&idx);
    TokenSequence::new(g.streams().to_vec(), g.vocab_sizes().to_vec(), target_rate)
}

pub fn write_table_to<W: Write>(table: &EmbeddingTable, w: &mut W) -> Result<u64> {
    w.write_all(TABLE_MAGIC)?;
    io_util::write_u32(w, TABLE_VERSION)?;
    io_util::write_u32(w, table.vocab() as u32)?;
    io_util::write_u32(w, table.out_dim() as u32)?;
    let mut n = 20u64;
    match (&table.init_mode, &table.projection) {
        (InitMode::CodebookProjected, Some(p)) => {
            io_util::write_u32(w, 1)?;
            io_util::write_u32(w, p.rows() as u32)?;
            io_util::write_f32s(w, p.weights())?;
            n += 4 + 4 * p.weights().len() as u64;
        }
        _ => io_util::write_u32(w, 0)?,
    }
    io_util::write_f32s(w, table.weights())?;
    Ok(n + 4 * table.weights().len() as u64)
}

pub fn write_table(table: &EmbeddingTable, destination: &Path) -> Result<u64> {
    io_util::write_atomic(destination, |w| write_table_to(table, w))
}

pub fn read_table_from<R: Read>(r: &mut R) -> Result<EmbeddingTable> {
    io_util::check_magic(r, TABLE_MAGIC, "embedding table")?;
    let version = io_util::read_u32(r, "table header")?;
    if version != TABLE_VERSION {
        return Err(Error::Format(format!("unsupported table version {version}")));
    }
    let vocab = io_util::read_u32(r, "table header")? as usize;
    let out_dim = io_util::read_u32(r, "table header")? as usize;
    let mode = io_util::read_u32(r, "table header")?;
    let corrupt = |e: Error| Error::Corruption(e.to_string());
    let (init_mode, projection) = match mode {
        0 => (InitMode::Random, None),
        1 => {
            let in_dim = io_util::read_u32(r, "table header")? as usize;
            let w = io_util::read_f32s(r, in_dim * out_dim, "table projection")?;
            (
                InitMode::CodebookProjected,
                Some(LinearMap::new(w, in_dim, out_dim).map_err(corrupt)?),
            )
        }
        m => return Err(Error::Format(format!("unknown table init mode {m}"))),
    };
    let w = io_util::read_f32s(r, vocab * out_dim, "table payload")?;
    io_util::expect_eof(r, "table payload")?;
    Ok(EmbeddingTable {
        weights: LinearMap::new(w, vocab, out_dim).map_err(corrupt)?,
        init_mode,
        projection,
    })
}

pub fn read_table(source: &Path) -> Result<EmbeddingTable> {
    read_table_from(&mut io_util::open_buffered(source)?)
}

/// Stores a fusion projection as a random-mode table with one row per input.
pub fn write_projection(p: &LinearMap, destination: &Path) -> Result<u64> {
    let table = EmbeddingTable::from_weights(p.weights().to_vec(), p.rows(), p.cols())?;
    write_table(&table, destination)
}

pub fn read_projection(source: &Path) -> Result<LinearMap> {
    let t = read_table(source)?;
    LinearMap::new(t.weights().to_vec(), t.vocab(), t.out_dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn feats(rows: &[&[f32]], rate: f64) -> FeatureSequence {
        FeatureSequence::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), rate).unwrap()
    }

    #[test]
    fn one_hot_lookup() {
        let t = EmbeddingTable::from_weights(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let s = TokenSequence::single(vec![1], 2, 50.0).unwrap();
        let f = embed_tokens(&s, &t).unwrap();
        assert_eq!(f.row(0), &[0.0, 1.0]);
        assert_eq!(f.frame_rate(), 50.0);
    }

    #[test]
    fn constant_tokens_give_constant_rows() {
        let t = EmbeddingTable::random(5, 80, 3).unwrap();
        let s = TokenSequence::single(vec![4; 7], 5, 50.0).unwrap();
        let f = embed_tokens(&s, &t).unwrap();
        assert!(f.rows().all(|r| r == t.row(4)));
    }

    #[test]
    fn out_of_vocab_is_range_error() {
        let t = EmbeddingTable::random(3, 4, 0).unwrap();
        let s = TokenSequence::single(vec![5], 8, 50.0).unwrap();
        assert!(matches!(embed_tokens(&s, &t), Err(Error::Range(_))));
    }

    #[test]
    fn random_init_bounds_and_determinism() {
        let a = EmbeddingTable::random(100, 80, 9).unwrap();
        let b = EmbeddingTable::random(100, 80, 9).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 80f32.sqrt();
        assert!(a.weights().iter().all(|w| w.abs() <= bound));
        assert_ne!(a, EmbeddingTable::random(100, 80, 10).unwrap());
    }

    #[test]
    fn codebook_projected_identity_gives_centroids() {
        let cb = Codebook::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 4.0]]).unwrap();
        let t = EmbeddingTable::codebook_projected(&cb, LinearMap::identity(3).unwrap()).unwrap();
        assert_eq!(t.init_mode(), InitMode::CodebookProjected);
        let s = TokenSequence::single(vec![1, 0], 2, 50.0).unwrap();
        let f = embed_tokens(&s, &t).unwrap();
        assert_eq!(f.row(0), cb.centroid(1));
        assert_eq!(f.row(1), cb.centroid(0));
    }

    #[test]
    fn fusion_reductions() {
        let t0 = EmbeddingTable::random(4, 3, 1).unwrap();
        let t1 = EmbeddingTable::random(6, 3, 2).unwrap();
        let s1 = TokenSequence::single(vec![0, 3, 2], 4, 100.0).unwrap();
        let one = fuse_groups(&s1, std::slice::from_ref(&t0), &LinearMap::identity(3).unwrap()).unwrap();
        assert_eq!(one, embed_tokens(&s1, &t0).unwrap());

        // [I; 0] keeps the first group.
        let mut w = vec![0.0; 6 * 3];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let keep_first = LinearMap::new(w, 6, 3).unwrap();
        let s2 = TokenSequence::new(vec![vec![0, 3, 2], vec![5, 1, 1]], vec![4, 6], 100.0).unwrap();
        let fused = fuse_groups(&s2, &[t0.clone(), t1.clone()], &keep_first).unwrap();
        assert_eq!(fused, embed_tokens(&s1, &t0).unwrap());

        assert!(matches!(
            fuse_groups(&s2, &[t0.clone()], &keep_first),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fuse_groups(&s2, &[t0, t1], &LinearMap::identity(3).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resample_examples() {
        let a = [1.0f32];
        let b = [2.0f32];
        let c = [3.0f32];
        let s = feats(&[&a, &b], 50.0);
        let up = resample_nearest(&s, 100.0).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up.frame_rate(), 100.0);

        let s = feats(&[&a, &b, &c], 75.0);
        assert_eq!(resample_nearest(&s, 100.0).unwrap().data(), &[1.0, 1.0, 2.0, 3.0]);

        assert_eq!(resample_nearest(&s, 75.0).unwrap(), s);
        let empty = FeatureSequence::zeros(0, 2, 50.0).unwrap();
        assert_eq!(resample_nearest(&empty, 100.0).unwrap().frames(), 0);
    }

    #[test]
    fn upsample_then_subsample_recovers() {
        let rows: Vec<Vec<f32>> = (0..13).map(|i| vec![i as f32, -(i as f32)]).collect();
        let s = FeatureSequence::from_rows(&rows, 50.0).unwrap();
        let up = resample_nearest(&s, 100.0).unwrap();
        let back: Vec<f32> = up.rows().step_by(2).flatten().copied().collect();
        assert_eq!(back, s.data());
    }

    #[test]
    fn nearest_index_formula() {
        assert_eq!(nearest_indices(2, 4), vec![0, 0, 1, 1]);
        assert_eq!(nearest_indices(4, 2), vec![0, 2]);
        assert_eq!(nearest_indices(3, 3), vec![0, 1, 2]);
        assert!(nearest_indices(0, 5).is_empty());
    }

    #[test]
    fn table_file_roundtrip() {
        let cb = Codebook::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        for t in [
            EmbeddingTable::random(7, 5, 4).unwrap(),
            EmbeddingTable::codebook_projected(&cb, LinearMap::random(2, 80, 1).unwrap()).unwrap(),
        ] {
            let mut buf = Vec::new();
            let n = write_table_to(&t, &mut buf).unwrap();
            assert_eq!(n as usize, buf.len());
            assert_eq!(read_table_from(&mut Cursor::new(buf)).unwrap(), t);
        }
    }
}
