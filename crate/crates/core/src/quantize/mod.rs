//! Codebook training and frame-to-token assignment.
//!
//! Three quantizer shapes are supported:
//! - a plain [`Codebook`] (one k-means table over the full frame),
//! - a [`GroupedCodebook`] splitting each frame into equal contiguous slices
//!   with one table per slice, emitting one token stream per group,
//! - a [`ResidualStack`] of tables over the full frame where each stage
//!   quantizes what the previous stages left over.
//!
//! Distances are squared Euclidean, accumulated in f64. Ties resolve to the
//! lowest centroid index.

mod file;
mod kmeans;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embio::{EmbeddingMatrix, FrameSet};
use crate::error::{Error, Result};
use crate::tokens::TokenSequence;

pub use file::{
    read_quantizer, read_quantizer_from, sidecar_path, write_quantizer, write_quantizer_to,
    QuantizerHeader, TrainingMetadata, CODEBOOK_MAGIC, CODEBOOK_VERSION,
};
pub use kmeans::{train_kmeans, Init, KMeansConfig, KMeansReport, Mode, TrainedCodebook};

/// Squared Euclidean distance accumulated in f64.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// `K×F` centroid table.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f32>,
}

impl Codebook {
    pub fn new(centroids: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("codebook dimension must be at least 1".into()));
        }
        if centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "centroid data of length {} does not form rows of {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("codebook contains non-finite values".into()));
        }
        if u32::try_from(centroids.len() / dim).is_err() {
            return Err(Error::Validation("codebook has more than u32::MAX entries".into()));
        }
        Ok(Self { dim, centroids })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("centroid rows have unequal lengths".into()));
        }
        Self::new(rows.concat(), dim)
    }

    pub(crate) fn from_f64(centroids: &[f64], dim: usize) -> Result<Self> {
        Self::new(centroids.iter().map(|&v| v as f32).collect(), dim)
    }

    /// Number of entries K.
    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.centroids.chunks_exact(self.dim)
    }

    /// Index and squared distance of the closest centroid.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.rows().enumerate() {
            let d = squared_distance(x, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d)
    }

    /// Same as [`Codebook::nearest`] for an f64 query (running residuals).
    pub fn nearest_f64(&self, x: &[f64]) -> (usize, f64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.rows().enumerate() {
            let d: f64 = x
                .iter()
                .zip(c)
                .map(|(&a, &b)| {
                    let diff = a - f64::from(b);
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d)
    }

    fn assign_rows<'a, I>(&self, rows: I) -> Vec<u32>
    where
        I: IndexedParallelIterator<Item = &'a [f32]>,
    {
        rows.map(|r| self.nearest(r).0 as u32).collect()
    }

    /// Maps every frame to its nearest centroid index.
    pub fn assign(&self, matrix: &EmbeddingMatrix) -> Result<TokenSequence> {
        if matrix.dim() != self.dim {
            return Err(Error::Schema(format!(
                "matrix dimension {} does not match codebook dimension {}",
                matrix.dim(),
                self.dim
            )));
        }
        let tokens = self.assign_rows(matrix.data().par_chunks_exact(self.dim));
        TokenSequence::single(tokens, self.len() as u32, matrix.frame_rate())
    }

    /// Centroid rows for a token stream.
    pub fn lookup(&self, tokens: &[u32], frame_rate: f64) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.len() {
                return Err(Error::Range(format!(
                    "frame {t}: token {tok} outside codebook of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(self.centroid(tok as usize));
        }
        EmbeddingMatrix::new(data, self.dim, frame_rate)
    }
}

/// Free-function form of [`Codebook::assign`].
pub fn assign(codebook: &Codebook, matrix: &EmbeddingMatrix) -> Result<TokenSequence> {
    codebook.assign(matrix)
}

/// One codebook per contiguous, equally sized slice of the feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedCodebook {
    groups: Vec<Codebook>,
}

impl GroupedCodebook {
    pub fn new(groups: Vec<Codebook>) -> Result<Self> {
        let Some(first) = groups.first() else {
            return Err(Error::Validation("grouped codebook needs at least one group".into()));
        };
        if groups.iter().any(|g| g.dim() != first.dim()) {
            return Err(Error::Validation("group codebooks differ in dimension".into()));
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Codebook] {
        &self.groups
    }

    pub fn group_dim(&self) -> usize {
        self.groups[0].dim()
    }

    pub fn total_dim(&self) -> usize {
        self.group_dim() * self.groups.len()
    }

    pub fn vocab_sizes(&self) -> Vec<u32> {
        self.groups.iter().map(|g| g.len() as u32).collect()
    }

    /// Stream `g` holds the tokens of group `g`'s slice.
    pub fn assign(&self, matrix: &EmbeddingMatrix) -> Result<TokenSequence> {
        if matrix.dim() != self.total_dim() {
            return Err(Error::Schema(format!(
                "matrix dimension {} does not match grouped dimension {}",
                matrix.dim(),
                self.total_dim()
            )));
        }
        let gd = self.group_dim();
        let streams = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, cb)| {
                cb.assign_rows(
                    matrix
                        .data()
                        .par_chunks_exact(matrix.dim())
                        .map(|row| &row[g * gd..(g + 1) * gd]),
                )
            })
            .collect();
        TokenSequence::new(streams, self.vocab_sizes(), matrix.frame_rate())
    }

    /// Concatenates the selected centroid of every group.
    pub fn decode(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        if tokens.num_streams() != self.groups.len() {
            return Err(Error::Schema(format!(
                "{} token streams for {} groups",
                tokens.num_streams(),
                self.groups.len()
            )));
        }
        let gd = self.group_dim();
        let mut data = vec![0f32; tokens.frames() * self.total_dim()];
        for (g, cb) in self.groups.iter().enumerate() {
            for (t, &tok) in tokens.stream(g).iter().enumerate() {
                if tok as usize >= cb.len() {
                    return Err(Error::Range(format!(
                        "group {g} frame {t}: token {tok} outside codebook of {}",
                        cb.len()
                    )));
                }
                let start = t * self.total_dim() + g * gd;
                data[start..start + gd].copy_from_slice(cb.centroid(tok as usize));
            }
        }
        EmbeddingMatrix::new(data, self.total_dim(), tokens.frame_rate())
    }
}

pub fn assign_grouped(codebook: &GroupedCodebook, matrix: &EmbeddingMatrix) -> Result<TokenSequence> {
    codebook.assign(matrix)
}

/// Trains `groups` codebooks of `k_per_group` entries each.
pub fn train_grouped(
    frames: &FrameSet,
    groups: usize,
    k_per_group: usize,
    config: &KMeansConfig,
) -> Result<(GroupedCodebook, Vec<KMeansReport>)> {
    train_grouped_with(frames, &vec![k_per_group; groups], config)
}

/// Grouped training with a per-group entry count; group count is `ks.len()`.
/// Every group uses the same seed, so one group reduces to [`train_kmeans`].
pub fn train_grouped_with(
    frames: &FrameSet,
    ks: &[usize],
    config: &KMeansConfig,
) -> Result<(GroupedCodebook, Vec<KMeansReport>)> {
    let groups = ks.len();
    if groups == 0 {
        return Err(Error::Config("group count must be at least 1".into()));
    }
    if !frames.dim().is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "feature dimension {} is not divisible by {groups} groups",
            frames.dim()
        )));
    }
    let gd = frames.dim() / groups;
    let mut books = Vec::with_capacity(groups);
    let mut reports = Vec::with_capacity(groups);
    for (g, &k) in ks.iter().enumerate() {
        let slice = frames.slice_dims(g * gd, gd)?;
        let trained = train_kmeans(&slice, k, config)?;
        books.push(trained.codebook);
        reports.push(trained.report);
    }
    Ok((GroupedCodebook::new(books)?, reports))
}

/// Ordered residual quantizers over the full feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    stages: Vec<Codebook>,
}

/// Training output for a residual stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualReport {
    pub stages: Vec<KMeansReport>,
    /// Mean squared norm per frame of the residual left after each stage.
    pub residual_energy: Vec<f64>,
}

impl ResidualStack {
    pub fn new(stages: Vec<Codebook>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return Err(Error::Validation("residual stack needs at least one stage".into()));
        };
        if stages.iter().any(|s| s.dim() != first.dim()) {
            return Err(Error::Validation("stage codebooks differ in dimension".into()));
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Codebook] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    pub fn vocab_sizes(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.len() as u32).collect()
    }

    /// Greedy encoding of one frame; returns the tokens and the squared norm
    /// of the final residual.
    pub fn encode_frame(&self, x: &[f32], use_stages: usize) -> (Vec<u32>, f64) {
        let mut residual: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let mut tokens = Vec::with_capacity(use_stages);
        for stage in &self.stages[..use_stages] {
            let (k, _) = stage.nearest_f64(&residual);
            for (r, &c) in residual.iter_mut().zip(stage.centroid(k)) {
                *r -= f64::from(c);
            }
            tokens.push(k as u32);
        }
        let energy = residual.iter().map(|r| r * r).sum();
        (tokens, energy)
    }

    /// Encodes every frame with the first `use_stages` stages.
    pub fn encode(&self, matrix: &EmbeddingMatrix, use_stages: usize) -> Result<TokenSequence> {
        self.check_encode(matrix, use_stages)?;
        let per_frame: Vec<Vec<u32>> = matrix
            .data()
            .par_chunks_exact(matrix.dim())
            .map(|row| self.encode_frame(row, use_stages).0)
            .collect();
        let mut streams = vec![Vec::with_capacity(matrix.frames()); use_stages];
        for frame in per_frame {
            for (s, tok) in streams.iter_mut().zip(frame) {
                s.push(tok);
            }
        }
        TokenSequence::new(
            streams,
            self.vocab_sizes()[..use_stages].to_vec(),
            matrix.frame_rate(),
        )
    }

    /// Per-frame squared residual norms after greedy encoding.
    pub fn residual_energies(&self, matrix: &EmbeddingMatrix, use_stages: usize) -> Result<Vec<f64>> {
        self.check_encode(matrix, use_stages)?;
        Ok(matrix
            .data()
            .par_chunks_exact(matrix.dim())
            .map(|row| self.encode_frame(row, use_stages).1)
            .collect())
    }

    fn check_encode(&self, matrix: &EmbeddingMatrix, use_stages: usize) -> Result<()> {
        if matrix.dim() != self.dim() {
            return Err(Error::Schema(format!(
                "matrix dimension {} does not match stack dimension {}",
                matrix.dim(),
                self.dim()
            )));
        }
        if use_stages == 0 || use_stages > self.stages.len() {
            return Err(Error::Range(format!(
                "use_stages {use_stages} outside 1..={}",
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Sums the selected centroid of each provided stage.
    pub fn decode(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        let used = tokens.num_streams();
        if used > self.stages.len() {
            return Err(Error::Range(format!(
                "{used} token streams for a {}-stage stack",
                self.stages.len()
            )));
        }
        let dim = self.dim();
        let mut acc = vec![0f64; tokens.frames() * dim];
        for (q, stage) in self.stages[..used].iter().enumerate() {
            for (t, &tok) in tokens.stream(q).iter().enumerate() {
                if tok as usize >= stage.len() {
                    return Err(Error::Range(format!(
                        "stage {q} frame {t}: token {tok} outside codebook of {}",
                        stage.len()
                    )));
                }
                for (a, &c) in acc[t * dim..(t + 1) * dim].iter_mut().zip(stage.centroid(tok as usize)) {
                    *a += f64::from(c);
                }
            }
        }
        EmbeddingMatrix::new(acc.into_iter().map(|v| v as f32).collect(), dim, tokens.frame_rate())
    }
}

pub fn rvq_encode(stack: &ResidualStack, matrix: &EmbeddingMatrix, use_stages: usize) -> Result<TokenSequence> {
    stack.encode(matrix, use_stages)
}

pub fn rvq_decode(stack: &ResidualStack, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
    stack.decode(tokens)
}

/// Trains `stages` residual quantizers of `k_per_stage` entries.
///
/// Stage `q` is seeded with `config.seed + q` and trained on what remains
/// after greedy encoding with stages `< q`.
pub fn train_rvq(
    frames: &FrameSet,
    stages: usize,
    k_per_stage: usize,
    config: &KMeansConfig,
) -> Result<(ResidualStack, ResidualReport)> {
    if stages == 0 {
        return Err(Error::Config("stage count must be at least 1".into()));
    }
    let mut residual = frames.clone();
    let mut books = Vec::with_capacity(stages);
    let mut reports = Vec::with_capacity(stages);
    let mut energies = Vec::with_capacity(stages);
    for q in 0..stages {
        let cfg = KMeansConfig {
            seed: config.seed.wrapping_add(q as u64),
            ..config.clone()
        };
        let trained = train_kmeans(&residual, k_per_stage, &cfg)?;
        let book = trained.codebook;
        let dim = residual.dim();
        let energy: f64 = residual
            .data_mut()
            .par_chunks_exact_mut(dim)
            .map(|r| {
                let (k, _) = book.nearest(r);
                for (v, &c) in r.iter_mut().zip(book.centroid(k)) {
                    *v -= c;
                }
                r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>()
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        energies.push(energy / residual.len() as f64);
        books.push(book);
        reports.push(trained.report);
    }
    Ok((
        ResidualStack::new(books)?,
        ResidualReport {
            stages: reports,
            residual_energy: energies,
        },
    ))
}

/// Any trained quantizer, as stored in a `.dtcb` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantizer {
    Plain(Codebook),
    Grouped(GroupedCodebook),
    Residual(ResidualStack),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Plain,
    Grouped,
    Residual,
}

impl QuantizerKind {
    pub fn code(self) -> u32 {
        match self {
            QuantizerKind::Plain => 0,
            QuantizerKind::Grouped => 1,
            QuantizerKind::Residual => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(QuantizerKind::Plain),
            1 => Some(QuantizerKind::Grouped),
            2 => Some(QuantizerKind::Residual),
            _ => None,
        }
    }
}

impl Quantizer {
    pub fn kind(&self) -> QuantizerKind {
        match self {
            Quantizer::Plain(_) => QuantizerKind::Plain,
            Quantizer::Grouped(_) => QuantizerKind::Grouped,
            Quantizer::Residual(_) => QuantizerKind::Residual,
        }
    }

    pub fn codebooks(&self) -> &[Codebook] {
        match self {
            Quantizer::Plain(c) => std::slice::from_ref(c),
            Quantizer::Grouped(g) => g.groups(),
            Quantizer::Residual(r) => r.stages(),
        }
    }

    /// Input feature dimension.
    pub fn dim(&self) -> usize {
        match self {
            Quantizer::Plain(c) => c.dim(),
            Quantizer::Grouped(g) => g.total_dim(),
            Quantizer::Residual(r) => r.dim(),
        }
    }

    pub fn vocab_sizes(&self) -> Vec<u32> {
        self.codebooks().iter().map(|c| c.len() as u32).collect()
    }

    /// Tokenizes a matrix. `use_stages` only applies to residual stacks and
    /// defaults to all stages.
    pub fn encode(&self, matrix: &EmbeddingMatrix, use_stages: Option<usize>) -> Result<TokenSequence> {
        match self {
            Quantizer::Plain(c) => c.assign(matrix),
            Quantizer::Grouped(g) => g.assign(matrix),
            Quantizer::Residual(r) => r.encode(matrix, use_stages.unwrap_or(r.num_stages())),
        }
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        match self {
            Quantizer::Plain(c) => {
                if tokens.num_streams() != 1 {
                    return Err(Error::Schema(format!(
                        "{} token streams for a single codebook",
                        tokens.num_streams()
                    )));
                }
                c.lookup(tokens.stream(0), tokens.frame_rate())
            }
            Quantizer::Grouped(g) => g.decode(tokens),
            Quantizer::Residual(r) => r.decode(tokens),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f32]], rate: f64) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), rate).unwrap()
    }

    #[test]
    fn assign_exact_match_and_ties() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 0.0]).collect();
        let cb = Codebook::from_rows(&rows).unwrap();
        let toks = cb.assign(&matrix(&[&[7.0, 0.0]], 50.0)).unwrap();
        assert_eq!(toks.stream(0), &[7]);
        assert_eq!(toks.frame_rate(), 50.0);

        let cb = Codebook::from_rows(&[vec![0.5], vec![10.5]]).unwrap();
        assert_eq!(cb.assign(&matrix(&[&[0.6]], 50.0)).unwrap().stream(0), &[0]);

        // 3.5 is equidistant from centroids 2 (3.0) and 5 (4.0).
        let cb = Codebook::from_rows(&[
            vec![-9.0],
            vec![-8.0],
            vec![3.0],
            vec![20.0],
            vec![21.0],
            vec![4.0],
        ])
        .unwrap();
        assert_eq!(cb.assign(&matrix(&[&[3.5]], 50.0)).unwrap().stream(0), &[2]);
    }

    #[test]
    fn assign_dimension_mismatch() {
        let cb = Codebook::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            cb.assign(&matrix(&[&[1.0]], 50.0)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn grouped_shape_and_slices() {
        let frames = FrameSet::from_rows(&[
            vec![0.0, 0.0, 5.0, 5.0],
            vec![1.0, 1.0, 6.0, 6.0],
            vec![0.0, 1.0, 5.0, 6.0],
        ])
        .unwrap();
        let (g, reports) = train_grouped(&frames, 2, 2, &KMeansConfig::default()).unwrap();
        assert_eq!(g.groups().len(), 2);
        assert!(g.groups().iter().all(|c| c.dim() == 2 && c.len() == 2));
        assert_eq!(reports.len(), 2);
        assert!(matches!(
            train_grouped(&frames, 3, 2, &KMeansConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grouped_slice_tokens() {
        let g0 = Codebook::from_rows(&(0..5).map(|i| vec![i as f32, 0.0]).collect::<Vec<_>>()).unwrap();
        let g1 = Codebook::from_rows(&(0..12).map(|i| vec![0.0, i as f32]).collect::<Vec<_>>()).unwrap();
        let g = GroupedCodebook::new(vec![g0, g1]).unwrap();
        let toks = g.assign(&matrix(&[&[3.0, 0.0, 0.0, 9.0]], 100.0)).unwrap();
        assert_eq!(toks.frame(0), vec![3, 9]);
        let back = g.decode(&toks).unwrap();
        assert_eq!(back.row(0), &[3.0, 0.0, 0.0, 9.0]);
    }

    #[test]
    fn grouped_single_group_equals_plain() {
        let frames = FrameSet::from_rows(
            &(0..40)
                .map(|i| vec![(i % 7) as f32, (i % 3) as f32 * 2.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let cfg = KMeansConfig {
            seed: 17,
            ..Default::default()
        };
        let (g, _) = train_grouped(&frames, 1, 4, &cfg).unwrap();
        let plain = train_kmeans(&frames, 4, &cfg).unwrap();
        assert_eq!(g.groups()[0], plain.codebook);
    }

    #[test]
    fn rvq_hand_example() {
        let frames = FrameSet::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]).unwrap();
        let (stack1, _) = train_rvq(&frames, 1, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(stack1.stages()[0].centroids(), &[5.5]);

        let s0 = Codebook::from_rows(&[vec![5.5]]).unwrap();
        let residuals = FrameSet::from_rows(&[vec![-5.5], vec![-4.5], vec![4.5], vec![5.5]]).unwrap();
        let s1 = train_kmeans(&residuals, 2, &KMeansConfig::default()).unwrap().codebook;
        let mut c = s1.centroids().to_vec();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![-5.0, 5.0]);

        let stack = ResidualStack::new(vec![s0, s1]).unwrap();
        let m = matrix(&[&[0.0], &[1.0], &[10.0], &[11.0]], 75.0);
        let toks = stack.encode(&m, 2).unwrap();
        let rec = stack.decode(&toks).unwrap();
        assert_eq!(rec.data(), &[0.5, 0.5, 10.5, 10.5]);
    }

    #[test]
    fn rvq_range_checks() {
        let stack = ResidualStack::new(vec![Codebook::from_rows(&[vec![0.0], vec![1.0]]).unwrap()]).unwrap();
        let m = matrix(&[&[0.2]], 75.0);
        assert!(matches!(stack.encode(&m, 0), Err(Error::Range(_))));
        assert!(matches!(stack.encode(&m, 2), Err(Error::Range(_))));
        let bad = TokenSequence::single(vec![2], 3, 75.0).unwrap();
        assert!(matches!(stack.decode(&bad), Err(Error::Range(_))));
        let two = TokenSequence::new(vec![vec![0], vec![0]], vec![2, 2], 75.0).unwrap();
        assert!(matches!(stack.decode(&two), Err(Error::Range(_))));
    }

    #[test]
    fn rvq_single_stage_equals_assign() {
        let stage0 = Codebook::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![-3.0, 0.5]]).unwrap();
        let stage1 = Codebook::from_rows(&[vec![0.1, 0.1], vec![-0.1, 0.0]]).unwrap();
        let stack = ResidualStack::new(vec![stage0.clone(), stage1]).unwrap();
        let m = matrix(&[&[0.3, 0.2], &[-2.0, 1.0], &[1.5, -0.4]], 50.0);
        assert_eq!(stack.encode(&m, 1).unwrap(), stage0.assign(&m).unwrap());
    }

    #[test]
    fn quantizer_decode_plain() {
        let cb = Codebook::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let q = Quantizer::Plain(cb);
        let toks = TokenSequence::single(vec![1, 0], 2, 50.0).unwrap();
        let m = q.decode(&toks).unwrap();
        assert_eq!(m.data(), &[3.0, 4.0, 1.0, 2.0]);
    }
}
