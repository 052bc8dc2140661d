//! Lloyd and mini-batch k-means with k-means++ or random-subset seeding.
//!
//! Assignment work is split into fixed-size frame chunks and reduced in
//! chunk order, so results depend only on the seed and the data, never on
//! the number of worker threads.

use log::{debug, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{squared_distance, Codebook};
use crate::embio::FrameSet;
use crate::error::{Error, Result};

/// Frames per work unit in parallel passes. Fixed so reductions are
/// independent of the thread count.
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[serde(rename = "kmeans++")]
    KMeansPlusPlus,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Mode {
    Lloyd,
    MiniBatch { batch_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    /// Upper bound on centroid updates (Lloyd) or batches (mini-batch).
    pub max_iters: usize,
    /// Stop once the relative inertia improvement (Lloyd) or the relative
    /// centroid shift (mini-batch) falls to this value.
    pub tolerance: f64,
    pub seed: u64,
    pub init: Init,
    pub mode: Mode,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-4,
            seed: 0,
            init: Init::KMeansPlusPlus,
            mode: Mode::Lloyd,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be non-negative, got {}",
                self.tolerance
            )));
        }
        if let Mode::MiniBatch { batch_size: 0 } = self.mode {
            return Err(Error::Config("mini-batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics from one k-means run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansReport {
    /// Lloyd: total inertia of the initial centroids followed by the inertia
    /// after each update. Mini-batch: inertia of each batch before its update.
    pub inertia_trace: Vec<f64>,
    /// Inertia of the returned codebook over all training frames.
    pub final_inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trained_on_frames: usize,
    /// Distinct frames seen, counted up to `k`.
    pub distinct_points: usize,
    /// Fewer distinct frames than centroids; the codebook then holds
    /// duplicate rows that assignment never selects past the first copy.
    pub degenerate: bool,
    /// Times an empty cluster was re-seeded with the worst-fit frame.
    pub reseeded_clusters: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedCodebook {
    pub codebook: Codebook,
    pub report: KMeansReport,
}

/// Trains a `k`-entry codebook on `frames`.
pub fn train_kmeans(frames: &FrameSet, k: usize, config: &KMeansConfig) -> Result<TrainedCodebook> {
    config.validate()?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if frames.is_empty() {
        return Err(Error::Input("no training frames".into()));
    }
    let distinct = frames.count_distinct(k);
    let degenerate = distinct < k;
    if degenerate {
        warn!(
            "k-means: only {distinct} distinct frames for k = {k}; codebook will contain duplicate centroids"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (centroids, mut report) = match config.mode {
        Mode::Lloyd => {
            let init = initialize(frames, k, config.init, &mut rng);
            lloyd(frames, init, k, config)
        }
        Mode::MiniBatch { batch_size } => minibatch(frames, k, batch_size, config, &mut rng),
    };
    report.distinct_points = distinct;
    report.degenerate = degenerate;
    let codebook = Codebook::from_f64(&centroids, frames.dim())?;
    Ok(TrainedCodebook { codebook, report })
}

fn initialize(frames: &FrameSet, k: usize, init: Init, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let picks = match init {
        Init::KMeansPlusPlus => kmeans_plus_plus(frames, k, rng),
        Init::Random => random_subset(frames.len(), k, rng),
    };
    let mut centroids = Vec::with_capacity(k * frames.dim());
    for i in picks {
        centroids.extend(frames.row(i).iter().map(|&v| f64::from(v)));
    }
    centroids
}

fn random_subset(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picks = index::sample(rng, n, k.min(n)).into_vec();
    while picks.len() < k {
        picks.push(rng.random_range(0..n));
    }
    picks
}

/// D²-weighted seeding. Falls back to a uniform pick once every frame
/// coincides with a chosen centre.
fn kmeans_plus_plus(frames: &FrameSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = frames.len();
    let mut picks = Vec::with_capacity(k);
    picks.push(rng.random_range(0..n));
    let mut min_dist = vec![f64::INFINITY; n];
    while picks.len() < k {
        let last = frames.row(*picks.last().unwrap());
        min_dist
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, out)| {
                for (j, d) in out.iter_mut().enumerate() {
                    let dist = squared_distance(frames.row(c * CHUNK + j), last);
                    if dist < *d {
                        *d = dist;
                    }
                }
            });
        let total: f64 = min_dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in min_dist.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the final partial sum.
            chosen.unwrap_or_else(|| min_dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        picks.push(next);
    }
    picks
}

struct Assignment {
    labels: Vec<u32>,
    dists: Vec<f64>,
    inertia: f64,
}

fn assign_all(frames: &FrameSet, centroids: &[f64], dim: usize) -> Assignment {
    let n = frames.len();
    let mut labels = vec![0u32; n];
    let mut dists = vec![0f64; n];
    let partial: Vec<f64> = labels
        .par_chunks_mut(CHUNK)
        .zip(dists.par_chunks_mut(CHUNK))
        .enumerate()
        .map(|(c, (lab, dis))| {
            let mut sum = 0.0;
            for j in 0..lab.len() {
                let (best, d) = nearest_f64(frames.row(c * CHUNK + j), centroids, dim);
                lab[j] = best as u32;
                dis[j] = d;
                sum += d;
            }
            sum
        })
        .collect();
    Assignment {
        labels,
        dists,
        inertia: partial.iter().sum(),
    }
}

/// Nearest row of a flat f64 centroid table; ties go to the lowest index.
fn nearest_f64(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d: f64 = x
            .iter()
            .zip(c)
            .map(|(&a, &b)| {
                let diff = f64::from(a) - b;
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

// Centroids are rounded to f32 after every update so the inertia trace is
// measured against exactly the table that gets stored.
fn round_to_f32(centroids: &mut [f64]) {
    for c in centroids {
        *c = f64::from(*c as f32);
    }
}

fn lloyd(frames: &FrameSet, mut centroids: Vec<f64>, k: usize, config: &KMeansConfig) -> (Vec<f64>, KMeansReport) {
    let dim = frames.dim();
    round_to_f32(&mut centroids);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeded = 0;
    let mut iter = 0;
    loop {
        let a = assign_all(frames, &centroids, dim);
        trace.push(a.inertia);
        if iter > 0 {
            let prev = trace[iter - 1];
            if prev - a.inertia <= config.tolerance * prev {
                converged = true;
                break;
            }
        }
        if iter == config.max_iters {
            break;
        }
        reseeded += update_centroids(frames, a, &mut centroids, k);
        round_to_f32(&mut centroids);
        iter += 1;
    }
    debug!("lloyd: {iter} updates, inertia {:?}", trace.last());
    let final_inertia = *trace.last().unwrap();
    let report = KMeansReport {
        inertia_trace: trace,
        final_inertia,
        iterations: iter,
        converged,
        trained_on_frames: frames.len(),
        distinct_points: 0,
        degenerate: false,
        reseeded_clusters: reseeded,
    };
    (centroids, report)
}

/// Moves each centroid to the mean of its frames. An empty cluster takes the
/// frame farthest from its own centroid; clusters left empty keep their
/// previous position. Returns the number of re-seeded clusters.
fn update_centroids(frames: &FrameSet, mut a: Assignment, centroids: &mut [f64], k: usize) -> usize {
    let dim = frames.dim();
    let mut counts = vec![0usize; k];
    for &l in &a.labels {
        counts[l as usize] += 1;
    }
    let mut reseeded = 0;
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..frames.len()).filter(|&i| a.dists[i] > 0.0).collect();
        // Farthest first, lowest index among equals.
        order.sort_by(|&x, &y| a.dists[y].total_cmp(&a.dists[x]).then(x.cmp(&y)));
        for (c, i) in empty.into_iter().zip(order) {
            counts[a.labels[i] as usize] -= 1;
            a.labels[i] = c as u32;
            a.dists[i] = 0.0;
            counts[c] = 1;
            reseeded += 1;
        }
    }
    let mut sums = vec![0f64; k * dim];
    for (i, x) in frames.rows().enumerate() {
        let l = a.labels[i] as usize;
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
            *s += f64::from(v);
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let n = counts[c] as f64;
        for (dst, s) in centroids[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&sums[c * dim..(c + 1) * dim])
        {
            *dst = s / n;
        }
    }
    reseeded
}

/// Sculley-style mini-batch k-means: per-centroid step size `1 / count`.
fn minibatch(
    frames: &FrameSet,
    k: usize,
    batch_size: usize,
    config: &KMeansConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, KMeansReport) {
    let dim = frames.dim();
    let n = frames.len();
    // Seed from a random sample of 3 batches, as large-corpus runs cannot
    // afford a full D² pass.
    let init_size = n.min((3 * batch_size).max(k));
    let mut centroids = if init_size < n {
        let sample = index::sample(rng, n, init_size).into_vec();
        let mut data = Vec::with_capacity(init_size * dim);
        for i in sample {
            data.extend_from_slice(frames.row(i));
        }
        let subset = FrameSet::new(data, dim).expect("rows come from a valid frame set");
        initialize(&subset, k, config.init, rng)
    } else {
        initialize(frames, k, config.init, rng)
    };
    let mut counts = vec![0u64; k];
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let mut batch_data = Vec::with_capacity(batch_size * dim);
        for _ in 0..batch_size {
            batch_data.extend_from_slice(frames.row(rng.random_range(0..n)));
        }
        let batch_set = FrameSet::new(batch_data, dim).expect("rows come from a valid frame set");
        let a = assign_all(&batch_set, &centroids, dim);
        trace.push(a.inertia);
        let before = centroids.clone();
        for (x, &l) in batch_set.rows().zip(&a.labels) {
            let c = l as usize;
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (dst, &v) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *dst += eta * (f64::from(v) - *dst);
            }
        }
        iterations += 1;
        let shift: f64 = before
            .iter()
            .zip(&centroids)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let scale: f64 = centroids.iter().map(|c| c * c).sum::<f64>().max(f64::MIN_POSITIVE);
        if shift <= config.tolerance * scale {
            converged = true;
            break;
        }
    }
    round_to_f32(&mut centroids);
    let final_inertia = assign_all(frames, &centroids, dim).inertia;
    let report = KMeansReport {
        inertia_trace: trace,
        final_inertia,
        iterations,
        converged,
        trained_on_frames: n,
        distinct_points: 0,
        degenerate: false,
        reseeded_clusters: 0,
    };
    (centroids, report)
}
