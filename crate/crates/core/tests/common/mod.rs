//! Independent reference implementations and generators shared by the
//! integration suites.
#![allow(dead_code)]

use dtok::embio::EmbeddingMatrix;
use dtok::tokens::TokenSequence;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Index of the nearest row by direct distance, first index on ties.
pub fn brute_nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

pub fn to_f64_rows(data: &[f32], dim: usize) -> Vec<Vec<f64>> {
    data.chunks(dim)
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Plug-in mutual information over a dense `P×K` table divided by the phone
/// entropy, from the textbook double sum. `None` when undefined.
pub fn brute_pnmi(counts: &[Vec<u64>]) -> Option<f64> {
    let n: u64 = counts.iter().flatten().sum();
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let p_phone: Vec<f64> = counts.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let k = counts.first().map_or(0, Vec::len);
    let p_tok: Vec<f64> = (0..k)
        .map(|j| counts.iter().map(|r| r[j]).sum::<u64>() as f64 / n)
        .collect();
    let h: f64 = p_phone.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    if h <= 0.0 {
        return None;
    }
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij / (p_phone[i] * p_tok[j])).log2();
            }
        }
    }
    Some(mi / h)
}

/// Dense counts of (phone, token) pairs.
pub fn dense_counts(phones: &[u32], tokens: &[u32], p: usize, k: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; k]; p];
    for (&ph, &t) in phones.iter().zip(tokens) {
        c[ph as usize][t as usize] += 1;
    }
    c
}

/// Gaussian mixture with well separated centres and known labels.
pub struct Mixture {
    pub centers: Vec<Vec<f32>>,
    pub frames: EmbeddingMatrix,
    pub labels: Vec<u32>,
}

pub fn gaussian_mixture<R: Rng>(
    rng: &mut R,
    clusters: usize,
    dim: usize,
    per_cluster: usize,
    sigma: f32,
    separation: f32,
) -> Mixture {
    let mut centers: Vec<Vec<f32>> = Vec::new();
    while centers.len() < clusters {
        let c: Vec<f32> = (0..dim).map(|_| rng.random_range(-30.0..30.0)).collect();
        let ok = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt() >= separation
        });
        if ok {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0f32, sigma).unwrap();
    let mut data = Vec::with_capacity(clusters * per_cluster * dim);
    let mut labels = Vec::with_capacity(clusters * per_cluster);
    for i in 0..clusters * per_cluster {
        let c = i % clusters;
        labels.push(c as u32);
        data.extend(centers[c].iter().map(|&v| v + noise.sample(rng)));
    }
    Mixture {
        centers,
        frames: EmbeddingMatrix::new(data, dim, 50.0).unwrap(),
        labels,
    }
}

/// For every true centre, the distance to its nearest learned centroid, or
/// `None` when two true centres share a nearest centroid.
pub fn match_centers(truth: &[Vec<f32>], learned: &[Vec<f32>]) -> Option<Vec<f64>> {
    let learned64: Vec<Vec<f64>> = learned
        .iter()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut used = vec![false; learned.len()];
    let mut dists = Vec::new();
    for c in truth {
        let c64: Vec<f64> = c.iter().map(|&v| f64::from(v)).collect();
        let j = brute_nearest(&learned64, &c64);
        if used[j] {
            return None;
        }
        used[j] = true;
        let d: f64 = learned64[j].iter().zip(&c64).map(|(a, b)| (a - b) * (a - b)).sum();
        dists.push(d.sqrt());
    }
    Some(dists)
}

pub fn random_tokens<R: Rng>(rng: &mut R, frames: usize, vocab_sizes: &[u32], rate: f64) -> TokenSequence {
    let streams = vocab_sizes
        .iter()
        .map(|&v| (0..frames).map(|_| rng.random_range(0..v)).collect())
        .collect();
    TokenSequence::new(streams, vocab_sizes.to_vec(), rate).unwrap()
}

/// Run-heavy stream: tokens repeat for random stretches.
pub fn runny_tokens<R: Rng>(rng: &mut R, frames: usize, vocab_sizes: &[u32], rate: f64) -> TokenSequence {
    let streams = vocab_sizes
        .iter()
        .map(|&v| {
            let mut s = Vec::with_capacity(frames);
            while s.len() < frames {
                let tok = rng.random_range(0..v);
                let len = rng.random_range(1..=8).min(frames - s.len());
                s.extend(std::iter::repeat_n(tok, len));
            }
            s
        })
        .collect();
    TokenSequence::new(streams, vocab_sizes.to_vec(), rate).unwrap()
}

/// Arbitrary finite f32 drawn from raw bit patterns, so signed zeros and
/// subnormals occur.
pub fn random_finite_f32<R: Rng>(rng: &mut R) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, frames: usize, dim: usize, rate: f64) -> EmbeddingMatrix {
    let data = (0..frames * dim).map(|_| random_finite_f32(rng)).collect();
    EmbeddingMatrix::new(data, dim, rate).unwrap()
}

/// Matrix with values in a moderate range, for numeric algorithms.
pub fn uniform_matrix<R: Rng>(rng: &mut R, frames: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..frames * dim).map(|_| rng.random_range(-5.0f32..5.0)).collect();
    EmbeddingMatrix::new(data, dim, 50.0).unwrap()
}

/// Mean squared error between two matrices of equal shape.
pub fn mse(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / n
}
