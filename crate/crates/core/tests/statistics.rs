//! Sampling-rate checks against binomial and normal 3σ bands.

mod common;

use dtok::augment::{self, AugmentationConfig};
use dtok::embio::{self, EmbeddingMatrix, FrameSampler, Manifest, ManifestEntry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn within_binomial(hits: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn bernoulli_frame_sampler_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut entries = Vec::new();
    for i in 0..10 {
        let m = uniform_matrix(&mut rng, 2000, 2);
        let path = dir.path().join(format!("{i}.dtek"));
        embio::write_embedding(&m, &path).unwrap();
        entries.push(ManifestEntry {
            utt_id: format!("u{i}"),
            path,
            frames: 2000,
            frame_rate: 50.0,
            duration_s: 40.0,
            phone_alignment: None,
        });
    }
    let manifest = Manifest::new(entries).unwrap();
    for p in [0.05, 0.3, 0.5] {
        let kept = embio::iterate_frames(&manifest, FrameSampler::Bernoulli(p), 17)
            .unwrap()
            .map(Result::unwrap)
            .count();
        assert!(within_binomial(kept, 20_000, p), "p = {p}: kept {kept}");
    }
    let all = embio::iterate_frames(&manifest, FrameSampler::All, 0).unwrap().count();
    assert_eq!(all, 20_000);
    let none = embio::iterate_frames(&manifest, FrameSampler::Bernoulli(0.0), 0).unwrap().count();
    assert_eq!(none, 0);
}

#[test]
fn gaussian_noise_is_standard_normal() {
    let x = EmbeddingMatrix::zeros(12_500, 80, 50.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (noisy, added) = augment::gaussian_noise(&x, 1.0, &mut rng);
    assert!(added);
    let n = noisy.data().len() as f64;
    assert_eq!(n, 1e6);
    let mean = noisy.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = noisy.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 3.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() <= 3.0 * (2.0 / n).sqrt(), "variance {var}");
}

#[test]
fn gaussian_noise_activation_rate() {
    let x = EmbeddingMatrix::zeros(2, 3, 50.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 20_000;
    let mut hits = 0;
    for _ in 0..trials {
        let (out, added) = augment::gaussian_noise(&x, 0.25, &mut rng);
        if added {
            hits += 1;
        } else {
            assert!(out.bit_eq(&x));
        }
    }
    assert!(within_binomial(hits, trials, 0.25), "{hits} activations");
}

#[test]
fn sample_prob_and_duplication_rates() {
    let cfg = AugmentationConfig {
        frame_dup_prob: 0.1,
        ..Default::default()
    };
    let mut data_rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_tokens(&mut data_rng, 400, &[100], 50.0);
    let trials = 5000;
    let (mut applied, mut dups, mut dup_trials) = (0, 0, 0);
    for i in 0..trials {
        let mut rng = augment::sample_rng(77, &format!("utt-{i}"));
        let (out, report) = augment::augment_tokens(&seq, &cfg, &mut rng).unwrap();
        if report.applied {
            applied += 1;
            dups += report.duplicated_frames;
            dup_trials += 400;
        } else {
            assert_eq!(out, seq);
        }
    }
    assert!(within_binomial(applied, trials, 0.9), "{applied} applied");
    assert!(within_binomial(dups, dup_trials, 0.1), "{dups} duplicates");
}
