//! File-backed end-to-end runs over synthetic corpora.

mod common;

use std::fs;
use std::io::Cursor;
use std::path::Path;

use dtok::embio::{self, EmbeddingMatrix, FrameSampler, FrameSet, Manifest, ManifestEntry};
use dtok::frontend::{self, EmbeddingTable, LinearMap};
use dtok::metrics;
use dtok::quantize::{self, Codebook, KMeansConfig, Mode, Quantizer, ResidualStack};
use dtok::tokens::{self, TokenSequence};
use dtok::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn write_corpus(dir: &Path, mix: &Mixture, utterances: usize) -> Manifest {
    let per = mix.frames.frames() / utterances;
    let dim = mix.frames.dim();
    let entries = (0..utterances)
        .map(|u| {
            let rows = &mix.frames.data()[u * per * dim..(u + 1) * per * dim];
            let m = EmbeddingMatrix::new(rows.to_vec(), dim, 50.0).unwrap();
            let name = format!("utt{u:03}.dtek");
            embio::write_embedding(&m, &dir.join(&name)).unwrap();
            ManifestEntry {
                utt_id: format!("utt{u:03}"),
                path: name.into(),
                frames: per as u64,
                frame_rate: 50.0,
                duration_s: per as f64 / 50.0,
                phone_alignment: Some(mix.labels[u * per..(u + 1) * per].to_vec()),
            }
        })
        .collect();
    let manifest = Manifest::new(entries).unwrap();
    manifest.save(&dir.join("manifest.jsonl")).unwrap();
    Manifest::load(&dir.join("manifest.jsonl")).unwrap()
}

#[test]
fn four_cluster_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mix = gaussian_mixture(&mut rng, 4, 6, 1000, 0.01, 10.0);
    for mode in [Mode::Lloyd, Mode::MiniBatch { batch_size: 500 }] {
        let cfg = KMeansConfig {
            seed: 9,
            mode,
            ..Default::default()
        };
        let t = quantize::train_kmeans(&FrameSet::from_matrix(&mix.frames), 4, &cfg).unwrap();
        let learned: Vec<Vec<f32>> = t.codebook.rows().map(<[f32]>::to_vec).collect();
        let d = match_centers(&mix.centers, &learned).expect("one centroid per cluster");
        assert!(d.iter().all(|&x| x <= 0.05), "{mode:?}: {d:?}");
        assert_eq!(t.report.trained_on_frames, 4000);
        assert!(!t.report.degenerate);
    }
}

#[test]
fn manifest_driven_training_and_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mix = gaussian_mixture(&mut rng, 8, 8, 300, 0.01, 10.0);
    let manifest = write_corpus(dir.path(), &mix, 12);
    assert_eq!(manifest.total_frames(), 2400);

    let frames = FrameSet::collect(embio::iterate_frames(&manifest, FrameSampler::All, 0).unwrap()).unwrap();
    assert_eq!(frames.len(), 2400);
    let cfg = KMeansConfig {
        seed: 3,
        ..Default::default()
    };
    let trained = quantize::train_kmeans(&frames, 8, &cfg).unwrap();
    let q = Quantizer::Plain(trained.codebook);
    let qpath = dir.path().join("km.dtcb");
    quantize::write_quantizer(&q, &qpath).unwrap();
    let q = quantize::read_quantizer(&qpath).unwrap();

    let mut table = metrics::ContingencyTable::default();
    let mut hist = metrics::TokenHistogram::new(8);
    for entry in manifest.entries() {
        let m = embio::read_embedding(&manifest.resolve(entry)).unwrap();
        let toks = q.encode(&m, None).unwrap();
        let tpath = dir.path().join(format!("{}.dtts", entry.utt_id));
        tokens::write_tokens(&toks, &tpath).unwrap();
        let back = tokens::read_tokens(&tpath).unwrap();
        assert_eq!(back, toks);
        table.merge(&metrics::build_contingency(&back, 0, entry.phone_alignment.as_ref().unwrap()).unwrap());
        hist.merge(&metrics::TokenHistogram::from_stream(&back, 0).unwrap());
    }
    assert!(metrics::pnmi(&table).unwrap() >= 0.99);
    let stats = hist.stats().unwrap();
    assert_eq!(stats.utilization, 1.0);
    assert!((stats.perplexity - 8.0).abs() < 1e-9);
}

#[test]
fn rvq_roundtrip_matches_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = uniform_matrix(&mut rng, 400, 4);
    let cfg = KMeansConfig {
        seed: 5,
        ..Default::default()
    };
    let (stack, report) = quantize::train_rvq(&FrameSet::from_matrix(&m), 3, 16, &cfg).unwrap();
    assert_eq!(report.stages.len(), 3);
    let q = Quantizer::Residual(stack);
    let toks = q.encode(&m, Some(3)).unwrap();
    let rec = q.decode(&toks).unwrap();
    let err = metrics::reconstruction_error(&m, &rec).unwrap();
    assert!((err.mse - mse(&m, &rec)).abs() < 1e-12);
    assert!(err.snr_db.is_finite() && err.snr_db > 0.0);
}

#[test]
fn rvq_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let m = uniform_matrix(&mut rng, 5, 4);
    let stages: Vec<Codebook> = (0..3)
        .map(|_| Codebook::new(uniform_matrix(&mut rng, 8, 4).into_data(), 4).unwrap())
        .collect();
    let stack = ResidualStack::new(stages.clone()).unwrap();
    let toks = stack.encode(&m, 3).unwrap();
    for (t, row) in m.rows().enumerate() {
        let mut residual: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        for (q, book) in stages.iter().enumerate() {
            let cents = to_f64_rows(book.centroids(), 4);
            let k = brute_nearest(&cents, &residual);
            assert_eq!(toks.stream(q)[t] as usize, k, "frame {t} stage {q}");
            for (r, c) in residual.iter_mut().zip(&cents[k]) {
                *r -= c;
            }
        }
    }
    assert_eq!(stack.encode(&m, 1).unwrap().stream(0), stages[0].assign(&m).unwrap().stream(0));
}

#[test]
fn single_stage_on_distinct_points_is_exact() {
    let m = EmbeddingMatrix::new(vec![1.0, 2.0, -3.0, 4.0, 1.0, 2.0, 7.5, 0.0], 2, 50.0).unwrap();
    let (stack, report) = quantize::train_rvq(&FrameSet::from_matrix(&m), 1, 3, &KMeansConfig::default()).unwrap();
    assert_eq!(report.residual_energy, vec![0.0]);
    let rec = stack.decode(&stack.encode(&m, 1).unwrap()).unwrap();
    assert!(rec.bit_eq(&m));
}

#[test]
fn reference_bandwidths_from_trained_quantizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let wide = uniform_matrix(&mut rng, 1200, 4);
    let cfg = KMeansConfig {
        seed: 0,
        max_iters: 3,
        ..Default::default()
    };
    let (grouped, _) = quantize::train_grouped(&FrameSet::from_matrix(&wide), 2, 320, &cfg).unwrap();
    let at_100 = EmbeddingMatrix::new(wide.data().to_vec(), 4, 100.0).unwrap();
    let toks = grouped.assign(&at_100).unwrap();
    assert_eq!(toks.vocab_sizes(), &[320, 320]);
    assert_eq!(tokens::format_kbps(toks.bandwidth_kbps()), "1.66");

    let m = uniform_matrix(&mut rng, 1100, 2);
    let cfg = KMeansConfig {
        seed: 0,
        max_iters: 2,
        ..Default::default()
    };
    let (stack, _) = quantize::train_rvq(&FrameSet::from_matrix(&m), 8, 1024, &cfg).unwrap();
    let at_75 = EmbeddingMatrix::new(m.data().to_vec(), 2, 75.0).unwrap();
    let toks = stack.encode(&at_75, 8).unwrap();
    assert_eq!(toks.num_streams(), 8);
    assert_eq!(tokens::format_kbps(toks.bandwidth_kbps()), "6.00");
}

#[test]
fn degenerate_training_is_flagged() {
    let frames = FrameSet::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
    let t = quantize::train_kmeans(&frames, 3, &KMeansConfig::default()).unwrap();
    assert!(t.report.degenerate);
    assert_eq!(t.report.distinct_points, 2);
    assert_eq!(t.codebook.len(), 3);
    let empty: Vec<dtok::Result<Vec<f32>>> = Vec::new();
    assert!(matches!(FrameSet::collect(empty), Err(Error::Input(_))));
}

#[test]
fn corrupt_and_mismatched_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = EmbeddingMatrix::new(vec![0.5; 12], 3, 50.0).unwrap();
    let good = dir.path().join("good.dtek");
    embio::write_embedding(&m, &good).unwrap();

    let bytes = fs::read(&good).unwrap();
    let short = dir.path().join("short.dtek");
    fs::write(&short, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(embio::read_embedding(&short), Err(Error::Corruption(_))));
    let long = dir.path().join("long.dtek");
    fs::write(&long, [bytes.as_slice(), &[0, 0, 0, 0]].concat()).unwrap();
    assert!(matches!(embio::read_embedding(&long), Err(Error::Corruption(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(embio::read_embedding_from(&mut Cursor::new(magic)), Err(Error::Format(_))));

    let entry = |frames| ManifestEntry {
        utt_id: "a".into(),
        path: good.clone(),
        frames,
        frame_rate: 50.0,
        duration_s: frames as f64 / 50.0,
        phone_alignment: None,
    };
    let wrong = Manifest::new(vec![entry(5)]).unwrap();
    let first_err = embio::iterate_frames(&wrong, FrameSampler::All, 0)
        .unwrap()
        .find_map(Result::err)
        .unwrap();
    assert!(matches!(first_err, Error::Schema(_)));

    let dup = Manifest::new(vec![entry(4), entry(4)]);
    assert!(dup.is_err());
    let text = "{\"utt_id\":\"a\",\"path\":\"x\",\"frames\":1,\"frame_rate\":50,\"duration_s\":0.02,\"speaker\":3}\n";
    assert!(matches!(Manifest::from_reader(Cursor::new(text)), Err(Error::Manifest { line: 1, .. })));

    let q = Codebook::from_rows(&[vec![0.0, 0.0]]).unwrap();
    assert!(matches!(q.assign(&m), Err(Error::Schema(_))));
}

#[test]
fn frontend_tables_roundtrip_and_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let book = Codebook::new(uniform_matrix(&mut rng, 10, 6).into_data(), 6).unwrap();
    let projected = EmbeddingTable::codebook_projected(&book, LinearMap::random(6, 4, 1).unwrap()).unwrap();
    for (i, table) in [EmbeddingTable::random(10, 4, 2).unwrap(), projected].iter().enumerate() {
        let path = dir.path().join(format!("t{i}.dtem"));
        frontend::write_table(table, &path).unwrap();
        assert_eq!(&frontend::read_table(&path).unwrap(), table);
    }
    let proj = LinearMap::random(8, 5, 6).unwrap();
    let ppath = dir.path().join("fuse.dtem");
    frontend::write_projection(&proj, &ppath).unwrap();
    assert_eq!(frontend::read_projection(&ppath).unwrap(), proj);

    let seq = TokenSequence::new(vec![vec![0, 3, 9], vec![1, 1, 2]], vec![10, 10], 50.0).unwrap();
    let tables = [EmbeddingTable::random(10, 4, 7).unwrap(), EmbeddingTable::random(10, 4, 8).unwrap()];
    let fused = frontend::fuse_groups(&seq, &tables, &proj).unwrap();
    assert_eq!((fused.frames(), fused.dim()), (3, 5));
    assert!(frontend::fuse_groups(&seq, &tables[..1], &proj).is_err());
}
