//! Subcommand arguments and implementations.

use std::fmt::Display;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use serde_json::{json, Value};

use dtok::augment::{self, AugmentationConfig};
use dtok::embio::{self, FrameSampler, FrameSet, Manifest, ManifestEntry};
use dtok::frontend::{self, EmbeddingTable, LinearMap};
use dtok::metrics::{self, ContingencyTable, ErrorEnergy, TokenHistogram};
use dtok::quantize::{self, Init, KMeansConfig, Mode, Quantizer, QuantizerHeader, TrainingMetadata};
use dtok::tokens::{self, TokenSequence};
use dtok::Error;

use crate::output::{prepare_out_dir, print_json, utterance_path, write_json_lines};

/// File name of the manifest written next to encoded or augmented tokens.
pub const TOKENS_MANIFEST: &str = "tokens.jsonl";
/// File name of the manifest written next to decoded or embedded features.
pub const FEATURES_MANIFEST: &str = "features.jsonl";
pub const AUGMENT_REPORT: &str = "augment_report.jsonl";

fn as_display<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn config_value<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Kmeans,
    Grouped,
    Rvq,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
pub enum InitArg {
    #[value(name = "kmeans++")]
    #[serde(rename = "kmeans++")]
    KmeansPlusPlus,
    #[serde(rename = "random")]
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Lloyd,
    Minibatch,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Embedding manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Codebook file to write; the training report goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Kmeans)]
    pub kind: KindArg,
    /// Entries per codebook (per group for grouped, per stage for rvq).
    #[arg(long)]
    pub k: usize,
    /// Groups for `--kind grouped`.
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    /// Stages for `--kind rvq`.
    #[arg(long, default_value_t = 8)]
    pub stages: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = InitArg::KmeansPlusPlus)]
    pub init: InitArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Lloyd)]
    pub mode: ModeArg,
    /// Frames per update in mini-batch mode.
    #[arg(long, default_value_t = 10_000)]
    pub batch_size: usize,
    /// Train on a random subset of utterances totalling at least this many hours.
    #[arg(long)]
    pub subset_hours: Option<f64>,
    /// Frames fed to training: `all` or `bernoulli:P`.
    #[arg(long, default_value = "all")]
    #[serde(serialize_with = "as_display")]
    pub sampler: FrameSampler,
    /// Seeds subset selection, frame sampling and initialization.
    #[arg(long)]
    pub seed: u64,
}

pub fn train_quantizer(a: &TrainArgs) -> Result<()> {
    let full = load_manifest(&a.manifest)?;
    let manifest = match a.subset_hours {
        Some(h) => embio::sample_subset(&full, h, a.seed)?,
        None => full.clone(),
    };
    let subset = json!({
        "target_hours": a.subset_hours,
        "utterances": manifest.len(),
        "hours": manifest.total_duration_s() / 3600.0,
        "source_utterances": full.len(),
        "source_hours": full.total_duration_s() / 3600.0,
    });
    log::info!("training on {} utterances", manifest.len());
    let frames = FrameSet::collect(embio::iterate_frames(&manifest, a.sampler, a.seed.wrapping_add(1))?)?;

    let config = KMeansConfig {
        max_iters: a.max_iters,
        tolerance: a.tolerance,
        seed: a.seed,
        init: match a.init {
            InitArg::KmeansPlusPlus => Init::KMeansPlusPlus,
            InitArg::Random => Init::Random,
        },
        mode: match a.mode {
            ModeArg::Lloyd => Mode::Lloyd,
            ModeArg::Minibatch => Mode::MiniBatch {
                batch_size: a.batch_size,
            },
        },
    };
    config.validate()?;
    let (q, reports, residual_energy) = match a.kind {
        KindArg::Kmeans => {
            let t = quantize::train_kmeans(&frames, a.k, &config)?;
            (Quantizer::Plain(t.codebook), vec![t.report], None)
        }
        KindArg::Grouped => {
            let (g, r) = quantize::train_grouped(&frames, a.groups, a.k, &config)?;
            (Quantizer::Grouped(g), r, None)
        }
        KindArg::Rvq => {
            let (s, r) = quantize::train_rvq(&frames, a.stages, a.k, &config)?;
            (Quantizer::Residual(s), r.stages, Some(r.residual_energy))
        }
    };
    for (i, r) in reports.iter().enumerate() {
        if r.degenerate {
            return Err(Error::Capacity(format!(
                "codebook {i}: k = {} but only {} distinct training frames; lower --k or add data",
                a.k, r.distinct_points
            ))
            .into());
        }
    }

    let meta = TrainingMetadata {
        kind: q.kind(),
        seed: a.seed,
        config,
        entries: q.vocab_sizes(),
        dim: q.dim(),
        trained_on_frames: frames.len(),
        reports,
        residual_energy,
        extra: json!({ "subset": subset, "sampler": a.sampler.to_string(), "cli": config_value(a) }),
    };
    quantize::write_quantizer(&q, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    meta.save(&quantize::sidecar_path(&a.out))?;
    print_json(&meta)
}

/// Bandwidth lines for a vocabulary at each frame rate present in a corpus.
fn bandwidth_report(vocab_sizes: &[u32], rates: &[(f64, u64)]) -> Vec<Value> {
    rates
        .iter()
        .map(|&(rate, frames)| {
            let kbps = tokens::bandwidth_kbps(vocab_sizes, rate);
            json!({
                "frame_rate": rate,
                "frames": frames,
                "kbps": tokens::round_half_up(kbps, 2),
                "display": format!("{} kbps", tokens::format_kbps(kbps)),
            })
        })
        .collect()
}

/// Frame counts grouped by frame rate, in first-seen order.
fn frames_by_rate<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Vec<(f64, u64)> {
    let mut out: Vec<(f64, u64)> = Vec::new();
    for s in seqs {
        match out.iter_mut().find(|(r, _)| *r == s.frame_rate()) {
            Some((_, n)) => *n += s.frames() as u64,
            None => out.push((s.frame_rate(), s.frames() as u64)),
        }
    }
    out
}

fn token_entry(source: &ManifestEntry, file: &Path, seq: &TokenSequence, keep_alignment: bool) -> ManifestEntry {
    ManifestEntry {
        utt_id: source.utt_id.clone(),
        path: PathBuf::from(file.file_name().expect("utterance file name")),
        frames: seq.frames() as u64,
        frame_rate: seq.frame_rate(),
        duration_s: seq.duration_s(),
        phone_alignment: if keep_alignment {
            source.phone_alignment.clone()
        } else {
            None
        },
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EncodeArgs {
    /// Embedding manifest to encode.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Codebook file from train-quantizer.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Receives one `<utt_id>.dtts` per utterance and `tokens.jsonl`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Residual stacks only: encode with the first N stages.
    #[arg(long)]
    pub use_stages: Option<usize>,
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    let q = quantize::read_quantizer(&a.codebook).with_context(|| format!("reading {}", a.codebook.display()))?;
    let manifest = load_manifest(&a.manifest)?;
    prepare_out_dir(&a.out_dir, &[&a.manifest])?;
    let encoded: Vec<(ManifestEntry, TokenSequence)> = manifest
        .entries()
        .par_iter()
        .map(|e| -> Result<_> {
            let src = manifest.resolve(e);
            let m = embio::read_embedding(&src).with_context(|| format!("{}: reading {}", e.utt_id, src.display()))?;
            if m.frames() as u64 != e.frames {
                return Err(Error::Schema(format!(
                    "{}: manifest lists {} frames, file holds {}",
                    e.utt_id,
                    e.frames,
                    m.frames()
                ))
                .into());
            }
            let seq = q.encode(&m, a.use_stages).with_context(|| format!("encoding {}", e.utt_id))?;
            let out = utterance_path(&a.out_dir, &e.utt_id, ".dtts")?;
            tokens::write_tokens(&seq, &out)?;
            Ok((token_entry(e, &out, &seq, true), seq))
        })
        .collect::<Result<_>>()?;
    let (entries, seqs): (Vec<_>, Vec<_>) = encoded.into_iter().unzip();
    let out_manifest = a.out_dir.join(TOKENS_MANIFEST);
    Manifest::new(entries)?.save(&out_manifest)?;

    let vocab_sizes = seqs.first().map_or_else(|| q.vocab_sizes(), |s| s.vocab_sizes().to_vec());
    let rates = frames_by_rate(&seqs);
    log::info!("encoded {} utterances", seqs.len());
    print_json(&json!({
        "config": config_value(a),
        "kind": q.kind(),
        "utterances": seqs.len(),
        "frames": seqs.iter().map(|s| s.frames() as u64).sum::<u64>(),
        "streams": vocab_sizes.len(),
        "vocab_sizes": vocab_sizes,
        "frame_rates": rates.iter().map(|r| r.0).collect::<Vec<_>>(),
        "bandwidth": bandwidth_report(&vocab_sizes, &rates),
        "tokens_manifest": out_manifest,
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    /// Token manifest, as written by encode.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// Receives one `<utt_id>.dtek` per utterance and `features.jsonl`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Embedding manifest of the originals; adds reconstruction error to the report.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    let q = quantize::read_quantizer(&a.codebook).with_context(|| format!("reading {}", a.codebook.display()))?;
    let manifest = load_manifest(&a.tokens)?;
    let reference = a.reference.as_deref().map(load_manifest).transpose()?;
    let mut inputs = vec![a.tokens.as_path()];
    inputs.extend(a.reference.as_deref());
    prepare_out_dir(&a.out_dir, &inputs)?;

    let decoded: Vec<(ManifestEntry, Option<(String, ErrorEnergy)>)> = manifest
        .entries()
        .par_iter()
        .map(|e| -> Result<_> {
            let seq = tokens::read_tokens(&manifest.resolve(e)).with_context(|| format!("reading tokens of {}", e.utt_id))?;
            let m = q.decode(&seq).with_context(|| format!("decoding {}", e.utt_id))?;
            let energy = match &reference {
                Some(r) => {
                    let re = r
                        .get(&e.utt_id)
                        .ok_or_else(|| Error::Input(format!("{} missing from the reference manifest", e.utt_id)))?;
                    let orig = embio::read_embedding(&r.resolve(re))?;
                    let mut acc = ErrorEnergy::default();
                    acc.accumulate(&orig, &m).with_context(|| format!("comparing {}", e.utt_id))?;
                    Some((e.utt_id.clone(), acc))
                }
                None => None,
            };
            let out = utterance_path(&a.out_dir, &e.utt_id, ".dtek")?;
            embio::write_embedding(&m, &out)?;
            let entry = ManifestEntry {
                utt_id: e.utt_id.clone(),
                path: PathBuf::from(out.file_name().expect("utterance file name")),
                frames: m.frames() as u64,
                frame_rate: m.frame_rate(),
                duration_s: m.duration_s(),
                phone_alignment: e.phone_alignment.clone(),
            };
            Ok((entry, energy))
        })
        .collect::<Result<_>>()?;
    let (entries, energies): (Vec<_>, Vec<_>) = decoded.into_iter().unzip();
    let n = entries.len();
    let out_manifest = a.out_dir.join(FEATURES_MANIFEST);
    Manifest::new(entries)?.save(&out_manifest)?;

    let mut report = json!({
        "config": config_value(a),
        "utterances": n,
        "features_manifest": out_manifest,
    });
    if reference.is_some() {
        let mut total = ErrorEnergy::default();
        let mut per_utt = Vec::new();
        for (id, e) in energies.into_iter().flatten() {
            total.merge(&e);
            per_utt.push(json!({ "utt_id": id, "reconstruction": metric_or_null(e.finish()) }));
        }
        report["reconstruction"] = metric_or_null(total.finish());
        report["per_utterance"] = Value::Array(per_utt);
    }
    print_json(&report)
}

/// Serializes a metric, or `null` when it is undefined for this input.
fn metric_or_null<T: Serialize>(r: dtok::Result<T>) -> Value {
    match r {
        Ok(v) => config_value(&v),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{msg}");
            Value::Null
        }
        Err(e) => {
            log::warn!("{e}");
            Value::Null
        }
    }
}

/// Every knob of the augmentation policy as a flag.
#[derive(Args, Debug, Serialize)]
pub struct PolicyArgs {
    /// Time-warp factor W in frames; 0 disables warping.
    #[arg(long, default_value_t = 80)]
    pub warp_factor: usize,
    #[arg(long, default_value_t = 10)]
    pub time_mask_count_cap: usize,
    /// Time masks per frame before capping.
    #[arg(long, default_value_t = 0.0015)]
    pub time_mask_frac: f64,
    #[arg(long, default_value_t = 100)]
    pub time_mask_width_cap: usize,
    /// Fraction of the frames shared out among the time masks.
    #[arg(long, default_value_t = 0.15)]
    pub time_mask_budget_frac: f64,
    #[arg(long, default_value_t = 27)]
    pub emb_mask_max_stride: usize,
    #[arg(long, default_value_t = 2)]
    pub emb_mask_repeats: usize,
    #[arg(long, default_value_t = 0.25)]
    pub noise_prob: f64,
    /// Probability that an utterance is augmented at all.
    #[arg(long, default_value_t = 0.9)]
    pub sample_prob: f64,
    /// Token written into time-masked frames.
    #[arg(long, default_value_t = 0)]
    pub mask_value: u32,
    #[arg(long, default_value_t = 0.0)]
    pub frame_dup_prob: f64,
}

impl PolicyArgs {
    pub fn to_config(&self, seed: u64) -> AugmentationConfig {
        AugmentationConfig {
            warp_factor: self.warp_factor,
            time_mask_count_cap: self.time_mask_count_cap,
            time_mask_frac: self.time_mask_frac,
            time_mask_width_cap: self.time_mask_width_cap,
            time_mask_budget_frac: self.time_mask_budget_frac,
            emb_mask_max_stride: self.emb_mask_max_stride,
            emb_mask_repeats: self.emb_mask_repeats,
            noise_prob: self.noise_prob,
            sample_prob: self.sample_prob,
            mask_value: self.mask_value,
            frame_dup_prob: self.frame_dup_prob,
            seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentArgs {
    /// Token manifest to augment.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Embedding table for single-stream tokens; enables feature output
    /// with embedding masks and noise.
    #[arg(long, conflicts_with = "tables")]
    pub table: Option<PathBuf>,
    /// One embedding table per stream, comma separated; needs --projection.
    #[arg(long, value_delimiter = ',', requires = "projection")]
    pub tables: Vec<PathBuf>,
    /// Fusion projection for --tables.
    #[arg(long, requires = "tables")]
    pub projection: Option<PathBuf>,
}

enum Embedder {
    Single(EmbeddingTable),
    Fused(Vec<EmbeddingTable>, LinearMap),
}

impl Embedder {
    fn load(a: &AugmentArgs) -> Result<Option<Self>> {
        if let Some(t) = &a.table {
            return Ok(Some(Embedder::Single(frontend::read_table(t)?)));
        }
        match &a.projection {
            Some(p) => {
                let tables = a.tables.iter().map(|t| frontend::read_table(t)).collect::<dtok::Result<_>>()?;
                Ok(Some(Embedder::Fused(tables, frontend::read_projection(p)?)))
            }
            None => Ok(None),
        }
    }

    fn embed(&self, seq: &TokenSequence) -> dtok::Result<frontend::FeatureSequence> {
        match self {
            Embedder::Single(t) => frontend::embed_tokens(seq, t),
            Embedder::Fused(ts, p) => frontend::fuse_groups(seq, ts, p),
        }
    }
}

#[derive(Serialize)]
struct UtteranceReport {
    utt_id: String,
    #[serde(flatten)]
    report: augment::AugmentReport,
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let cfg = a.policy.to_config(a.seed);
    cfg.validate()?;
    let embedder = Embedder::load(a)?;
    let manifest = load_manifest(&a.tokens)?;
    prepare_out_dir(&a.out_dir, &[&a.tokens])?;

    type Done = (ManifestEntry, Option<ManifestEntry>, UtteranceReport);
    let done: Vec<Done> = manifest
        .entries()
        .par_iter()
        .map(|e| -> Result<Done> {
            let seq = tokens::read_tokens(&manifest.resolve(e)).with_context(|| format!("reading tokens of {}", e.utt_id))?;
            let mut rng = augment::sample_rng(a.seed, &e.utt_id);
            let (out_seq, features, report) = match &embedder {
                Some(emb) => {
                    let s = augment::augment_sample(&seq, |t| emb.embed(t), &cfg, &mut rng)
                        .with_context(|| format!("augmenting {}", e.utt_id))?;
                    (s.tokens, Some(s.features), s.report)
                }
                None => {
                    let (t, r) = augment::augment_tokens(&seq, &cfg, &mut rng)
                        .with_context(|| format!("augmenting {}", e.utt_id))?;
                    (t, None, r)
                }
            };
            let tok_path = utterance_path(&a.out_dir, &e.utt_id, ".dtts")?;
            tokens::write_tokens(&out_seq, &tok_path)?;
            let tok_entry = token_entry(e, &tok_path, &out_seq, !report.applied);
            let feat_entry = match features {
                Some(f) => {
                    let p = utterance_path(&a.out_dir, &e.utt_id, ".features.dtek")?;
                    embio::write_embedding(&f, &p)?;
                    Some(ManifestEntry {
                        path: PathBuf::from(p.file_name().expect("utterance file name")),
                        ..tok_entry.clone()
                    })
                }
                None => None,
            };
            Ok((tok_entry, feat_entry, UtteranceReport { utt_id: e.utt_id.clone(), report }))
        })
        .collect::<Result<_>>()?;

    let mut tok_entries = Vec::with_capacity(done.len());
    let mut feat_entries = Vec::new();
    let mut reports = Vec::with_capacity(done.len());
    for (t, f, r) in done {
        tok_entries.push(t);
        feat_entries.extend(f);
        reports.push(r);
    }
    Manifest::new(tok_entries)?.save(&a.out_dir.join(TOKENS_MANIFEST))?;
    if embedder.is_some() {
        Manifest::new(feat_entries)?.save(&a.out_dir.join(FEATURES_MANIFEST))?;
    }
    write_json_lines(&a.out_dir.join(AUGMENT_REPORT), &reports)?;

    let applied = reports.iter().filter(|r| r.report.applied).count();
    print_json(&json!({
        "config": config_value(a),
        "policy": cfg,
        "utterances": reports.len(),
        "augmented": applied,
        "warped": reports.iter().filter(|r| r.report.warp.is_some()).count(),
        "time_masks": reports.iter().map(|r| r.report.time_masks.len()).sum::<usize>(),
        "embedding_masks": reports.iter().map(|r| r.report.embedding_masks.len()).sum::<usize>(),
        "noise_added": reports.iter().filter(|r| r.report.noise_added).count(),
        "duplicated_frames": reports.iter().map(|r| r.report.duplicated_frames).sum::<usize>(),
        "features": embedder.is_some(),
        "report": a.out_dir.join(AUGMENT_REPORT),
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    /// Token manifest to measure.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Compute PNMI against per-frame phone labels.
    #[arg(long)]
    pub pnmi: bool,
    /// Manifest carrying `phone_alignment` per utterance; defaults to the
    /// alignments stored in the token manifest.
    #[arg(long)]
    pub alignments: Option<PathBuf>,
    /// Also compute PNMI over the product alphabet of all streams.
    #[arg(long, requires = "pnmi")]
    pub joint: bool,
    /// Largest product alphabet accepted by --joint.
    #[arg(long, default_value_t = 1 << 24)]
    pub joint_cap: u64,
    /// Include per-utterance usage and PNMI.
    #[arg(long)]
    pub per_utterance: bool,
}

struct UttStats {
    histograms: Vec<TokenHistogram>,
    tables: Vec<ContingencyTable>,
    joint: Option<ContingencyTable>,
    runs: Vec<u64>,
}

fn stream_json(h: &TokenHistogram, table: Option<&ContingencyTable>, runs: Option<u64>, stream: usize) -> Value {
    let mut v = json!({ "stream": stream, "vocab": h.counts().len(), "frames": h.total() });
    match h.stats() {
        Ok(s) => {
            v["distinct"] = json!(s.distinct);
            v["utilization"] = json!(s.utilization);
            v["entropy_bits"] = json!(s.entropy_bits);
            v["perplexity"] = json!(s.perplexity);
        }
        Err(e) => {
            log::warn!("stream {stream}: {e}");
            for k in ["distinct", "utilization", "entropy_bits", "perplexity"] {
                v[k] = Value::Null;
            }
        }
    }
    if let Some(r) = runs {
        v["runs"] = json!(r);
        v["dedup_ratio"] = if h.total() > 0 {
            json!(r as f64 / h.total() as f64)
        } else {
            Value::Null
        };
    }
    if let Some(t) = table {
        v["pnmi"] = metric_or_null(metrics::pnmi(t));
    }
    v
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let manifest = load_manifest(&a.tokens)?;
    let alignments = match &a.alignments {
        Some(p) if a.pnmi => Some(load_manifest(p)?),
        Some(_) => {
            log::warn!("--alignments is ignored without --pnmi");
            None
        }
        None => None,
    };
    let alignment_of = |e: &ManifestEntry| -> Result<Option<Vec<u32>>> {
        if !a.pnmi {
            return Ok(None);
        }
        let source = match &alignments {
            Some(m) => m.get(&e.utt_id).and_then(|x| x.phone_alignment.clone()),
            None => e.phone_alignment.clone(),
        };
        match source {
            Some(s) => Ok(Some(s)),
            None => Err(Error::Config(format!(
                "--pnmi needs a phone alignment for {}; pass --alignments or use a manifest that carries them",
                e.utt_id
            ))
            .into()),
        }
    };

    let seqs: Vec<(TokenSequence, Option<Vec<u32>>)> = manifest
        .entries()
        .par_iter()
        .map(|e| -> Result<_> {
            let phones = alignment_of(e)?;
            let seq = tokens::read_tokens(&manifest.resolve(e)).with_context(|| format!("reading tokens of {}", e.utt_id))?;
            Ok((seq, phones))
        })
        .collect::<Result<_>>()?;
    let Some((first, _)) = seqs.first() else {
        return Err(Error::Input("token manifest is empty".into()).into());
    };
    let vocab_sizes = first.vocab_sizes().to_vec();
    for ((s, _), e) in seqs.iter().zip(manifest.entries()) {
        if s.vocab_sizes() != vocab_sizes.as_slice() {
            return Err(Error::Schema(format!(
                "{}: vocabularies {:?} differ from {:?}",
                e.utt_id,
                s.vocab_sizes(),
                vocab_sizes
            ))
            .into());
        }
    }

    let per_utt: Vec<UttStats> = seqs
        .par_iter()
        .zip(manifest.entries())
        .map(|((seq, phones), e)| -> Result<UttStats> {
            let histograms = (0..seq.num_streams())
                .map(|s| TokenHistogram::from_stream(seq, s))
                .collect::<dtok::Result<_>>()?;
            let (tables, joint) = match phones {
                Some(p) => {
                    let tables = metrics::build_contingencies(seq, p).with_context(|| format!("aligning {}", e.utt_id))?;
                    let joint = if a.joint {
                        Some(metrics::build_joint_contingency(seq, p, a.joint_cap)?)
                    } else {
                        None
                    };
                    (tables, joint)
                }
                None => (Vec::new(), None),
            };
            let runs = tokens::deduplicate(seq).streams.iter().map(|r| r.len() as u64).collect();
            Ok(UttStats {
                histograms,
                tables,
                joint,
                runs,
            })
        })
        .collect::<Result<_>>()?;

    let streams = vocab_sizes.len();
    let mut hist: Vec<TokenHistogram> = vocab_sizes.iter().map(|&v| TokenHistogram::new(v)).collect();
    let mut tables: Vec<ContingencyTable> = vocab_sizes.iter().map(|&v| ContingencyTable::new(0, u64::from(v))).collect();
    let mut joint = ContingencyTable::new(0, 0);
    let mut runs = vec![0u64; streams];
    for u in &per_utt {
        for s in 0..streams {
            hist[s].merge(&u.histograms[s]);
            runs[s] += u.runs[s];
            if let Some(t) = u.tables.get(s) {
                tables[s].merge(t);
            }
        }
        if let Some(j) = &u.joint {
            joint.merge(j);
        }
    }

    let rates = frames_by_rate(seqs.iter().map(|(s, _)| s));
    let mut report = json!({
        "config": config_value(a),
        "utterances": seqs.len(),
        "frames": seqs.iter().map(|(s, _)| s.frames() as u64).sum::<u64>(),
        "duration_s": seqs.iter().map(|(s, _)| s.duration_s()).sum::<f64>(),
        "vocab_sizes": vocab_sizes,
        "frame_rates": rates.iter().map(|r| r.0).collect::<Vec<_>>(),
        "bandwidth": bandwidth_report(&vocab_sizes, &rates),
        "streams": (0..streams)
            .map(|s| stream_json(&hist[s], a.pnmi.then(|| &tables[s]), Some(runs[s]), s))
            .collect::<Vec<_>>(),
    });
    if a.joint {
        report["joint_pnmi"] = metric_or_null(metrics::pnmi(&joint));
    }
    if a.per_utterance {
        report["per_utterance"] = per_utt
            .iter()
            .zip(manifest.entries())
            .map(|(u, e)| {
                let streams: Vec<Value> = (0..streams)
                    .map(|s| stream_json(&u.histograms[s], u.tables.get(s), Some(u.runs[s]), s))
                    .collect();
                let mut v = json!({ "utt_id": e.utt_id, "streams": streams });
                if let Some(j) = &u.joint {
                    v["joint_pnmi"] = metric_or_null(metrics::pnmi(j));
                }
                v
            })
            .collect();
    }
    print_json(&report)
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    /// A `.dtek`, `.dtts`, `.dtcb` or `.dtem` file, or a JSON-lines manifest.
    pub path: PathBuf,
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let mut magic = [0u8; 4];
    let got = {
        let mut f = File::open(&a.path)
            .map_err(Error::from)
            .with_context(|| format!("opening {}", a.path.display()))?;
        f.read(&mut magic).map_err(Error::from)?
    };
    let size = std::fs::metadata(&a.path).map_err(Error::from)?.len();
    let report = match (got, &magic) {
        (4, m) if m == embio::EMBEDDING_MAGIC => {
            let mut f = File::open(&a.path).map_err(Error::from)?;
            let h = embio::read_embedding_header(&mut f)?;
            json!({
                "format": "dtek",
                "version": h.version,
                "dim": h.dim,
                "frame_rate": h.frame_rate,
                "frames": h.frames,
                "duration_s": h.frames as f64 / h.frame_rate,
                "payload_bytes": h.payload_len(),
                "file_bytes": size,
                "consistent": embio::EMBEDDING_HEADER_LEN + h.payload_len() == size,
            })
        }
        (4, m) if m == tokens::TOKEN_MAGIC => {
            let s = tokens::read_tokens(&a.path)?;
            json!({
                "format": "dtts",
                "version": tokens::TOKEN_VERSION,
                "streams": s.num_streams(),
                "frames": s.frames(),
                "frame_rate": s.frame_rate(),
                "duration_s": s.duration_s(),
                "vocab_sizes": s.vocab_sizes(),
                "token_widths": s.vocab_sizes().iter().map(|&v| tokens::token_width(v)).collect::<Vec<_>>(),
                "bandwidth_kbps": tokens::round_half_up(s.bandwidth_kbps(), 2),
                "file_bytes": size,
            })
        }
        (4, m) if m == quantize::CODEBOOK_MAGIC => {
            let h = QuantizerHeader::read(&a.path)?;
            let sidecar = quantize::sidecar_path(&a.path);
            let mut v = json!({
                "format": "dtcb",
                "version": h.version,
                "kind": h.kind,
                "entries": h.entries,
                "dim": h.dim,
                "file_bytes": size,
            });
            if sidecar.exists() {
                let meta = TrainingMetadata::load(&sidecar)?;
                v["trained_on_frames"] = json!(meta.trained_on_frames);
                v["seed"] = json!(meta.seed);
                v["final_inertia"] = json!(meta.reports.iter().map(|r| r.final_inertia).collect::<Vec<_>>());
            }
            v
        }
        (4, m) if m == frontend::TABLE_MAGIC => {
            let t = frontend::read_table(&a.path)?;
            json!({
                "format": "dtem",
                "version": frontend::TABLE_VERSION,
                "vocab": t.vocab(),
                "out_dim": t.out_dim(),
                "init_mode": t.init_mode(),
                "projection": t.projection().map(|p| json!({ "rows": p.rows(), "cols": p.cols() })),
                "file_bytes": size,
            })
        }
        _ => {
            match Manifest::load(&a.path) {
                Ok(m) => json!({
                    "format": "manifest",
                    "utterances": m.len(),
                    "frames": m.total_frames(),
                    "hours": m.total_duration_s() / 3600.0,
                    "aligned_utterances": m.entries().iter().filter(|e| e.phone_alignment.is_some()).count(),
                }),
                Err(e) => {
                    return Err(Error::Format(format!(
                        "{}: neither a dtok binary file nor a manifest ({e})",
                        a.path.display()
                    ))
                    .into())
                }
            }
        }
    };
    print_json(&report)
}

#[derive(Args, Debug, Serialize)]
pub struct InitTableArgs {
    /// Vocabulary size for a randomly initialized table.
    #[arg(long, required_unless_present = "codebook", conflicts_with = "codebook")]
    pub vocab: Option<usize>,
    /// Initialize rows from codebook centroids through a random projection.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Which table of a grouped or residual codebook file to use.
    #[arg(long, default_value_t = 0, requires = "codebook")]
    pub codebook_index: usize,
    #[arg(long, default_value_t = frontend::DEFAULT_EMBED_DIM)]
    pub out_dim: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn init_table(a: &InitTableArgs) -> Result<()> {
    let table = match (&a.codebook, a.vocab) {
        (Some(path), _) => {
            let q = quantize::read_quantizer(path)?;
            let books = q.codebooks();
            let cb = books.get(a.codebook_index).ok_or_else(|| {
                Error::Config(format!(
                    "--codebook-index {} but {} holds {} tables",
                    a.codebook_index,
                    path.display(),
                    books.len()
                ))
            })?;
            EmbeddingTable::codebook_projected(cb, LinearMap::random(cb.dim(), a.out_dim, a.seed)?)?
        }
        (None, Some(v)) => EmbeddingTable::random(v, a.out_dim, a.seed)?,
        (None, None) => return Err(Error::Config("give --vocab or --codebook".into()).into()),
    };
    frontend::write_table(&table, &a.out)?;
    print_json(&json!({
        "config": config_value(a),
        "vocab": table.vocab(),
        "out_dim": table.out_dim(),
        "init_mode": table.init_mode(),
    }))
}

#[derive(Args, Debug, Serialize)]
pub struct InitProjectionArgs {
    /// Input width: the summed output widths of the per-stream tables.
    #[arg(long)]
    pub rows: usize,
    #[arg(long, default_value_t = frontend::DEFAULT_EMBED_DIM)]
    pub cols: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn init_projection(a: &InitProjectionArgs) -> Result<()> {
    let p = LinearMap::random(a.rows, a.cols, a.seed)?;
    frontend::write_projection(&p, &a.out)?;
    print_json(&json!({ "config": config_value(a), "rows": p.rows(), "cols": p.cols() }))
}
