//! Augmentation policy for discrete-token inputs.
//!
//! Token-domain deformations (time warping, time masking, frame duplication)
//! run on the token sequence before embedding; feature-domain deformations
//! (embedding masking, Gaussian noise) run on the embedded features. A whole
//! sample is left untouched with probability `1 - sample_prob`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{nearest_indices, FeatureSequence};
use crate::tokens::TokenSequence;

/// Every knob of the policy. Defaults are the reference constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Time warp factor W in frames. 0 disables warping.
    pub warp_factor: usize,
    /// Upper bound on the number of time masks.
    pub time_mask_count_cap: usize,
    /// Time masks per frame before capping (N = ⌈frac · T⌉).
    pub time_mask_frac: f64,
    /// Upper bound on the width of one time mask.
    pub time_mask_width_cap: usize,
    /// Fraction of T shared out among the N masks.
    pub time_mask_budget_frac: f64,
    /// Largest embedding-mask stride; clamped to the feature dimension.
    pub emb_mask_max_stride: usize,
    /// Independent embedding masks per sample.
    pub emb_mask_repeats: usize,
    pub noise_prob: f64,
    /// Probability that a sample is augmented at all.
    pub sample_prob: f64,
    /// Token written into masked frames. Must fit every vocabulary.
    pub mask_value: u32,
    /// Per-frame duplication probability. Off by default.
    pub frame_dup_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            warp_factor: 80,
            time_mask_count_cap: 10,
            time_mask_frac: 0.0015,
            time_mask_width_cap: 100,
            time_mask_budget_frac: 0.15,
            emb_mask_max_stride: 27,
            emb_mask_repeats: 2,
            noise_prob: 0.25,
            sample_prob: 0.9,
            mask_value: 0,
            frame_dup_prob: 0.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise_prob", self.noise_prob),
            ("sample_prob", self.sample_prob),
            ("frame_dup_prob", self.frame_dup_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, f) in [
            ("time_mask_frac", self.time_mask_frac),
            ("time_mask_budget_frac", self.time_mask_budget_frac),
        ] {
            if !(f.is_finite() && f >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {f}")));
            }
        }
        Ok(())
    }

    /// Number of time masks N and maximum width M for a sequence of `frames`.
    pub fn time_mask_params(&self, frames: usize) -> (usize, usize) {
        let n = ceil_tolerant(self.time_mask_frac * frames as f64).min(self.time_mask_count_cap);
        if n == 0 {
            return (0, 0);
        }
        let m = floor_tolerant(self.time_mask_budget_frac * frames as f64 / n as f64)
            .min(self.time_mask_width_cap)
            .min(frames);
        (n, m)
    }
}

// Products like 0.0015 · 2000 land a hair above or below the integer they
// denote; snap those before rounding.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

fn ceil_tolerant(x: f64) -> usize {
    snap(x).ceil().max(0.0) as usize
}

fn floor_tolerant(x: f64) -> usize {
    snap(x).floor().max(0.0) as usize
}

/// Independent, reproducible RNG stream for one utterance.
pub fn sample_rng(seed: u64, utt_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(utt_id.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Start index `⌊λ · (len − width)⌋` of a mask of `width` inside `len`
/// positions, for `λ ∈ [0, 1)`.
pub fn mask_start(len: usize, width: usize, lambda: f64) -> usize {
    debug_assert!(width <= len && (0.0..1.0).contains(&lambda));
    (lambda * (len - width) as f64).floor() as usize
}

/// Half-open region `[start, start + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub start: usize,
    pub width: usize,
}

/// Warp centre (1-based, as drawn) and the size the left part was stretched to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warp {
    pub center: usize,
    pub warped_size: usize,
}

/// Stretches frames `[0, center − 1)` to `warped_size` frames and
/// `[center − 1, T)` to `T − warped_size` frames by nearest-neighbour copy.
pub fn warp_at(seq: &TokenSequence, center: usize, warped_size: usize) -> Result<TokenSequence> {
    let t = seq.frames();
    if center < 2 || center > t || warped_size == 0 || warped_size >= t {
        return Err(Error::Range(format!(
            "warp centre {center} / size {warped_size} invalid for {t} frames"
        )));
    }
    let left = center - 1;
    let mut idx = nearest_indices(left, warped_size);
    idx.extend(
        nearest_indices(t - left, t - warped_size)
            .into_iter()
            .map(|i| i + left),
    );
    Ok(seq.gather(&idx))
}

/// Random time warp. Sequences with `T ≤ 2W + 1` (no valid centre) and
/// `W = 0` pass through unchanged.
pub fn time_warp<R: Rng>(seq: &TokenSequence, warp_factor: usize, rng: &mut R) -> (TokenSequence, Option<Warp>) {
    let t = seq.frames();
    let w = warp_factor;
    if w == 0 || t <= 2 * w + 1 {
        return (seq.clone(), None);
    }
    let center = rng.random_range(w + 1..t - w);
    let warped_size = rng.random_range(center - w..center + w + 1);
    let out = warp_at(seq, center, warped_size).expect("drawn warp parameters are in range");
    (
        out,
        Some(Warp {
            center,
            warped_size,
        }),
    )
}

/// Masks N regions of up to M frames across all streams.
pub fn time_mask<R: Rng>(
    seq: &TokenSequence,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(TokenSequence, Vec<MaskRegion>)> {
    if let Some(&v) = seq.vocab_sizes().iter().find(|&&v| config.mask_value >= v) {
        return Err(Error::Config(format!(
            "mask value {} outside vocabulary of {v}",
            config.mask_value
        )));
    }
    let t = seq.frames();
    let (n, m) = config.time_mask_params(t);
    let mut out = seq.clone();
    let mut regions = Vec::with_capacity(n);
    for _ in 0..n {
        let width = rng.random_range(0..=m);
        let start = mask_start(t, width, rng.random());
        out.fill_frames(start, width, config.mask_value);
        regions.push(MaskRegion { start, width });
    }
    Ok((out, regions))
}

/// Zeroes `emb_mask_repeats` random contiguous bands of feature dimensions.
pub fn embedding_mask<R: Rng>(
    seq: &FeatureSequence,
    config: &AugmentationConfig,
    rng: &mut R,
) -> (FeatureSequence, Vec<MaskRegion>) {
    let f = seq.dim();
    let max_stride = config.emb_mask_max_stride.min(f);
    let mut out = seq.clone();
    let mut bands = Vec::with_capacity(config.emb_mask_repeats);
    for _ in 0..config.emb_mask_repeats {
        let width = rng.random_range(0..=max_stride);
        let start = mask_start(f, width, rng.random());
        if width > 0 {
            for row in out.data_mut().chunks_exact_mut(f) {
                row[start..start + width].fill(0.0);
            }
        }
        bands.push(MaskRegion { start, width });
    }
    (out, bands)
}

/// With probability `prob`, adds standard-normal noise to every element.
pub fn gaussian_noise<R: Rng>(seq: &FeatureSequence, prob: f64, rng: &mut R) -> (FeatureSequence, bool) {
    if !rng.random_bool(prob) {
        return (seq.clone(), false);
    }
    let mut out = seq.clone();
    for v in out.data_mut() {
        *v += rng.sample::<f32, _>(StandardNormal);
    }
    (out, true)
}

/// Repeats each frame once more with probability `per_frame_prob`.
pub fn duplicate_frames<R: Rng>(seq: &TokenSequence, per_frame_prob: f64, rng: &mut R) -> TokenSequence {
    let mut idx = Vec::with_capacity(seq.frames() * 2);
    for t in 0..seq.frames() {
        idx.push(t);
        if rng.random_bool(per_frame_prob) {
            idx.push(t);
        }
    }
    seq.gather(&idx)
}

/// What happened to one sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub applied: bool,
    pub input_frames: usize,
    pub output_frames: usize,
    pub warp: Option<Warp>,
    /// N and M in effect for the time masks.
    pub time_mask_count: usize,
    pub time_mask_max_width: usize,
    pub time_masks: Vec<MaskRegion>,
    pub duplicated_frames: usize,
    pub embedding_masks: Vec<MaskRegion>,
    pub noise_added: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub tokens: TokenSequence,
    pub features: FeatureSequence,
    pub report: AugmentReport,
}

/// Decides whether the sample is augmented and runs the token-domain
/// stages: time warp, time mask, then frame duplication.
pub fn augment_tokens<R: Rng>(
    tokens: &TokenSequence,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(TokenSequence, AugmentReport)> {
    config.validate()?;
    let mut report = AugmentReport {
        input_frames: tokens.frames(),
        output_frames: tokens.frames(),
        ..Default::default()
    };
    if !rng.random_bool(config.sample_prob) {
        return Ok((tokens.clone(), report));
    }
    report.applied = true;
    let (warped, warp) = time_warp(tokens, config.warp_factor, rng);
    report.warp = warp;
    let (n, m) = config.time_mask_params(warped.frames());
    report.time_mask_count = n;
    report.time_mask_max_width = m;
    let (mut out, masks) = time_mask(&warped, config, rng)?;
    report.time_masks = masks;
    if config.frame_dup_prob > 0.0 {
        let before = out.frames();
        out = duplicate_frames(&out, config.frame_dup_prob, rng);
        report.duplicated_frames = out.frames() - before;
    }
    report.output_frames = out.frames();
    Ok((out, report))
}

/// Full policy: token stages, then `embed`, then embedding masking and
/// Gaussian noise. `embed` maps the (possibly augmented) tokens to features.
pub fn augment_sample<R, F>(
    tokens: &TokenSequence,
    embed: F,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<AugmentedSample>
where
    R: Rng,
    F: FnOnce(&TokenSequence) -> Result<FeatureSequence>,
{
    let (tokens, mut report) = augment_tokens(tokens, config, rng)?;
    let mut features = embed(&tokens)?;
    if features.frames() != tokens.frames() {
        return Err(Error::Schema(format!(
            "embedding produced {} frames for {} tokens",
            features.frames(),
            tokens.frames()
        )));
    }
    if report.applied {
        let (masked, bands) = embedding_mask(&features, config, rng);
        report.embedding_masks = bands;
        let (noisy, added) = gaussian_noise(&masked, config.noise_prob, rng);
        report.noise_added = added;
        features = noisy;
    }
    Ok(AugmentedSample {
        tokens,
        features,
        report,
    })
}
