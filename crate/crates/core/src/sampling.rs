//! Paired RGB/RAW patch selection.
//!
//! Candidates are laid out on an even-aligned grid over each image. The
//! stratified sampler bins candidates by per-channel mean brightness and
//! draws a channel, then a non-empty bin, then a patch, each uniformly; the
//! random sampler draws candidates uniformly. Both draw with replacement.

use std::sync::Arc;

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize, PackedRawImage, RgbImage};
use crate::model::{CONTEXT_SIDE, RAW_PATCH, RGB_PATCH};

/// Fraction of the context image's area kept by the training-time crop.
pub const CONTEXT_CROP_AREA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    Random,
    Stratified,
}

impl std::str::FromStr for SamplingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingMethod::Random),
            "stratified" => Ok(SamplingMethod::Stratified),
            other => Err(Error::Parameter(format!("unknown sampling method {other:?}"))),
        }
    }
}

impl std::fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMethod::Random => "random",
            SamplingMethod::Stratified => "stratified",
        })
    }
}

/// Aligned training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `RGB_PATCH x RGB_PATCH` RGB patch.
    pub rgb_patch: RgbImage,
    /// `RAW_PATCH x RAW_PATCH x 4` target covering the RGB patch interior.
    pub raw_patch: PackedRawImage,
    /// Evaluation-mode 128x128 downscale of the full image.
    pub context_rgb: Arc<RgbImage>,
    pub source_image_id: String,
    /// Top-left of `rgb_patch` in full-image RGB pixels; always even.
    pub patch_origin: (usize, usize),
}

fn axis_positions(len: usize, side: usize, stride: usize) -> Vec<usize> {
    if len < side {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|p| p + side <= len).collect();
    let last = *out.last().expect("len >= side");
    if last + side < len {
        let clamped = (len - side) & !1;
        if clamped != last {
            out.push(clamped);
        }
    }
    out
}

/// Even-aligned candidate origins covering the image; the final row and
/// column of the grid are shifted inward so every patch fits.
pub fn enumerate_patches(
    rgb: &RgbImage,
    raw: &PackedRawImage,
    side: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if side == 0 || stride == 0 || side % 2 != 0 || stride % 2 != 0 {
        return Err(Error::Parameter(format!("side {side} and stride {stride} must be even and positive")));
    }
    let (h, w) = (rgb.height(), rgb.width());
    if raw.dim() != (h / 2, w / 2) {
        return Err(Error::Dimension(format!(
            "RAW planes {:?} do not match RGB {h}x{w}",
            raw.dim()
        )));
    }
    if h < side || w < side {
        log::warn!("image {h}x{w} is smaller than patch side {side}; no candidates");
        return Ok(Vec::new());
    }
    let rows = axis_positions(h, side, stride);
    let cols = axis_positions(w, side, stride);
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Arithmetic mean of each RGB channel.
pub fn compute_channel_brightness(rgb_patch: &RgbImage) -> [f64; 3] {
    let m = rgb_patch.data().mean_axis(Axis(0)).and_then(|a| a.mean_axis(Axis(0)));
    match m {
        Some(m) => [m[0], m[1], m[2]],
        None => [0.0; 3],
    }
}

/// Candidate indices binned by channel brightness, one bin vector per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BrightnessBins {
    bin_count: usize,
    channels: [Vec<Vec<usize>>; 3],
}

impl BrightnessBins {
    pub fn bin_index(value: f64, bin_count: usize) -> usize {
        ((value.clamp(0.0, 1.0) * bin_count as f64).floor() as usize).min(bin_count - 1)
    }

    pub fn new(brightness: &[[f64; 3]], bin_count: usize) -> Result<Self> {
        if bin_count == 0 {
            return Err(Error::Parameter("bin count must be positive".into()));
        }
        let mut channels: [Vec<Vec<usize>>; 3] = std::array::from_fn(|_| vec![Vec::new(); bin_count]);
        for (idx, b) in brightness.iter().enumerate() {
            for (c, bins) in channels.iter_mut().enumerate() {
                bins[Self::bin_index(b[c], bin_count)].push(idx);
            }
        }
        Ok(BrightnessBins { bin_count, channels })
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn channel(&self, c: usize) -> &[Vec<usize>] {
        &self.channels[c]
    }

    pub fn is_empty(&self) -> bool {
        self.channels.iter().all(|bins| bins.iter().all(Vec::is_empty))
    }
}

/// Candidate indices drawn channel -> non-empty bin -> member, all uniform.
pub fn stratified_sample(bins: &BrightnessBins, count: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    stratified_sample_with(bins, count, &mut rng)
}

pub fn stratified_sample_with<R: Rng>(bins: &BrightnessBins, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(stratified_draws_with(bins, count, rng)?.into_iter().map(|d| d.index).collect())
}

/// One stratified draw with the channel and bin it came through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratifiedDraw {
    pub channel: usize,
    pub bin: usize,
    pub index: usize,
    /// Non-empty bins the bin was chosen among.
    pub nonempty_bins: usize,
}

/// [`stratified_sample_with`] keeping the channel and bin of every draw.
pub fn stratified_draws_with<R: Rng>(
    bins: &BrightnessBins,
    count: usize,
    rng: &mut R,
) -> Result<Vec<StratifiedDraw>> {
    let nonempty: Vec<Vec<(usize, &Vec<usize>)>> = bins
        .channels
        .iter()
        .map(|ch| ch.iter().enumerate().filter(|(_, b)| !b.is_empty()).collect())
        .collect();
    let usable: Vec<usize> = (0..3).filter(|&c| !nonempty[c].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Dataset("all brightness bins are empty".into()));
    }
    Ok((0..count)
        .map(|_| {
            let channel = usable[rng.random_range(0..usable.len())];
            let ch = &nonempty[channel];
            let (bin, members) = ch[rng.random_range(0..ch.len())];
            StratifiedDraw { channel, bin, index: members[rng.random_range(0..members.len())], nonempty_bins: ch.len() }
        })
        .collect())
}

/// Uniform draws with replacement over `0..n_candidates`.
pub fn random_sample(n_candidates: usize, count: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    random_sample_with(n_candidates, count, &mut rng)
}

pub fn random_sample_with<R: Rng>(n_candidates: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_candidates == 0 {
        return Err(Error::Dataset("no candidate patches".into()));
    }
    Ok((0..count).map(|_| rng.random_range(0..n_candidates)).collect())
}

/// Side of the training-time context crop, `round(128 * sqrt(0.9))`.
pub fn context_crop_side() -> usize {
    (CONTEXT_SIDE as f64 * CONTEXT_CROP_AREA.sqrt()).round() as usize
}

/// Plain `128 x 128` downscale used at evaluation time.
pub fn downscale_context(rgb_full: &RgbImage) -> RgbImage {
    resize(rgb_full, CONTEXT_SIDE, CONTEXT_SIDE)
}

/// Random 0.9-area crop of a `128 x 128` context, rescaled back to 128.
pub fn crop_context<R: Rng>(context: &RgbImage, rng: &mut R) -> RgbImage {
    let side = context_crop_side();
    let max_off = CONTEXT_SIDE - side;
    let (r, c) = (rng.random_range(0..=max_off), rng.random_range(0..=max_off));
    let crop = context.crop(r, c, side, side).expect("crop within context");
    resize(&crop, CONTEXT_SIDE, CONTEXT_SIDE)
}

/// Full-image context: evaluation mode (`None`) is a plain downscale,
/// training mode (`Some(seed)`) adds the random area crop.
pub fn build_context(rgb_full: &RgbImage, rng_seed: Option<u64>) -> RgbImage {
    let ctx = downscale_context(rgb_full);
    match rng_seed {
        None => ctx,
        Some(seed) => crop_context(&ctx, &mut ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Independent, platform-stable RNG seed for one image.
pub fn image_seed(global_seed: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global_seed ^ h)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub method: SamplingMethod,
    pub patches_per_image: usize,
    pub bins: usize,
    /// Candidate grid stride in RGB pixels; defaults to the RAW footprint.
    pub stride: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { method: SamplingMethod::Stratified, patches_per_image: 6, bins: 10, stride: 2 * RAW_PATCH }
    }
}

/// Cuts the training pair at `origin` (top-left of the RGB patch).
pub fn extract_pair(
    rgb: &RgbImage,
    raw: &PackedRawImage,
    context: Arc<RgbImage>,
    image_id: &str,
    origin: (usize, usize),
) -> Result<PatchPair> {
    let (r, c) = origin;
    if r % 2 != 0 || c % 2 != 0 {
        return Err(Error::Parameter(format!("patch origin {origin:?} is not Bayer aligned")));
    }
    let rgb_patch = rgb.crop(r, c, RGB_PATCH, RGB_PATCH)?;
    let border = (RGB_PATCH - 2 * RAW_PATCH) / 2;
    let (pr, pc) = ((r + border) / 2, (c + border) / 2);
    let raw_data = raw.data().slice(s![pr..pr + RAW_PATCH, pc..pc + RAW_PATCH, ..]).to_owned();
    Ok(PatchPair {
        rgb_patch,
        raw_patch: PackedRawImage::new(raw_data, raw.profile().clone())?,
        context_rgb: context,
        source_image_id: image_id.to_string(),
        patch_origin: origin,
    })
}

/// Candidate origins of one image and their brightness bins.
pub fn candidate_bins(
    rgb: &RgbImage,
    raw: &PackedRawImage,
    cfg: &SamplingConfig,
) -> Result<(Vec<(usize, usize)>, BrightnessBins)> {
    let candidates = enumerate_patches(rgb, raw, RGB_PATCH, cfg.stride)?;
    if candidates.is_empty() {
        return Err(Error::Dataset(format!(
            "image {}x{} yields no {RGB_PATCH}px candidates",
            rgb.height(),
            rgb.width()
        )));
    }
    let brightness: Vec<[f64; 3]> = candidates
        .iter()
        .map(|&(r, c)| {
            let patch = rgb.crop(r, c, RGB_PATCH, RGB_PATCH)?;
            Ok(compute_channel_brightness(&patch))
        })
        .collect::<Result<_>>()?;
    let bins = BrightnessBins::new(&brightness, cfg.bins)?;
    Ok((candidates, bins))
}

/// Selected patch origins for one image pair.
pub fn select_origins(
    rgb: &RgbImage,
    raw: &PackedRawImage,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let (candidates, bins) = candidate_bins(rgb, raw, cfg)?;
    let picks = match cfg.method {
        SamplingMethod::Random => random_sample(candidates.len(), cfg.patches_per_image, seed)?,
        SamplingMethod::Stratified => stratified_sample(&bins, cfg.patches_per_image, seed)?,
    };
    Ok(picks.into_iter().map(|i| candidates[i]).collect())
}

/// Samples `cfg.patches_per_image` pairs from one image using the image's
/// own RNG stream derived from `(global_seed, image_id)`.
pub fn sample_image(
    rgb: &RgbImage,
    raw: &PackedRawImage,
    image_id: &str,
    cfg: &SamplingConfig,
    global_seed: u64,
) -> Result<Vec<PatchPair>> {
    let origins = select_origins(rgb, raw, cfg, image_seed(global_seed, image_id))?;
    let context = Arc::new(downscale_context(rgb));
    origins
        .into_iter()
        .map(|o| extract_pair(rgb, raw, Arc::clone(&context), image_id, o))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::SensorProfile;
    use ndarray::Array3;

    fn blank(h: usize, w: usize) -> (RgbImage, PackedRawImage) {
        let prof = SensorProfile::new("t", 0, 1000).unwrap();
        (
            RgbImage::new(Array3::zeros((h, w, 3))).unwrap(),
            PackedRawImage::new(Array3::zeros((h / 2, w / 2, 4)), prof).unwrap(),
        )
    }

    #[test]
    fn exact_tiling() {
        let (rgb, raw) = blank(128, 128);
        let o = enumerate_patches(&rgb, &raw, 64, 64).unwrap();
        assert_eq!(o, vec![(0, 0), (0, 64), (64, 0), (64, 64)]);
    }

    #[test]
    fn clamped_tiling_matches_enumeration_oracle() {
        let (rgb, raw) = blank(130, 130);
        let got = enumerate_patches(&rgb, &raw, 64, 64).unwrap();
        assert_eq!(got.len(), 9);
        // Oracle: every even origin that fits, keeping the grid positions plus
        // the inward-shifted last one.
        let fits: Vec<usize> = (0..=130 - 64).filter(|p| p % 2 == 0 && (p % 64 == 0 || *p == 66)).collect();
        assert_eq!(fits, vec![0, 64, 66]);
        let expect: Vec<(usize, usize)> = fits.iter().flat_map(|&r| fits.iter().map(move |&c| (r, c))).collect();
        assert_eq!(got, expect);
        for (r, c) in got {
            assert!(r % 2 == 0 && c % 2 == 0 && r + 64 <= 130 && c + 64 <= 130);
        }
    }

    #[test]
    fn odd_remainder_clamps_to_even() {
        assert_eq!(axis_positions(131, 64, 64), vec![0, 64, 66]);
        assert_eq!(axis_positions(68, 68, 64), vec![0]);
    }

    #[test]
    fn small_image_has_no_candidates() {
        let (rgb, raw) = blank(32, 32);
        assert!(enumerate_patches(&rgb, &raw, 64, 64).unwrap().is_empty());
        assert!(enumerate_patches(&rgb, &raw, 63, 64).is_err());
    }

    #[test]
    fn brightness_examples() {
        let half = RgbImage::new(Array3::from_elem((4, 4, 3), 0.5)).unwrap();
        assert_eq!(compute_channel_brightness(&half), [0.5, 0.5, 0.5]);
        let split = RgbImage::new(Array3::from_shape_fn((4, 4, 3), |(y, _, c)| {
            if c == 0 && y >= 2 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        assert_eq!(compute_channel_brightness(&split)[0], 0.5);
    }

    #[test]
    fn brightness_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = RgbImage::new(Array3::from_shape_fn((17, 9, 3), |_| rng.random())).unwrap();
        let got = compute_channel_brightness(&img);
        for c in 0..3 {
            let mut sum = 0.0;
            for y in 0..17 {
                for x in 0..9 {
                    sum += img.data()[[y, x, c]];
                }
            }
            assert!((got[c] - sum / 153.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bins_partition_candidates() {
        let b = vec![[0.0, 0.55, 1.0], [0.099, 0.1, 0.95], [0.5, 0.999, 0.3]];
        let bins = BrightnessBins::new(&b, 10).unwrap();
        assert_eq!(bins.channel(0)[0], vec![0, 1]);
        assert_eq!(bins.channel(1)[1], vec![1]);
        assert_eq!(bins.channel(2)[9], vec![0, 1]);
        for c in 0..3 {
            let total: usize = bins.channel(c).iter().map(Vec::len).sum();
            assert_eq!(total, 3);
        }
    }

    #[test]
    fn stratified_forced_choice_and_determinism() {
        let b = vec![[0.42, 0.42, 0.42]; 5];
        let bins = BrightnessBins::new(&b, 10).unwrap();
        let picks = stratified_sample(&bins, 50, 1).unwrap();
        assert!(picks.iter().all(|&i| i < 5));
        let single = BrightnessBins::new(&[[0.3, 0.3, 0.3]], 10).unwrap();
        assert_eq!(stratified_sample(&single, 7, 3).unwrap(), vec![0; 7]);
        assert_eq!(stratified_sample(&bins, 30, 9).unwrap(), stratified_sample(&bins, 30, 9).unwrap());
        let empty = BrightnessBins::new(&[], 10).unwrap();
        assert!(matches!(stratified_sample(&empty, 1, 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn random_sampler_basics() {
        assert_eq!(random_sample(1, 4, 5).unwrap(), vec![0; 4]);
        assert_eq!(random_sample(10, 20, 5).unwrap(), random_sample(10, 20, 5).unwrap());
        assert!(matches!(random_sample(0, 1, 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn context_modes() {
        assert_eq!(context_crop_side(), 121);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = RgbImage::new(Array3::from_shape_fn((128, 128, 3), |_| rng.random())).unwrap();
        assert_eq!(build_context(&img, None), img);
        let a = build_context(&img, Some(4));
        assert_eq!(a.data().dim(), (128, 128, 3));
        assert_eq!(a, build_context(&img, Some(4)));
        assert_ne!(a, build_context(&img, Some(5)));
    }

    #[test]
    fn pair_extraction_alignment() {
        let prof = SensorProfile::new("t", 0, 1000).unwrap();
        let raw = PackedRawImage::new(
            Array3::from_shape_fn((100, 100, 4), |(y, x, c)| ((y * 100 + x) * 4 + c) as f64 / 40000.0),
            prof,
        )
        .unwrap();
        let (rgb, _) = blank(200, 200);
        let ctx = Arc::new(downscale_context(&rgb));
        let pair = extract_pair(&rgb, &raw, ctx, "img", (10, 20)).unwrap();
        assert_eq!(pair.rgb_patch.data().dim(), (68, 68, 3));
        assert_eq!(pair.raw_patch.data().dim(), (32, 32, 4));
        // Interior RGB rows 12..76 map to packed rows 6..38.
        assert_eq!(pair.raw_patch.data()[[0, 0, 0]], raw.data()[[6, 11, 0]]);
        assert_eq!(pair.raw_patch.data()[[31, 31, 3]], raw.data()[[37, 42, 3]]);
        assert!(extract_pair(&rgb, &raw, pair.context_rgb.clone(), "img", (1, 0)).is_err());
    }

    #[test]
    fn image_streams_are_independent() {
        assert_ne!(image_seed(1, "a"), image_seed(1, "b"));
        assert_ne!(image_seed(1, "a"), image_seed(2, "a"));
        assert_eq!(image_seed(7, "img_0003"), image_seed(7, "img_0003"));
    }
}
