//! Synthetic RGB/RAW pair generator for tests and demos.
//!
//! This is a test fixture, not a camera model: scenes are smooth colour blobs
//! with a few bright light sources, rendered through a toy forward ISP
//! (bilinear demosaic, white balance with a global gain, 1/2.2 gamma, 8-bit
//! quantization).

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_splits, DatasetManifest, ImagePair, MANIFEST_FILE};
use crate::error::Result;
use crate::imaging::{pack_rggb, unpack_rggb, PackedRawImage, RawMosaic, RgbImage, SensorProfile, RGGB_OFFSETS};
use crate::io::{create_dir, write_raw_u16, write_rgb_png, RawEntry, RawIndex};
use crate::sampling::image_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub sensor: SensorProfile,
    /// Scene exposure range; low values give dark, skewed RAW histograms.
    pub exposure: (f64, f64),
    /// Maximum number of small saturated light sources per scene.
    pub max_lights: usize,
    /// Nominal white-balance gains for R, G, B.
    pub wb_gains: [f64; 3],
    /// Relative per-image jitter applied to the R and B gains.
    pub wb_jitter: f64,
    /// Global digital gain applied before the tone curve.
    pub gain: f64,
    /// Linear level that the highlight shoulder maps to full white.
    #[serde(default = "default_white_point")]
    pub white_point: f64,
}

fn default_white_point() -> f64 {
    4.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            sensor: SensorProfile::new("synthetic-12bit", 256, 4095).expect("valid levels"),
            exposure: (0.08, 0.2),
            max_lights: 4,
            wb_gains: [1.9, 1.0, 1.5],
            wb_jitter: 0.1,
            gain: 2.5,
            white_point: default_white_point(),
        }
    }
}

/// Per-image ISP settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IspParams {
    pub wb: [f64; 3],
    pub gain: f64,
    pub white_point: f64,
}

/// Extended Reinhard curve: near-linear in the shadows, compresses
/// highlights and reaches 1 at `white`.
pub fn highlight_shoulder(x: f64, white: f64) -> f64 {
    (x * (1.0 + x / (white * white)) / (1.0 + x)).clamp(0.0, 1.0)
}

pub fn synth_scene(cfg: &SynthConfig, seed: u64) -> RawMosaic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height / 2, cfg.width / 2);
    let exposure = rng.random_range(cfg.exposure.0..=cfg.exposure.1);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.3));
    let mut linear = Array3::<f64>::from_shape_fn((h, w, 3), |(_, _, c)| base[c]);

    // Broad dim shading plus a few compact bright objects, so most of the
    // frame is dark and highlights cover a small area.
    let side = h.min(w) as f64;
    let n_blobs = rng.random_range(3..8);
    let n_objects = rng.random_range(1..=3);
    for i in 0..n_blobs + n_objects {
        let compact = i >= n_blobs;
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let sigma = if compact { rng.random_range(0.03..0.1) } else { rng.random_range(0.15..0.4) } * side;
        let peak = if compact { rng.random_range(1.0..3.0) } else { 0.6 };
        let color: [f64; 3] = std::array::from_fn(|_| peak * rng.random_range(0.3..1.0));
        for ((y, x, c), v) in linear.indexed_iter_mut() {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            *v += color[c] * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let freq = rng.random_range(0.05..0.4);
    let phase = rng.random_range(0.0..6.28);
    let amp = rng.random_range(0.0..0.3);
    for ((y, x, _), v) in linear.indexed_iter_mut() {
        *v *= 1.0 + amp * ((x as f64 + 0.5 * y as f64) * freq + phase).sin();
        *v *= exposure;
    }

    let n_lights = rng.random_range(0..=cfg.max_lights);
    for _ in 0..n_lights {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let radius = rng.random_range(2.0..10.0);
        let level = rng.random_range(0.4..1.2);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        for ((y, x, c), v) in linear.indexed_iter_mut() {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let falloff = (1.0 - (d / radius).powi(2)).max(0.0);
            *v += level * tint[c] * falloff;
        }
    }

    let prof = &cfg.sensor;
    let mut mosaic = Array2::<u16>::zeros((cfg.height, cfg.width));
    for y in 0..h {
        for x in 0..w {
            for (k, &(dy, dx)) in RGGB_OFFSETS.iter().enumerate() {
                let c = [0, 1, 1, 2][k];
                mosaic[[2 * y + dy, 2 * x + dx]] = prof.denormalize(linear[[y, x, c]]);
            }
        }
    }
    RawMosaic::new(mosaic, prof.clone()).expect("synthetic mosaic is valid")
}

/// Bilinear Bayer demosaic of normalized values: each missing colour is the
/// mean of the same-colour sites in the 3x3 neighbourhood.
pub fn bilinear_demosaic(packed: &PackedRawImage) -> Array3<f64> {
    let mosaic = unpack_rggb(packed);
    let prof = mosaic.profile().clone();
    let m = mosaic.data().mapv(|v| prof.normalize(v));
    let (h, w) = m.dim();
    let color_at = |y: usize, x: usize| match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    };
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        if color_at(y, x) == c {
            return m[[y, x]];
        }
        let mut sum = 0.0;
        let mut n = 0.0;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if color_at(ny, nx) == c {
                    sum += m[[ny, nx]];
                    n += 1.0;
                }
            }
        }
        sum / n
    })
}

pub fn forward_isp(packed: &PackedRawImage, params: &IspParams) -> RgbImage {
    let mut rgb = bilinear_demosaic(packed);
    for ((_, _, c), v) in rgb.indexed_iter_mut() {
        let lin = highlight_shoulder(*v * params.wb[c] * params.gain, params.white_point);
        *v = (lin.powf(1.0 / 2.2) * 255.0).round() / 255.0;
    }
    RgbImage::new(rgb).expect("ISP output in range")
}

pub fn isp_params(cfg: &SynthConfig, seed: u64) -> IspParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e54);
    let j = cfg.wb_jitter;
    IspParams {
        wb: [
            cfg.wb_gains[0] * (1.0 + rng.random_range(-j..=j)),
            cfg.wb_gains[1],
            cfg.wb_gains[2] * (1.0 + rng.random_range(-j..=j)),
        ],
        gain: cfg.gain,
        white_point: cfg.white_point,
    }
}

/// One synthetic `(RGB, packed RAW)` pair.
pub fn synth_pair(cfg: &SynthConfig, seed: u64) -> (RgbImage, PackedRawImage) {
    let packed = pack_rggb(&synth_scene(cfg, seed));
    let rgb = forward_isp(&packed, &isp_params(cfg, seed));
    (rgb, packed)
}

/// Writes `n` synthetic pairs plus `dataset.toml` under `dir`.
pub fn generate_dataset(
    dir: &Path,
    n: usize,
    cfg: &SynthConfig,
    seed: u64,
    test_fraction: f64,
) -> Result<DatasetManifest> {
    create_dir(&dir.join("rgb"))?;
    create_dir(&dir.join("raw"))?;
    let mut raw_index = RawIndex::new(cfg.sensor.clone());
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("img_{i:04}");
        let s = image_seed(seed, &id);
        let mosaic = synth_scene(cfg, s);
        let packed = pack_rggb(&mosaic);
        let rgb = forward_isp(&packed, &isp_params(cfg, s));
        let rgb_rel = format!("rgb/{id}.png");
        let raw_rel = format!("raw/{id}.raw");
        write_rgb_png(&dir.join(&rgb_rel), &rgb, false)?;
        write_raw_u16(&dir.join(&raw_rel), &mosaic)?;
        raw_index.entries.push(RawEntry {
            id: id.clone(),
            file: format!("{id}.raw"),
            width: cfg.width,
            height: cfg.height,
            source: None,
            cropped_from: None,
            millis: None,
        });
        pairs.push(ImagePair {
            id,
            rgb: rgb_rel,
            raw: raw_rel,
            width: cfg.width,
            height: cfg.height,
            split: Default::default(),
        });
    }
    raw_index.save(&dir.join("raw"))?;
    let mut manifest = DatasetManifest::new(cfg.sensor.clone(), pairs, seed, test_fraction);
    assign_splits(&mut manifest);
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::pack_rggb;

    #[test]
    fn shoulder_is_monotone_and_hits_white() {
        assert_eq!(highlight_shoulder(0.0, 4.0), 0.0);
        assert!((highlight_shoulder(4.0, 4.0) - 1.0).abs() < 1e-15);
        assert_eq!(highlight_shoulder(9.0, 4.0), 1.0);
        let mut prev = 0.0;
        for i in 1..=400 {
            let y = highlight_shoulder(i as f64 / 100.0, 4.0);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn demosaic_keeps_known_sites() {
        let cfg = SynthConfig { width: 16, height: 12, ..SynthConfig::default() };
        let packed = pack_rggb(&synth_scene(&cfg, 1));
        let rgb = bilinear_demosaic(&packed);
        let d = packed.data();
        assert_eq!(rgb[[0, 0, 0]], d[[0, 0, 0]]);
        assert_eq!(rgb[[0, 1, 1]], d[[0, 0, 1]]);
        assert_eq!(rgb[[1, 0, 1]], d[[0, 0, 2]]);
        assert_eq!(rgb[[3, 5, 2]], d[[1, 2, 3]]);
        // R at a blue site averages the four diagonal reds.
        let expect = (d[[1, 2, 0]] + d[[1, 3, 0]] + d[[2, 2, 0]] + d[[2, 3, 0]]) / 4.0;
        assert!((rgb[[3, 5, 0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn scenes_are_deterministic_and_dark() {
        let cfg = SynthConfig::default();
        let a = synth_scene(&cfg, 9);
        assert_eq!(a, synth_scene(&cfg, 9));
        let packed = pack_rggb(&a);
        let mean = packed.data().mean().unwrap();
        assert!(mean < 0.35, "mean {mean}");
    }

    #[test]
    fn pair_shapes() {
        let cfg = SynthConfig { width: 64, height: 48, ..SynthConfig::default() };
        let (rgb, raw) = synth_pair(&cfg, 3);
        assert_eq!(rgb.data().dim(), (48, 64, 3));
        assert_eq!(raw.dim(), (24, 32));
    }
}
