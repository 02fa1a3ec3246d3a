//! Full-image RGB to packed RAW conversion by sliding the model over a tile grid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::{unpack_rggb, PackedRawImage, RgbImage, SensorProfile};
use crate::io::{create_dir, read_rgb_png, sha256_file, write_raw_u16, RawEntry, RawIndex, SkippedInput};
use crate::model::{ContextCode, ReRawModel, INPUT_RING, RAW_PATCH};
use crate::sampling::downscale_context;

/// RGB pixels covered by one tile's output.
pub const TILE_STRIDE: usize = 2 * RAW_PATCH;
/// RGB side of one tile input including the context ring.
pub const TILE_INPUT: usize = TILE_STRIDE + 2 * INPUT_RING;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InferenceMode {
    #[default]
    Tiled,
    /// One pass over the whole padded image.
    Whole,
}

#[derive(Debug, Clone)]
pub struct Converted {
    pub raw: Array3<f64>,
    /// Original size when the input was cropped to even dimensions.
    pub cropped_from: Option<(usize, usize)>,
}

/// Pads by `ring` pixels using mirror reflection (edge pixel not repeated).
pub fn reflect_pad(img: &Array3<f64>, ring: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i as usize
    };
    let r = ring as isize;
    Array3::from_shape_fn((h + 2 * ring, w + 2 * ring, c), |(y, x, ch)| {
        img[[reflect(y as isize - r, h), reflect(x as isize - r, w), ch]]
    })
}

/// Tile origins in output (packed) coordinates; the last tile is shifted
/// inward so it ends at the border.
pub fn tile_origins(len: usize, tile: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..len.saturating_sub(tile) + 1).step_by(tile).collect();
    if let Some(&last) = v.last() {
        if last + tile < len {
            v.push(len - tile);
        }
    }
    v
}

/// Converts one RGB image with a precomputed context code.
pub fn convert_with_code(model: &ReRawModel, rgb: &RgbImage, code: &ContextCode, mode: InferenceMode) -> Result<Converted> {
    let (h0, w0) = (rgb.height(), rgb.width());
    let (h, w) = (h0 & !1, w0 & !1);
    if h < TILE_STRIDE || w < TILE_STRIDE {
        return Err(Error::Input(format!("image {h0}x{w0} is smaller than one {TILE_STRIDE}px tile")));
    }
    let cropped_from = ((h, w) != (h0, w0)).then_some((h0, w0));
    let img = rgb.view().slice(s![..h, ..w, ..]).to_owned();
    let padded = reflect_pad(&img, INPUT_RING);
    let (ph, pw) = (h / 2, w / 2);
    let raw = match mode {
        InferenceMode::Whole => model.infer(padded.view(), code)?,
        InferenceMode::Tiled => {
            let rows = tile_origins(ph, RAW_PATCH);
            let cols = tile_origins(pw, RAW_PATCH);
            let tiles: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
            let outputs: Vec<Array3<f64>> = tiles
                .par_iter()
                .map(|&(r, c)| {
                    let input = padded.slice(s![2 * r..2 * r + TILE_INPUT, 2 * c..2 * c + TILE_INPUT, ..]);
                    model.infer(input, code)
                })
                .collect::<Result<_>>()?;
            let mut raw = Array3::<f64>::zeros((ph, pw, 4));
            for ((r, c), out) in tiles.into_iter().zip(outputs) {
                // Shifted edge tiles only fill what earlier tiles left open.
                let r0 = if r % RAW_PATCH == 0 { 0 } else { RAW_PATCH - ph % RAW_PATCH };
                let c0 = if c % RAW_PATCH == 0 { 0 } else { RAW_PATCH - pw % RAW_PATCH };
                raw.slice_mut(s![r + r0..r + RAW_PATCH, c + c0..c + RAW_PATCH, ..])
                    .assign(&out.slice(s![r0.., c0.., ..]));
            }
            raw
        }
    };
    Ok(Converted { raw: raw.mapv(|v| v.clamp(0.0, 1.0)), cropped_from })
}

/// Converts one RGB image; the context is the plain downscale of the full image.
pub fn convert_image(model: &ReRawModel, rgb: &RgbImage, mode: InferenceMode) -> Result<Converted> {
    let code = model.context_code(&downscale_context(rgb))?;
    convert_with_code(model, rgb, &code, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub outputs: Vec<RawEntry>,
    pub skipped: Vec<SkippedInput>,
    pub checkpoint_sha256: Option<String>,
}

impl ConversionReport {
    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty() && self.skipped.is_empty()
    }
}

fn unique_id(stem: &str, taken: &mut std::collections::BTreeSet<String>) -> String {
    let mut id = stem.to_string();
    let mut k = 1;
    while !taken.insert(id.clone()) {
        id = format!("{stem}_{k}");
        k += 1;
    }
    id
}

/// Converts each PNG in `images` and writes `ID.raw` files plus a RAW index
/// into `out_dir`. Per-image failures are recorded and skipped.
pub fn convert_batch(
    checkpoint: &Path,
    images: &[PathBuf],
    out_dir: &Path,
    sensor: Option<SensorProfile>,
    mode: InferenceMode,
) -> Result<ConversionReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let sensor = sensor.or(ck.sensor).ok_or_else(|| {
        Error::Input("checkpoint carries no sensor profile; pass one explicitly".into())
    })?;
    sensor.validate()?;
    let sha = sha256_file(checkpoint)?;
    create_dir(out_dir)?;
    let mut taken = std::collections::BTreeSet::new();
    let jobs: Vec<(String, &PathBuf)> = images
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            (unique_id(&stem, &mut taken), p)
        })
        .collect();
    let model = &ck.model;
    let results: Vec<Result<RawEntry>> = jobs
        .par_iter()
        .map(|(id, path)| {
            let start = Instant::now();
            let rgb = read_rgb_png(path)?;
            let conv = convert_image(model, &rgb, mode)?;
            let packed = PackedRawImage::new(conv.raw, sensor.clone())?;
            let mosaic = unpack_rggb(&packed);
            let file = format!("{id}.raw");
            write_raw_u16(&out_dir.join(&file), &mosaic)?;
            Ok(RawEntry {
                id: id.clone(),
                file,
                width: mosaic.width(),
                height: mosaic.height(),
                source: Some(path.display().to_string()),
                cropped_from: conv.cropped_from,
                millis: Some(start.elapsed().as_secs_f64() * 1e3),
            })
        })
        .collect();
    let mut report = ConversionReport { outputs: Vec::new(), skipped: Vec::new(), checkpoint_sha256: Some(sha) };
    for ((_, path), r) in jobs.iter().zip(results) {
        match r {
            Ok(e) => report.outputs.push(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push(SkippedInput { source: path.display().to_string(), reason: e.to_string() });
            }
        }
    }
    let mut index = RawIndex::new(sensor);
    index.checkpoint_sha256 = report.checkpoint_sha256.clone();
    index.entries = report.outputs.clone();
    index.skipped = report.skipped.clone();
    index.save(out_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReRawConfig;

    #[test]
    fn origins_cover_and_shift_inward() {
        assert_eq!(tile_origins(64, 32), vec![0, 32]);
        assert_eq!(tile_origins(70, 32), vec![0, 32, 38]);
        assert_eq!(tile_origins(32, 32), vec![0]);
    }

    #[test]
    fn reflection_skips_edge() {
        let img = Array3::from_shape_fn((3, 3, 1), |(r, c, _)| (r * 3 + c) as f64);
        let p = reflect_pad(&img, 1);
        assert_eq!(p.dim(), (5, 5, 1));
        assert_eq!(p[[0, 0, 0]], 4.0);
        assert_eq!(p[[1, 1, 0]], 0.0);
        assert_eq!(p[[4, 2, 0]], 4.0);
    }

    #[test]
    fn odd_input_is_cropped() {
        let model = ReRawModel::new(ReRawConfig::desk().with_heads(2)).unwrap();
        let rgb = RgbImage::new(Array3::from_elem((131, 130, 3), 0.4)).unwrap();
        let out = convert_image(&model, &rgb, InferenceMode::Tiled).unwrap();
        assert_eq!(out.raw.dim(), (65, 65, 4));
        assert_eq!(out.cropped_from, Some((131, 130)));
        let small = RgbImage::new(Array3::from_elem((60, 200, 3), 0.4)).unwrap();
        assert!(matches!(convert_image(&model, &small, InferenceMode::Tiled), Err(Error::Input(_))));
    }
}
