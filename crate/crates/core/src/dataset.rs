//! Image-pair manifests and on-disk patch datasets.
//!
//! A dataset manifest (`dataset.toml`) lists RGB/RAW image pairs with their
//! sensor profile and a stored train/test split. A patch dataset directory
//! holds `index.json`, `contexts.bin` (one 128x128x3 context per source
//! image) and `shard-NNNN.bin` files; all binary payloads are little-endian
//! `f32` in row-major HWC order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{pack_rggb, PackedRawImage, RgbImage, SensorProfile};
use crate::io::{create_dir, read_json, read_raw_u16, read_rgb_png, write_json, SkippedInput, FORMAT_VERSION};
use crate::model::{CONTEXT_SIDE, RAW_PATCH, RGB_PATCH};
use crate::sampling::{downscale_context, extract_pair, image_seed, select_origins, PatchPair, SamplingConfig, SamplingMethod};

pub const MANIFEST_FILE: &str = "dataset.toml";
pub const PATCH_INDEX_FILE: &str = "index.json";
const CONTEXT_FILE: &str = "contexts.bin";
const SHARD_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub id: String,
    /// PNG path relative to the manifest.
    pub rgb: String,
    /// 16-bit RAW path relative to the manifest.
    pub raw: String,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sensor: SensorProfile,
    pub split: SplitInfo,
    pub pairs: Vec<ImagePair>,
}

impl DatasetManifest {
    pub fn new(sensor: SensorProfile, pairs: Vec<ImagePair>, seed: u64, test_fraction: f64) -> Self {
        DatasetManifest { version: FORMAT_VERSION, sensor, split: SplitInfo { seed, test_fraction }, pairs }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", m.version)));
        }
        m.sensor.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split_pairs(&self, split: Split) -> impl Iterator<Item = &ImagePair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }
}

/// Seeded image-level split: pairs are ordered by a per-id hash and the first
/// `round(n * test_fraction)` go to the test set.
pub fn assign_splits(manifest: &mut DatasetManifest) {
    let seed = manifest.split.seed;
    let n_test = (manifest.pairs.len() as f64 * manifest.split.test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..manifest.pairs.len()).collect();
    order.sort_by_key(|&i| (image_seed(seed ^ 0x7e57, &manifest.pairs[i].id), i));
    for (rank, &i) in order.iter().enumerate() {
        manifest.pairs[i].split = if rank < n_test { Split::Test } else { Split::Train };
    }
}

/// Loads one pair as `(RGB, packed RAW)`.
pub fn load_pair(base: &Path, sensor: &SensorProfile, pair: &ImagePair) -> Result<(RgbImage, PackedRawImage)> {
    let rgb = read_rgb_png(&base.join(&pair.rgb))?;
    let mosaic = read_raw_u16(&base.join(&pair.raw), pair.width, pair.height, sensor)?;
    if (rgb.height(), rgb.width()) != (pair.height, pair.width) {
        return Err(Error::Dimension(format!(
            "pair {}: RGB {}x{} vs RAW {}x{}",
            pair.id,
            rgb.height(),
            rgb.width(),
            pair.height,
            pair.width
        )));
    }
    Ok((rgb, pack_rggb(&mosaic)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub image_id: String,
    pub origin: (usize, usize),
    pub shard: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub version: u32,
    pub sampling: SamplingMethod,
    pub seed: u64,
    pub bins: usize,
    pub patches_per_image: usize,
    pub stride: usize,
    pub rgb_side: usize,
    pub raw_side: usize,
    pub context_side: usize,
    pub sensor: SensorProfile,
    /// Source image ids in `contexts.bin` order.
    pub images: Vec<String>,
    pub patches: Vec<PatchRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedInput>,
}

/// Patch pairs plus the index describing how they were drawn.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub index: PatchIndex,
    pub pairs: Vec<PatchPair>,
}

/// Samples patches from every pair of `split` in the manifest. Images are
/// processed in parallel; each uses its own seeded stream so the result does
/// not depend on scheduling. Unreadable pairs are recorded and skipped.
pub fn build_patch_dataset(
    manifest_path: &Path,
    split: Split,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<PatchDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let pairs: Vec<&ImagePair> = manifest.split_pairs(split).collect();
    let results: Vec<(String, Result<Vec<PatchPair>>)> = pairs
        .par_iter()
        .map(|pair| {
            let r = load_pair(&base, &manifest.sensor, pair).and_then(|(rgb, raw)| {
                let origins = select_origins(&rgb, &raw, cfg, image_seed(seed, &pair.id))?;
                let context = Arc::new(downscale_context(&rgb));
                origins
                    .into_iter()
                    .map(|o| extract_pair(&rgb, &raw, Arc::clone(&context), &pair.id, o))
                    .collect()
            });
            (pair.id.clone(), r)
        })
        .collect();

    let mut index = PatchIndex {
        version: FORMAT_VERSION,
        sampling: cfg.method,
        seed,
        bins: cfg.bins,
        patches_per_image: cfg.patches_per_image,
        stride: cfg.stride,
        rgb_side: RGB_PATCH,
        raw_side: RAW_PATCH,
        context_side: CONTEXT_SIDE,
        sensor: manifest.sensor.clone(),
        images: Vec::new(),
        patches: Vec::new(),
        skipped: Vec::new(),
    };
    let mut all = Vec::new();
    for (id, r) in results {
        match r {
            Ok(patches) => {
                index.images.push(id);
                all.extend(patches);
            }
            Err(e) => {
                log::warn!("skipping pair {id}: {e}");
                index.skipped.push(SkippedInput { source: id, reason: e.to_string() });
            }
        }
    }
    if index.images.is_empty() {
        return Err(Error::Dataset(format!("no usable image pairs ({} skipped)", index.skipped.len())));
    }
    for (i, p) in all.iter().enumerate() {
        index.patches.push(PatchRecord {
            image_id: p.source_image_id.clone(),
            origin: p.patch_origin,
            shard: i / SHARD_SIZE,
            slot: i % SHARD_SIZE,
        });
    }
    Ok(PatchDataset { index, pairs: all })
}

fn push_f32(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut ctx = Vec::new();
        for id in &self.index.images {
            let pair = self
                .pairs
                .iter()
                .find(|p| &p.source_image_id == id)
                .ok_or_else(|| Error::Dataset(format!("image {id} has no patches")))?;
            push_f32(&mut ctx, pair.context_rgb.data().iter().copied());
        }
        let path = dir.join(CONTEXT_FILE);
        fs::write(&path, ctx).map_err(|e| Error::io(&path, e))?;
        for (shard, chunk) in self.pairs.chunks(SHARD_SIZE).enumerate() {
            let mut buf = Vec::new();
            for p in chunk {
                push_f32(&mut buf, p.rgb_patch.data().iter().copied());
                push_f32(&mut buf, p.raw_patch.data().iter().copied());
            }
            let path = dir.join(format!("shard-{shard:04}.bin"));
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        write_json(&dir.join(PATCH_INDEX_FILE), &self.index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: PatchIndex = read_json(&dir.join(PATCH_INDEX_FILE))?;
        if index.version != FORMAT_VERSION
            || index.rgb_side != RGB_PATCH
            || index.raw_side != RAW_PATCH
            || index.context_side != CONTEXT_SIDE
        {
            return Err(Error::format(dir.join(PATCH_INDEX_FILE), "incompatible patch geometry or version"));
        }
        let ctx_len = CONTEXT_SIDE * CONTEXT_SIDE * 3;
        let path = dir.join(CONTEXT_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != index.images.len() * ctx_len * 4 {
            return Err(Error::format(&path, "context file size mismatch"));
        }
        let contexts: Vec<Arc<RgbImage>> = bytes
            .chunks_exact(ctx_len * 4)
            .map(|chunk| {
                let data = Array3::from_shape_vec((CONTEXT_SIDE, CONTEXT_SIDE, 3), read_f32(chunk).collect())
                    .expect("sized chunk");
                RgbImage::new(data).map(Arc::new)
            })
            .collect::<Result<_>>()?;

        let rgb_len = RGB_PATCH * RGB_PATCH * 3;
        let raw_len = RAW_PATCH * RAW_PATCH * 4;
        let rec_bytes = (rgb_len + raw_len) * 4;
        let mut shards: Vec<Vec<u8>> = Vec::new();
        let mut pairs = Vec::with_capacity(index.patches.len());
        for rec in &index.patches {
            while shards.len() <= rec.shard {
                let path = dir.join(format!("shard-{:04}.bin", shards.len()));
                shards.push(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
            let shard = &shards[rec.shard];
            let start = rec.slot * rec_bytes;
            let Some(chunk) = shard.get(start..start + rec_bytes) else {
                return Err(Error::format(dir, format!("shard {} too short", rec.shard)));
            };
            let ci = index
                .images
                .iter()
                .position(|id| id == &rec.image_id)
                .ok_or_else(|| Error::format(dir, format!("unknown image {}", rec.image_id)))?;
            let rgb = Array3::from_shape_vec((RGB_PATCH, RGB_PATCH, 3), read_f32(&chunk[..rgb_len * 4]).collect())
                .expect("sized chunk");
            let raw = Array3::from_shape_vec((RAW_PATCH, RAW_PATCH, 4), read_f32(&chunk[rgb_len * 4..]).collect())
                .expect("sized chunk");
            pairs.push(PatchPair {
                rgb_patch: RgbImage::new(rgb)?,
                raw_patch: PackedRawImage::new(raw, index.sensor.clone())?,
                context_rgb: Arc::clone(&contexts[ci]),
                source_image_id: rec.image_id.clone(),
                patch_origin: rec.origin,
            });
        }
        Ok(PatchDataset { index, pairs })
    }
}

/// Default sampling config with the given method.
pub fn sampling_config(method: SamplingMethod, patches_per_image: usize, bins: usize) -> SamplingConfig {
    SamplingConfig { method, patches_per_image, bins, ..SamplingConfig::default() }
}
