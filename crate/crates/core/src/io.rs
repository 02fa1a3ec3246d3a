//! On-disk formats: PNG RGB images, 16-bit little-endian RAW mosaics and the
//! `raws.json` index that describes a directory of RAW files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{RawMosaic, RgbImage, SensorProfile};

pub const RAW_INDEX_FILE: &str = "raws.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette")),
    };
    let (bytes, max) = match info.bit_depth {
        png::BitDepth::Sixteen => (2, 65535.0),
        png::BitDepth::Eight => (1, 255.0),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    let sample = |y: usize, x: usize, c: usize| -> f64 {
        let off = y * info.line_size + (x * channels + c) * bytes;
        let v = if bytes == 2 { u16::from_be_bytes([buf[off], buf[off + 1]]) } else { u16::from(buf[off]) };
        f64::from(v) / max
    };
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let src = if channels < 3 { 0 } else { c };
        sample(y, x, src)
    });
    RgbImage::new(data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage, sixteen_bit: bool) -> Result<()> {
    let (h, w, _) = img.data().dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    let bytes: Vec<u8> = if sixteen_bit {
        enc.set_depth(png::BitDepth::Sixteen);
        img.data()
            .iter()
            .flat_map(|&v| ((v * 65535.0).round() as u16).to_be_bytes())
            .collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        img.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
    };
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_raw_u16(path: &Path, width: usize, height: usize, profile: &SensorProfile) -> Result<RawMosaic> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != width * height * 2 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {width}x{height}, found {}", width * height * 2, bytes.len()),
        ));
    }
    let values: Vec<u16> = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    let data = Array2::from_shape_vec((height, width), values).expect("length checked");
    RawMosaic::new(data, profile.clone())
}

pub fn write_raw_u16(path: &Path, mosaic: &RawMosaic) -> Result<()> {
    let bytes: Vec<u8> = mosaic.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One RAW file listed in a [`RawIndex`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEntry {
    pub id: String,
    /// Path relative to the index directory.
    pub file: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Original RGB size when odd dimensions were cropped before conversion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cropped_from: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub millis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInput {
    pub source: String,
    pub reason: String,
}

/// Sidecar manifest of a directory of 16-bit RAW mosaics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawIndex {
    pub version: u32,
    pub sensor: SensorProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    pub entries: Vec<RawEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedInput>,
}

impl RawIndex {
    pub fn new(sensor: SensorProfile) -> Self {
        RawIndex { version: FORMAT_VERSION, sensor, checkpoint_sha256: None, entries: Vec::new(), skipped: Vec::new() }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RAW_INDEX_FILE);
        let index: RawIndex = read_json(&path)?;
        if index.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", index.version)));
        }
        index.sensor.validate()?;
        Ok(index)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RAW_INDEX_FILE), self)
    }

    pub fn read_entry(&self, dir: &Path, entry: &RawEntry) -> Result<RawMosaic> {
        read_raw_u16(&dir.join(&entry.file), entry.width, entry.height, &self.sensor)
    }

    pub fn entry_path(dir: &Path, entry: &RawEntry) -> PathBuf {
        dir.join(&entry.file)
    }
}
