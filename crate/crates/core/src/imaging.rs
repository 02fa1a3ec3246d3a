//! Image containers, RGGB packing and gamma-space algebra.
//!
//! Packed RAW images use the channel order `[R, G1, G2, B]`, where `G1` is the
//! green site on the red row and `G2` the green site on the blue row.

use ndarray::{s, Array, Array2, Array3, ArrayBase, ArrayView3, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offsets `(dy, dx)` of the R, G1, G2 and B sites inside a 2x2 RGGB tile.
pub const RGGB_OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Lower clamp applied before re-linearizing gamma-space values.
pub const DEGAMMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BayerPattern {
    #[default]
    #[serde(rename = "RGGB")]
    Rggb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorProfile {
    pub name: String,
    pub black_level: u16,
    pub white_level: u16,
    #[serde(default)]
    pub bayer_pattern: BayerPattern,
}

impl SensorProfile {
    pub fn new(name: impl Into<String>, black_level: u16, white_level: u16) -> Result<Self> {
        let profile = SensorProfile {
            name: name.into(),
            black_level,
            white_level,
            bayer_pattern: BayerPattern::Rggb,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.black_level >= self.white_level {
            return Err(Error::Range(format!(
                "black level {} must be below white level {}",
                self.black_level, self.white_level
            )));
        }
        Ok(())
    }

    /// Usable signal range in ADU.
    pub fn range(&self) -> f64 {
        f64::from(self.white_level - self.black_level)
    }

    pub fn normalize(&self, adu: u16) -> f64 {
        ((f64::from(adu) - f64::from(self.black_level)) / self.range()).clamp(0.0, 1.0)
    }

    /// Inverse of [`normalize`](Self::normalize), rounded to the nearest ADU.
    pub fn denormalize(&self, value: f64) -> u16 {
        let v = value.clamp(0.0, 1.0) * self.range() + f64::from(self.black_level);
        v.round() as u16
    }
}

/// Single-channel Bayer readout in sensor ADU.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMosaic {
    data: Array2<u16>,
    profile: SensorProfile,
}

impl RawMosaic {
    pub fn new(data: Array2<u16>, profile: SensorProfile) -> Result<Self> {
        profile.validate()?;
        let (h, w) = data.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "mosaic dimensions {h}x{w} must be even and non-zero"
            )));
        }
        if let Some(&max) = data.iter().max() {
            if max > profile.white_level {
                return Err(Error::Range(format!(
                    "mosaic value {max} exceeds white level {}",
                    profile.white_level
                )));
            }
        }
        Ok(RawMosaic { data, profile })
    }

    pub fn data(&self) -> &Array2<u16> {
        &self.data
    }

    pub fn profile(&self) -> &SensorProfile {
        &self.profile
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// Half-resolution four-plane RAW image normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRawImage {
    data: Array3<f64>,
    profile: SensorProfile,
}

impl PackedRawImage {
    pub fn new(data: Array3<f64>, profile: SensorProfile) -> Result<Self> {
        if data.dim().2 != 4 {
            return Err(Error::Shape(format!(
                "packed RAW needs 4 channels, got {}",
                data.dim().2
            )));
        }
        check_unit_range(data.iter().copied(), "packed RAW")?;
        Ok(PackedRawImage { data, profile })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn profile(&self) -> &SensorProfile {
        &self.profile
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// `(height, width)` of each plane.
    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// Processed RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    data: Array3<f64>,
}

impl RgbImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!(
                "RGB image needs 3 channels, got {}",
                data.dim().2
            )));
        }
        check_unit_range(data.iter().copied(), "RGB image")?;
        Ok(RgbImage { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Copies the `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<RgbImage> {
        if row + h > self.height() || col + w > self.width() {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({row},{col}) exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(RgbImage {
            data: self.data.slice(s![row..row + h, col..col + w, ..]).to_owned(),
        })
    }
}

fn check_unit_range(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("{what} value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

pub fn pack_rggb(mosaic: &RawMosaic) -> PackedRawImage {
    let profile = mosaic.profile();
    let (h, w) = (mosaic.height() / 2, mosaic.width() / 2);
    let src = mosaic.data();
    let data = Array3::from_shape_fn((h, w, 4), |(y, x, c)| {
        let (dy, dx) = RGGB_OFFSETS[c];
        profile.normalize(src[[2 * y + dy, 2 * x + dx]])
    });
    PackedRawImage { data, profile: profile.clone() }
}

pub fn unpack_rggb(packed: &PackedRawImage) -> RawMosaic {
    let profile = packed.profile();
    let (h, w) = packed.dim();
    let src = packed.data();
    let mut data = Array2::<u16>::zeros((2 * h, 2 * w));
    for ((y, x, c), &v) in src.indexed_iter() {
        let (dy, dx) = RGGB_OFFSETS[c];
        data[[2 * y + dy, 2 * x + dx]] = profile.denormalize(v);
    }
    RawMosaic { data, profile: profile.clone() }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `x^gamma` with `0^gamma = 0`.
#[inline]
pub fn gamma_value(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x.powf(gamma)
    }
}

pub fn gamma_correct<S, D>(img: &ArrayBase<S, D>, gamma: f64) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    check_gamma(gamma)?;
    Ok(img.mapv(|x| gamma_value(x.clamp(0.0, 1.0), gamma)))
}

pub fn degamma<S, D>(img: &ArrayBase<S, D>, gamma: f64) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    check_gamma(gamma)?;
    let inv = 1.0 / gamma;
    Ok(img.mapv(|x| gamma_value(x.clamp(0.0, 1.0), inv)))
}

/// Antialiased bilinear resize. Same-size requests return an exact copy.
pub fn resize(img: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    let (h, w, c) = img.data.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let rows = resample_weights(h, out_h);
    let cols = resample_weights(w, out_w);
    let mut tmp = Array3::<f64>::zeros((out_h, w, c));
    for (oy, taps) in rows.iter().enumerate() {
        for &(iy, wt) in taps {
            let src = img.data.slice(s![iy, .., ..]);
            let mut dst = tmp.slice_mut(s![oy, .., ..]);
            dst.scaled_add(wt, &src);
        }
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for (ox, taps) in cols.iter().enumerate() {
        for &(ix, wt) in taps {
            let src = tmp.slice(s![.., ix, ..]);
            let mut dst = out.slice_mut(s![.., ox, ..]);
            dst.scaled_add(wt, &src);
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    RgbImage { data: out }
}

/// Triangle-filter taps for each output sample; the filter widens with the
/// downscale factor so that every input pixel contributes.
fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(n_in - 1);
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|i| {
                    let wt = 1.0 - ((i as f64 - center) / support).abs();
                    (wt > 0.0).then_some((i, wt))
                })
                .collect();
            if taps.is_empty() {
                taps.push((center.round().clamp(0.0, (n_in - 1) as f64) as usize, 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn profile() -> SensorProfile {
        SensorProfile::new("test", 64, 1023).unwrap()
    }

    #[test]
    fn black_mosaic_packs_to_zero() {
        let m = RawMosaic::new(Array2::from_elem((2, 2), 64), profile()).unwrap();
        let p = pack_rggb(&m);
        assert_eq!(p.data().dim(), (1, 1, 4));
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_mosaic_packs_to_one() {
        let m = RawMosaic::new(Array2::from_elem((2, 2), 1023), profile()).unwrap();
        assert!(pack_rggb(&m).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn packing_matches_index_loop() {
        let prof = profile();
        let data = Array2::from_shape_fn((4, 4), |(r, c)| (64 + 50 * (r * 4 + c)) as u16);
        let m = RawMosaic::new(data.clone(), prof.clone()).unwrap();
        let p = pack_rggb(&m);
        assert_eq!(p.data().dim(), (2, 2, 4));
        // R, G1, G2, B read straight from the 2x2 tile at (2y, 2x).
        for y in 0..2 {
            for x in 0..2 {
                let tile = [
                    data[[2 * y, 2 * x]],
                    data[[2 * y, 2 * x + 1]],
                    data[[2 * y + 1, 2 * x]],
                    data[[2 * y + 1, 2 * x + 1]],
                ];
                for c in 0..4 {
                    let expect = (f64::from(tile[c]) - 64.0) / 959.0;
                    assert_eq!(p.data()[[y, x, c]], expect);
                }
            }
        }
    }

    #[test]
    fn sub_black_values_clamp_to_zero() {
        let m = RawMosaic::new(Array2::from_elem((2, 2), 10), profile()).unwrap();
        assert!(pack_rggb(&m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_and_overrange_mosaics_rejected() {
        let odd = RawMosaic::new(Array2::from_elem((3, 2), 100), profile());
        assert!(matches!(odd, Err(Error::Dimension(_))));
        let hot = RawMosaic::new(Array2::from_elem((2, 2), 2000), profile());
        assert!(matches!(hot, Err(Error::Range(_))));
        assert!(matches!(SensorProfile::new("x", 10, 10), Err(Error::Range(_))));
    }

    #[test]
    fn non_rggb_pattern_rejected_on_load() {
        let bad = r#"{"name":"x","black_level":0,"white_level":10,"bayer_pattern":"BGGR"}"#;
        assert!(serde_json::from_str::<SensorProfile>(bad).is_err());
        let good = r#"{"name":"x","black_level":0,"white_level":10,"bayer_pattern":"RGGB"}"#;
        assert!(serde_json::from_str::<SensorProfile>(good).is_ok());
    }

    #[test]
    fn unpack_extremes() {
        let prof = profile();
        let zeros = PackedRawImage::new(Array3::zeros((2, 3, 4)), prof.clone()).unwrap();
        assert!(unpack_rggb(&zeros).data().iter().all(|&v| v == 64));
        let ones = PackedRawImage::new(Array3::ones((2, 3, 4)), prof).unwrap();
        let m = unpack_rggb(&ones);
        assert_eq!(m.data().dim(), (4, 6));
        assert!(m.data().iter().all(|&v| v == 1023));
    }

    #[test]
    fn pack_unpack_round_trip_random() {
        let prof = SensorProfile::new("12bit", 256, 4095).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((16, 20), |_| rng.random_range(256..=4095u16));
        let m = RawMosaic::new(data, prof).unwrap();
        let back = unpack_rggb(&pack_rggb(&m));
        assert_eq!(back, m);
    }

    #[test]
    fn argmax_preserved_within_channel() {
        let prof = profile();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array2::from_shape_fn((8, 8), |_| rng.random_range(64..=1023u16));
        let m = RawMosaic::new(data.clone(), prof).unwrap();
        let p = pack_rggb(&m);
        for (c, &(dy, dx)) in RGGB_OFFSETS.iter().enumerate() {
            let plane = p.data().slice(s![.., .., c]);
            let mut best = (0, 0);
            for y in 0..4 {
                for x in 0..4 {
                    if data[[2 * y + dy, 2 * x + dx]] > data[[2 * best.0 + dy, 2 * best.1 + dx]] {
                        best = (y, x);
                    }
                }
            }
            let max = plane.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(plane[[best.0, best.1]], max);
        }
    }

    #[test]
    fn gamma_examples() {
        let x = arr1(&[0.25]);
        assert_eq!(gamma_correct(&x, 0.5).unwrap()[0], 0.5);
        assert_eq!(degamma(&arr1(&[0.5]), 0.5).unwrap()[0], 0.25);
        let v = arr1(&[0.0, 0.3, 0.7, 1.0]);
        assert_eq!(gamma_correct(&v, 1.0).unwrap(), v);
        for g in [0.1, 0.35, 1.0] {
            let out = degamma(&arr1(&[0.0, 1.0]), g).unwrap();
            assert_eq!(out, arr1(&[0.0, 1.0]));
        }
        assert!(matches!(gamma_correct(&v, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(degamma(&v, -1.0), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn gamma_round_trip(x in 1e-9f64..1.0, g in 0.05f64..=1.0) {
            let v = Array1::from_elem(1, x);
            let back = degamma(&gamma_correct(&v, g).unwrap(), g).unwrap();
            prop_assert!((back[0] - x).abs() <= 1e-6);
        }

        #[test]
        fn degamma_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, g in 0.1f64..=1.0) {
            prop_assume!(a < b);
            let out = degamma(&arr1(&[a, b]), g).unwrap();
            // Strict in exact arithmetic; tiny inputs can underflow to equal values.
            prop_assert!(out[0] <= out[1]);
            if a > 1e-3 { prop_assert!(out[0] < out[1]); }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = RgbImage::new(Array3::from_shape_fn((128, 128, 3), |_| rng.random())).unwrap();
        assert_eq!(resize(&img, 128, 128), img);
        let flat = RgbImage::new(Array3::from_elem((300, 200, 3), 0.4)).unwrap();
        let small = resize(&flat, 128, 128);
        assert_eq!(small.data().dim(), (128, 128, 3));
        assert!(small.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let up = resize(&crop_of(&img), 128, 128);
        assert_eq!(up.data().dim(), (128, 128, 3));
    }

    fn crop_of(img: &RgbImage) -> RgbImage {
        img.crop(3, 4, 121, 121).unwrap()
    }
}
