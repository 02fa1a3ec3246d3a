//! PSNR and SSIM on packed RAW in normalized `[0, 1]` space.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Array2, ArrayBase, ArrayView2, Axis, Data, Dimension, Ix3, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::pack_rggb;
use crate::io::{RawIndex, SkippedInput};
use crate::plot::{histogram_svg, Series};

/// Finite stand-in for the `+inf` PSNR of identical inputs in reports.
pub const PSNR_DISPLAY_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty arrays".into()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with unit peak; `+inf` when the inputs are identical.
pub fn psnr<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check(pred, target)?;
    let mut sse = 0.0;
    Zip::from(pred).and(target).for_each(|&p, &t| sse += (p - t) * (p - t));
    let mse = sse / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn display_psnr(db: f64) -> f64 {
    db.min(PSNR_DISPLAY_CAP)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..k).map(|i| taps[i] * x[[r, c + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..k).map(|i| taps[i] * rows[[r + i, c]]).sum();
        }
    }
    out
}

fn window_for(h: usize, w: usize) -> usize {
    let side = SSIM_WINDOW.min(h).min(w);
    if side % 2 == 0 {
        side - 1
    } else {
        side
    }
}

/// Mean SSIM of one 2-D plane with an `size`-tap Gaussian window.
pub fn ssim_plane(a: ArrayView2<f64>, b: ArrayView2<f64>, size: usize) -> f64 {
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let aa = filter_valid(&(&a * &a), &taps);
    let bb = filter_valid(&(&b * &b), &taps);
    let ab = filter_valid(&(&a * &b), &taps);
    let mut total = 0.0;
    Zip::from(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|&ma, &mb, &saa, &sbb, &sab| {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    });
    total / mu_a.len() as f64
}

/// SSIM averaged over the channels of an `H x W x C` array.
pub fn ssim<S1, S2>(pred: &ArrayBase<S1, Ix3>, target: &ArrayBase<S2, Ix3>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
{
    check(pred, target)?;
    let (h, w, c) = pred.dim();
    let size = window_for(h, w);
    if size < SSIM_WINDOW {
        log::warn!("image {h}x{w} is smaller than the SSIM window; using {size} taps");
    }
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(pred.index_axis(Axis(2), ch), target.index_axis(Axis(2), ch), size))
        .sum();
    Ok(total / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: Vec<ImageScore>,
    /// Arithmetic mean of per-image dB values; `+inf` if any image is exact.
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub excluded: Vec<SkippedInput>,
}

impl EvaluationReport {
    pub fn from_scores(mut images: Vec<ImageScore>, excluded: Vec<SkippedInput>) -> Self {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let n = images.len().max(1) as f64;
        let mean_psnr_db = images.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        EvaluationReport { images, mean_psnr_db, mean_ssim, excluded }
    }

    /// `image_id,psnr_db,ssim` rows followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr_db,ssim\n");
        for s in &self.images {
            out.push_str(&format!("{},{},{}\n", s.image_id, display_psnr(s.psnr_db), s.ssim));
        }
        out.push_str(&format!("mean,{},{}\n", display_psnr(self.mean_psnr_db), self.mean_ssim));
        out
    }

    pub fn psnr_histogram_svg(&self) -> String {
        let values: Vec<f64> = self.images.iter().map(|s| display_psnr(s.psnr_db)).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min).floor();
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, PSNR_DISPLAY_CAP) };
        let bins = 20;
        let mut counts = vec![0.0; bins];
        for v in values {
            let b = (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1.0;
        }
        histogram_svg("Per-image PSNR", "PSNR (dB)", (lo, hi), &[Series { name: "images", values: counts }])
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        crate::io::create_dir(dir)?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let svg = dir.join("psnr_histogram.svg");
        fs::write(&svg, self.psnr_histogram_svg()).map_err(|e| Error::io(&svg, e))?;
        let json = dir.join("summary.json");
        crate::io::write_json(&json, self)?;
        Ok(vec![csv, svg, json])
    }
}

/// Scores every RAW in `pred_dir` against the entry with the same id in
/// `target_dir`; both directories carry a RAW index. Unpaired entries and
/// unreadable files are excluded with a warning.
pub fn evaluate_dataset(pred_dir: &Path, target_dir: &Path) -> Result<EvaluationReport> {
    let preds = RawIndex::load(pred_dir)?;
    let targets = RawIndex::load(target_dir)?;
    let target_by_id: BTreeMap<&str, _> = targets.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let pred_ids: std::collections::BTreeSet<&str> = preds.entries.iter().map(|e| e.id.as_str()).collect();
    let mut excluded = Vec::new();
    let mut jobs = Vec::new();
    for e in &preds.entries {
        match target_by_id.get(e.id.as_str()) {
            Some(t) => jobs.push((e, *t)),
            None => excluded.push(SkippedInput { source: e.id.clone(), reason: "no matching target".into() }),
        }
    }
    for t in &targets.entries {
        if !pred_ids.contains(t.id.as_str()) {
            excluded.push(SkippedInput { source: t.id.clone(), reason: "no matching prediction".into() });
        }
    }
    let results: Vec<(String, Result<ImageScore>)> = jobs
        .par_iter()
        .map(|(p, t)| {
            let r = (|| {
                let pred = pack_rggb(&preds.read_entry(pred_dir, p)?);
                let target = pack_rggb(&targets.read_entry(target_dir, t)?);
                Ok(ImageScore {
                    image_id: p.id.clone(),
                    psnr_db: psnr(pred.data(), target.data())?,
                    ssim: ssim(pred.data(), target.data())?,
                })
            })();
            (p.id.clone(), r)
        })
        .collect();
    let mut scores = Vec::new();
    for (id, r) in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => excluded.push(SkippedInput { source: id, reason: e.to_string() }),
        }
    }
    for x in &excluded {
        log::warn!("excluded {}: {}", x.source, x.reason);
    }
    if scores.is_empty() {
        return Err(Error::Input("no paired images to evaluate".into()));
    }
    Ok(EvaluationReport::from_scores(scores, excluded))
}

/// Element-wise mean absolute error.
pub fn mean_abs_error<D: Dimension>(pred: &Array<f64, D>, target: &Array<f64, D>) -> Result<f64> {
    check(pred, target)?;
    let mut s = 0.0;
    Zip::from(pred).and(target).for_each(|&p, &t| s += (p - t).abs());
    Ok(s / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Array3::from_elem((8, 8, 4), 0.5);
        let b = &a + 0.1;
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(display_psnr(f64::INFINITY), PSNR_DISPLAY_CAP);
        assert!(matches!(psnr(&a, &Array3::zeros((8, 8, 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random(1, (24, 20, 4));
        let b = random(2, (24, 20, 4));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 0.5);
    }

    #[test]
    fn small_images_shrink_window() {
        let a = random(3, (6, 9, 1));
        let b = a.mapv(|v| v * 0.9);
        let s = ssim(&a, &b).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(window_for(6, 9), 5);
    }

    #[test]
    fn taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn csv_mean_row_matches_rows() {
        let r = EvaluationReport::from_scores(
            vec![
                ImageScore { image_id: "b".into(), psnr_db: 40.0, ssim: 0.9 },
                ImageScore { image_id: "a".into(), psnr_db: 20.0, ssim: 0.7 },
            ],
            vec![],
        );
        assert_eq!(r.mean_psnr_db, 30.0);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "a,20,0.7");
        assert_eq!(lines.last().unwrap(), &format!("mean,30,{}", r.mean_ssim));
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..1000, amp in 0.001f64..0.2) {
            let a = random(seed, (6, 6, 4)) * 0.5 + 0.25;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
            let n = Array3::from_shape_fn((6, 6, 4), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let p1 = psnr(&(&a + &(&n * amp)), &a).unwrap();
            let p2 = psnr(&(&a + &(&n * (amp * 1.1))), &a).unwrap();
            prop_assert!(p2 < p1);
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let a = random(seed, (12, 12, 2));
            let b = random(seed + 1, (12, 12, 2));
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!(ssim(&a, &b).unwrap() < 1.0);
        }
    }
}
