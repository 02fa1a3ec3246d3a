//! Pixel-intensity distribution statistics for patch populations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::{load_pair, DatasetManifest, PatchDataset, Split};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::plot::{histogram_svg, Series};
use crate::sampling::StratifiedDraw;

pub const CHANNEL_NAMES: [&str; 3] = ["red", "green", "blue"];

/// Per-channel counts over equal-width bins on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistograms {
    pub bins: usize,
    pub counts: [Vec<u64>; 3],
}

impl ChannelHistograms {
    pub fn new(bins: usize) -> Self {
        ChannelHistograms { bins, counts: std::array::from_fn(|_| vec![0; bins]) }
    }

    pub fn add(&mut self, img: &RgbImage) {
        for px in img.data().rows() {
            for c in 0..3 {
                let b = ((px[c].clamp(0.0, 1.0) * self.bins as f64) as usize).min(self.bins - 1);
                self.counts[c][b] += 1;
            }
        }
    }

    pub fn from_images<'a>(bins: usize, images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut h = Self::new(bins);
        for img in images {
            h.add(img);
        }
        h
    }

    pub fn total(&self, channel: usize) -> u64 {
        self.counts[channel].iter().sum()
    }

    pub fn density(&self, channel: usize) -> Vec<f64> {
        let t = self.total(channel).max(1) as f64;
        self.counts[channel].iter().map(|&n| n as f64 / t).collect()
    }

    pub fn entropy(&self, channel: usize) -> f64 {
        shannon_entropy(&self.counts[channel])
    }
}

/// Shannon entropy in bits of a count vector.
pub fn shannon_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts.iter().filter(|&&n| n > 0).map(|&n| -(n as f64 / t) * (n as f64 / t).log2()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit. Categories with expected counts below 5 are
/// pooled into one; `None` when fewer than two categories remain.
pub fn chi_square_gof(observed: &[f64], expected: &[f64]) -> Option<ChiSquareTest> {
    let mut cats: Vec<(f64, f64)> = Vec::new();
    let (mut small_o, mut small_e) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e >= 5.0 {
            cats.push((o, e));
        } else {
            small_o += o;
            small_e += e;
        }
    }
    if small_e > 0.0 {
        cats.push((small_o, small_e));
    }
    if cats.len() < 2 {
        return None;
    }
    let statistic: f64 = cats.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cats.len() - 1;
    let dist = ChiSquared::new(dof as f64).ok()?;
    Some(ChiSquareTest { statistic, dof, p_value: dist.sf(statistic) })
}

/// Flatness of stratified bin occupancy for one channel. Each draw through
/// `channel` contributes `1 / nonempty_bins` expected mass to every bin that
/// was non-empty for its image, so the test stays exact when images differ in
/// which bins they populate.
pub fn stratified_occupancy_test(
    draws: &[(StratifiedDraw, Vec<usize>)],
    channel: usize,
    bin_count: usize,
) -> Option<ChiSquareTest> {
    let mut observed = vec![0.0; bin_count];
    let mut expected = vec![0.0; bin_count];
    for (d, nonempty) in draws.iter().filter(|(d, _)| d.channel == channel) {
        observed[d.bin] += 1.0;
        for &b in nonempty {
            expected[b] += 1.0 / nonempty.len() as f64;
        }
    }
    let keep: Vec<usize> = (0..bin_count).filter(|&b| expected[b] > 0.0).collect();
    let o: Vec<f64> = keep.iter().map(|&b| observed[b]).collect();
    let e: Vec<f64> = keep.iter().map(|&b| expected[b]).collect();
    chi_square_gof(&o, &e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("KS test needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok(KsTest { statistic: d, p_value: kolmogorov_q(lambda) })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub label: String,
    pub pixels: u64,
    pub entropy_bits: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub bins: usize,
    pub populations: Vec<(PopulationSummary, ChannelHistograms)>,
}

impl DistributionReport {
    pub fn new(bins: usize) -> Self {
        DistributionReport { bins, populations: Vec::new() }
    }

    pub fn push(&mut self, label: &str, hist: ChannelHistograms) {
        let summary = PopulationSummary {
            label: label.to_string(),
            pixels: hist.total(0),
            entropy_bits: std::array::from_fn(|c| hist.entropy(c)),
        };
        self.populations.push((summary, hist));
    }

    /// Long-format rows `population,channel,bin_lo,bin_hi,count,density`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("population,channel,bin_lo,bin_hi,count,density\n");
        for (s, h) in &self.populations {
            for (c, name) in CHANNEL_NAMES.iter().enumerate() {
                let dens = h.density(c);
                for b in 0..h.bins {
                    out.push_str(&format!(
                        "{},{name},{},{},{},{}\n",
                        s.label,
                        b as f64 / h.bins as f64,
                        (b + 1) as f64 / h.bins as f64,
                        h.counts[c][b],
                        dens[b]
                    ));
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        crate::io::create_dir(dir)?;
        let mut written = Vec::new();
        let csv = dir.join("histograms.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        written.push(csv);
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            let series: Vec<Series> =
                self.populations.iter().map(|(s, h)| Series { name: &s.label, values: h.density(c) }).collect();
            let svg = dir.join(format!("histogram_{name}.svg"));
            let title = format!("Pixel intensity distribution, {name} channel");
            fs::write(&svg, histogram_svg(&title, "normalized intensity", (0.0, 1.0), &series))
                .map_err(|e| Error::io(&svg, e))?;
            written.push(svg);
        }
        let summary = dir.join("summary.json");
        let rows: Vec<&PopulationSummary> = self.populations.iter().map(|(s, _)| s).collect();
        crate::io::write_json(&summary, &rows)?;
        written.push(summary);
        Ok(written)
    }
}

/// Histogram of every pixel of the manifest's images in `split`.
pub fn full_population(manifest_path: &Path, split: Split, bins: usize) -> Result<ChannelHistograms> {
    let m = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut h = ChannelHistograms::new(bins);
    for pair in m.split_pairs(split) {
        match load_pair(base, &m.sensor, pair) {
            Ok((rgb, _)) => h.add(&rgb),
            Err(e) => log::warn!("skipping {}: {e}", pair.id),
        }
    }
    Ok(h)
}

pub fn patch_population(ds: &PatchDataset, bins: usize) -> ChannelHistograms {
    ChannelHistograms::from_images(bins, ds.pairs.iter().map(|p| &p.rgb_patch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        assert!((shannon_entropy(&[5, 5, 5, 5]) - 2.0).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[0, 9, 0]), 0.0);
        assert_eq!(shannon_entropy(&[]), 0.0);
    }

    #[test]
    fn chi_square_known_value() {
        // Statistic 4 on 1 dof: p = erfc(sqrt(2)).
        let t = chi_square_gof(&[60.0, 40.0], &[50.0, 50.0]).unwrap();
        assert!((t.statistic - 4.0).abs() < 1e-12);
        assert_eq!(t.dof, 1);
        assert!((t.p_value - 0.045_500_263_896).abs() < 1e-9);
        assert!(chi_square_gof(&[3.0], &[3.0]).is_none());
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let t = ks_two_sample(&a, &a).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        let b: Vec<f64> = a.iter().map(|v| v + 2.0).collect();
        let t = ks_two_sample(&a, &b).unwrap();
        assert_eq!(t.statistic, 1.0);
        assert!(t.p_value < 1e-20);
    }

    #[test]
    fn kolmogorov_reference_point() {
        // Q(1.36) is the classical 5% critical value.
        assert!((kolmogorov_q(1.358_099) - 0.05).abs() < 1e-4);
    }
}
