//! Training loop: Adam, cosine annealing with warm restarts, checkpoints and
//! an append-only metrics log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::imaging::SensorProfile;
use crate::model::{Network, ReRawConfig, ReRawModel, RAW_PATCH};
use crate::nn::Params;
use crate::objective::{composite_loss, composite_loss_grad, make_gamma_targets, LossConfig};
use crate::sampling::{crop_context, splitmix64, PatchPair};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub restart_period_epochs: usize,
    pub lr_start: f64,
    pub lr_floor: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Fraction of patches held out for the validation loss.
    pub val_fraction: f64,
    pub loss: LossConfig,
    pub model: ReRawConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 128,
            restart_period_epochs: 16,
            lr_start: 1e-3,
            lr_floor: 1e-5,
            seed: 0,
            grad_clip: None,
            val_fraction: 0.05,
            loss: LossConfig::default(),
            model: ReRawConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 || self.restart_period_epochs == 0 || self.epochs % self.restart_period_epochs != 0 {
            return Err(Error::Config(format!(
                "epochs ({}) must be a positive multiple of restart_period_epochs ({})",
                self.epochs, self.restart_period_epochs
            )));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor < self.lr_start && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_floor ({}) < lr_start ({})",
                self.lr_floor, self.lr_start
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Cosine annealing from `lr_start` to `lr_floor` over each restart window,
/// reaching the floor on the window's last step.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let window = (cfg.restart_period_epochs * steps_per_epoch).max(1);
    let t = step % window;
    let progress = if window > 1 { t as f64 / (window - 1) as f64 } else { 0.0 };
    cfg.lr_floor + 0.5 * (cfg.lr_start - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut impl Params, grad: &impl Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut p = Vec::new();
        params.collect_mut(&mut p);
        let mut g = Vec::new();
        grad.collect(&mut g);
        let mut offset = 0;
        for (pt, gt) in p.into_iter().zip(g) {
            let m = &mut self.m[offset..offset + pt.len()];
            let v = &mut self.v[offset..offset + pt.len()];
            for i in 0..pt.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gt[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gt[i] * gt[i];
                pt[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
            offset += pt.len();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr_last: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub final_val_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// The central `66 x 66` model input of a stored `68 x 68` patch.
pub fn model_input(pair: &PatchPair) -> ndarray::ArrayView3<'_, f64> {
    let ring = (pair.rgb_patch.height() - crate::model::input_side(RAW_PATCH)) / 2;
    pair.rgb_patch.view().slice_move(s![ring..ring + 2 * RAW_PATCH + 2, ring..ring + 2 * RAW_PATCH + 2, ..])
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(a) ^ b) ^ c)
}

/// Composite loss of one pair with an evaluation-mode context.
pub fn pair_loss(model: &ReRawModel, loss: &LossConfig, pair: &PatchPair) -> Result<f64> {
    let out = model.forward(model_input(pair), &pair.context_rgb)?;
    let target = pair.raw_patch.data();
    let targets = make_gamma_targets(target, &model.config().gammas);
    composite_loss(loss, &out.final_patch, target, &out.candidates.0, &targets)
}

pub struct Trainer {
    cfg: TrainConfig,
    model: ReRawModel,
    adam: AdamState,
    pairs: Vec<PatchPair>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    epoch: usize,
    step: usize,
    sensor: Option<SensorProfile>,
    out_dir: Option<PathBuf>,
    history: Vec<EpochStats>,
    checkpoints: Vec<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pairs: Vec<PatchPair>, sensor: Option<SensorProfile>) -> Result<Self> {
        cfg.validate()?;
        let model = ReRawModel::new(cfg.model.clone())?;
        Self::assemble(cfg, model, None, pairs, sensor, 0, 0)
    }

    /// Continues from a checkpoint written by [`Trainer`], including the
    /// optimizer state and position in the schedule.
    pub fn resume(checkpoint: &Path, pairs: Vec<PatchPair>) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let (state, adam) = ck
            .train
            .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", checkpoint.display())))?;
        state.config.validate()?;
        if &state.config.model != ck.model.config() {
            return Err(Error::Checkpoint("training config does not match stored model".into()));
        }
        Self::assemble(state.config, ck.model, Some(adam), pairs, ck.sensor, state.epoch, state.step)
    }

    fn assemble(
        cfg: TrainConfig,
        model: ReRawModel,
        adam: Option<AdamState>,
        pairs: Vec<PatchPair>,
        sensor: Option<SensorProfile>,
        epoch: usize,
        step: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("training requires at least one patch pair".into()));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5a11, 0)));
        let n_val = ((pairs.len() as f64 * cfg.val_fraction).round() as usize).min(pairs.len() - 1);
        let mut val_idx = order[..n_val].to_vec();
        let mut train_idx = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let n_params = model.network().param_count();
        Ok(Trainer {
            adam: adam.unwrap_or_else(|| AdamState::new(n_params)),
            cfg,
            model,
            pairs,
            train_idx,
            val_idx,
            epoch,
            step,
            sensor,
            out_dir: None,
            history: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    /// Enables checkpoints and the metrics log in `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        crate::io::create_dir(dir)?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &ReRawModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_idx.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_idx.len().div_ceil(self.cfg.batch_size)
    }

    /// Mean composite loss over the held-out patches, `None` without any.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val_idx.is_empty() {
            return Ok(None);
        }
        let losses: Vec<f64> = self
            .val_idx
            .par_iter()
            .map(|&i| pair_loss(&self.model, &self.cfg.loss, &self.pairs[i]))
            .collect::<Result<_>>()?;
        Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
    }

    fn sample_grad(&self, idx: usize, ctx_seed: u64) -> Result<(f64, Network)> {
        let pair = &self.pairs[idx];
        let ctx = crop_context(&pair.context_rgb, &mut ChaCha8Rng::seed_from_u64(ctx_seed));
        let trace = self.model.forward_trace(model_input(pair), &ctx)?;
        let out = trace.output();
        let target = pair.raw_patch.data();
        let targets = make_gamma_targets(target, &self.cfg.model.gammas);
        let g = composite_loss_grad(&self.cfg.loss, &out.final_patch, target, &out.candidates.0, &targets)?;
        let mut grad = self.model.network().zeros_like();
        self.model.backward(&trace, &g.d_final, &g.d_candidates, &mut grad)?;
        Ok((g.loss, grad))
    }

    fn diagnostic(&self, batch: &[usize], loss: f64, grad_norm: f64) -> String {
        let (mut rgb_min, mut rgb_max, mut raw_min, mut raw_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &i in batch {
            for &v in self.pairs[i].rgb_patch.data() {
                rgb_min = rgb_min.min(v);
                rgb_max = rgb_max.max(v);
            }
            for &v in self.pairs[i].raw_patch.data() {
                raw_min = raw_min.min(v);
                raw_max = raw_max.max(v);
            }
        }
        let ids: Vec<&str> = batch.iter().take(4).map(|&i| self.pairs[i].source_image_id.as_str()).collect();
        format!(
            "batch of {} (first ids {ids:?}): loss {loss}, grad norm {grad_norm}, rgb range [{rgb_min}, {rgb_max}], raw range [{raw_min}, {raw_max}]",
            batch.len()
        )
    }

    /// One optimizer step on `batch`; returns the mean batch loss.
    fn train_step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let epoch = self.epoch as u64;
        let seed = self.cfg.seed;
        let results: Vec<(f64, Network)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| self.sample_grad(i, mix(seed, epoch, (self.step * self.cfg.batch_size + k) as u64)))
            .collect::<Result<_>>()?;
        let mut grad = self.model.network().zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.accumulate(g);
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        let mut norm_sq = 0.0;
        {
            let mut tensors = Vec::new();
            grad.collect_mut(&mut tensors);
            for t in tensors {
                for v in t.iter_mut() {
                    *v *= scale;
                    norm_sq += *v * *v;
                }
            }
        }
        let norm = norm_sq.sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite { step: self.step, diagnostic: self.diagnostic(batch, loss, norm) });
        }
        if let Some(clip) = self.cfg.grad_clip {
            if norm > clip {
                let mut tensors = Vec::new();
                grad.collect_mut(&mut tensors);
                for t in tensors {
                    t.iter_mut().for_each(|v| *v *= clip / norm);
                }
            }
        }
        debug_assert!(lr >= self.cfg.lr_floor * (1.0 - 1e-12) && lr <= self.cfg.lr_start);
        self.adam.step(self.model.network_mut(), &grad, lr);
        Ok(loss)
    }

    /// Runs one epoch: reshuffle, step through batches, log, checkpoint.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let spe = self.steps_per_epoch();
        let mut order = self.train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 0xe90c, self.epoch as u64)));
        let mut rows = Vec::with_capacity(spe);
        let mut total = 0.0;
        let mut lr = self.cfg.lr_start;
        for batch in order.chunks(self.cfg.batch_size) {
            lr = lr_schedule(self.step, spe, &self.cfg);
            let loss = self.train_step(batch, lr)?;
            total += loss * batch.len() as f64;
            self.step += 1;
            rows.push((self.step, lr, loss));
        }
        self.epoch += 1;
        let val_loss = self.validation_loss()?;
        let stats = EpochStats { epoch: self.epoch, train_loss: total / order.len() as f64, val_loss, lr_last: lr };
        log::info!(
            "epoch {} train_loss {:.6} val_loss {}",
            stats.epoch,
            stats.train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        if let Some(dir) = self.out_dir.clone() {
            self.append_metrics(&dir, &rows, val_loss)?;
            let boundary = self.epoch % self.cfg.restart_period_epochs == 0;
            if boundary {
                let path = dir.join(format!("epoch-{:04}.ckpt", self.epoch));
                self.save_checkpoint(&path)?;
                self.checkpoints.push(path);
            }
            if self.epoch == self.cfg.epochs {
                let path = dir.join(FINAL_CHECKPOINT);
                self.save_checkpoint(&path)?;
                self.checkpoints.push(path);
            }
        }
        self.history.push(stats);
        Ok(stats)
    }

    fn append_metrics(&self, dir: &Path, rows: &[(usize, f64, f64)], val_loss: Option<f64>) -> Result<()> {
        let path = dir.join(METRICS_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str("step,epoch,lr,train_loss,val_loss\n");
        }
        for (k, (step, lr, loss)) in rows.iter().enumerate() {
            let val = match (k + 1 == rows.len(), val_loss) {
                (true, Some(v)) => v.to_string(),
                _ => String::new(),
            };
            text.push_str(&format!("{step},{},{lr},{loss},{val}\n", self.epoch));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let state =
            TrainState { config: self.cfg.clone(), epoch: self.epoch, step: self.step, adam_steps: self.adam.t };
        Checkpoint { model: self.model.clone(), sensor: self.sensor.clone(), train: Some((state, self.adam.clone())) }
            .save(path)
    }

    /// Trains until `cfg.epochs` are done.
    pub fn run(&mut self) -> Result<TrainReport> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(TrainReport {
            epochs: self.history.clone(),
            steps: self.step,
            final_val_loss: self.history.last().and_then(|s| s.val_loss),
            checkpoints: self.checkpoints.clone(),
        })
    }

    pub fn into_model(self) -> ReRawModel {
        self.model
    }
}

/// Per-patch PSNR of the model's final output against the pair's target.
pub fn patch_psnr(model: &ReRawModel, pair: &PatchPair) -> Result<f64> {
    let out: Array3<f64> = model.forward(model_input(pair), &pair.context_rgb)?.final_patch;
    crate::metrics::psnr(&out, pair.raw_patch.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 10;
        assert_eq!(lr_schedule(0, spe, &cfg), 1e-3);
        let window = 16 * spe;
        for w in 0..3 {
            let end = lr_schedule(w * window + window - 1, spe, &cfg);
            assert!((end - 1e-5).abs() / 1e-5 < 0.01);
            assert_eq!(lr_schedule(w * window, spe, &cfg), 1e-3);
        }
    }

    #[test]
    fn schedule_midpoint_matches_cosine() {
        let cfg = TrainConfig::default();
        // Window of 17 steps: step 8 is exactly halfway.
        let c = TrainConfig { restart_period_epochs: 1, ..cfg.clone() };
        let mid = lr_schedule(8, 17, &c);
        let expected = (cfg.lr_start + cfg.lr_floor) / 2.0;
        assert!((mid - expected).abs() < 1e-15);
        assert!((mid - 5.05e-4).abs() < 1e-12);
    }

    #[test]
    fn config_invariants() {
        let bad = TrainConfig { epochs: 20, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { lr_floor: 1e-2, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn config_toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        let cfg = TrainConfig { grad_clip: Some(1.0), model: ReRawConfig::desk(), ..TrainConfig::default() };
        cfg.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), cfg);
        fs::write(&path, "epochs = 32\nrestart_period_epochs = 16\n[loss]\nkind = \"l1\"\n").unwrap();
        let partial = TrainConfig::load(&path).unwrap();
        assert_eq!(partial.epochs, 32);
        assert_eq!(partial.batch_size, 32);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![crate::nn::LayerNorm::new(3)];
        let mut g = p.clone();
        g.fill(0.5);
        let mut adam = AdamState::new(p.param_count());
        let before = p.flatten();
        adam.step(&mut p, &g, 0.01);
        for (a, b) in p.flatten().iter().zip(before) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }
}
