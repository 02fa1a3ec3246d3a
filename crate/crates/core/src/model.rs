//! The conversion network.
//!
//! Four sub-networks cooperate: a colour reconstruction trunk with a 4x4
//! receptive field, a global context encoder whose output multiplies the
//! trunk latent, a set of gamma heads that each predict the RAW patch in
//! their own gamma space, and a scaling encoder producing softmax weights
//! that blend the re-linearized head outputs.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gamma_value, RgbImage, DEGAMMA_FLOOR};
use crate::nn::{
    sigmoid, softmax, softmax_backward, ConvBlock, ConvBlockCache, Dense, Grid, Params, ResBlock,
    ResBlockCache,
};

/// Side of the downscaled full-image context.
pub const CONTEXT_SIDE: usize = 128;
/// Side of a training RAW patch in packed pixels.
pub const RAW_PATCH: usize = 32;
/// Side of a sampled RGB training patch.
pub const RGB_PATCH: usize = 68;
/// RGB pixels of context ring the trunk needs around a RAW footprint.
pub const INPUT_RING: usize = 1;

/// RGB side consumed by the trunk for a `p x p` RAW output.
pub const fn input_side(p: usize) -> usize {
    2 * p + 2 * INPUT_RING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReRawConfig {
    pub n_heads: usize,
    pub gammas: Vec<f64>,
    pub trunk_width: usize,
    pub stem_channels: usize,
    pub n_residual_blocks: usize,
    pub context_dim: usize,
    pub use_context_encoder: bool,
    pub use_scaling_encoder: bool,
    /// Widest channel count inside the context and scaling encoders.
    #[serde(default = "default_encoder_width")]
    pub encoder_width: usize,
    /// Residual blocks at the encoders' coarsest resolution.
    #[serde(default = "default_encoder_blocks")]
    pub encoder_blocks: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_encoder_width() -> usize {
    32
}

fn default_encoder_blocks() -> usize {
    8
}

impl Default for ReRawConfig {
    fn default() -> Self {
        ReRawConfig {
            n_heads: 10,
            gammas: gamma_ladder(10),
            trunk_width: 128,
            stem_channels: 96,
            n_residual_blocks: 8,
            context_dim: 128,
            use_context_encoder: true,
            use_scaling_encoder: true,
            encoder_width: default_encoder_width(),
            encoder_blocks: default_encoder_blocks(),
            init_seed: 0,
        }
    }
}

/// Evenly spaced ladder `{1/n, 2/n, ..., 1}`; `n = 10` gives `{0.1, ..., 1.0}`.
pub fn gamma_ladder(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

impl ReRawConfig {
    /// Same architecture with `n` heads on the default ladder.
    pub fn with_heads(mut self, n: usize) -> Self {
        self.n_heads = n;
        self.gammas = gamma_ladder(n);
        self
    }

    /// Reduced widths and depths for CPU-scale experiments.
    pub fn desk() -> Self {
        ReRawConfig {
            trunk_width: 32,
            stem_channels: 24,
            n_residual_blocks: 2,
            context_dim: 32,
            encoder_width: 16,
            encoder_blocks: 2,
            ..ReRawConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::Config("n_heads must be at least 1".into()));
        }
        if self.gammas.len() != self.n_heads {
            return Err(Error::Config(format!(
                "{} gammas given for {} heads",
                self.gammas.len(),
                self.n_heads
            )));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(Error::Config(format!("gamma {g} outside (0, 1]")));
        }
        if self.stem_channels == 0 || self.stem_channels % 3 != 0 {
            return Err(Error::Config(format!(
                "stem_channels {} must be a positive multiple of 3",
                self.stem_channels
            )));
        }
        if self.trunk_width == 0 || self.encoder_width < 4 {
            return Err(Error::Config("trunk_width and encoder_width must be positive (encoder >= 4)".into()));
        }
        if self.use_context_encoder && self.context_dim != self.trunk_width {
            return Err(Error::Config(format!(
                "context_dim {} must equal trunk_width {} for multiplicative modulation",
                self.context_dim, self.trunk_width
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

/// Depthwise 3x3 valid convolution: each of the 3 input channels feeds its own
/// group of `stem_channels / 3` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedStem {
    /// `(9, stem_channels)`, tap-major.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl GroupedStem {
    fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        GroupedStem { w: crate::nn::he_uniform(rng, 9, (9, channels), 1.0), b: Array1::zeros(channels) }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array2<f64>, Grid) {
        let (h, w, _) = x.dim();
        let og = Grid { h: h - 2, w: w - 2 };
        let ch = self.w.ncols();
        let per = ch / 3;
        let xs = x.as_slice().expect("standard layout");
        let ws = self.w.as_slice().expect("standard layout");
        let bs = self.b.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((og.sites(), ch));
        let os = out.as_slice_mut().expect("standard layout");
        for oy in 0..og.h {
            for ox in 0..og.w {
                let row = &mut os[(oy * og.w + ox) * ch..][..ch];
                row.copy_from_slice(bs);
                for t in 0..9 {
                    let (dy, dx) = (t / 3, t % 3);
                    let px = &xs[((oy + dy) * w + ox + dx) * 3..][..3];
                    let wt = &ws[t * ch..][..ch];
                    for g in 0..3 {
                        let v = px[g];
                        for j in g * per..(g + 1) * per {
                            row[j] += wt[j] * v;
                        }
                    }
                }
            }
        }
        (out, og)
    }

    fn backward(&self, x: &Array3<f64>, dy: &Array2<f64>, grad: &mut GroupedStem) {
        let (_, w, _) = x.dim();
        let og = Grid { h: x.dim().0 - 2, w: w - 2 };
        let ch = self.w.ncols();
        let per = ch / 3;
        let xs = x.as_slice().expect("standard layout");
        let ds = dy.as_slice().expect("standard layout");
        grad.b += &dy.sum_axis(Axis(0));
        let gw = grad.w.as_slice_mut().expect("standard layout");
        for oy in 0..og.h {
            for ox in 0..og.w {
                let d = &ds[(oy * og.w + ox) * ch..][..ch];
                for t in 0..9 {
                    let (ty, tx) = (t / 3, t % 3);
                    let px = &xs[((oy + ty) * w + ox + tx) * 3..][..3];
                    let gt = &mut gw[t * ch..][..ch];
                    for g in 0..3 {
                        let v = px[g];
                        for j in g * per..(g + 1) * per {
                            gt[j] += d[j] * v;
                        }
                    }
                }
            }
        }
    }
}

impl Params for GroupedStem {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(self.w.as_slice().expect("standard layout"));
        out.push(self.b.as_slice().expect("standard layout"));
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w.as_slice_mut().expect("standard layout"));
        out.push(self.b.as_slice_mut().expect("standard layout"));
    }
}

/// Gathers each 2x2 block into one row ordered `(dy, dx, channel)`.
fn space_to_depth(x: &Array2<f64>, g: Grid) -> (Array2<f64>, Grid) {
    let c = x.ncols();
    let og = Grid { h: g.h / 2, w: g.w / 2 };
    let mut out = Array2::<f64>::zeros((og.sites(), 4 * c));
    for oy in 0..og.h {
        for ox in 0..og.w {
            let mut row = out.row_mut(oy * og.w + ox);
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let src = (2 * oy + dy) * g.w + 2 * ox + dx;
                row.slice_mut(s![k * c..(k + 1) * c]).assign(&x.row(src));
            }
        }
    }
    (out, og)
}

fn depth_to_space(d: &Array2<f64>, g: Grid) -> Array2<f64> {
    let c = d.ncols() / 4;
    let og = Grid { h: g.h / 2, w: g.w / 2 };
    let mut out = Array2::<f64>::zeros((g.sites(), c));
    for oy in 0..og.h {
        for ox in 0..og.w {
            let row = d.row(oy * og.w + ox);
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let dst = (2 * oy + dy) * g.w + 2 * ox + dx;
                out.row_mut(dst).assign(&row.slice(s![k * c..(k + 1) * c]));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------

/// Convolutional image encoder: four stride-2 stages (128 -> 8), residual
/// blocks at 8x8, global average pooling and a linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<ConvBlock>,
    pub blocks: Vec<ConvBlock>,
    pub proj: Dense,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    stages: Vec<ConvBlockCache>,
    blocks: Vec<ConvBlockCache>,
    pooled: Array2<f64>,
    grid: Grid,
}

impl Encoder {
    fn new(rng: &mut ChaCha8Rng, width: usize, n_blocks: usize, out_dim: usize) -> Self {
        let widths = [(width / 4).max(2), (width / 2).max(2), width, width];
        let mut stages = Vec::new();
        let mut c_in = 3;
        for &c in &widths {
            stages.push(ConvBlock::downsample(rng, c_in, c));
            c_in = c;
        }
        let blocks = (0..n_blocks).map(|_| ConvBlock::residual(rng, width)).collect();
        Encoder { stages, blocks, proj: Dense::new(rng, width, out_dim, 0.1) }
    }

    fn forward(&self, img: &RgbImage) -> Result<(Array1<f64>, EncoderCache)> {
        let (h, w, _) = img.data().dim();
        if (h, w) != (CONTEXT_SIDE, CONTEXT_SIDE) {
            return Err(Error::Shape(format!(
                "context image must be {CONTEXT_SIDE}x{CONTEXT_SIDE}, got {h}x{w}"
            )));
        }
        let mut g = Grid { h, w };
        let mut x = img
            .data()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, 3))
            .expect("contiguous image");
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (y, og, c) = stage.forward(&x, g);
            stages.push(c);
            x = y;
            g = og;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, og, c) = block.forward(&x, g);
            blocks.push(c);
            x = y;
            g = og;
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let out = self.proj.forward(pooled.view()).row(0).to_owned();
        Ok((out, EncoderCache { stages, blocks, pooled, grid: g }))
    }

    fn backward(&self, cache: &EncoderCache, d_out: &Array1<f64>, grad: &mut Encoder) {
        let d_out = d_out.view().insert_axis(Axis(0));
        let d_pooled = self
            .proj
            .backward(cache.pooled.view(), d_out, &mut grad.proj, true)
            .expect("dx requested");
        let sites = cache.grid.sites();
        let mut dx = Array2::from_shape_fn((sites, d_pooled.ncols()), |(_, c)| d_pooled[[0, c]] / sites as f64);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, &mut grad.blocks[i], true).expect("dx requested");
        }
        for (i, stage) in self.stages.iter().enumerate().rev() {
            match stage.backward(&cache.stages[i], &dx, &mut grad.stages[i], i > 0) {
                Some(d) => dx = d,
                None => break,
            }
        }
    }
}

impl Params for Encoder {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.stages.collect(out);
        self.blocks.collect(out);
        self.proj.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.stages.collect_mut(out);
        self.blocks.collect_mut(out);
        self.proj.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------

/// One gamma head: residual point-wise blocks and a 4-channel sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaHead {
    pub blocks: Vec<ResBlock>,
    pub out: Dense,
}

impl Params for GammaHead {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.blocks.collect(out);
        self.out.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.blocks.collect_mut(out);
        self.out.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    blocks: Vec<ResBlockCache>,
    z: Array2<f64>,
}

/// All trainable tensors. A zeroed clone serves as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stem: GroupedStem,
    pub reduce: Dense,
    pub trunk: Vec<ResBlock>,
    pub context: Option<Encoder>,
    pub heads: Vec<GammaHead>,
    pub scaling: Option<Encoder>,
}

impl Network {
    fn new(cfg: &ReRawConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let stem = GroupedStem::new(&mut rng, cfg.stem_channels);
        let reduce = Dense::new(&mut rng, 4 * cfg.stem_channels, cfg.trunk_width, 1.0);
        let trunk = (0..cfg.n_residual_blocks).map(|_| ResBlock::new(&mut rng, cfg.trunk_width)).collect();
        let context = cfg.use_context_encoder.then(|| {
            let mut enc = Encoder::new(&mut rng, cfg.encoder_width, cfg.encoder_blocks, cfg.context_dim);
            // Start as an identity modulation.
            enc.proj.b.fill(1.0);
            enc
        });
        let heads = (0..cfg.n_heads)
            .map(|_| GammaHead {
                blocks: (0..cfg.n_residual_blocks).map(|_| ResBlock::new(&mut rng, cfg.trunk_width)).collect(),
                out: Dense::new(&mut rng, cfg.trunk_width, 4, 0.1),
            })
            .collect();
        let scaling = cfg.use_scaling_encoder.then(|| {
            let mut enc = Encoder::new(&mut rng, cfg.encoder_width, cfg.encoder_blocks, cfg.n_heads);
            // Uniform blend at initialization.
            enc.proj.w.fill(0.0);
            enc
        });
        Network { stem, reduce, trunk, context, heads, scaling }
    }

    pub fn zeros_like(&self) -> Network {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Params for Network {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.stem.collect(out);
        self.reduce.collect(out);
        self.trunk.collect(out);
        if let Some(c) = &self.context {
            c.collect(out);
        }
        self.heads.collect(out);
        if let Some(s) = &self.scaling {
            s.collect(out);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.stem.collect_mut(out);
        self.reduce.collect_mut(out);
        self.trunk.collect_mut(out);
        if let Some(c) = &mut self.context {
            c.collect_mut(out);
        }
        self.heads.collect_mut(out);
        if let Some(s) = &mut self.scaling {
            s.collect_mut(out);
        }
    }
}

// ---------------------------------------------------------------------------

/// Softmax blending weights over the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector(Array1<f64>);

impl ScalingVector {
    pub fn new(alpha: Array1<f64>) -> Result<Self> {
        if alpha.iter().any(|&a| !(a >= 0.0)) || (alpha.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!("scaling vector {alpha} is not a distribution")));
        }
        Ok(ScalingVector(alpha))
    }

    pub fn uniform(n: usize) -> Self {
        ScalingVector(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-head predictions in gamma space, each `p x p x 4` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaCandidates(pub Vec<Array3<f64>>);

/// `sum_i alpha_i * clamp(c_i)^(1/gamma_i)`.
pub fn compose_raw<D: Dimension>(
    candidates: &[ndarray::Array<f64, D>],
    alpha: &ScalingVector,
    gammas: &[f64],
) -> Result<ndarray::Array<f64, D>> {
    if candidates.is_empty() || candidates.len() != alpha.len() || candidates.len() != gammas.len() {
        return Err(Error::Shape(format!(
            "{} candidates, {} weights, {} gammas",
            candidates.len(),
            alpha.len(),
            gammas.len()
        )));
    }
    let shape = candidates[0].raw_dim();
    if candidates.iter().any(|c| c.raw_dim() != shape) {
        return Err(Error::Shape("candidate shapes differ".into()));
    }
    let mut out = ndarray::Array::<f64, D>::zeros(shape);
    for ((c, &a), &g) in candidates.iter().zip(alpha.alpha()).zip(gammas) {
        let inv = 1.0 / g;
        Zip::from(&mut out).and(c).for_each(|o, &v| {
            *o += a * gamma_value(v.clamp(DEGAMMA_FLOOR, 1.0), inv);
        });
    }
    out.mapv_inplace(|v| v.min(1.0));
    Ok(out)
}

/// Per-image conditioning shared by every patch of that image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCode {
    pub modulation: Option<Array1<f64>>,
    pub alpha: ScalingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub final_patch: Array3<f64>,
    pub candidates: GammaCandidates,
    pub alpha: ScalingVector,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    input: Array3<f64>,
    stem_grid: Grid,
    s2d: Array2<f64>,
    trunk: Vec<ResBlockCache>,
    latent: Array2<f64>,
    context: Option<(EncoderCache, Array1<f64>)>,
    heads: Vec<HeadCache>,
    candidates: Vec<Array2<f64>>,
    scaling: Option<EncoderCache>,
    alpha: Array1<f64>,
    pub final_sites: Array2<f64>,
    out_grid: Grid,
}

impl ForwardTrace {
    pub fn output(&self) -> ForwardOutput {
        let g = self.out_grid;
        let to3 = |a: &Array2<f64>| a.clone().into_shape_with_order((g.h, g.w, 4)).expect("site layout");
        ForwardOutput {
            final_patch: to3(&self.final_sites),
            candidates: GammaCandidates(self.candidates.iter().map(to3).collect()),
            alpha: ScalingVector(self.alpha.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReRawModel {
    config: ReRawConfig,
    net: Network,
}

fn check_patch_geometry(h: usize, w: usize, c: usize) -> Result<()> {
    if c != 3 || h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "RGB input {h}x{w}x{c} must be (2P+2)x(2Q+2)x3 with P, Q >= 1"
        )));
    }
    Ok(())
}

impl ReRawModel {
    pub fn new(config: ReRawConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(&config);
        Ok(ReRawModel { config, net })
    }

    pub fn from_parts(config: ReRawConfig, flat: &[f64]) -> Result<Self> {
        let mut model = ReRawModel::new(config)?;
        model
            .net
            .load_flat(flat)
            .map_err(|n| Error::Checkpoint(format!("config expects {n} weights, found {}", flat.len())))?;
        Ok(model)
    }

    pub fn config(&self) -> &ReRawConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Trunk latent `P x P x trunk_width` for a `(2P+2) x (2P+2)` RGB patch.
    pub fn color_reconstruct(&self, rgb_patch: ArrayView3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = rgb_patch.dim();
        check_patch_geometry(h, w, c)?;
        let input = rgb_patch.as_standard_layout().into_owned();
        let (latent, g) = self.trunk_forward(&input).map(|(l, g, ..)| (l, g))?;
        Ok(latent.into_shape_with_order((g.h, g.w, self.config.trunk_width)).expect("site layout"))
    }

    /// Context modulation vector, or `None` when the context encoder is disabled.
    pub fn encode_context(&self, context: &RgbImage) -> Result<Option<Array1<f64>>> {
        match &self.net.context {
            Some(enc) => Ok(Some(enc.forward(context)?.0)),
            None => Ok(None),
        }
    }

    pub fn encode_scaling(&self, context: &RgbImage) -> Result<ScalingVector> {
        match &self.net.scaling {
            Some(enc) => Ok(ScalingVector(softmax(&enc.forward(context)?.0))),
            None => Ok(ScalingVector::uniform(self.config.n_heads)),
        }
    }

    pub fn context_code(&self, context: &RgbImage) -> Result<ContextCode> {
        Ok(ContextCode { modulation: self.encode_context(context)?, alpha: self.encode_scaling(context)? })
    }

    /// Runs the heads on a (possibly modulated) latent `P x P x trunk_width`.
    pub fn predict_gamma_candidates(&self, latent: &Array3<f64>) -> Result<GammaCandidates> {
        let (h, w, c) = latent.dim();
        if c != self.config.trunk_width {
            return Err(Error::Shape(format!("latent depth {c} != trunk width {}", self.config.trunk_width)));
        }
        let x = latent.as_standard_layout().into_owned().into_shape_with_order((h * w, c)).expect("contiguous");
        Ok(GammaCandidates(
            self.net
                .heads
                .iter()
                .map(|head| {
                    let (cand, _) = run_head(head, x.clone());
                    cand.into_shape_with_order((h, w, 4)).expect("site layout")
                })
                .collect(),
        ))
    }

    pub fn forward(&self, rgb_patch: ArrayView3<f64>, context: &RgbImage) -> Result<ForwardOutput> {
        Ok(self.forward_trace(rgb_patch, context)?.output())
    }

    /// Inference with a precomputed per-image [`ContextCode`]; accepts any
    /// `(2P+2) x (2Q+2)` input and returns `P x Q x 4`.
    pub fn infer(&self, rgb: ArrayView3<f64>, code: &ContextCode) -> Result<Array3<f64>> {
        let (h, w, c) = rgb.dim();
        check_patch_geometry(h, w, c)?;
        if code.alpha.len() != self.config.n_heads {
            return Err(Error::Shape("context code does not match head count".into()));
        }
        let input = rgb.as_standard_layout().into_owned();
        let (mut x, g, ..) = self.trunk_forward(&input)?;
        if let Some(m) = &code.modulation {
            x *= m;
        }
        let cands: Vec<Array2<f64>> = self.net.heads.iter().map(|head| run_head(head, x.clone()).0).collect();
        let out = compose_raw(&cands, &code.alpha, &self.config.gammas)?;
        Ok(out.into_shape_with_order((g.h, g.w, 4)).expect("site layout"))
    }

    fn trunk_forward(
        &self,
        input: &Array3<f64>,
    ) -> Result<(Array2<f64>, Grid, Grid, Array2<f64>, Vec<ResBlockCache>)> {
        let (stem, stem_grid) = self.net.stem.forward(input);
        let (s2d, g) = space_to_depth(&stem, stem_grid);
        let mut x = self.net.reduce.forward(s2d.view());
        let mut caches = Vec::with_capacity(self.net.trunk.len());
        for block in &self.net.trunk {
            let (y, c) = block.forward(x);
            caches.push(c);
            x = y;
        }
        Ok((x, g, stem_grid, s2d, caches))
    }

    pub fn forward_trace(&self, rgb_patch: ArrayView3<f64>, context: &RgbImage) -> Result<ForwardTrace> {
        let (h, w, c) = rgb_patch.dim();
        check_patch_geometry(h, w, c)?;
        let input = rgb_patch.as_standard_layout().into_owned();
        let (latent, out_grid, stem_grid, s2d, trunk) = self.trunk_forward(&input)?;

        let context_out = match &self.net.context {
            Some(enc) => Some(enc.forward(context)?),
            None => None,
        };
        let modulated = match &context_out {
            Some((m, _)) => &latent * m,
            None => latent.clone(),
        };

        let mut heads = Vec::with_capacity(self.net.heads.len());
        let mut candidates = Vec::with_capacity(self.net.heads.len());
        for head in &self.net.heads {
            let (cand, cache) = run_head(head, modulated.clone());
            heads.push(cache);
            candidates.push(cand);
        }

        let (alpha, scaling) = match &self.net.scaling {
            Some(enc) => {
                let (logits, cache) = enc.forward(context)?;
                (softmax(&logits), Some(cache))
            }
            None => (ScalingVector::uniform(self.config.n_heads).0, None),
        };
        let final_sites = compose_raw(&candidates, &ScalingVector(alpha.clone()), &self.config.gammas)?;

        Ok(ForwardTrace {
            input,
            stem_grid,
            s2d,
            trunk,
            latent,
            context: context_out.map(|(m, c)| (c, m)),
            heads,
            candidates,
            scaling,
            alpha,
            final_sites,
            out_grid,
        })
    }

    /// Back-propagates `dL/dfinal` and `dL/dcandidate_i` (all `P x P x 4`)
    /// and accumulates parameter gradients into `grad`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_final: &Array3<f64>,
        d_candidates: &[Array3<f64>],
        grad: &mut Network,
    ) -> Result<()> {
        let n = self.config.n_heads;
        if d_candidates.len() != n {
            return Err(Error::Shape(format!("{} candidate gradients for {n} heads", d_candidates.len())));
        }
        let sites = trace.out_grid.sites();
        let as2 = |a: &Array3<f64>| -> Result<Array2<f64>> {
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order((sites, 4))
                .map_err(|e| Error::Shape(e.to_string()))
        };
        let d_final = as2(d_final)?;

        // Composition: final = sum_i alpha_i * c_i^(1/gamma_i).
        let mut d_alpha = Array1::<f64>::zeros(n);
        let mut d_logits_heads = Vec::with_capacity(n);
        for i in 0..n {
            let inv = 1.0 / self.config.gammas[i];
            let a = trace.alpha[i];
            let cand = &trace.candidates[i];
            let mut dc = as2(&d_candidates[i])?;
            let mut da = 0.0;
            Zip::from(&mut dc).and(cand).and(&d_final).for_each(|g, &c, &df| {
                let cc = c.clamp(DEGAMMA_FLOOR, 1.0);
                da += df * cc.powf(inv);
                if c > DEGAMMA_FLOOR {
                    *g += df * a * inv * cc.powf(inv - 1.0);
                }
                // Sigmoid derivative.
                *g *= c * (1.0 - c);
            });
            d_alpha[i] = da;
            d_logits_heads.push(dc);
        }

        if let (Some(enc), Some(cache)) = (&self.net.scaling, &trace.scaling) {
            let d_logits = softmax_backward(&trace.alpha, &d_alpha);
            enc.backward(cache, &d_logits, grad.scaling.as_mut().expect("matching structure"));
        }

        let mut d_mod = Array2::<f64>::zeros((sites, self.config.trunk_width));
        for (i, head) in self.net.heads.iter().enumerate() {
            let g = &mut grad.heads[i];
            let cache = &trace.heads[i];
            let mut dz = head
                .out
                .backward(cache.z.view(), d_logits_heads[i].view(), &mut g.out, true)
                .expect("dx requested");
            for (j, block) in head.blocks.iter().enumerate().rev() {
                dz = block.backward(&cache.blocks[j], dz, &mut g.blocks[j]);
            }
            d_mod += &dz;
        }

        let d_latent = match (&self.net.context, &trace.context) {
            (Some(enc), Some((cache, m))) => {
                let d_m = (&d_mod * &trace.latent).sum_axis(Axis(0));
                enc.backward(cache, &d_m, grad.context.as_mut().expect("matching structure"));
                d_mod * m
            }
            _ => d_mod,
        };

        let mut dx = d_latent;
        for (j, block) in self.net.trunk.iter().enumerate().rev() {
            dx = block.backward(&trace.trunk[j], dx, &mut grad.trunk[j]);
        }
        let d_s2d = self
            .net
            .reduce
            .backward(trace.s2d.view(), dx.view(), &mut grad.reduce, true)
            .expect("dx requested");
        let d_stem = depth_to_space(&d_s2d, trace.stem_grid);
        self.net.stem.backward(&trace.input, &d_stem, &mut grad.stem);
        Ok(())
    }
}

fn run_head(head: &GammaHead, x: Array2<f64>) -> (Array2<f64>, HeadCache) {
    let mut z = x;
    let mut blocks = Vec::with_capacity(head.blocks.len());
    for block in &head.blocks {
        let (y, c) = block.forward(z);
        blocks.push(c);
        z = y;
    }
    let mut cand = head.out.forward(z.view());
    cand.mapv_inplace(sigmoid);
    (cand, HeadCache { blocks, z })
}
