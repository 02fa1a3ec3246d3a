//! Minimal layer library with explicit backward passes.
//!
//! Activations are `sites x channels` matrices in row-major spatial order.
//! Every layer's `forward` returns its output together with whatever the
//! matching `backward` needs; gradients accumulate into a same-shaped layer
//! value, so a zeroed clone of a model doubles as its gradient buffer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

/// Flat access to trainable tensors in a stable order.
pub trait Params {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.collect(&mut v);
        v.iter().map(|t| t.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        let mut v = Vec::new();
        self.collect_mut(&mut v);
        for t in v {
            t.fill(value);
        }
    }

    /// Copies all parameters into one vector.
    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.collect(&mut v);
        v.concat()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<(), usize> {
        let mut v = Vec::new();
        self.collect_mut(&mut v);
        let total: usize = v.iter().map(|t| t.len()).sum();
        if total != flat.len() {
            return Err(total);
        }
        let mut offset = 0;
        for t in v {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// `self += other`, element-wise over every parameter.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut src = Vec::new();
        other.collect(&mut src);
        let mut dst = Vec::new();
        self.collect_mut(&mut dst);
        for (d, s) in dst.into_iter().zip(src) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous parameter")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous parameter")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous parameter")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous parameter")
}

/// Uniform He initialization.
pub fn he_uniform<R: Rng>(rng: &mut R, fan_in: usize, shape: (usize, usize), gain: f64) -> Array2<f64> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

// ---------------------------------------------------------------------------

/// Fully connected / point-wise convolution: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Dense {
            w: he_uniform(rng, fan_in, (fan_in, fan_out), gain),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Dense,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.w.t()))
    }
}

impl Params for Dense {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(slice2(&self.w));
        out.push(slice1(&self.b));
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice2_mut(&mut self.w));
        out.push(slice1_mut(&mut self.b));
    }
}

// ---------------------------------------------------------------------------

/// Per-site normalization over channels; keeps every site independent.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm { gamma: Array1::ones(width), beta: Array1::zeros(width) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / c;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let c = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let mut dx = dy * &self.gamma;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut d, xh, &s| {
                let mean_d = d.sum() / c;
                let mean_dx = d.dot(&xh) / c;
                Zip::from(&mut d).and(&xh).for_each(|dv, &h| {
                    *dv = s * (*dv - mean_d - h * mean_dx);
                });
            });
        dx
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(slice1(&self.gamma));
        out.push(slice1(&self.beta));
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice1_mut(&mut self.gamma));
        out.push(slice1_mut(&mut self.beta));
    }
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// `d *= [pre > 0]`
fn relu_backward(pre: &Array2<f64>, d: &mut Array2<f64>) {
    Zip::from(d).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

// ---------------------------------------------------------------------------

/// Point-wise residual block: `y = x + relu(norm(x W + b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub dense: Dense,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    x: Array2<f64>,
    norm: LayerNormCache,
    pre: Array2<f64>,
}

impl ResBlock {
    pub fn new<R: Rng>(rng: &mut R, width: usize) -> Self {
        ResBlock { dense: Dense::new(rng, width, width, 1.0), norm: LayerNorm::new(width) }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, ResBlockCache) {
        let h = self.dense.forward(x.view());
        let (pre, norm) = self.norm.forward(&h);
        let mut a = pre.clone();
        relu_inplace(&mut a);
        a += &x;
        (a, ResBlockCache { x, norm, pre })
    }

    pub fn backward(&self, cache: &ResBlockCache, dy: Array2<f64>, grad: &mut ResBlock) -> Array2<f64> {
        let mut dpre = dy.clone();
        relu_backward(&cache.pre, &mut dpre);
        let dh = self.norm.backward(&cache.norm, &dpre, &mut grad.norm);
        let dx = self
            .dense
            .backward(cache.x.view(), dh.view(), &mut grad.dense, true)
            .expect("dx requested");
        dx + dy
    }
}

impl Params for ResBlock {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.dense.collect(out);
        self.norm.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.dense.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------

/// Spatial extent of a `sites x channels` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn sites(&self) -> usize {
        self.h * self.w
    }
}

/// Square 2-D convolution with zero padding, computed through im2col.
/// Weight rows are ordered `(ky, kx, c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dense: Dense,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_grid: Grid,
}

impl Conv2d {
    pub fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = kernel * kernel * c_in;
        Conv2d { kernel, stride, pad, dense: Dense::new(rng, fan_in, c_out, 1.0) }
    }

    fn c_in(&self) -> usize {
        self.dense.in_dim() / (self.kernel * self.kernel)
    }

    pub fn out_grid(&self, g: Grid) -> Grid {
        Grid {
            h: (g.h + 2 * self.pad - self.kernel) / self.stride + 1,
            w: (g.w + 2 * self.pad - self.kernel) / self.stride + 1,
        }
    }

    /// Source site for output `(oy, ox)` and tap `(ky, kx)`, if inside the input.
    #[inline]
    fn source(&self, g: Grid, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w)
            .then(|| iy as usize * g.w + ix as usize)
    }

    pub fn forward(&self, x: &Array2<f64>, g: Grid) -> (Array2<f64>, Grid, Conv2dCache) {
        let c_in = self.c_in();
        let og = self.out_grid(g);
        let k = self.kernel;
        let mut cols = Array2::<f64>::zeros((og.sites(), k * k * c_in));
        for oy in 0..og.h {
            for ox in 0..og.w {
                let mut row = cols.row_mut(oy * og.w + ox);
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(src) = self.source(g, oy, ox, ky, kx) {
                            let off = (ky * k + kx) * c_in;
                            row.slice_mut(s![off..off + c_in]).assign(&x.row(src));
                        }
                    }
                }
            }
        }
        let y = self.dense.forward(cols.view());
        (y, og, Conv2dCache { cols, in_grid: g })
    }

    pub fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Array2<f64>,
        grad: &mut Conv2d,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let dcols = self.dense.backward(cache.cols.view(), dy.view(), &mut grad.dense, want_dx)?;
        let g = cache.in_grid;
        let og = self.out_grid(g);
        let c_in = self.c_in();
        let k = self.kernel;
        let mut dx = Array2::<f64>::zeros((g.sites(), c_in));
        for oy in 0..og.h {
            for ox in 0..og.w {
                let row = dcols.row(oy * og.w + ox);
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(src) = self.source(g, oy, ox, ky, kx) {
                            let off = (ky * k + kx) * c_in;
                            let mut d = dx.row_mut(src);
                            d += &row.slice(s![off..off + c_in]);
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

impl Params for Conv2d {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.dense.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.dense.collect_mut(out);
    }
}

/// `y = relu(norm(conv(x)))`, optionally with an identity skip when shapes match.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    conv: Conv2dCache,
    norm: LayerNormCache,
    pre: Array2<f64>,
}

impl ConvBlock {
    pub fn downsample<R: Rng>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        ConvBlock { conv: Conv2d::new(rng, c_in, c_out, 3, 2, 1), norm: LayerNorm::new(c_out), residual: false }
    }

    pub fn residual<R: Rng>(rng: &mut R, width: usize) -> Self {
        ConvBlock { conv: Conv2d::new(rng, width, width, 3, 1, 1), norm: LayerNorm::new(width), residual: true }
    }

    pub fn forward(&self, x: &Array2<f64>, g: Grid) -> (Array2<f64>, Grid, ConvBlockCache) {
        let (h, og, conv) = self.conv.forward(x, g);
        let (pre, norm) = self.norm.forward(&h);
        let mut y = pre.clone();
        relu_inplace(&mut y);
        if self.residual {
            y += x;
        }
        (y, og, ConvBlockCache { conv, norm, pre })
    }

    pub fn backward(
        &self,
        cache: &ConvBlockCache,
        dy: &Array2<f64>,
        grad: &mut ConvBlock,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let mut dpre = dy.clone();
        relu_backward(&cache.pre, &mut dpre);
        let dh = self.norm.backward(&cache.norm, &dpre, &mut grad.norm);
        let dx = self.conv.backward(&cache.conv, &dh, &mut grad.conv, want_dx || self.residual);
        match (dx, self.residual) {
            (Some(dx), true) => Some(dx + dy),
            (dx, false) => dx.filter(|_| want_dx),
            (None, true) => unreachable!("residual blocks always propagate"),
        }
    }
}

impl Params for ConvBlock {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.conv.collect(out);
        self.norm.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.conv.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

/// Back-propagates through softmax given its output `p` and `dL/dp`.
pub fn softmax_backward(p: &Array1<f64>, dp: &Array1<f64>) -> Array1<f64> {
    let dot = p.dot(dp);
    p * &(dp - dot)
}

impl<T: Params> Params for Vec<T> {
    fn collect<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        for t in self {
            t.collect(out);
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for t in self {
            t.collect_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar probe loss `sum(y * probe)` so that `dL/dy = probe`.
    fn probe_loss(y: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (y * probe).sum()
    }

    fn check_close(analytic: f64, numeric: f64, tol: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / denom < tol,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn res_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResBlock::new(&mut rng, 6);
        let x = rand_mat(&mut rng, 5, 6);
        let probe = rand_mat(&mut rng, 5, 6);
        let (y, cache) = block.forward(x.clone());
        let mut grad = block.clone();
        grad.fill(0.0);
        let dx = block.backward(&cache, probe.clone(), &mut grad);
        let h = 1e-6;
        for &(r, c) in &[(0, 0), (2, 3), (4, 5)] {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let num = (probe_loss(&block.forward(xp).0, &probe) - probe_loss(&block.forward(xm).0, &probe)) / (2.0 * h);
            check_close(dx[[r, c]], num, 1e-5);
        }
        for &(r, c) in &[(0, 1), (3, 2)] {
            let mut bp = block.clone();
            bp.dense.w[[r, c]] += h;
            let mut bm = block.clone();
            bm.dense.w[[r, c]] -= h;
            let num = (probe_loss(&bp.forward(x.clone()).0, &probe) - probe_loss(&bm.forward(x.clone()).0, &probe))
                / (2.0 * h);
            check_close(grad.dense.w[[r, c]], num, 1e-5);
        }
        let _ = y;
    }

    #[test]
    fn conv_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for block in [ConvBlock::downsample(&mut rng, 2, 3), ConvBlock::residual(&mut rng, 3)] {
            let c_in = block.conv.c_in();
            let g = Grid { h: 5, w: 4 };
            let x = rand_mat(&mut rng, g.sites(), c_in);
            let (y, og, cache) = block.forward(&x, g);
            let probe = rand_mat(&mut rng, og.sites(), y.ncols());
            let mut grad = block.clone();
            grad.fill(0.0);
            let dx = block.backward(&cache, &probe, &mut grad, true).unwrap();
            let h = 1e-6;
            let loss = |b: &ConvBlock, x: &Array2<f64>| probe_loss(&b.forward(x, g).0, &probe);
            for &(r, c) in &[(0, 0), (7, 1), (19, c_in - 1)] {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                check_close(dx[[r, c]], (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * h), 1e-5);
            }
            for &(r, c) in &[(0, 0), (5, 2)] {
                let mut bp = block.clone();
                bp.conv.dense.w[[r, c]] += h;
                let mut bm = block.clone();
                bm.conv.dense.w[[r, c]] -= h;
                check_close(grad.conv.dense.w[[r, c]], (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h), 1e-5);
            }
        }
    }

    #[test]
    fn conv_output_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut rng, 3, 4, 3, 2, 1);
        assert_eq!(conv.out_grid(Grid { h: 128, w: 128 }), Grid { h: 64, w: 64 });
        assert_eq!(conv.out_grid(Grid { h: 8, w: 8 }), Grid { h: 4, w: 4 });
    }

    #[test]
    fn softmax_sums_to_one_and_backward_matches() {
        let logits = Array1::from(vec![0.3, -1.2, 2.0, 0.0]);
        let p = softmax(&logits);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
        let dp = Array1::from(vec![0.5, -0.1, 0.2, 1.0]);
        let g = softmax_backward(&p, &dp);
        let h = 1e-6;
        for i in 0..4 {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let num = (softmax(&lp).dot(&dp) - softmax(&lm).dot(&dp)) / (2.0 * h);
            check_close(g[i], num, 1e-6);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = vec![ResBlock::new(&mut rng, 3), ResBlock::new(&mut rng, 3)];
        let flat = a.flatten();
        assert_eq!(flat.len(), a.param_count());
        let mut b = a.clone();
        b.fill(0.0);
        b.load_flat(&flat).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.load_flat(&flat[1..]), Err(flat.len()));
    }
}
