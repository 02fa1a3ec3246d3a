//! Reconstruction losses and the multi-head training objective.

use ndarray::{Array, ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::gamma_value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
    /// Hard-log loss, `-mean(ln(1 - |error| + eps))`.
    Hln,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "hln" => Ok(LossKind::Hln),
            other => Err(Error::Parameter(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-6
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Hln, epsilon: default_epsilon() }
    }
}

fn check_shapes<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty tensors".into()));
    }
    Ok(())
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("loss epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Per-element loss and its derivative with respect to the prediction.
    #[inline]
    fn element(&self, diff: f64) -> (f64, f64) {
        match self.kind {
            LossKind::L1 => (diff.abs(), sign(diff)),
            LossKind::L2 => (diff * diff, 2.0 * diff),
            LossKind::Hln => {
                let a = diff.abs();
                if a >= 1.0 {
                    (-(self.epsilon).ln(), 0.0)
                } else {
                    let inner = 1.0 - a + self.epsilon;
                    (-inner.ln(), sign(diff) / inner)
                }
            }
        }
    }

    pub fn value<S1, S2, D>(&self, pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<f64>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        check_shapes(pred, target)?;
        let mut total = 0.0;
        Zip::from(pred).and(target).for_each(|&p, &t| total += self.element(p - t).0);
        Ok(total / pred.len() as f64)
    }

    pub fn value_and_grad<S1, S2, D>(
        &self,
        pred: &ArrayBase<S1, D>,
        target: &ArrayBase<S2, D>,
    ) -> Result<(f64, Array<f64, D>)>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        check_shapes(pred, target)?;
        let n = pred.len() as f64;
        let mut total = 0.0;
        let grad = Zip::from(pred).and(target).map_collect(|&p, &t| {
            let (l, g) = self.element(p - t);
            total += l;
            g / n
        });
        Ok((total / n, grad))
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn hard_log_loss<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, epsilon: f64) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let cfg = LossConfig { kind: LossKind::Hln, epsilon };
    cfg.validate().map_err(|e| Error::Parameter(e.to_string()))?;
    cfg.value(pred, target)
}

pub fn l1_loss<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    LossConfig { kind: LossKind::L1, epsilon: 1e-6 }.value(pred, target)
}

pub fn l2_loss<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    LossConfig { kind: LossKind::L2, epsilon: 1e-6 }.value(pred, target)
}

/// Gamma-space targets `target^gamma_i`, one per head.
pub fn make_gamma_targets<S, D>(raw_target: &ArrayBase<S, D>, gammas: &[f64]) -> Vec<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    gammas
        .iter()
        .map(|&g| {
            if g == 1.0 {
                raw_target.to_owned()
            } else {
                raw_target.mapv(|x| gamma_value(x, g))
            }
        })
        .collect()
}

/// Final-output term plus one unweighted term per gamma candidate.
pub fn composite_loss<D: Dimension>(
    cfg: &LossConfig,
    final_pred: &Array<f64, D>,
    final_target: &Array<f64, D>,
    candidates: &[Array<f64, D>],
    gamma_targets: &[Array<f64, D>],
) -> Result<f64> {
    if candidates.len() != gamma_targets.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} gamma targets",
            candidates.len(),
            gamma_targets.len()
        )));
    }
    let mut total = cfg.value(final_pred, final_target)?;
    for (c, t) in candidates.iter().zip(gamma_targets) {
        total += cfg.value(c, t)?;
    }
    Ok(total)
}

/// Gradients of [`composite_loss`] with respect to the final output and each candidate.
#[derive(Debug, Clone)]
pub struct CompositeGrad<D: Dimension> {
    pub loss: f64,
    pub d_final: Array<f64, D>,
    pub d_candidates: Vec<Array<f64, D>>,
}

pub fn composite_loss_grad<D: Dimension>(
    cfg: &LossConfig,
    final_pred: &Array<f64, D>,
    final_target: &Array<f64, D>,
    candidates: &[Array<f64, D>],
    gamma_targets: &[Array<f64, D>],
) -> Result<CompositeGrad<D>> {
    if candidates.len() != gamma_targets.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} gamma targets",
            candidates.len(),
            gamma_targets.len()
        )));
    }
    let (mut loss, d_final) = cfg.value_and_grad(final_pred, final_target)?;
    let mut d_candidates = Vec::with_capacity(candidates.len());
    for (c, t) in candidates.iter().zip(gamma_targets) {
        let (l, g) = cfg.value_and_grad(c, t)?;
        loss += l;
        d_candidates.push(g);
    }
    Ok(CompositeGrad { loss, d_final, d_candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-6;

    #[test]
    fn zero_error_gives_small_negative_constant() {
        let a = Array3::from_elem((2, 2, 4), 0.3);
        let l = hard_log_loss(&a, &a, EPS).unwrap();
        assert!((l + (1.0 + EPS).ln()).abs() < 1e-15);
        assert!(l < 0.0 && l > -2e-6);
    }

    #[test]
    fn half_error_value() {
        let p = Array1::from_elem(8, 0.75);
        let t = Array1::from_elem(8, 0.25);
        let l = hard_log_loss(&p, &t, EPS).unwrap();
        assert!((l - -(0.5f64 + 1e-6).ln()).abs() < 1e-12);
        assert!((l - 0.693145).abs() < 1e-5);
    }

    #[test]
    fn small_errors_agree_with_l1() {
        // -ln(1 - d + eps) = d - eps + d^2/2 + O(d^3): relative gap to L1 is
        // about d/2 + eps/d, so the 2d bound needs eps << d^2.
        for delta in [1e-5, 1e-4, 5e-4, 1e-3] {
            let p = Array1::from_elem(16, 0.5 + delta);
            let t = Array1::from_elem(16, 0.5);
            let l1 = l1_loss(&p, &t).unwrap();
            let tight = hard_log_loss(&p, &t, 1e-12).unwrap();
            assert!((tight - l1).abs() / l1 <= 2.0 * delta, "delta {delta}");
            let default = hard_log_loss(&p, &t, EPS).unwrap();
            assert!((default - l1).abs() / l1 <= delta + EPS / delta, "delta {delta}");
        }
    }

    #[test]
    fn fully_wrong_element_is_bounded() {
        let l = hard_log_loss(&arr1(&[1.0]), &arr1(&[0.0]), EPS).unwrap();
        assert!((l - 13.8155).abs() < 1e-3);
        assert!(l.is_finite());
    }

    #[test]
    fn shape_and_parameter_errors() {
        let a = Array1::zeros(3);
        let b = Array1::zeros(4);
        assert!(matches!(hard_log_loss(&a, &b, EPS), Err(Error::Shape(_))));
        assert!(matches!(hard_log_loss(&a, &a, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn gamma_targets() {
        let t = arr1(&[0.0, 0.25, 1.0]);
        let gammas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let targets = make_gamma_targets(&t, &gammas);
        assert_eq!(targets[4][1], 0.5);
        assert_eq!(targets[9], t);
        for tg in &targets {
            assert_eq!(tg[0], 0.0);
            assert_eq!(tg[2], 1.0);
        }
        let sq = make_gamma_targets(&arr1(&[0.25]), &[0.5]);
        assert_eq!(sq[0][0], 0.5);
    }

    #[test]
    fn gamma_targets_non_increasing_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Array1::from_shape_fn(200, |_| rng.random_range(1e-6..1.0));
        let gammas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let targets = make_gamma_targets(&t, &gammas);
        for w in targets.windows(2) {
            assert!(w[0].iter().zip(w[1].iter()).all(|(a, b)| a >= b));
        }
    }

    /// Independent loop implementation of the composite objective.
    fn composite_oracle(kind: LossKind, fp: &[f64], ft: &[f64], cands: &[Vec<f64>], gammas: &[f64]) -> f64 {
        let elem = |p: f64, t: f64| -> f64 {
            let d = p - t;
            match kind {
                LossKind::L1 => d.abs(),
                LossKind::L2 => d * d,
                LossKind::Hln => -(1.0 - d.abs().min(1.0) + EPS).ln(),
            }
        };
        let mean = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(&a, &b)| elem(a, b)).sum::<f64>() / p.len() as f64;
        let mut total = mean(fp, ft);
        for (c, &g) in cands.iter().zip(gammas) {
            let tg: Vec<f64> = ft.iter().map(|&x| if x == 0.0 { 0.0 } else { x.powf(g) }).collect();
            total += mean(c, &tg);
        }
        total
    }

    #[test]
    fn composite_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gammas = [0.2, 0.5, 1.0];
        for kind in [LossKind::L1, LossKind::L2, LossKind::Hln] {
            let cfg = LossConfig { kind, epsilon: EPS };
            let fp = Array3::from_shape_fn((3, 3, 4), |_| rng.random::<f64>());
            let ft = Array3::from_shape_fn((3, 3, 4), |_| rng.random::<f64>());
            let cands: Vec<Array3<f64>> =
                gammas.iter().map(|_| Array3::from_shape_fn((3, 3, 4), |_| rng.random::<f64>())).collect();
            let targets = make_gamma_targets(&ft, &gammas);
            let got = composite_loss(&cfg, &fp, &ft, &cands, &targets).unwrap();
            let flat: Vec<Vec<f64>> = cands.iter().map(|c| c.iter().copied().collect()).collect();
            let expect = composite_oracle(
                kind,
                &fp.iter().copied().collect::<Vec<_>>(),
                &ft.iter().copied().collect::<Vec<_>>(),
                &flat,
                &gammas,
            );
            assert!((got - expect).abs() < 1e-10, "{kind:?}: {got} vs {expect}");
        }
    }

    #[test]
    fn composite_degenerate_cases() {
        let cfg = LossConfig::default();
        let t = Array3::from_elem((2, 2, 4), 0.4);
        let targets = make_gamma_targets(&t, &[0.1, 0.5, 1.0]);
        let perfect = composite_loss(&cfg, &t, &t, &targets, &targets).unwrap();
        assert!((perfect + 4.0 * (1.0 + EPS).ln()).abs() < 1e-14);

        let p = Array3::from_elem((2, 2, 4), 0.6);
        let one = make_gamma_targets(&t, &[1.0]);
        let total = composite_loss(&cfg, &p, &t, &[p.clone()], &one).unwrap();
        assert!((total - 2.0 * cfg.value(&p, &t).unwrap()).abs() < 1e-15);

        let err = composite_loss(&cfg, &p, &t, &[p.clone()], &targets);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [LossKind::L1, LossKind::L2, LossKind::Hln] {
            let cfg = LossConfig { kind, epsilon: EPS };
            let p = Array1::from_shape_fn(12, |_| rng.random_range(0.05..0.95));
            let t = Array1::from_shape_fn(12, |_| rng.random_range(0.05..0.95));
            let (_, g) = cfg.value_and_grad(&p, &t).unwrap();
            let h = 1e-7;
            for i in 0..12 {
                let mut pp = p.clone();
                pp[i] += h;
                let mut pm = p.clone();
                pm[i] -= h;
                let num = (cfg.value(&pp, &t).unwrap() - cfg.value(&pm, &t).unwrap()) / (2.0 * h);
                assert!((g[i] - num).abs() / num.abs().max(1e-12) < 1e-4, "{kind:?} {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn hln_strictly_increasing_in_error(t in 0.0f64..0.5, a in 0.0f64..0.5, b in 0.0f64..0.5) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let l_lo = hard_log_loss(&arr1(&[t + lo]), &arr1(&[t]), EPS).unwrap();
            let l_hi = hard_log_loss(&arr1(&[t + hi]), &arr1(&[t]), EPS).unwrap();
            prop_assert!(l_hi > l_lo);
        }

        #[test]
        fn hln_minimum_at_perfect_reconstruction(p in 0.0f64..1.0, t in 0.0f64..1.0) {
            let l = hard_log_loss(&arr1(&[p]), &arr1(&[t]), EPS).unwrap();
            let floor = -(1.0 + EPS).ln();
            if p == t { prop_assert_eq!(l, floor); } else { prop_assert!(l > floor); }
        }
    }
}
