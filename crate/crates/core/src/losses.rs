//! Dice and cross-entropy terms, their weighted combinations, and the
//! Gaussian warmup weight.
//!
//! Probability and target tensors are `[N, C, ...]`. Targets are always
//! treated as constants: no gradient is produced for them, which is how
//! pseudo-label detachment is enforced.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::{Error, Result, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the DS cross-pseudo term in the DS total.
    pub mu1: f64,
    /// Weight of the CS unsupervised term in the CS total.
    pub mu2: f64,
    /// Supervised CE weights are `beta*_scale · λ(t)`.
    pub beta1_scale: f64,
    pub beta2_scale: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the contrastive term inside the CS unsupervised loss.
    pub eta: f64,
    /// Warmup horizon in epochs.
    pub t_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu1: 1.0,
            mu2: 1.0,
            beta1_scale: 0.1,
            beta2_scale: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            eta: 0.5,
            t_max: 300.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("beta1_scale", self.beta1_scale),
            ("beta2_scale", self.beta2_scale),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("eta", self.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be a finite nonnegative number, got {v}")));
            }
        }
        if !(self.t_max >= 1.0 && self.t_max.is_finite()) {
            return Err(Error::config("t_max", format!("must be at least 1, got {}", self.t_max)));
        }
        Ok(())
    }

    /// Supervised CE weights `(β1, β2)` at epoch `t`.
    pub fn betas(&self, t: f64) -> Result<(f64, f64)> {
        let l = warmup_lambda(t, self.t_max)?;
        Ok((self.beta1_scale * l, self.beta2_scale * l))
    }
}

/// `λ(t) = 2·exp(−5 (1 − t/t_max)²)`.
pub fn warmup_lambda(t: f64, t_max: f64) -> Result<f64> {
    if t_max <= 0.0 {
        return Err(Error::config("t_max", "must be positive"));
    }
    if !(0.0..=t_max).contains(&t) {
        return Err(Error::Range(format!("warmup at t={t} outside [0, {t_max}]")));
    }
    let r = 1.0 - t / t_max;
    Ok(2.0 * libm::exp(-5.0 * r * r))
}

fn check_pair(p: &Tensor, y: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    if p.shape() != y.shape() || p.shape().len() < 2 {
        return Err(Error::Shape(format!("{op}: prediction {:?} vs target {:?}", p.shape(), y.shape())));
    }
    Ok((p.shape()[0], p.shape()[1], p.trailing(2)))
}

/// Per-class `(Σ p·y, Σ p, Σ y)` over batch and space.
fn class_sums(p: &Tensor, y: &Tensor, n: usize, c: usize, s: usize) -> Vec<(f64, f64, f64)> {
    let mut sums = vec![(0.0, 0.0, 0.0); c];
    for b in 0..n {
        for (k, acc) in sums.iter_mut().enumerate() {
            let off = (b * c + k) * s;
            for (pv, yv) in p.data()[off..off + s].iter().zip(&y.data()[off..off + s]) {
                acc.0 += pv * yv;
                acc.1 += pv;
                acc.2 += yv;
            }
        }
    }
    sums
}

/// `mean_c [1 − (2 Σ p y + s) / (Σ p + Σ y + s)]`, each sum over batch and
/// space for class `c`.
pub fn dice_loss(p: &Tensor, y: &Tensor, smooth: f64) -> Result<f64> {
    let (n, c, s) = check_pair(p, y, "dice")?;
    let sums = class_sums(p, y, n, c, s);
    Ok(sums.iter().map(|&(i, ps, ys)| 1.0 - (2.0 * i + smooth) / (ps + ys + smooth)).sum::<f64>() / c as f64)
}

/// Mean over voxels of `−Σ_c y log max(p, eps)`.
pub fn ce_loss(p: &Tensor, y: &Tensor, eps: f64) -> Result<f64> {
    let (n, _, s) = check_pair(p, y, "ce")?;
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .filter(|(_, &yv)| yv != 0.0)
        .map(|(&pv, &yv)| -yv * libm::log(pv.max(eps)))
        .sum();
    Ok(total / (n * s).max(1) as f64)
}

/// Differentiable [`dice_loss`] with respect to `p`.
pub fn dice_loss_var(g: &mut Graph, p: Var, y: Var, smooth: f64) -> Result<Var> {
    let value = dice_loss(g.value(p), g.value(y), smooth)?;
    let (n, c, s) = check_pair(g.value(p), g.value(y), "dice")?;
    Ok(g.custom(Tensor::scalar(value), &[p, y], move |inp, _, gout, _| {
        let sums = class_sums(inp[0], inp[1], n, c, s);
        let scale = gout.item() / c as f64;
        let mut gp = Tensor::zeros(inp[0].shape());
        let yd = inp[1].data();
        for b in 0..n {
            for (k, &(i, ps, ys)) in sums.iter().enumerate() {
                let num = 2.0 * i + smooth;
                let den = ps + ys + smooth;
                let off = (b * c + k) * s;
                for j in off..off + s {
                    gp.data_mut()[j] = -scale * (2.0 * yd[j] * den - num) / (den * den);
                }
            }
        }
        vec![Some(gp), None]
    }))
}

/// Differentiable [`ce_loss`] with respect to `p`.
pub fn ce_loss_var(g: &mut Graph, p: Var, y: Var, eps: f64) -> Result<Var> {
    let value = ce_loss(g.value(p), g.value(y), eps)?;
    let (n, _, s) = check_pair(g.value(p), g.value(y), "ce")?;
    let voxels = (n * s).max(1) as f64;
    Ok(g.custom(Tensor::scalar(value), &[p, y], move |inp, _, gout, _| {
        let k = gout.item() / voxels;
        let gp = inp[0].zip_map(inp[1], |pv, yv| if pv > eps { -k * yv / pv } else { 0.0 });
        vec![Some(gp), None]
    }))
}

/// `Dice(p, y) + ce_weight · CE(p, y)`.
pub fn dice_ce(g: &mut Graph, p: Var, y: Var, ce_weight: f64) -> Result<Var> {
    let d = dice_loss_var(g, p, y, DICE_SMOOTH)?;
    if ce_weight == 0.0 {
        return Ok(d);
    }
    let e = ce_loss_var(g, p, y, CE_EPS)?;
    let e = g.scale(e, ce_weight);
    g.add(d, e)
}

/// Hard argmax one-hot (`0/1`) of `[N, C, ...]` probabilities. The result
/// is a plain tensor, so any loss built on it is detached from `probs`.
pub fn pseudo_onehot(probs: &Tensor) -> Tensor {
    let (n, c, s) = (probs.shape()[0], probs.shape()[1], probs.trailing(2));
    let mut out = Tensor::zeros(probs.shape());
    let pd = probs.data();
    for b in 0..n {
        for j in 0..s {
            let mut best = 0;
            for k in 1..c {
                if pd[(b * c + k) * s + j] > pd[(b * c + best) * s + j] {
                    best = k;
                }
            }
            out.data_mut()[(b * c + best) * s + j] = 1.0;
        }
    }
    out
}

/// `(L^d_s, L^c_s)` on labelled data at epoch `t`.
pub fn supervised_losses(
    g: &mut Graph,
    ds_probs: Var,
    cs_probs: Var,
    target: Var,
    weights: &LossWeights,
    t: f64,
) -> Result<(Var, Var)> {
    let (b1, b2) = weights.betas(t)?;
    Ok((dice_ce(g, ds_probs, target, b1)?, dice_ce(g, cs_probs, target, b2)?))
}

/// `(L^d_p, L^c_p)`: DS learns from CS pseudo-labels and vice versa.
pub fn cross_pseudo_losses(
    g: &mut Graph,
    ds_probs: Var,
    cs_pseudo: Var,
    cs_probs: Var,
    ds_pseudo: Var,
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    Ok((
        dice_ce(g, ds_probs, cs_pseudo, weights.lambda1)?,
        dice_ce(g, cs_probs, ds_pseudo, weights.lambda2)?,
    ))
}

/// Graph handles for every reported term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ds_sup: Var,
    pub cs_sup: Var,
    pub ds_pseudo: Var,
    pub cs_pseudo: Var,
    pub contrastive: Var,
    pub cs_unsup: Var,
    pub ds_total: Var,
    pub cs_total: Var,
}

/// Builds `L^c_u = L^c_p + η L_cl`, `L^d = L^d_s + μ1 L^d_p`,
/// `L^c = L^c_s + μ2 L^c_u`.
pub fn total_losses(
    g: &mut Graph,
    ds_sup: Var,
    cs_sup: Var,
    ds_pseudo: Var,
    cs_pseudo: Var,
    contrastive: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    let cl = g.scale(contrastive, weights.eta);
    let cs_unsup = g.add(cs_pseudo, cl)?;
    let dp = g.scale(ds_pseudo, weights.mu1);
    let ds_total = g.add(ds_sup, dp)?;
    let cu = g.scale(cs_unsup, weights.mu2);
    let cs_total = g.add(cs_sup, cu)?;
    Ok(LossVars { ds_sup, cs_sup, ds_pseudo, cs_pseudo, contrastive, cs_unsup, ds_total, cs_total })
}

/// Scalar values of one step's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ds_sup: f64,
    pub cs_sup: f64,
    pub ds_pseudo: f64,
    pub cs_pseudo: f64,
    pub contrastive: f64,
    pub cs_unsup: f64,
    pub ds_total: f64,
    pub cs_total: f64,
}

impl LossReport {
    pub const NAMES: [&'static str; 8] =
        ["ds_sup", "cs_sup", "ds_pseudo", "cs_pseudo", "contrastive", "cs_unsup", "ds_total", "cs_total"];

    pub fn read(g: &Graph, v: &LossVars) -> Self {
        let f = |x: Var| g.value(x).item();
        LossReport {
            ds_sup: f(v.ds_sup),
            cs_sup: f(v.cs_sup),
            ds_pseudo: f(v.ds_pseudo),
            cs_pseudo: f(v.cs_pseudo),
            contrastive: f(v.contrastive),
            cs_unsup: f(v.cs_unsup),
            ds_total: f(v.ds_total),
            cs_total: f(v.cs_total),
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.ds_sup,
            self.cs_sup,
            self.ds_pseudo,
            self.cs_pseudo,
            self.contrastive,
            self.cs_unsup,
            self.ds_total,
            self.cs_total,
        ]
    }

    /// Largest violation of the defining combinations.
    pub fn composition_error(&self, w: &LossWeights) -> f64 {
        let cu = self.cs_unsup - (self.cs_pseudo + w.eta * self.contrastive);
        let d = self.ds_total - (self.ds_sup + w.mu1 * self.ds_pseudo);
        let c = self.cs_total - (self.cs_sup + w.mu2 * self.cs_unsup);
        cu.abs().max(d.abs()).max(c.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::check_grad;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_disjoint_dice() {
        let y = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(dice_loss(&y, &y, DICE_SMOOTH).unwrap() <= 1e-6);
        let p = t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(dice_loss(&p, &y, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn uniform_ce_is_log_c() {
        let p = Tensor::full(&[1, 3, 4], 1.0 / 3.0);
        let mut y = Tensor::zeros(&[1, 3, 4]);
        y.data_mut()[..4].fill(1.0);
        assert!((ce_loss(&p, &y, CE_EPS).unwrap() - libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_and_ce_gradients() {
        let p = t(&[2, 2, 3], &[0.2, 0.7, 0.5, 0.9, 0.1, 0.4, 0.8, 0.3, 0.5, 0.1, 0.9, 0.6]);
        let y = t(&[2, 2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        check_grad(&[p], |g, v| {
            let yv = g.constant(y.clone());
            dice_ce(g, v[0], yv, 0.7).unwrap()
        }, 1e-6, 1e-6);
    }

    #[test]
    fn warmup_endpoints() {
        assert!((warmup_lambda(300.0, 300.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((warmup_lambda(0.0, 300.0).unwrap() - 2.0 * libm::exp(-5.0)).abs() < 1e-12);
        assert!(warmup_lambda(1.0, 0.0).is_err());
    }

    #[test]
    fn pseudo_labels_are_hard_argmax() {
        let p = t(&[1, 2, 3], &[0.6, 0.2, 0.5, 0.4, 0.8, 0.5]);
        assert_eq!(pseudo_onehot(&p).data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
