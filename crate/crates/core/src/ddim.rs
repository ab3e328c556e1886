//! Diffusion timetable, label encoding, forward noising and the
//! deterministic DDIM reverse step.
//!
//! Timesteps are 1-based: `t = 1..=T` index the schedule and `t = 0` means
//! the clean signal (`ᾱ_0 = 1`).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "beta",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::Range(format!("timestep {t} outside 0..={}", self.steps()))),
        }
    }

    /// Uniform draw from `1..=T`.
    pub fn sample_t(&self, rng: &mut Rng) -> usize {
        rng.gen_range(1..=self.steps())
    }

    /// `count` timesteps evenly spread over `1..=T`, descending, ending
    /// above 0. Used for strided sampling.
    pub fn strided(&self, count: usize) -> Vec<usize> {
        let t = self.steps();
        let count = count.clamp(1, t);
        let mut taus: Vec<usize> = (1..=count).map(|i| (i * t).div_ceil(count)).collect();
        taus.dedup();
        taus.reverse();
        taus
    }
}

/// Encodes integer labels as `[C, S]` with `+1` on the labelled class and
/// `-1` elsewhere.
pub fn onehot_encode(labels: &[u8], classes: usize) -> Result<Vec<f64>> {
    let s = labels.len();
    let mut out = alloc::vec![-1.0; classes * s];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Range(format!("label {l} at voxel {i} with {classes} classes")));
        }
        out[l * s + i] = 1.0;
    }
    Ok(out)
}

/// Channel argmax of a `[C, S]` field (ties go to the lower class).
pub fn onehot_decode(field: &[f64], classes: usize) -> Vec<u8> {
    let s = field.len() / classes.max(1);
    (0..s)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if field[c * s + i] > field[best * s + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyLabelField {
    pub values: Vec<f64>,
    pub t: usize,
    pub noise: Vec<f64>,
}

/// `Y_t = √ᾱ_t Y_0 + √(1−ᾱ_t) ε` with a fresh standard normal `ε`.
pub fn forward_noise(y0: &[f64], t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<NoisyLabelField> {
    let noise: Vec<f64> = (0..y0.len()).map(|_| StandardNormal.sample(rng)).collect();
    forward_noise_with(y0, t, schedule, noise)
}

/// [`forward_noise`] with a caller-supplied `ε`.
pub fn forward_noise_with(y0: &[f64], t: usize, schedule: &NoiseSchedule, noise: Vec<f64>) -> Result<NoisyLabelField> {
    if t == 0 {
        return Err(Error::Range(format!("noising needs t in 1..={}", schedule.steps())));
    }
    if noise.len() != y0.len() {
        return Err(Error::Shape(format!("noise of {} for field of {}", noise.len(), y0.len())));
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let values = y0.iter().zip(&noise).map(|(y, e)| sa * y + sn * e).collect();
    Ok(NoisyLabelField { values, t, noise })
}

/// `x_0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0_from_eps(x_t: &[f64], eps_pred: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x_t.len() != eps_pred.len() {
        return Err(Error::Shape(format!("x_t of {} with eps of {}", x_t.len(), eps_pred.len())));
    }
    let ab = schedule.alpha_bar_at(t)?;
    if ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar vanishes at t={t}")));
    }
    let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - sn * e) / sa).collect())
}

/// One deterministic step from `tau` to `tau_prev < tau`:
/// `x_prev = √ᾱ_prev x̂_0 + √(1−ᾱ_prev) (x_τ − √ᾱ_τ x̂_0) / √(1−ᾱ_τ)`.
pub fn ddim_reverse_step(
    x_tau: &[f64],
    x0_pred: &[f64],
    tau: usize,
    tau_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if tau_prev >= tau {
        return Err(Error::Range(format!("reverse step needs tau_prev < tau, got {tau_prev} >= {tau}")));
    }
    if x_tau.len() != x0_pred.len() {
        return Err(Error::Shape(format!("x_tau of {} with x0 of {}", x_tau.len(), x0_pred.len())));
    }
    let ab = schedule.alpha_bar_at(tau)?;
    let ab_prev = schedule.alpha_bar_at(tau_prev)?;
    if 1.0 - ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar is 1 at tau={tau}")));
    }
    let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let (pa, pn) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
    Ok(x_tau
        .iter()
        .zip(x0_pred)
        .map(|(x, x0)| pa * x0 + pn * (x - sa * x0) / sn)
        .collect())
}

/// Runs reverse steps along `taus` (descending, all ≥ 1) down to `t = 0`,
/// asking `predict_x0(x_τ, τ)` for the clean estimate at every step.
pub fn ddim_sample<F>(x_start: Vec<f64>, taus: &[usize], schedule: &NoiseSchedule, mut predict_x0: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    if taus.windows(2).any(|w| w[1] >= w[0]) || taus.last() == Some(&0) {
        return Err(Error::Range(format!("timesteps must strictly decrease and stay above 0: {:?}", taus)));
    }
    let mut x = x_start;
    for (i, &tau) in taus.iter().enumerate() {
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let x0 = predict_x0(&x, tau)?;
        x = ddim_reverse_step(&x, &x0, tau, prev, schedule)?;
    }
    Ok(x)
}
