//! Noise schedule and the closed-form label-space diffusion arithmetic.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the most. The forward process is prior-shifted:
//!
//! ```text
//! y_t = sqrt(ab_t) * y_0 + sqrt(1 - ab_t) * eps + (1 - sqrt(ab_t)) * mu
//! ```
//!
//! so the chain drifts toward the conditioning prior `mu` instead of zero.
//! All schedule quantities are kept in `f64`; label vectors are small, so the
//! label-space arithmetic stays in `f64` and is cast at network boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// A K-dimensional class-response vector (ground truth, noisy state, or estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector(pub Vec<f64>);

impl LabelVector {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::Range(format!("class {class} outside 0..{k}")));
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// How the global and local priors merge into the single shift vector `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorCombine {
    /// `(y_g + y_l) / 2`, consistent with the terminal distribution `N(mu, I)`.
    #[default]
    Mean,
    /// `y_g + y_l`, the literal dual-prior shift of the forward process.
    Sum,
}

pub fn combine_priors(global: &[f64], local: &[f64], mode: PriorCombine) -> Result<LabelVector> {
    ensure_len("local prior", local.len(), global.len())?;
    let scale = match mode {
        PriorCombine::Mean => 0.5,
        PriorCombine::Sum => 1.0,
    };
    Ok(LabelVector(
        global.iter().zip(local).map(|(g, l)| scale * (g + l)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of the prior-shifted Gaussian posterior `q(y_s | y_t, y_0)`.
///
/// Mean is `gamma0 * y0 + gamma1 * y_t + gamma2 * mu`; variance `sigma_sq`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma_sq: f64,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        let betas = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Posterior for the adjacent step `t -> t - 1`, valid for `2 <= t <= T`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        if t < 2 {
            return Err(Error::Range(format!(
                "posterior needs t >= 2 (t = 1 is the terminal step), got {t}"
            )));
        }
        self.posterior_coefficients_between(t, t - 1)
    }

    /// Posterior for a jump `t -> s` with `1 <= s < t <= T`, treating the
    /// skipped steps as one transition with `alpha = ab_t / ab_s`.
    pub fn posterior_coefficients_between(&self, t: usize, s: usize) -> Result<PosteriorCoefficients> {
        self.check_t(t)?;
        self.check_t(s)?;
        if s >= t {
            return Err(Error::Range(format!("posterior jump needs s < t, got t={t} s={s}")));
        }
        let ab_t = self.alpha_bar(t);
        let ab_s = self.alpha_bar(s);
        let alpha_ts = ab_t / ab_s;
        let beta_ts = 1.0 - alpha_ts;
        let denom = 1.0 - ab_t;
        Ok(PosteriorCoefficients {
            gamma0: beta_ts * ab_s.sqrt() / denom,
            gamma1: (1.0 - ab_s) * alpha_ts.sqrt() / denom,
            gamma2: 1.0 + (ab_t.sqrt() - 1.0) * (alpha_ts.sqrt() + ab_s.sqrt()) / denom,
            sigma_sq: beta_ts * (1.0 - ab_s) / denom,
        })
    }
}

/// Slice form of [`forward_sample`]; writes `y_t` into `out`.
pub fn forward_sample_into(y0: &[f64], mu: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule, out: &mut [f64]) -> Result<()> {
    sched.check_t(t)?;
    let k = y0.len();
    ensure_len("prior", mu.len(), k)?;
    ensure_len("noise", eps.len(), k)?;
    ensure_len("output", out.len(), k)?;
    let sab = sched.alpha_bar(t).sqrt();
    let snoise = (1.0 - sched.alpha_bar(t)).sqrt();
    for i in 0..k {
        out[i] = sab * y0[i] + snoise * eps[i] + (1.0 - sab) * mu[i];
    }
    Ok(())
}

pub fn forward_sample(y0: &LabelVector, mu: &LabelVector, t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<LabelVector> {
    let mut out = vec![0.0; y0.len()];
    forward_sample_into(&y0.0, &mu.0, t, eps, sched, &mut out)?;
    Ok(LabelVector(out))
}

pub fn reconstruct_y0_into(y_t: &[f64], eps_hat: &[f64], mu: &[f64], t: usize, sched: &NoiseSchedule, out: &mut [f64]) -> Result<()> {
    sched.check_t(t)?;
    let k = y_t.len();
    ensure_len("predicted noise", eps_hat.len(), k)?;
    ensure_len("prior", mu.len(), k)?;
    ensure_len("output", out.len(), k)?;
    let sab = sched.alpha_bar(t).sqrt();
    let snoise = (1.0 - sched.alpha_bar(t)).sqrt();
    for i in 0..k {
        out[i] = (y_t[i] - (1.0 - sab) * mu[i] - snoise * eps_hat[i]) / sab;
    }
    Ok(())
}

/// Inverts the forward process given a noise estimate.
pub fn reconstruct_y0(y_t: &LabelVector, eps_hat: &[f64], mu: &LabelVector, t: usize, sched: &NoiseSchedule) -> Result<LabelVector> {
    let mut out = vec![0.0; y_t.len()];
    reconstruct_y0_into(&y_t.0, eps_hat, &mu.0, t, sched, &mut out)?;
    Ok(LabelVector(out))
}
