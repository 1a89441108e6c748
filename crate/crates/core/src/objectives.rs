//! Training losses: noise MSE, condition-specific MMD, DCG cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::log_softmax_rows;
use crate::schedule::{forward_sample, LabelVector, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    /// V-statistic, diagonal included.
    #[default]
    Biased,
    /// U-statistic, diagonal of the within-sample terms excluded.
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdConfig {
    pub bandwidths_sq: Vec<f64>,
    #[serde(default)]
    pub estimator: MmdEstimator,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidths_sq: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            estimator: MmdEstimator::Biased,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths_sq.is_empty() || self.bandwidths_sq.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("mmd bandwidths must be a non-empty list of positive numbers".into()));
        }
        Ok(())
    }
}

fn check_batch(what: &str, a: &[f32], b: &[f32], k: usize) -> Result<usize> {
    if k == 0 || a.len() % k != 0 {
        return Err(Error::Shape(format!("{what}: {} values is not a multiple of K={k}", a.len())));
    }
    ensure_len(what, b.len(), a.len())?;
    Ok(a.len() / k)
}

/// Mean over rows of `||eps - eps_hat||^2` for `B × K` batches.
pub fn noise_loss(eps: &[f32], eps_hat: &[f32], k: usize) -> Result<f64> {
    let rows = check_batch("noise loss", eps, eps_hat, k)?;
    if rows == 0 {
        return Err(Error::Shape("noise loss on an empty batch".into()));
    }
    let s: f64 = eps.iter().zip(eps_hat).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(s / rows as f64)
}

/// Gradient of [`noise_loss`] with respect to `eps_hat`.
pub fn noise_loss_grad(eps: &[f32], eps_hat: &[f32], k: usize) -> Result<Vec<f32>> {
    let rows = check_batch("noise loss", eps, eps_hat, k)?;
    let scale = 2.0 / rows as f32;
    Ok(eps.iter().zip(eps_hat).map(|(a, b)| scale * (b - a)).collect())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

fn kernel(d2: f64, bandwidths_sq: &[f64]) -> f64 {
    bandwidths_sq.iter().map(|s| (-d2 / (2.0 * s)).exp()).sum::<f64>() / bandwidths_sq.len() as f64
}

/// `dk/d(d2)` of the bandwidth-averaged RBF kernel.
fn kernel_slope(d2: f64, bandwidths_sq: &[f64]) -> f64 {
    bandwidths_sq.iter().map(|s| -(-d2 / (2.0 * s)).exp() / (2.0 * s)).sum::<f64>() / bandwidths_sq.len() as f64
}

/// Mean kernel value between rows of `a` and `b`; `skip_diagonal` drops `i == j`.
pub(crate) fn kernel_mean(a: &[f32], b: &[f32], k: usize, bandwidths_sq: &[f64], skip_diagonal: bool) -> f64 {
    let (ra, rb) = (a.len() / k, b.len() / k);
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 0..ra {
        for j in 0..rb {
            if skip_diagonal && i == j {
                continue;
            }
            s += kernel(sq_dist(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]), bandwidths_sq);
            count += 1;
        }
    }
    s / count.max(1) as f64
}

/// `Kbar(n,n) - 2 Kbar(m,n) + Kbar(m,m)` over `B × K` batches, `B >= 2`.
pub fn mmd_loss(n: &[f32], m: &[f32], k: usize, cfg: &MmdConfig) -> Result<f64> {
    Ok(mmd_loss_with_grad(n, m, k, cfg, false)?.0)
}

/// [`mmd_loss`] and, when requested, its gradient with respect to `m`.
pub fn mmd_loss_with_grad(n: &[f32], m: &[f32], k: usize, cfg: &MmdConfig, want_grad: bool) -> Result<(f64, Vec<f32>)> {
    cfg.validate()?;
    let rows = check_batch("mmd", n, m, k)?;
    if rows < 2 {
        return Err(Error::Shape(format!("mmd needs a batch of at least 2, got {rows}")));
    }
    let bw = &cfg.bandwidths_sq;
    let unbiased = cfg.estimator == MmdEstimator::Unbiased;
    let value = kernel_mean(n, n, k, bw, unbiased) - 2.0 * kernel_mean(m, n, k, bw, false) + kernel_mean(m, m, k, bw, unbiased);
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let b = rows as f64;
    let self_norm = if unbiased { b * (b - 1.0) } else { b * b };
    let mut grad = vec![0.0f64; m.len()];
    for i in 0..rows {
        let mi = &m[i * k..(i + 1) * k];
        for j in 0..rows {
            if j != i {
                let mj = &m[j * k..(j + 1) * k];
                let c = 2.0 * kernel_slope(sq_dist(mi, mj), bw) / self_norm;
                for d in 0..k {
                    grad[i * k + d] += 2.0 * c * (mi[d] as f64 - mj[d] as f64);
                }
            }
            let nj = &n[j * k..(j + 1) * k];
            let c = -2.0 * kernel_slope(sq_dist(mi, nj), bw) / (b * b);
            for d in 0..k {
                grad[i * k + d] += 2.0 * c * (mi[d] as f64 - nj[d] as f64);
            }
        }
    }
    Ok((value, grad.into_iter().map(|g| g as f32).collect()))
}

/// Forward noising toward a single prior, as used inside each MMD branch.
pub fn branch_noisy_sample(y0: &LabelVector, prior: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<LabelVector> {
    forward_sample(y0, &LabelVector(prior.to_vec()), t, eps, sched)
}

/// `loss_eps + lambda * (mmd_g + mmd_l)`.
pub fn total_loss(loss_eps: f64, loss_mmd_g: f64, loss_mmd_l: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(loss_eps + lambda * (loss_mmd_g + loss_mmd_l))
}

/// Softmax cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Range(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label] as f64)
}

/// `CE(global, label) + CE(local, label)`.
pub fn dcg_ce_loss(global_logits: &[f32], local_logits: &[f32], label: usize) -> Result<f64> {
    ensure_len("local logits", local_logits.len(), global_logits.len())?;
    Ok(cross_entropy(global_logits, label)? + cross_entropy(local_logits, label)?)
}

/// Mean cross-entropy over a `B × K` batch and its gradient with respect to the logits.
pub fn softmax_ce_batch(logits: &[f32], labels: &[usize], k: usize) -> Result<(f64, Vec<f32>)> {
    ensure_len("logits", logits.len(), labels.len() * k)?;
    if labels.is_empty() {
        return Err(Error::Shape("cross-entropy on an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Range(format!("label {bad} out of range for {k} classes")));
    }
    let logp = log_softmax_rows(logits, k);
    let b = labels.len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (r, &l) in labels.iter().enumerate() {
        loss -= logp[r * k + l] as f64;
        for j in 0..k {
            let p = logp[r * k + j].exp();
            grad.push((p - if j == l { 1.0 } else { 0.0 }) / b as f32);
        }
    }
    Ok((loss / b as f64, grad))
}
