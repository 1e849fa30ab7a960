//! Noise schedule, forward diffusion, DDIM stepping, and training losses.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Linear beta schedule over `T` steps. Betas are the 1000-step Stable
/// Diffusion endpoints rescaled by `1000 / T` so the total noise budget is
/// preserved at short horizons.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub const BETA_START_1000: f64 = 1e-4;
pub const BETA_END_1000: f64 = 0.02;

impl NoiseSchedule {
    pub fn linear(t_max: usize) -> Result<Self> {
        Self::linear_with(t_max, BETA_START_1000 * 1000.0 / t_max as f64, BETA_END_1000 * 1000.0 / t_max as f64)
    }

    pub fn linear_with(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        // either endpoint may be the larger one; a schedule with shrinking
        // steps spends more of its denoising budget at high noise levels
        if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range ({beta_start}, {beta_end}) outside (0, 1)"
            )));
        }
        let mut beta = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            beta.push(beta_start + frac * (beta_end - beta_start));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar })
    }

    /// Cumulative product at timestep `t` (1-based); `t = 0` means "clean".
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        if t > self.t_max {
            return Err(Error::Timestep { t: t as i64, lo: 0, hi: self.t_max as i64 });
        }
        Ok(self.alpha_bar[t - 1])
    }
}

/// Forward diffusion closed form: `z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps`.
pub fn add_noise(
    schedule: &NoiseSchedule,
    z0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
) -> Result<Array3<f64>> {
    if z0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.dim(),
            eps.dim()
        )));
    }
    if t < 1 || t > schedule.t_max {
        return Err(Error::Timestep { t: t as i64, lo: 1, hi: schedule.t_max as i64 });
    }
    let ab = schedule.alpha_bar_at(t)?;
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// One DDIM update from timestep `t` down to `t_prev`. With `eta = 0` the
/// update is deterministic; `noise` is only consulted when `eta > 0`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Array3<f64>,
    eps_hat: &Array3<f64>,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&Array3<f64>>,
) -> Result<Array3<f64>> {
    if t_prev == t {
        return Ok(z_t.clone());
    }
    if t_prev > t || t < 1 || t > schedule.t_max {
        return Err(Error::Timestep { t: t as i64, lo: t_prev as i64, hi: schedule.t_max as i64 });
    }
    let ab_t = schedule.alpha_bar_at(t)?;
    let ab_prev = schedule.alpha_bar_at(t_prev)?;
    let z0_pred = (z_t - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = &z0_pred * ab_prev.sqrt() + eps_hat * dir_coeff;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::Config("eta > 0 requires noise".into()))?;
        out = out + &(n * sigma);
    }
    Ok(out)
}

/// Predicted clean latent from (z_t, eps_hat) at timestep t.
pub fn predict_z0(
    schedule: &NoiseSchedule,
    z_t: &Array3<f64>,
    eps_hat: &Array3<f64>,
    t: usize,
) -> Result<Array3<f64>> {
    let ab_t = schedule.alpha_bar_at(t)?;
    if t == 0 {
        return Ok(z_t.clone());
    }
    Ok((z_t - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt())
}

/// Base objective: plain MSE between true and predicted noise.
pub fn loss_sd(eps: &Array3<f64>, eps_hat: &Array3<f64>) -> Result<f64> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps.dim(), eps_hat.dim())));
    }
    let n = eps.len() as f64;
    Ok(eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Weighted objective: MSE plus `alpha` times the MSE of the residual gated
/// to the text region by `(1 - l_m)`, the mask broadcast over channels. Both
/// terms reduce by mean so `alpha` is scale-free.
pub fn loss_gd_weighted(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    mask: &Array2<f64>,
    alpha: f64,
) -> Result<f64> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps.dim(), eps_hat.dim())));
    }
    let (c, h, w) = eps.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} vs latent spatial ({h}, {w})",
            mask.dim()
        )));
    }
    let base = loss_sd(eps, eps_hat)?;
    let n = (c * h * w) as f64;
    let mut weighted = 0.0;
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let r = (eps[[ci, i, j]] - eps_hat[[ci, i, j]]) * (1.0 - mask[[i, j]]);
                weighted += r * r;
            }
        }
    }
    Ok(base + alpha * weighted / n)
}

/// Tape version of [`loss_gd_weighted`] for training graphs. `inv_mask` is
/// the `(1 - l_m)` plane already broadcast to `(c, h, w)`.
pub fn loss_gd_weighted_tape(
    tape: &mut Tape,
    eps: Var,
    eps_hat: Var,
    inv_mask: Var,
    alpha: f64,
) -> Var {
    let resid = tape.sub(eps, eps_hat);
    let sq = tape.mul(resid, resid);
    let base = tape.mean(sq);
    let gated = tape.mul(resid, inv_mask);
    let gated_sq = tape.mul(gated, gated);
    let weighted = tape.mean(gated_sq);
    let weighted = tape.scale(weighted, alpha);
    tape.add(base, weighted)
}
