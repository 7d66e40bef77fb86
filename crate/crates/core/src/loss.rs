//! Weighted soft-Dice plus focal loss on pooled probabilities.
//!
//! ```text
//! DSC_j   = (2 Σ_v ŷ_j y_j + ε) / (Σ_v ŷ_j + Σ_v y_j + ε)
//! L_dice  = Σ_j λ_j (1 − DSC_j)
//! L_focal = (1/V) Σ_v Σ_j −α_j (1 − ŷ_j)^γ y_j log ŷ_j     (ŷ clamped to [ε, 1−ε])
//! L       = L_dice + s · L_focal
//! ```

use serde::{Deserialize, Serialize};

use crate::ensemble::ProbVolume;
use crate::error::{Error, Result};
use crate::volume::{check_same_shape, LabelMask, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// λ_j for BG, RV, MYO, LV.
    pub dice_weights: [f64; NUM_CLASSES],
    pub focal_alpha: [f64; NUM_CLASSES],
    pub focal_gamma: f64,
    pub focal_scale: f64,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_weights: [1.0, 2.0, 1.0, 1.0],
            focal_alpha: [0.1; NUM_CLASSES],
            focal_gamma: 2.0,
            focal_scale: 10.0,
            smooth_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dice_weights.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("dice weights must be positive"));
        }
        if self.focal_alpha.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::config("focal alpha must be non-negative"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal gamma must be non-negative"));
        }
        if !(self.focal_scale >= 0.0) {
            return Err(Error::config("focal scale must be non-negative"));
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps < 0.5) {
            return Err(Error::config("smooth_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

fn check(pred: &ProbVolume, truth: &LabelMask) -> Result<()> {
    check_same_shape(pred.shape(), truth.shape(), "loss prediction/truth")
}

/// `(Σ ŷ_j y_j, Σ ŷ_j + Σ y_j)` per class.
fn dice_sums(pred: &ProbVolume, truth: &LabelMask) -> [(f64, f64); NUM_CLASSES] {
    let s = pred.shape();
    let hw = s.slice_len();
    let mut sums = [(0.0, 0.0); NUM_CLASSES];
    for d in 0..s.depth {
        let block = pred.slice(d);
        for (c, sum) in sums.iter_mut().enumerate() {
            sum.1 += block[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        for (p, &l) in truth.slice(d).iter().enumerate() {
            let l = l as usize;
            sums[l].0 += block[l * hw + p];
            sums[l].1 += 1.0;
        }
    }
    sums
}

pub fn dice_loss(pred: &ProbVolume, truth: &LabelMask, cfg: &LossConfig) -> Result<f64> {
    check(pred, truth)?;
    let eps = cfg.smooth_eps;
    Ok(dice_sums(pred, truth)
        .iter()
        .zip(&cfg.dice_weights)
        .map(|(&(i, s), l)| l * (1.0 - (2.0 * i + eps) / (s + eps)))
        .sum())
}

fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

pub fn focal_loss(pred: &ProbVolume, truth: &LabelMask, cfg: &LossConfig) -> Result<f64> {
    check(pred, truth)?;
    let s = pred.shape();
    let hw = s.slice_len();
    let eps = cfg.smooth_eps;
    let mut sum = 0.0;
    for d in 0..s.depth {
        let block = pred.slice(d);
        for (p, &l) in truth.slice(d).iter().enumerate() {
            let l = l as usize;
            let q = block[l * hw + p].clamp(eps, 1.0 - eps);
            sum += focal_term(q, cfg.focal_alpha[l], cfg.focal_gamma);
        }
    }
    Ok(sum / s.len() as f64)
}

pub fn total_loss(pred: &ProbVolume, truth: &LabelMask, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_breakdown(pred, truth, cfg)?.total)
}

pub fn loss_breakdown(pred: &ProbVolume, truth: &LabelMask, cfg: &LossConfig) -> Result<LossBreakdown> {
    let dice = dice_loss(pred, truth, cfg)?;
    let focal = focal_loss(pred, truth, cfg)?;
    Ok(LossBreakdown { dice, focal, total: dice + cfg.focal_scale * focal })
}

/// Total loss and its gradient with respect to every entry of `pred`
/// (same `[D][4][H][W]` layout). Clamped probabilities get no focal gradient.
pub fn total_loss_grad(pred: &ProbVolume, truth: &LabelMask, cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    let parts = loss_breakdown(pred, truth, cfg)?;
    let s = pred.shape();
    let hw = s.slice_len();
    let eps = cfg.smooth_eps;
    let sums = dice_sums(pred, truth);
    // dL/dŷ_j(v) = −λ_j [2 y_j(v)(S_j+ε) − (2I_j+ε)] / (S_j+ε)²
    let base: Vec<f64> =
        sums.iter().zip(&cfg.dice_weights).map(|(&(i, s), l)| l * (2.0 * i + eps) / (s + eps).powi(2)).collect();
    let hit: Vec<f64> = sums.iter().zip(&cfg.dice_weights).map(|(&(_, s), l)| -l * 2.0 / (s + eps)).collect();
    let mut grad = vec![0.0; pred.data().len()];
    let inv_v = cfg.focal_scale / s.len() as f64;
    let (g, a_pow) = (cfg.focal_gamma, cfg.focal_gamma - 1.0);
    for d in 0..s.depth {
        let block = pred.slice(d);
        let gblock = &mut grad[d * NUM_CLASSES * hw..(d + 1) * NUM_CLASSES * hw];
        for c in 0..NUM_CLASSES {
            gblock[c * hw..(c + 1) * hw].iter_mut().for_each(|x| *x = base[c]);
        }
        for (p, &l) in truth.slice(d).iter().enumerate() {
            let l = l as usize;
            let i = l * hw + p;
            gblock[i] += hit[l];
            let q = block[i];
            if q > eps && q < 1.0 - eps {
                // d/dq [−α (1−q)^γ ln q] = α [γ (1−q)^(γ−1) ln q − (1−q)^γ / q]
                let alpha = cfg.focal_alpha[l];
                let pull = if g == 0.0 { 0.0 } else { g * (1.0 - q).powf(a_pow) * q.ln() };
                gblock[i] += inv_v * alpha * (pull - (1.0 - q).powf(g) / q);
            }
        }
    }
    Ok((parts, grad))
}
