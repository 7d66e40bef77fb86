use super::ProbVolume;
use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

/// Largest possible class variance of a 4-class probability vector,
/// attained by a one-hot vector: `(0.75² + 3·0.25²) / 4`.
pub const SIGMA_MAX: f64 = 0.1875;

/// Depth-mean probabilities and their class variance for one member on one
/// frame. Computed fresh for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMemory {
    pub frame_id: String,
    pub height: usize,
    pub width: usize,
    /// `[4][H][W]`
    pub mu: Vec<f64>,
    /// `[H][W]`
    pub sigma: Vec<f64>,
}

pub fn compute_memory(p: &ProbVolume) -> UncertaintyMemory {
    let s = p.shape();
    let hw = s.slice_len();
    let mut mu = vec![0.0; NUM_CLASSES * hw];
    for d in 0..s.depth {
        for (m, &v) in mu.iter_mut().zip(p.slice(d)) {
            *m += v;
        }
    }
    let inv_depth = 1.0 / s.depth as f64;
    mu.iter_mut().for_each(|m| *m *= inv_depth);
    let sigma = (0..hw)
        .map(|px| {
            let mean = (0..NUM_CLASSES).map(|c| mu[c * hw + px]).sum::<f64>() / NUM_CLASSES as f64;
            (0..NUM_CLASSES).map(|c| (mu[c * hw + px] - mean).powi(2)).sum::<f64>() / NUM_CLASSES as f64
        })
        .collect();
    UncertaintyMemory { frame_id: p.frame_id.clone(), height: s.height, width: s.width, mu, sigma }
}

/// Pixelwise weights ω̄_i stacked over members, `[N][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeightField {
    pub members: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl PixelWeightField {
    pub fn member(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.weights[i * n..(i + 1) * n]
    }

    /// Every member weighted `1/N` at every pixel.
    pub fn uniform(members: usize, height: usize, width: usize) -> Self {
        PixelWeightField { members, height, width, weights: vec![1.0 / members as f64; members * height * width] }
    }

    /// Largest deviation of Σ_i ω̄_i from one over all pixels.
    pub fn max_sum_error(&self) -> f64 {
        let n = self.height * self.width;
        (0..n)
            .map(|p| ((0..self.members).map(|i| self.weights[i * n + p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Softmax over members of the σ maps at each pixel.
pub fn uncertainty_weights(memories: &[UncertaintyMemory]) -> Result<PixelWeightField> {
    let first = memories.first().ok_or_else(|| Error::config("uncertainty weighting needs at least one memory"))?;
    let (h, w) = (first.height, first.width);
    if let Some(m) = memories.iter().find(|m| (m.height, m.width) != (h, w) || m.sigma.len() != h * w) {
        return Err(Error::shape(format!("memory {}x{} vs {h}x{w}", m.height, m.width)));
    }
    let n = memories.len();
    let hw = h * w;
    let mut weights = vec![0.0; n * hw];
    for p in 0..hw {
        let max = memories.iter().map(|m| m.sigma[p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (i, m) in memories.iter().enumerate() {
            let e = (m.sigma[p] - max).exp();
            weights[i * hw + p] = e;
            sum += e;
        }
        for i in 0..n {
            weights[i * hw + p] /= sum;
        }
    }
    Ok(PixelWeightField { members: n, height: h, width: w, weights })
}
