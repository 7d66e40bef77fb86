use serde::{Deserialize, Serialize};

use crate::nn::{zero_grads, ClassifierParams, ParamGrads};

/// RMSprop hyperparameters. One instance drives every member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Smoothing constant of the squared-gradient average.
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { learning_rate: 1e-4, weight_decay: 1e-7, momentum: 0.9, alpha: 0.99, eps: 1e-8 }
    }
}

/// Per-parameter accumulators of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub square_avg: ParamGrads,
    pub momentum_buf: ParamGrads,
}

impl RmsPropState {
    pub fn new(params: &ClassifierParams) -> Self {
        RmsPropState { square_avg: zero_grads(params), momentum_buf: zero_grads(params) }
    }
}

/// One update of every parameter:
///
/// ```text
/// g ← g + wd·θ
/// v ← α·v + (1 − α)·g²
/// b ← μ·b + g / (√v + eps)
/// θ ← θ − lr·b
/// ```
pub fn rmsprop_step(params: &mut ClassifierParams, grads: &ParamGrads, state: &mut RmsPropState, cfg: &RmsPropConfig) {
    for (k, t) in params.tensors.iter_mut().enumerate() {
        let (g, v, b) = (&grads[k], &mut state.square_avg[k], &mut state.momentum_buf[k]);
        for i in 0..t.data.len() {
            let gi = g[i] + cfg.weight_decay * t.data[i];
            v[i] = cfg.alpha * v[i] + (1.0 - cfg.alpha) * gi * gi;
            b[i] = cfg.momentum * b[i] + gi / (v[i].sqrt() + cfg.eps);
            t.data[i] -= cfg.learning_rate * b[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ClassifierSpec, ParamTensor};

    fn scalar(v: f64) -> ClassifierParams {
        ClassifierParams {
            spec: ClassifierSpec::unet_lite(0),
            tensors: vec![ParamTensor { name: "x".into(), shape: vec![1], data: vec![v] }],
        }
    }

    #[test]
    fn scalar_hand_step() {
        let mut p = scalar(0.0);
        let mut s = RmsPropState::new(&p);
        let cfg = RmsPropConfig { learning_rate: 0.1, weight_decay: 0.0, ..RmsPropConfig::default() };
        rmsprop_step(&mut p, &vec![vec![1.0]], &mut s, &cfg);
        // v = 0.01, b = 1 / (0.1 + 1e-8), θ = −0.1·b
        assert!((s.square_avg[0][0] - 0.01).abs() < 1e-15);
        let expected = -0.1 / (0.1 + 1e-8);
        assert!((p.tensors[0].data[0] - expected).abs() < 1e-12);
        assert!((expected + 0.99999990).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_moves_only_by_decay() {
        let mut p = scalar(2.0);
        let mut s = RmsPropState::new(&p);
        let cfg = RmsPropConfig::default();
        rmsprop_step(&mut p, &vec![vec![0.0]], &mut s, &cfg);
        let g: f64 = 1e-7 * 2.0;
        let v = 0.01 * g * g;
        assert!((p.tensors[0].data[0] - (2.0 - 1e-4 * g / (v.sqrt() + 1e-8))).abs() < 1e-15);
        let mut q = scalar(2.0);
        let mut s = RmsPropState::new(&q);
        rmsprop_step(&mut q, &vec![vec![0.0]], &mut s, &RmsPropConfig { weight_decay: 0.0, ..cfg });
        assert_eq!(q.tensors[0].data[0], 2.0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = scalar(0.0);
        let mut s = RmsPropState::new(&p);
        let cfg = RmsPropConfig { weight_decay: 0.0, ..RmsPropConfig::default() };
        rmsprop_step(&mut p, &vec![vec![1.0]], &mut s, &cfg);
        let b1 = s.momentum_buf[0][0];
        rmsprop_step(&mut p, &vec![vec![1.0]], &mut s, &cfg);
        let v2: f64 = 0.99 * 0.01 + 0.01;
        assert!((s.momentum_buf[0][0] - (0.9 * b1 + 1.0 / (v2.sqrt() + 1e-8))).abs() < 1e-12);
    }
}
