use super::memory::{compute_memory, uncertainty_weights, PixelWeightField, UncertaintyMemory};
use super::pooling::{pool_fixed, pool_uncertainty};
use super::strategy::predict_augmented;
use super::{EnsembleConfig, EnsembleMode, ProbVolume};
use crate::error::{Error, Result};
use crate::nn::{forward_volume, ClassifierParams, Mode};
use crate::volume::CineVolume;

/// Pooled output of one frame plus the intermediate quantities.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub probs: ProbVolume,
    pub member_probs: Vec<ProbVolume>,
    /// Present in uncertainty mode only.
    pub weights: Option<PixelWeightField>,
    /// Present in uncertainty mode only.
    pub memories: Option<Vec<UncertaintyMemory>>,
}

/// Runs every member on `v` in eval mode, then pools.
///
/// Uncertainty mode is two-pass: all member predictions and memories are
/// computed first, then the weight field, then the pooled output. Nothing
/// carries over between calls.
pub fn predict_ensemble(config: &EnsembleConfig, members: &[ClassifierParams], v: &CineVolume) -> Result<EnsemblePrediction> {
    if members.is_empty() {
        return Err(Error::config("ensemble has no trained members"));
    }
    if config.mode == EnsembleMode::Augmenting {
        if members.len() != 1 {
            return Err(Error::config("augmenting uses exactly one member"));
        }
        let probs = predict_augmented(&members[0], v, &config.test_augmentations)?;
        return Ok(EnsemblePrediction { probs, member_probs: Vec::new(), weights: None, memories: None });
    }
    let member_probs =
        members.iter().enumerate().map(|(i, p)| forward_volume(p, v, Mode::Eval, i)).collect::<Result<Vec<_>>>()?;
    match config.mode {
        EnsembleMode::Uncertainty => {
            let memories: Vec<_> = member_probs.iter().map(compute_memory).collect();
            let wf = uncertainty_weights(&memories)?;
            let probs = pool_uncertainty(&member_probs, &wf)?;
            Ok(EnsemblePrediction { probs, member_probs, weights: Some(wf), memories: Some(memories) })
        }
        _ => {
            let probs = pool_fixed(&member_probs, &config.fixed_weights)?;
            Ok(EnsemblePrediction { probs, member_probs, weights: None, memories: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_classifier, Arch, ClassifierSpec};
    use crate::volume::{generate_phantom, PhantomSpec, Range};

    fn tiny(seed: u64) -> ClassifierSpec {
        ClassifierSpec {
            arch: Arch::UnetLite,
            base_channels: 2,
            depth_levels: 2,
            bottleneck_channels: 4,
            dropout_p: 0.5,
            seed,
        }
    }

    fn frames() -> Vec<CineVolume> {
        let spec = PhantomSpec { depth_range: Range { min: 3, max: 3 }, image_size: (16, 16), ..PhantomSpec::default() };
        generate_phantom(&spec, 2).unwrap().into_iter().map(|(v, _)| v).collect()
    }

    #[test]
    fn fixed_mode_has_no_weights() {
        let specs = vec![tiny(1), tiny(2)];
        let params: Vec<_> = specs.iter().map(|s| init_classifier(s).unwrap()).collect();
        let v = &frames()[0];
        let out = predict_ensemble(&EnsembleConfig::fixed(specs), &params, v).unwrap();
        assert!(out.weights.is_none() && out.memories.is_none());
        assert_eq!(out.probs, pool_fixed(&out.member_probs, &[0.5, 0.5]).unwrap());
        assert_eq!(out.probs.frame_id, v.frame_id);
    }

    #[test]
    fn identical_members_match_uniform_fixed() {
        let specs = vec![tiny(7), tiny(7), tiny(7)];
        let params: Vec<_> = specs.iter().map(|s| init_classifier(s).unwrap()).collect();
        let v = &frames()[0];
        let u = predict_ensemble(&EnsembleConfig::uncertainty(specs.clone()), &params, v).unwrap();
        let f = predict_ensemble(&EnsembleConfig::fixed(specs), &params, v).unwrap();
        let diff = u.probs.data().iter().zip(f.probs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
        assert_eq!(u.memories.unwrap().len(), 3);
    }

    #[test]
    fn no_state_between_frames() {
        let specs = vec![tiny(1), tiny(2)];
        let params: Vec<_> = specs.iter().map(|s| init_classifier(s).unwrap()).collect();
        let cfg = EnsembleConfig::uncertainty(specs);
        let fs = frames();
        let a1 = predict_ensemble(&cfg, &params, &fs[0]).unwrap();
        predict_ensemble(&cfg, &params, &fs[1]).unwrap();
        let a2 = predict_ensemble(&cfg, &params, &fs[0]).unwrap();
        assert_eq!(a1.probs, a2.probs);
        assert_eq!(a1.weights, a2.weights);
    }
}
