use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pooling::pool_fixed;
use super::{EnsembleMode, ProbVolume};
use crate::error::{Error, Result};
use crate::nn::{forward_volume, ClassifierParams, Mode};
use crate::volume::augment::{transform_volume, SpatialTransform};
use crate::volume::{AugmentationSpec, CineVolume, NUM_CLASSES};

/// Trained members and pooling settings for a classical strategy.
#[derive(Debug, Clone)]
pub struct StrategySetup {
    pub mode: EnsembleMode,
    pub members: Vec<ClassifierParams>,
    /// Same weights as the fixed baseline.
    pub weights: Vec<f64>,
    /// Test-time transforms for augmenting.
    pub augmentations: AugmentationSpec,
}

/// Seed of member `member_seed`'s bootstrap draw. Members with equal seeds
/// draw the same resample.
pub fn bootstrap_seed_for(bootstrap_seed: u64, member_seed: u64) -> u64 {
    crate::seeds::mix(&[bootstrap_seed, member_seed])
}

/// `n` indices drawn uniformly with replacement from `0..n`.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Pooled predictions for every test frame.
pub fn run_strategy(setup: &StrategySetup, testset: &[CineVolume]) -> Result<Vec<ProbVolume>> {
    match setup.mode {
        EnsembleMode::Stacking | EnsembleMode::Bagging => {
            if setup.members.len() != setup.weights.len() {
                return Err(Error::config(format!(
                    "{} weights for {} members",
                    setup.weights.len(),
                    setup.members.len()
                )));
            }
            testset
                .iter()
                .map(|v| {
                    let probs = setup
                        .members
                        .iter()
                        .enumerate()
                        .map(|(i, p)| forward_volume(p, v, Mode::Eval, i))
                        .collect::<Result<Vec<_>>>()?;
                    pool_fixed(&probs, &setup.weights)
                })
                .collect()
        }
        EnsembleMode::Augmenting => {
            let [member] = setup.members.as_slice() else {
                return Err(Error::config("augmenting uses exactly one member"));
            };
            testset.iter().map(|v| predict_augmented(member, v, &setup.augmentations)).collect()
        }
        m => Err(Error::config(format!("{} is not a classical strategy", m.name()))),
    }
}

/// Predicts the original and every transformed view, maps each prediction
/// back with the inverse transform, and pools them with uniform weights.
pub(crate) fn predict_augmented(member: &ClassifierParams, v: &CineVolume, spec: &AugmentationSpec) -> Result<ProbVolume> {
    spec.validate()?;
    let s = v.shape();
    let mut views = vec![SpatialTransform::Identity];
    if spec.enabled {
        views.extend(spec.transforms());
    }
    let mut inverses = Vec::with_capacity(views.len());
    for t in &views {
        match t.inverse() {
            Some(inv) if t.is_invertible(s.height, s.width) => inverses.push(inv),
            _ => return Err(Error::config(format!("test augmentation {t:?} cannot be inverted on {s}"))),
        }
    }
    let hw = s.slice_len();
    let mut aligned = Vec::with_capacity(views.len());
    for (t, inv) in views.iter().zip(&inverses) {
        let p = forward_volume(member, &transform_volume(v, *t), Mode::Eval, 0)?;
        let mut data = Vec::with_capacity(p.data().len());
        for plane in p.data().chunks(hw) {
            data.extend(inv.apply_slice(plane, s.height, s.width, false));
        }
        let mut back = ProbVolume::new(0, s, data)?;
        back.frame_id = v.frame_id.clone();
        aligned.push(back);
    }
    debug_assert!(aligned.iter().all(|p| p.data().len() == s.len() * NUM_CLASSES));
    let n = aligned.len();
    pool_fixed(&aligned, &vec![1.0 / n as f64; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_classifier, Arch, ClassifierSpec};
    use crate::volume::{generate_phantom, Flip, PhantomSpec, Range};

    fn tiny(arch: Arch, seed: u64) -> ClassifierParams {
        init_classifier(&ClassifierSpec { arch, base_channels: 2, depth_levels: 2, bottleneck_channels: 4, dropout_p: 0.5, seed })
            .unwrap()
    }

    fn frames(n: usize, size: usize) -> Vec<CineVolume> {
        let spec = PhantomSpec { depth_range: Range { min: 3, max: 3 }, image_size: (size, size), ..PhantomSpec::default() };
        generate_phantom(&spec, n).unwrap().into_iter().map(|(v, _)| v).collect()
    }

    #[test]
    fn bootstrap_is_seeded_and_in_range() {
        let a = bootstrap_indices(40, 3);
        assert_eq!(a, bootstrap_indices(40, 3));
        assert_ne!(a, bootstrap_indices(40, 4));
        assert!(a.iter().all(|&i| i < 40));
        assert_eq!(bootstrap_seed_for(5, 1), bootstrap_seed_for(5, 1));
        assert_ne!(bootstrap_seed_for(5, 1), bootstrap_seed_for(5, 2));
    }

    #[test]
    fn empty_augmentation_is_resoftmaxed_member() {
        let m = tiny(Arch::UnetLite, 3);
        let v = &frames(1, 16)[0];
        let spec = AugmentationSpec { rotations: vec![], flips: vec![], enabled: true };
        let out = predict_augmented(&m, v, &spec).unwrap();
        let single = pool_fixed(&[forward_volume(&m, v, Mode::Eval, 0).unwrap()], &[1.0]).unwrap();
        let diff = out.data().iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn non_invertible_augmentation_rejected() {
        let m = tiny(Arch::UnetLite, 3);
        let v = &frames(1, 16)[0];
        let spec = AugmentationSpec { rotations: vec![30.0], flips: vec![], enabled: true };
        assert!(matches!(predict_augmented(&m, v, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn flip_views_are_realigned() {
        let m = tiny(Arch::UnetLite, 8);
        let v = &frames(1, 16)[0];
        let spec = AugmentationSpec { rotations: vec![90.0, 180.0], flips: vec![Flip::Horizontal], enabled: true };
        assert!(predict_augmented(&m, v, &spec).unwrap().max_normalization_error() < 1e-12);

        // views {I, H} are closed under H, so pooling commutes with mirroring
        let spec = AugmentationSpec { rotations: vec![], flips: vec![Flip::Horizontal], enabled: true };
        let h = SpatialTransform::Flip(Flip::Horizontal);
        let out = predict_augmented(&m, v, &spec).unwrap();
        let out_m = predict_augmented(&m, &transform_volume(v, h), &spec).unwrap();
        let s = v.shape();
        for (a, b) in out.data().chunks(s.slice_len()).zip(out_m.data().chunks(s.slice_len())) {
            assert_eq!(h.apply_slice(a, s.height, s.width, false), b);
        }
    }

    #[test]
    fn stacking_identical_members_equals_single() {
        let m = tiny(Arch::DilatedLite, 2);
        let setup = StrategySetup {
            mode: EnsembleMode::Stacking,
            members: vec![m.clone(), m.clone()],
            weights: vec![0.7, 0.3],
            augmentations: AugmentationSpec::default(),
        };
        let fs = frames(2, 16);
        let out = run_strategy(&setup, &fs).unwrap();
        for (o, v) in out.iter().zip(&fs) {
            let single = pool_fixed(&[forward_volume(&m, v, Mode::Eval, 0).unwrap()], &[1.0]).unwrap();
            let diff = o.data().iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn end_to_end_modes_rejected() {
        let setup = StrategySetup {
            mode: EnsembleMode::Fixed,
            members: vec![tiny(Arch::UnetLite, 0)],
            weights: vec![1.0],
            augmentations: AugmentationSpec::default(),
        };
        assert!(run_strategy(&setup, &frames(1, 16)).is_err());
    }
}
