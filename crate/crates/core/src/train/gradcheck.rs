use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{frame_gradients, Pooling};
use crate::ensemble::{EnsembleConfig, EnsembleMode};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::nn::{init_classifier, zero_grads, Arch, ClassifierParams, ClassifierSpec, ParamGrads};
use crate::volume::{CineVolume, LabelMask, Phase, Shape3};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Members and frames small enough for finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub members: Vec<ClassifierParams>,
    pub frames: Vec<(CineVolume, LabelMask)>,
}

impl GradCheckProblem {
    /// Two narrow `unet_lite` members and one random `3×8×8` frame.
    pub fn tiny(seed: u64) -> Result<Self> {
        let spec = |s| ClassifierSpec {
            arch: Arch::UnetLite,
            base_channels: 2,
            depth_levels: 2,
            bottleneck_channels: 4,
            dropout_p: 0.5,
            seed: s,
        };
        let members = vec![init_classifier(&spec(seed))?, init_classifier(&spec(seed + 1))?];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape3::new(3, 8, 8);
        let voxels = (0..shape.len()).map(|_| rng.random::<f32>()).collect();
        let labels = (0..shape.len()).map(|_| rng.random_range(0..4u8)).collect();
        let frame = CineVolume::new(format!("gradcheck_{seed}"), Phase::Synthetic, shape, voxels)?;
        Ok(GradCheckProblem { members, frames: vec![(frame, LabelMask::new(shape, labels)?)] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub mode: String,
    /// Parameters compared, per member.
    pub checked: Vec<usize>,
    /// Samples dropped because a perturbation crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Uncertainty mode: largest difference between full gradients and
    /// gradients with the weight field held constant, relative to the largest
    /// full gradient.
    pub frozen_weight_difference: Option<f64>,
}

fn loss_and_grads(problem: &GradCheckProblem, members: &[ClassifierParams], pooling: &Pooling, loss: &LossConfig) -> Result<(f64, ParamGrads, Vec<u64>)> {
    let mut grads: Vec<ParamGrads> = members.iter().map(zero_grads).collect();
    let scale = 1.0 / problem.frames.len() as f64;
    let mut total = 0.0;
    let mut sigs = Vec::new();
    for (v, m) in &problem.frames {
        let (parts, s) = frame_gradients(members, v, m, pooling, loss, None, scale, &mut grads)?;
        total += scale * parts.total;
        sigs.extend(s);
    }
    Ok((total, grads.into_iter().flatten().collect(), sigs))
}

/// Compares analytic parameter gradients of the pooled loss against central
/// finite differences on `per_member` randomly chosen parameters of every
/// member. Dropout is disabled.
pub fn gradient_check(
    ens: &EnsembleConfig,
    loss: &LossConfig,
    problem: &GradCheckProblem,
    per_member: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let pooling = match ens.mode {
        EnsembleMode::Fixed => {
            if ens.fixed_weights.len() != problem.members.len() {
                return Err(Error::config("fixed weights do not match the problem's members"));
            }
            Pooling::Fixed(ens.fixed_weights.clone())
        }
        EnsembleMode::Uncertainty => Pooling::Uncertainty { through_weights: true },
        m => return Err(Error::config(format!("no gradient check for {}", m.name()))),
    };
    let members = &problem.members;
    let (_, analytic, base_sig) = loss_and_grads(problem, members, &pooling, loss)?;
    let frozen_weight_difference = if let Pooling::Uncertainty { .. } = pooling {
        let (_, frozen, _) = loss_and_grads(problem, members, &Pooling::Uncertainty { through_weights: false }, loss)?;
        let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
        let diff = analytic.iter().flatten().zip(frozen.iter().flatten()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Some(diff / scale)
    } else {
        None
    };

    // analytic is laid out member-major: tensors of member 0, then member 1, ...
    let mut offset = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = Vec::new();
    let mut skipped = 0;
    let (mut worst, mut worst_param) = (0.0f64, String::new());
    let mut work = members.to_vec();
    for (i, m) in members.iter().enumerate() {
        let mut slots: Vec<(usize, usize)> =
            m.tensors.iter().enumerate().flat_map(|(t, x)| (0..x.data.len()).map(move |e| (t, e))).collect();
        slots.shuffle(&mut rng);
        let mut n = 0;
        for (t, e) in slots {
            if n == per_member {
                break;
            }
            let orig = work[i].tensors[t].data[e];
            work[i].tensors[t].data[e] = orig + FD_STEP;
            let (lp, _, sp) = loss_and_grads(problem, &work, &pooling, loss)?;
            work[i].tensors[t].data[e] = orig - FD_STEP;
            let (lm, _, sm) = loss_and_grads(problem, &work, &pooling, loss)?;
            work[i].tensors[t].data[e] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let num = (lp - lm) / (2.0 * FD_STEP);
            let ana = analytic[offset + t][e];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(REL_FLOOR);
            if rel > worst || worst_param.is_empty() {
                worst = worst.max(rel);
                worst_param = format!("member{i}.{}[{e}]", m.tensors[t].name);
            }
            n += 1;
        }
        checked.push(n);
        offset += m.tensors.len();
    }
    if worst > GRAD_CHECK_TOL {
        return Err(Error::GradientCheck { rel_error: worst, path: worst_param });
    }
    Ok(GradCheckReport {
        mode: ens.mode.name().to_string(),
        checked,
        skipped_kinks: skipped,
        max_rel_error: worst,
        worst_param,
        frozen_weight_difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(problem: &GradCheckProblem, mode: EnsembleMode) -> EnsembleConfig {
        let specs = problem.members.iter().map(|m| m.spec.clone()).collect();
        EnsembleConfig { mode, ..EnsembleConfig::fixed(specs) }
    }

    #[test]
    fn fixed_mode_passes() {
        let p = GradCheckProblem::tiny(3).unwrap();
        let r = gradient_check(&config(&p, EnsembleMode::Fixed), &LossConfig::default(), &p, 100, 1).unwrap();
        assert!(r.checked.iter().all(|&n| n >= 100));
        assert!(r.max_rel_error <= GRAD_CHECK_TOL);
        assert!(r.frozen_weight_difference.is_none());
    }

    #[test]
    fn uncertainty_mode_passes_and_weights_matter() {
        let p = GradCheckProblem::tiny(4).unwrap();
        let r = gradient_check(&config(&p, EnsembleMode::Uncertainty), &LossConfig::default(), &p, 100, 2).unwrap();
        assert!(r.checked.iter().all(|&n| n >= 100));
        assert!(r.frozen_weight_difference.unwrap() > 1e-6);
    }
}
