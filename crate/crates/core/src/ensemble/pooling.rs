use super::memory::{PixelWeightField, UncertaintyMemory};
use super::{check_fixed_weights, ProbVolume};
use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

fn check_members(probs: &[ProbVolume]) -> Result<()> {
    let first = probs.first().ok_or_else(|| Error::config("pooling needs at least one member"))?;
    if let Some(p) = probs.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::shape(format!("member volumes {} vs {}", p.shape(), first.shape())));
    }
    Ok(())
}

/// Channel softmax at every pixel of every slice of a `[D][4][H][W]` buffer.
fn softmax_volume(z: &mut [f64], hw: usize) {
    for block in z.chunks_mut(NUM_CLASSES * hw) {
        for p in 0..hw {
            let max = (0..NUM_CLASSES).map(|c| block[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..NUM_CLASSES {
                let e = (block[c * hw + p] - max).exp();
                block[c * hw + p] = e;
                sum += e;
            }
            for c in 0..NUM_CLASSES {
                block[c * hw + p] /= sum;
            }
        }
    }
}

fn pooled(probs: &[ProbVolume], mut z: Vec<f64>) -> ProbVolume {
    let shape = probs[0].shape();
    softmax_volume(&mut z, shape.slice_len());
    let mut out = ProbVolume::with_id(None, shape, z).expect("shape preserved");
    out.frame_id = probs[0].frame_id.clone();
    out
}

/// `softmax_class(Σ_i ω_i · ŷ_i)` with constant weights summing to one.
pub fn pool_fixed(probs: &[ProbVolume], weights: &[f64]) -> Result<ProbVolume> {
    check_members(probs)?;
    check_fixed_weights(weights)?;
    if weights.len() != probs.len() {
        return Err(Error::config(format!("{} weights for {} members", weights.len(), probs.len())));
    }
    let mut z = vec![0.0; probs[0].data().len()];
    for (p, &w) in probs.iter().zip(weights) {
        for (acc, &v) in z.iter_mut().zip(p.data()) {
            *acc += w * v;
        }
    }
    Ok(pooled(probs, z))
}

/// `softmax_class(Σ_i ω̄_i ⊙ ŷ_i)`, with each H×W weight map broadcast over
/// depth and class.
pub fn pool_uncertainty(probs: &[ProbVolume], wf: &PixelWeightField) -> Result<ProbVolume> {
    check_members(probs)?;
    let s = probs[0].shape();
    if wf.members != probs.len() || (wf.height, wf.width) != (s.height, s.width) {
        return Err(Error::shape(format!(
            "weight field {}x{}x{} for {} members of {s}",
            wf.members,
            wf.height,
            wf.width,
            probs.len()
        )));
    }
    let hw = s.slice_len();
    let mut z = vec![0.0; probs[0].data().len()];
    for (i, p) in probs.iter().enumerate() {
        let w = wf.member(i);
        for (zb, pb) in z.chunks_mut(hw).zip(p.data().chunks(hw)) {
            for ((acc, &v), &wp) in zb.iter_mut().zip(pb).zip(w) {
                *acc += wp * v;
            }
        }
    }
    Ok(pooled(probs, z))
}

/// What the pooled output depended on, for backpropagation.
#[derive(Debug, Clone, Copy)]
pub enum PoolGradient<'a> {
    Fixed(&'a [f64]),
    Uncertainty {
        weights: &'a PixelWeightField,
        memories: &'a [UncertaintyMemory],
        /// Propagate through ω̄ → σ → μ. `false` treats ω̄ as constant.
        through_weights: bool,
    },
}

/// Gradient of a scalar loss w.r.t. each member's probabilities, given the
/// gradient `dpooled` w.r.t. the pooled output.
pub fn pool_backward(members: &[ProbVolume], pooled: &ProbVolume, dpooled: &[f64], how: PoolGradient<'_>) -> Vec<Vec<f64>> {
    let s = pooled.shape();
    let hw = s.slice_len();
    let block = NUM_CLASSES * hw;

    // through the channel softmax
    let mut dz = vec![0.0; dpooled.len()];
    for ((dzb, pb), gb) in dz.chunks_mut(block).zip(pooled.data().chunks(block)).zip(dpooled.chunks(block)) {
        for p in 0..hw {
            let dot: f64 = (0..NUM_CLASSES).map(|c| pb[c * hw + p] * gb[c * hw + p]).sum();
            for c in 0..NUM_CLASSES {
                let i = c * hw + p;
                dzb[i] = pb[i] * (gb[i] - dot);
            }
        }
    }

    match how {
        PoolGradient::Fixed(weights) => weights.iter().map(|&w| dz.iter().map(|g| w * g).collect()).collect(),
        PoolGradient::Uncertainty { weights, memories, through_weights } => {
            let n = members.len();
            let mut grads: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let w = weights.member(i);
                    dz.chunks(hw).flat_map(|zb| zb.iter().zip(w).map(|(g, wp)| g * wp)).collect()
                })
                .collect();
            if !through_weights {
                return grads;
            }
            // dω̄_i = Σ_{d,c} dz ⊙ ŷ_i
            let domega: Vec<Vec<f64>> = members
                .iter()
                .map(|m| {
                    let mut acc = vec![0.0; hw];
                    for (zb, pb) in dz.chunks(hw).zip(m.data().chunks(hw)) {
                        for ((a, g), v) in acc.iter_mut().zip(zb).zip(pb) {
                            *a += g * v;
                        }
                    }
                    acc
                })
                .collect();
            let inv_depth = 1.0 / s.depth as f64;
            for p in 0..hw {
                // softmax over members: dσ_i = ω̄_i (dω̄_i − Σ_k ω̄_k dω̄_k)
                let dot: f64 = (0..n).map(|k| weights.member(k)[p] * domega[k][p]).sum();
                for i in 0..n {
                    let dsigma = weights.member(i)[p] * (domega[i][p] - dot);
                    let mu = &memories[i].mu;
                    let mean = (0..NUM_CLASSES).map(|c| mu[c * hw + p]).sum::<f64>() / NUM_CLASSES as f64;
                    for c in 0..NUM_CLASSES {
                        // σ = (1/4) Σ_c (μ_c − m)²  ⇒  ∂σ/∂μ_c = (2/4)(μ_c − m)
                        let dmu = dsigma * 2.0 / NUM_CLASSES as f64 * (mu[c * hw + p] - mean);
                        let g = dmu * inv_depth;
                        for d in 0..s.depth {
                            grads[i][(d * NUM_CLASSES + c) * hw + p] += g;
                        }
                    }
                }
            }
            grads
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{compute_memory, uncertainty_weights};
    use crate::volume::Shape3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(shape: Shape3, seed: u64, id: usize) -> ProbVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = shape.slice_len();
        let mut data = vec![0.0; shape.len() * 4];
        for d in 0..shape.depth {
            for p in 0..hw {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for c in 0..4 {
                    data[(d * 4 + c) * hw + p] = raw[c] / s;
                }
            }
        }
        ProbVolume::new(id, shape, data).unwrap()
    }

    fn softmax4(z: [f64; 4]) -> [f64; 4] {
        let e = z.map(f64::exp);
        let s: f64 = e.iter().sum();
        e.map(|v| v / s)
    }

    #[test]
    fn single_member_is_resoftmaxed() {
        let p = random_probs(Shape3::new(2, 2, 2), 1, 0);
        let out = pool_fixed(std::slice::from_ref(&p), &[1.0]).unwrap();
        let hw = 4;
        for d in 0..2 {
            for px in 0..hw {
                let z = [0, 1, 2, 3].map(|c| p.slice(d)[c * hw + px]);
                let e = softmax4(z);
                for c in 0..4 {
                    assert!((out.slice(d)[c * hw + px] - e[c]).abs() < 1e-15);
                }
            }
        }
        assert_ne!(out.data(), p.data());
    }

    #[test]
    fn two_member_hand_case() {
        let s = Shape3::new(1, 1, 1);
        let a = ProbVolume::new(0, s, vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let b = ProbVolume::new(1, s, vec![0.1, 0.7, 0.1, 0.1]).unwrap();
        let out = pool_fixed(&[a, b], &[0.5, 0.5]).unwrap();
        let e = softmax4([0.4, 0.4, 0.1, 0.1]);
        for c in 0..4 {
            assert!((out.data()[c] - e[c]).abs() < 1e-15);
        }
        assert_eq!(out.data()[0], out.data()[1]);
    }

    #[test]
    fn weight_sum_violation_rejected() {
        let p = random_probs(Shape3::new(1, 2, 2), 2, 0);
        assert!(matches!(pool_fixed(&[p.clone(), p], &[0.7, 0.7]), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_field_equals_fixed() {
        let s = Shape3::new(3, 4, 4);
        let members: Vec<_> = (0..3).map(|i| random_probs(s, 10 + i, i as usize)).collect();
        let wf = PixelWeightField::uniform(3, 4, 4);
        let u = pool_uncertainty(&members, &wf).unwrap();
        let f = pool_fixed(&members, &[1.0 / 3.0; 3]).unwrap();
        for (a, b) in u.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn concentrated_weight_follows_member() {
        let s = Shape3::new(2, 4, 4);
        for seed in 0..10 {
            let a = random_probs(s, 100 + seed, 0);
            let b = random_probs(s, 200 + seed, 1);
            let eps = 1e-6;
            let mut weights = vec![1.0 - eps; 16];
            weights.extend(vec![eps; 16]);
            let wf = PixelWeightField { members: 2, height: 4, width: 4, weights };
            let out = pool_uncertainty(&[a.clone(), b], &wf).unwrap();
            assert_eq!(out.argmax(), a.argmax());
        }
    }

    #[test]
    fn identical_members_ignore_weights() {
        let s = Shape3::new(2, 3, 3);
        let p = random_probs(s, 5, 0);
        let single = pool_fixed(std::slice::from_ref(&p), &[1.0]).unwrap();
        let mut weights = vec![0.2; 9];
        weights.extend(vec![0.8; 9]);
        let wf = PixelWeightField { members: 2, height: 3, width: 3, weights };
        let u = pool_uncertainty(&[p.clone(), p.clone()], &wf).unwrap();
        let f = pool_fixed(&[p.clone(), p], &[0.3, 0.7]).unwrap();
        for ((a, b), c) in u.data().iter().zip(f.data()).zip(single.data()) {
            assert!((a - c).abs() < 1e-12 && (b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn member_order_does_not_change_output() {
        let s = Shape3::new(3, 4, 4);
        let members: Vec<_> = (0..3).map(|i| random_probs(s, 30 + i, i as usize)).collect();
        let mems: Vec<_> = members.iter().map(compute_memory).collect();
        let out = pool_uncertainty(&members, &uncertainty_weights(&mems).unwrap()).unwrap();
        let rev: Vec<_> = members.iter().rev().cloned().collect();
        let rev_mems: Vec<_> = rev.iter().map(compute_memory).collect();
        let out_rev = pool_uncertainty(&rev, &uncertainty_weights(&rev_mems).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(out_rev.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Central differences of `Σ r ⊙ pool(ŷ)` w.r.t. every member probability,
    /// recomputing memories and weights each time.
    #[test]
    fn uncertainty_backward_matches_fd() {
        let s = Shape3::new(3, 2, 3);
        let members: Vec<_> = (0..3).map(|i| random_probs(s, 40 + i, i as usize)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r: Vec<f64> = (0..s.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let forward = |ms: &[ProbVolume]| -> f64 {
            let mems: Vec<_> = ms.iter().map(compute_memory).collect();
            let wf = uncertainty_weights(&mems).unwrap();
            pool_uncertainty(ms, &wf).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mems: Vec<_> = members.iter().map(compute_memory).collect();
        let wf = uncertainty_weights(&mems).unwrap();
        let out = pool_uncertainty(&members, &wf).unwrap();
        let grads = pool_backward(
            &members,
            &out,
            &r,
            PoolGradient::Uncertainty { weights: &wf, memories: &mems, through_weights: true },
        );
        let frozen = pool_backward(
            &members,
            &out,
            &r,
            PoolGradient::Uncertainty { weights: &wf, memories: &mems, through_weights: false },
        );
        let h = 1e-6;
        let mut differs = false;
        for i in 0..3 {
            for k in 0..members[i].data().len() {
                let mut plus = members.clone();
                plus[i].data_mut()[k] += h;
                let mut minus = members.clone();
                minus[i].data_mut()[k] -= h;
                let num = (forward(&plus) - forward(&minus)) / (2.0 * h);
                assert!((num - grads[i][k]).abs() < 1e-8, "member {i} elem {k}: {num} vs {}", grads[i][k]);
                differs |= (frozen[i][k] - grads[i][k]).abs() > 1e-10;
            }
        }
        assert!(differs);
    }

    #[test]
    fn fixed_backward_matches_fd() {
        let s = Shape3::new(2, 2, 2);
        let members: Vec<_> = (0..2).map(|i| random_probs(s, 50 + i, i as usize)).collect();
        let w = [0.7, 0.3];
        let r: Vec<f64> = (0..s.len() * 4).map(|k| (k as f64 * 0.37).sin()).collect();
        let out = pool_fixed(&members, &w).unwrap();
        let grads = pool_backward(&members, &out, &r, PoolGradient::Fixed(&w));
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..members[i].data().len() {
                let f = |delta: f64| {
                    let mut ms = members.clone();
                    ms[i].data_mut()[k] += delta;
                    pool_fixed(&ms, &w).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
                };
                let num = (f(h) - f(-h)) / (2.0 * h);
                assert!((num - grads[i][k]).abs() < 1e-8);
            }
        }
    }
}
