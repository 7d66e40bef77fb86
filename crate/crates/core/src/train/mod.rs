//! End-to-end ensemble training.
//!
//! Every member runs over whole frames, the outputs are pooled, and the loss
//! on the pooled probabilities is backpropagated through the pooling layer
//! (including the weight field in uncertainty mode) into all members. A
//! single RMSprop step then updates all members together.

mod gradcheck;
mod rmsprop;

pub use gradcheck::{gradient_check, GradCheckProblem, GradCheckReport, FD_STEP, GRAD_CHECK_TOL};
pub use rmsprop::{rmsprop_step, RmsPropConfig, RmsPropState};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    bootstrap_indices, bootstrap_seed_for, compute_memory, pool_backward, pool_fixed, pool_uncertainty,
    uncertainty_weights, EnsembleConfig, EnsembleMode, PoolGradient, ProbVolume,
};
use crate::error::{Error, Result};
use crate::loss::{total_loss_grad, LossBreakdown, LossConfig};
use crate::nn::checkpoint::{classifier_arrays, classifier_from_arrays, read_arrays, write_arrays, NamedArray};
use crate::nn::{
    forward_slice_cached, init_classifier, zero_grads, ClassifierParams, ClassifierSpec, FeatureMap, Mode, ParamGrads,
    SliceTape,
};
use crate::seeds::mix;
use crate::volume::{check_same_shape, CineVolume, LabelMask, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Frames per optimizer step.
    pub batch_frames: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Treat the uncertainty weights as constants during backpropagation.
    pub stop_gradient: bool,
    /// Run a gradient check on a tiny problem before training.
    pub grad_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-7,
            momentum: 0.9,
            batch_frames: 2,
            epochs: 30,
            seed: 0,
            checkpoint_every: 0,
            stop_gradient: false,
            grad_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("weight_decay must be >= 0 and momentum in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_frames == 0 {
            return Err(Error::config("epochs and batch_frames must be at least 1"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            ..RmsPropConfig::default()
        }
    }
}

/// Parameters, optimizer accumulators and progress of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub members: Vec<ClassifierParams>,
    pub optimizer: Vec<RmsPropState>,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean batch loss of every completed step.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(specs: &[ClassifierSpec]) -> Result<Self> {
        let members = specs.iter().map(init_classifier).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_members(members))
    }

    pub fn from_members(members: Vec<ClassifierParams>) -> Self {
        let optimizer = members.iter().map(RmsPropState::new).collect();
        TrainState { members, optimizer, epoch: 0, loss_history: Vec::new() }
    }

    /// Writes the full state; `extra` is stored verbatim in the header.
    pub fn save(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        let specs: Vec<&ClassifierSpec> = self.members.iter().map(|m| &m.spec).collect();
        let meta = serde_json::json!({
            "kind": "train_state",
            "epoch": self.epoch,
            "members": specs,
            "extra": extra,
        });
        let mut arrays = Vec::new();
        for (i, (m, o)) in self.members.iter().zip(&self.optimizer).enumerate() {
            arrays.extend(classifier_arrays(m, &format!("member{i}.")));
            for (k, t) in m.tensors.iter().enumerate() {
                let arr = |kind: &str, data: &[f64]| NamedArray {
                    name: format!("opt{i}.{kind}.{}", t.name),
                    shape: t.shape.clone(),
                    data: data.to_vec(),
                };
                arrays.push(arr("square_avg", &o.square_avg[k]));
                arrays.push(arr("momentum", &o.momentum_buf[k]));
            }
        }
        arrays.push(NamedArray {
            name: "loss_history".into(),
            shape: vec![self.loss_history.len()],
            data: self.loss_history.clone(),
        });
        write_arrays(path, &meta, &arrays)
    }

    /// Reads a state written by [`TrainState::save`] and its `extra` value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (meta, arrays) = read_arrays(path)?;
        let malformed = |reason: &str| Error::MalformedHeader { path: path.to_path_buf(), reason: reason.into() };
        if meta.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(malformed("not a training checkpoint"));
        }
        let epoch = meta.get("epoch").and_then(|e| e.as_u64()).ok_or_else(|| malformed("missing epoch"))? as usize;
        let specs: Vec<ClassifierSpec> = serde_json::from_value(meta.get("members").cloned().unwrap_or_default())
            .map_err(|e| malformed(&format!("member specs: {e}")))?;
        let find = |name: &str| {
            arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))
        };
        let mut members = Vec::new();
        let mut optimizer = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let m = classifier_from_arrays(spec, &arrays, &format!("member{i}."))?;
            let mut o = RmsPropState::new(&m);
            for (k, t) in m.tensors.iter().enumerate() {
                o.square_avg[k] = find(&format!("opt{i}.square_avg.{}", t.name))?.data.clone();
                o.momentum_buf[k] = find(&format!("opt{i}.momentum.{}", t.name))?.data.clone();
                if o.square_avg[k].len() != t.data.len() || o.momentum_buf[k].len() != t.data.len() {
                    return Err(Error::shape(format!("optimizer state for {} has the wrong size", t.name)));
                }
            }
            members.push(m);
            optimizer.push(o);
        }
        let loss_history = find("loss_history")?.data.clone();
        let extra = meta.get("extra").cloned().unwrap_or_default();
        Ok((TrainState { members, optimizer, epoch, loss_history }, extra))
    }
}

/// How member outputs are combined during training.
#[derive(Debug, Clone, PartialEq)]
pub enum Pooling {
    Fixed(Vec<f64>),
    Uncertainty { through_weights: bool },
}

impl Pooling {
    pub fn for_config(ens: &EnsembleConfig, stop_gradient: bool) -> Result<Self> {
        match ens.mode {
            EnsembleMode::Fixed => Ok(Pooling::Fixed(ens.fixed_weights.clone())),
            EnsembleMode::Uncertainty => Ok(Pooling::Uncertainty { through_weights: !stop_gradient }),
            m => Err(Error::config(format!("{} members are not trained end to end", m.name()))),
        }
    }
}

/// A member's probabilities on one frame with the tapes of every slice.
struct MemberPass {
    probs: ProbVolume,
    tapes: Vec<SliceTape>,
}

fn forward_member(params: &ClassifierParams, v: &CineVolume, dropout_seed: Option<u64>, id: usize) -> Result<MemberPass> {
    let s = v.shape();
    let mut data = Vec::with_capacity(s.len() * NUM_CLASSES);
    let mut tapes = Vec::with_capacity(s.depth);
    for d in 0..s.depth {
        let slice: Vec<f64> = v.slice(d).iter().map(|&x| x as f64).collect();
        let mode = match dropout_seed {
            Some(seed) => Mode::Train { dropout_seed: mix(&[seed, d as u64]) },
            None => Mode::Eval,
        };
        let tape = forward_slice_cached(params, &slice, s.height, s.width, mode)?;
        data.extend_from_slice(&tape.probs().data);
        tapes.push(tape);
    }
    let mut probs = ProbVolume::new(id, s, data)?;
    probs.frame_id = v.frame_id.clone();
    Ok(MemberPass { probs, tapes })
}

/// Forward, pool, loss and backward for one frame. Parameter gradients of
/// `scale · loss` are added into `grads`.
pub(crate) fn frame_gradients(
    members: &[ClassifierParams],
    frame: &CineVolume,
    mask: &LabelMask,
    pooling: &Pooling,
    loss: &LossConfig,
    dropout_seeds: Option<&[u64]>,
    scale: f64,
    grads: &mut [ParamGrads],
) -> Result<(LossBreakdown, Vec<u64>)> {
    check_same_shape(frame.shape(), mask.shape(), "training frame/mask")?;
    let passes = members
        .iter()
        .enumerate()
        .map(|(i, p)| forward_member(p, frame, dropout_seeds.map(|s| s[i]), i))
        .collect::<Result<Vec<_>>>()?;
    let signatures = passes.iter().flat_map(|p| p.tapes.iter().map(SliceTape::activation_signature)).collect();
    let probs: Vec<ProbVolume> = passes.iter().map(|p| p.probs.clone()).collect();
    let (parts, dmembers) = match pooling {
        Pooling::Fixed(w) => {
            let pooled = pool_fixed(&probs, w)?;
            let (parts, mut g) = total_loss_grad(&pooled, mask, loss)?;
            g.iter_mut().for_each(|x| *x *= scale);
            (parts, pool_backward(&probs, &pooled, &g, PoolGradient::Fixed(w)))
        }
        Pooling::Uncertainty { through_weights } => {
            let memories: Vec<_> = probs.iter().map(compute_memory).collect();
            let wf = uncertainty_weights(&memories)?;
            let pooled = pool_uncertainty(&probs, &wf)?;
            let (parts, mut g) = total_loss_grad(&pooled, mask, loss)?;
            g.iter_mut().for_each(|x| *x *= scale);
            let how = PoolGradient::Uncertainty { weights: &wf, memories: &memories, through_weights: *through_weights };
            (parts, pool_backward(&probs, &pooled, &g, how))
        }
    };
    let s = frame.shape();
    let block = NUM_CLASSES * s.slice_len();
    for (i, pass) in passes.iter().enumerate() {
        for (d, tape) in pass.tapes.iter().enumerate() {
            let dprobs = FeatureMap::from_data(NUM_CLASSES, s.height, s.width, dmembers[i][d * block..(d + 1) * block].to_vec());
            tape.backward(&members[i], &dprobs, &mut grads[i]);
        }
    }
    Ok((parts, signatures))
}

/// Mean batch loss of a finished epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochSummary {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Frame order of `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, epoch as u64])));
    order
}

/// One pass over `trainset` in a seeded order, one optimizer step per batch
/// of whole frames.
pub fn train_epoch(
    state: &mut TrainState,
    trainset: &[(CineVolume, LabelMask)],
    ens: &EnsembleConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<EpochSummary> {
    cfg.validate()?;
    loss.validate()?;
    if trainset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if state.members.len() != ens.members.len() {
        return Err(Error::config(format!(
            "state has {} members, ensemble {}",
            state.members.len(),
            ens.members.len()
        )));
    }
    let pooling = Pooling::for_config(ens, cfg.stop_gradient)?;
    let opt = cfg.optimizer();
    let epoch = state.epoch;
    let order = epoch_order(trainset.len(), cfg.seed, epoch);
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(cfg.batch_frames) {
        let step = state.loss_history.len() as u64;
        let mut grads: Vec<ParamGrads> = state.members.iter().map(zero_grads).collect();
        let scale = 1.0 / batch.len() as f64;
        let mut batch_loss = 0.0;
        for (pos, &fi) in batch.iter().enumerate() {
            let seeds: Vec<u64> = state
                .members
                .iter()
                .enumerate()
                .map(|(i, m)| mix(&[cfg.seed, step, pos as u64, i as u64, m.spec.seed]))
                .collect();
            let (v, mask) = &trainset[fi];
            let (parts, _) =
                frame_gradients(&state.members, v, mask, &pooling, loss, Some(&seeds), scale, &mut grads)?;
            batch_loss += scale * parts.total;
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { value: batch_loss, epoch: epoch + 1, step: step as usize });
        }
        for ((m, g), o) in state.members.iter_mut().zip(&grads).zip(&mut state.optimizer) {
            rmsprop_step(m, g, o, &opt);
        }
        state.loss_history.push(batch_loss);
        total += batch_loss;
        steps += 1;
    }
    state.epoch += 1;
    Ok(EpochSummary { epoch: state.epoch, steps, mean_loss: total / steps as f64 })
}

/// Trains until `cfg.epochs` epochs are complete, calling `after_epoch`
/// after each one.
pub fn train_until(
    state: &mut TrainState,
    trainset: &[(CineVolume, LabelMask)],
    ens: &EnsembleConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&TrainState, &EpochSummary) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    let mut out = Vec::new();
    while state.epoch < cfg.epochs {
        let summary = train_epoch(state, trainset, ens, loss, cfg)?;
        after_epoch(state, &summary)?;
        out.push(summary);
    }
    Ok(out)
}

/// Trains one network alone: a single-member ensemble with weight 1.
pub fn train_solo(
    spec: &ClassifierSpec,
    trainset: &[(CineVolume, LabelMask)],
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let ens = EnsembleConfig::fixed(vec![spec.clone()]);
    let mut state = TrainState::new(std::slice::from_ref(spec))?;
    train_until(&mut state, trainset, &ens, loss, cfg, |_, _| Ok(()))?;
    Ok(state)
}

/// Members of a stacking, bagging or augmenting ensemble, each trained on
/// its own. Bagging members see a bootstrap resample drawn from
/// `bootstrap_seed_for(ens.bootstrap_seed, spec.seed)`.
pub fn train_independent(
    ens: &EnsembleConfig,
    trainset: &[(CineVolume, LabelMask)],
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<TrainState>> {
    ens.validate()?;
    if ens.mode.is_end_to_end() {
        return Err(Error::config(format!("{} members are trained jointly", ens.mode.name())));
    }
    ens.members
        .iter()
        .map(|spec| {
            if ens.mode == EnsembleMode::Bagging {
                let idx = bootstrap_indices(trainset.len(), bootstrap_seed_for(ens.bootstrap_seed, spec.seed));
                let resampled: Vec<_> = idx.iter().map(|&i| trainset[i].clone()).collect();
                train_solo(spec, &resampled, loss, cfg)
            } else {
                train_solo(spec, trainset, loss, cfg)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;
    use crate::volume::{generate_phantom, PhantomSpec, Range};

    fn tiny(seed: u64, dropout_p: f64) -> ClassifierSpec {
        ClassifierSpec { arch: Arch::UnetLite, base_channels: 2, depth_levels: 2, bottleneck_channels: 4, dropout_p, seed }
    }

    fn data(n: usize) -> Vec<(CineVolume, LabelMask)> {
        let spec = PhantomSpec { depth_range: Range::new(3, 3), image_size: (16, 16), ..PhantomSpec::default() };
        generate_phantom(&spec, n).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { learning_rate: 1e-3, epochs, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn identical_members_stay_identical_without_dropout() {
        let specs = vec![tiny(3, 0.0), tiny(3, 0.0)];
        let mut state = TrainState::new(&specs).unwrap();
        let ens = EnsembleConfig::uncertainty(specs);
        let train = data(4);
        for _ in 0..3 {
            train_epoch(&mut state, &train, &ens, &LossConfig::default(), &cfg(3)).unwrap();
        }
        assert_eq!(state.members[0].tensors, state.members[1].tensors);
        assert_eq!(state.loss_history.len(), 6);
    }

    #[test]
    fn dropout_diversifies_identical_members() {
        let specs = vec![tiny(3, 0.5), tiny(3, 0.5)];
        let mut state = TrainState::new(&specs).unwrap();
        let ens = EnsembleConfig::fixed(specs);
        train_epoch(&mut state, &data(2), &ens, &LossConfig::default(), &cfg(1)).unwrap();
        assert_ne!(state.members[0].tensors, state.members[1].tensors);
    }

    #[test]
    fn single_member_fixed_is_solo_training() {
        let spec = tiny(1, 0.5);
        let train = data(3);
        let solo = train_solo(&spec, &train, &LossConfig::default(), &cfg(2)).unwrap();
        let mut state = TrainState::new(std::slice::from_ref(&spec)).unwrap();
        let ens = EnsembleConfig::fixed(vec![spec]);
        train_until(&mut state, &train, &ens, &LossConfig::default(), &cfg(2), |_, _| Ok(())).unwrap();
        assert_eq!(solo, state);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let specs = vec![tiny(1, 0.5), tiny(2, 0.5)];
        let ens = EnsembleConfig::uncertainty(specs.clone());
        let train = data(3);
        let run = || {
            let mut s = TrainState::new(&specs).unwrap();
            train_until(&mut s, &train, &ens, &LossConfig::default(), &cfg(2), |_, _| Ok(())).unwrap();
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let specs = vec![tiny(1, 0.5), tiny(2, 0.5)];
        let ens = EnsembleConfig::uncertainty(specs.clone());
        let train = data(3);
        let loss = LossConfig::default();
        let mut full = TrainState::new(&specs).unwrap();
        train_until(&mut full, &train, &ens, &loss, &cfg(3), |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut part = TrainState::new(&specs).unwrap();
        train_until(&mut part, &train, &ens, &loss, &cfg(1), |_, _| Ok(())).unwrap();
        part.save(&path, &serde_json::json!({ "note": 1 })).unwrap();
        let (mut resumed, extra) = TrainState::load(&path).unwrap();
        assert_eq!(resumed, part);
        assert_eq!(extra["note"], 1);
        train_until(&mut resumed, &train, &ens, &loss, &cfg(3), |_, _| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let specs = vec![tiny(1, 0.0)];
        let mut state = TrainState::new(&specs).unwrap();
        state.members[0].tensors[0].data[0] = f64::NAN;
        let ens = EnsembleConfig::fixed(specs);
        let err = train_epoch(&mut state, &data(2), &ens, &LossConfig::default(), &cfg(1));
        assert!(matches!(err, Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn classical_modes_rejected_for_joint_training() {
        let specs = vec![tiny(1, 0.0), tiny(2, 0.0)];
        let mut state = TrainState::new(&specs).unwrap();
        let ens = EnsembleConfig { mode: EnsembleMode::Stacking, ..EnsembleConfig::fixed(specs) };
        assert!(matches!(train_epoch(&mut state, &data(2), &ens, &LossConfig::default(), &cfg(1)), Err(Error::Config(_))));
    }

    #[test]
    fn bagging_clones_share_bootstrap() {
        let specs = vec![tiny(4, 0.5), tiny(4, 0.5)];
        let ens = EnsembleConfig { mode: EnsembleMode::Bagging, bootstrap_seed: 11, ..EnsembleConfig::fixed(specs) };
        let states = train_independent(&ens, &data(4), &LossConfig::default(), &cfg(1)).unwrap();
        assert_eq!(states[0], states[1]);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let mut o = epoch_order(10, 1, 0);
        assert_ne!(o, epoch_order(10, 1, 1));
        o.sort();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }
}
