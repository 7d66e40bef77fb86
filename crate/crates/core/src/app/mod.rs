//! The commands behind the `streamseg` binary.
//!
//! Each command reads its inputs, writes its outputs into one directory and
//! finishes with a [`RunManifest`] in that directory.

mod dataset;

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetIndex, FileFormat, IndexEntry, INDEX_FILE};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::ensemble::{compute_memory, predict_ensemble, uncertainty_weights, EnsembleConfig, EnsembleMode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_testset, write_metrics_csv, EvalConfig, EvalReport};
use crate::nn::{Arch, ClassifierSpec};
use crate::report::{cost_report, render_frame, tree_hash, CostReport, RenderSummary, RunManifest};
use crate::train::{gradient_check, train_independent, train_until, GradCheckProblem, TrainState};
use crate::volume::{
    augment, generate_phantom, load_volume, resize_mask, resize_volume, save_volume, CineVolume, LabelMask,
    PhantomSpec, Shape3, VolumeFormat,
};

/// Parameters compared per member by the pre-training gradient check.
pub const GRAD_CHECK_PARAMS: usize = 100;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn hash_inputs(inputs: &[(String, Vec<u8>)]) -> String {
    tree_hash(inputs.iter().map(|(n, b)| (n.as_str(), b.as_slice())))
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("run config serializes")
}

/// Resizes (when configured) and normalizes one frame for inference.
pub fn prepare_frame(cfg: &RunConfig, v: &CineVolume, mask: Option<&LabelMask>) -> Result<(CineVolume, Option<LabelMask>)> {
    match cfg.preprocess.image_size {
        Some(size) => {
            let m = mask.map(|m| resize_mask(m, size)).transpose()?;
            Ok((resize_volume(v, size)?.normalize(), m))
        }
        None => Ok((v.normalize(), mask.cloned())),
    }
}

/// [`prepare_frame`] on every training frame, followed by augmentation.
pub fn prepare_training(cfg: &RunConfig, frames: &[(CineVolume, LabelMask)]) -> Result<Vec<(CineVolume, LabelMask)>> {
    let mut out = Vec::with_capacity(frames.len());
    for (v, m) in frames {
        let (v, m) = prepare_frame(cfg, v, Some(m))?;
        out.extend(augment(&(v, m.expect("mask given")), &cfg.preprocess.augmentation)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- generate

/// Writes `count` phantom frames into `out`. `seed` overrides `spec.seed`.
pub fn cmd_generate(spec: &PhantomSpec, count: usize, seed: Option<u64>, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let spec = PhantomSpec { seed: seed.unwrap_or(spec.seed), ..spec.clone() };
    spec.validate()?;
    let frames: Vec<_> = generate_phantom(&spec, count)?.into_iter().map(|(v, m)| (v, Some(m))).collect();
    let mut outputs = write_dataset(out, &frames)?;
    outputs.push("manifest.json".into());
    let config = serde_json::json!({ "phantom": spec, "count": count });
    let manifest = RunManifest::new("generate", config, spec.seed, hash_inputs(&[])).finish(outputs, start.elapsed());
    manifest.write(out)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train

/// Saved model: the training state plus the configuration it was trained with.
pub fn save_model(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    state.save(path, &serde_json::json!({ "config": cfg }))
}

pub fn load_model(path: &Path) -> Result<(TrainState, RunConfig)> {
    let (state, extra) = TrainState::load(path)?;
    let cfg = extra
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Data(format!("{} carries no run configuration", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_value(cfg).map_err(|e| Error::Data(format!("{}: bad configuration: {e}", path.display())))?;
    let specs: Vec<&ClassifierSpec> = state.members.iter().map(|m| &m.spec).collect();
    if specs != cfg.ensemble.members.iter().collect::<Vec<_>>() {
        return Err(Error::Data(format!("{}: member specs disagree with the stored configuration", path.display())));
    }
    Ok((state, cfg))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:04}.ckpt")
}

/// `run,epoch,steps,mean_loss` rows rebuilt from a step-level loss history.
fn loss_rows(csv: &mut String, run: &str, history: &[f64], steps_per_epoch: usize) {
    for (e, chunk) in history.chunks(steps_per_epoch).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        writeln!(csv, "{run},{},{},{mean}", e + 1, chunk.len()).unwrap();
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: RunConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Checkpoint to continue from (end-to-end modes only).
    pub resume: Option<PathBuf>,
}

/// Trains the configured ensemble.
///
/// Writes `model.ckpt`, periodic `checkpoint_epochNNNN.ckpt` files,
/// `loss.csv`, `gradcheck.json` when requested, and the manifest. `log`
/// receives one line per finished epoch.
pub fn cmd_train(args: &TrainArgs, mut log: impl FnMut(&str)) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = &args.config;
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    let mut inputs = ds.input_files()?;
    if let Some(r) = &args.resume {
        inputs.push(("resume".into(), read_file(r)?));
    }
    let trainset = prepare_training(cfg, &ds.labelled()?)?;
    create_dir(&args.out)?;
    let mut outputs = vec!["model.ckpt".to_string(), "loss.csv".into(), "manifest.json".into()];

    if cfg.train.grad_check {
        let problem = GradCheckProblem::tiny(cfg.train.seed)?;
        let specs = problem.members.iter().map(|m| m.spec.clone()).collect();
        let mode = if cfg.ensemble.mode == EnsembleMode::Uncertainty { EnsembleMode::Uncertainty } else { EnsembleMode::Fixed };
        let ens = EnsembleConfig { mode, ..EnsembleConfig::fixed(specs) };
        let report = gradient_check(&ens, &cfg.loss, &problem, GRAD_CHECK_PARAMS, cfg.train.seed)?;
        log(&format!("gradient check passed: max relative error {:.3e}", report.max_rel_error));
        write_file(&args.out.join("gradcheck.json"), serde_json::to_string_pretty(&report).expect("serializes"))?;
        outputs.push("gradcheck.json".into());
    }

    let steps_per_epoch = trainset.len().div_ceil(cfg.train.batch_frames);
    let mut csv = String::from("run,epoch,steps,mean_loss\n");
    if cfg.ensemble.mode.is_end_to_end() {
        let mut state = match &args.resume {
            Some(path) => {
                let (state, saved) = load_model(path)?;
                if saved.ensemble.members != cfg.ensemble.members {
                    return Err(Error::config(format!("{} was trained with different members", path.display())));
                }
                state
            }
            None => TrainState::new(&cfg.ensemble.members)?,
        };
        train_until(&mut state, &trainset, &cfg.ensemble, &cfg.loss, &cfg.train, |s, summary| {
            log(&format!("epoch {} loss {:.6}", summary.epoch, summary.mean_loss));
            let every = cfg.train.checkpoint_every;
            if every > 0 && s.epoch % every == 0 {
                let name = checkpoint_name(s.epoch);
                save_model(&args.out.join(&name), s, cfg)?;
                outputs.push(name);
            }
            Ok(())
        })?;
        loss_rows(&mut csv, "ensemble", &state.loss_history, steps_per_epoch);
        save_model(&args.out.join("model.ckpt"), &state, cfg)?;
    } else {
        if args.resume.is_some() {
            return Err(Error::config(format!("{} training cannot resume", cfg.ensemble.mode.name())));
        }
        let states = train_independent(&cfg.ensemble, &trainset, &cfg.loss, &cfg.train)?;
        let mut joined = TrainState::from_members(Vec::new());
        for (i, s) in states.into_iter().enumerate() {
            loss_rows(&mut csv, &format!("member{i}"), &s.loss_history, steps_per_epoch);
            log(&format!("member {i} final loss {:.6}", s.loss_history.last().copied().unwrap_or(f64::NAN)));
            joined.members.extend(s.members);
            joined.optimizer.extend(s.optimizer);
            joined.loss_history.extend(s.loss_history);
            joined.epoch = s.epoch;
        }
        save_model(&args.out.join("model.ckpt"), &joined, cfg)?;
    }
    write_file(&args.out.join("loss.csv"), csv)?;
    let seed = cfg.train.seed;
    let manifest = RunManifest::new("train", config_json(cfg), seed, hash_inputs(&inputs)).finish(outputs, start.elapsed());
    manifest.write(&args.out)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- eval

/// Where `eval` gets its predictions from.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// Run a trained model. `mode` overrides the pooling strategy and
    /// `member` evaluates one member on its own.
    Checkpoint { path: PathBuf, mode: Option<EnsembleMode>, member: Option<usize> },
    /// Read `<frame_id>.pvol` label masks from a directory.
    Predictions(PathBuf),
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub source: EvalSource,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Overrides the stored evaluation settings.
    pub eval: Option<EvalConfig>,
    /// Also write every predicted mask under `out/predictions/`.
    pub save_predictions: bool,
}

/// The ensemble a checkpoint evaluates as, after `mode` and `member`
/// overrides.
pub fn eval_ensemble(cfg: &RunConfig, mode: Option<EnsembleMode>, member: Option<usize>) -> Result<(EnsembleConfig, Vec<usize>)> {
    let n = cfg.ensemble.members.len();
    let picked: Vec<usize> = match member {
        Some(i) if i >= n => return Err(Error::config(format!("member {i} requested, checkpoint has {n}"))),
        Some(i) => vec![i],
        None => (0..n).collect(),
    };
    let mode = mode.unwrap_or(cfg.ensemble.mode);
    let members: Vec<ClassifierSpec> = picked.iter().map(|&i| cfg.ensemble.members[i].clone()).collect();
    let fixed_weights = if member.is_none() && cfg.ensemble.fixed_weights.len() == n {
        cfg.ensemble.fixed_weights.clone()
    } else {
        vec![1.0 / members.len() as f64; members.len()]
    };
    let ens = EnsembleConfig { mode, fixed_weights, members, ..cfg.ensemble.clone() };
    ens.validate()?;
    Ok((ens, picked))
}

/// Scores predictions against the masks in `data`; writes `metrics.csv`.
pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, RunManifest)> {
    let start = Instant::now();
    let ds = load_dataset(&args.data)?;
    let mut inputs = ds.input_files()?;
    create_dir(&args.out)?;
    let mut outputs = vec!["metrics.csv".to_string(), "manifest.json".into()];
    let mut scored = Vec::with_capacity(ds.frames.len());
    let (config, seed, eval_cfg) = match &args.source {
        EvalSource::Checkpoint { path, mode, member } => {
            inputs.push(("checkpoint".into(), read_file(path)?));
            let (state, cfg) = load_model(path)?;
            let (ens, picked) = eval_ensemble(&cfg, *mode, *member)?;
            let params: Vec<_> = picked.iter().map(|&i| state.members[i].clone()).collect();
            for (v, m) in &ds.frames {
                let truth = m.as_ref().ok_or_else(|| Error::Data(format!("frame {} has no mask", v.frame_id)))?;
                let (v, truth) = prepare_frame(&cfg, v, Some(truth))?;
                let pred = predict_ensemble(&ens, &params, &v)?.probs.argmax();
                scored.push((v.frame_id.clone(), pred, truth.expect("mask given"), v));
            }
            let config = serde_json::json!({ "run": cfg, "ensemble": ens, "member": member });
            (config, cfg.train.seed, args.eval.clone().unwrap_or(cfg.eval))
        }
        EvalSource::Predictions(dir) => {
            for (v, m) in &ds.frames {
                let truth = m.as_ref().ok_or_else(|| Error::Data(format!("frame {} has no mask", v.frame_id)))?;
                let file = format!("{}.pvol", v.frame_id);
                let path = dir.join(&file);
                inputs.push((format!("predictions/{file}"), read_file(&path)?));
                let (_, pred) = load_volume(&path, VolumeFormat::PortableVolume)?;
                let pred = pred.ok_or_else(|| Error::Data(format!("{} holds no label mask", path.display())))?;
                scored.push((v.frame_id.clone(), pred, truth.clone(), v.clone()));
            }
            let eval = args.eval.clone().unwrap_or_default();
            (serde_json::json!({ "predictions": true, "eval": eval }), 0, eval)
        }
    };
    if args.save_predictions {
        let dir = args.out.join("predictions");
        create_dir(&dir)?;
        for (id, pred, _, v) in &scored {
            let file = format!("{id}.pvol");
            save_volume(&dir.join(&file), v, Some(pred), VolumeFormat::PortableVolume)?;
            outputs.push(format!("predictions/{file}"));
        }
    }
    let frames: Vec<_> = scored.into_iter().map(|(id, p, t, _)| (id, p, t)).collect();
    let report = evaluate_testset(&frames, &eval_cfg)?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &report)?;
    write_file(&args.out.join("metrics.csv"), buf)?;
    let manifest = RunManifest::new("eval", config, seed, hash_inputs(&inputs)).finish(outputs, start.elapsed());
    manifest.write(&args.out)?;
    Ok((report, manifest))
}

// ---------------------------------------------------------------- render

#[derive(Debug, Clone)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    /// A frame id from `data`, or a path to a portable-volume file.
    pub frame: String,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

/// Overlays of every slice and σ / ω̄ heatmaps of every member.
///
/// The memories and weights are computed from the member outputs whatever
/// the pooling mode, so they can be inspected for any ensemble.
pub fn cmd_render(args: &RenderArgs) -> Result<(RenderSummary, RunManifest)> {
    let start = Instant::now();
    let (state, cfg) = load_model(&args.checkpoint)?;
    let mut inputs = vec![("checkpoint".to_string(), read_file(&args.checkpoint)?)];
    let as_path = Path::new(&args.frame);
    let (v, truth) = if as_path.is_file() {
        inputs.push(("frame".into(), read_file(as_path)?));
        load_volume(as_path, VolumeFormat::PortableVolume)?
    } else {
        let dir = args
            .data
            .as_ref()
            .ok_or_else(|| Error::config(format!("`{}` is not a file and no --data directory was given", args.frame)))?;
        let ds = load_dataset(dir)?;
        let (v, m) = ds.find(&args.frame).ok_or_else(|| Error::Data(format!("no frame `{}` in {}", args.frame, dir.display())))?;
        let file = &ds.index.frames.iter().find(|e| e.frame_id == args.frame).expect("indexed").file;
        inputs.push(("frame".into(), read_file(&dir.join(file))?));
        (v.clone(), m.clone())
    };
    let (v, truth) = prepare_frame(&cfg, &v, truth.as_ref())?;
    let pred = predict_ensemble(&cfg.ensemble, &state.members, &v)?;
    let memories: Vec<_> = pred.member_probs.iter().map(compute_memory).collect();
    let weights = uncertainty_weights(&memories)?;
    let summary = render_frame(
        &v,
        truth.as_ref(),
        &pred.probs.argmax(),
        Some(&memories),
        Some(&weights),
        cfg.eval.end_slice_count,
        &args.out,
    )?;
    let mut outputs: Vec<String> = summary.slices.iter().map(|s| s.file.clone()).collect();
    for h in summary.sigma.iter().chain(&summary.weights) {
        outputs.push(h.png.clone());
        outputs.push(h.pvol.clone());
    }
    outputs.extend(["render.json".to_string(), "manifest.json".into()]);
    let config = serde_json::json!({ "run": cfg, "frame": args.frame });
    let manifest =
        RunManifest::new("render", config, cfg.train.seed, hash_inputs(&inputs)).finish(outputs, start.elapsed());
    manifest.write(&args.out)?;
    Ok((summary, manifest))
}

// ---------------------------------------------------------------- cost

/// Frame shape a configuration trains on: the largest phantom depth and the
/// preprocessed slice size.
pub fn default_frame_shape(cfg: &RunConfig) -> Shape3 {
    let (h, w) = cfg.preprocess.image_size.unwrap_or(cfg.phantom.image_size);
    Shape3::new(cfg.phantom.depth_range.max, h, w)
}

/// Writes `cost.json` for the configured ensemble.
pub fn cmd_cost(cfg: &RunConfig, frame: Option<Shape3>, out: &Path) -> Result<(CostReport, RunManifest)> {
    let start = Instant::now();
    cfg.validate()?;
    let frame = frame.unwrap_or_else(|| default_frame_shape(cfg));
    let report = cost_report(&cfg.ensemble.members, cfg.ensemble.mode, frame)?;
    create_dir(out)?;
    write_file(&out.join("cost.json"), serde_json::to_string_pretty(&report).expect("serializes"))?;
    let config = serde_json::json!({ "run": cfg, "frame_shape": [frame.depth, frame.height, frame.width] });
    let manifest = RunManifest::new("cost", config, cfg.train.seed, hash_inputs(&[]))
        .finish(vec!["cost.json".into(), "manifest.json".into()], start.elapsed());
    manifest.write(out)?;
    Ok((report, manifest))
}

// ---------------------------------------------------------------- ablate

/// Strategy rows of the ablation table, in order.
pub const ABLATION_MODES: [EnsembleMode; 5] = [
    EnsembleMode::Fixed,
    EnsembleMode::Stacking,
    EnsembleMode::Bagging,
    EnsembleMode::Augmenting,
    EnsembleMode::Uncertainty,
];

/// Ensemble of `n` members for one ablation cell, derived from the
/// configured members. Member `k` takes the architecture of configured
/// member `k mod len` and seed `first seed + k`; stacking alternates the two
/// architectures, bagging repeats the first one.
pub fn ablation_ensemble(base: &EnsembleConfig, mode: EnsembleMode, n: usize) -> Result<EnsembleConfig> {
    if base.members.is_empty() || n == 0 {
        return Err(Error::config("ablation needs at least one member"));
    }
    if mode == EnsembleMode::Augmenting && n != 1 {
        return Err(Error::config("augmenting uses exactly one member"));
    }
    let first = &base.members[0];
    let members = (0..n)
        .map(|k| {
            let mut spec = match mode {
                EnsembleMode::Bagging => first.clone(),
                _ => base.members[k % base.members.len()].clone(),
            };
            if mode == EnsembleMode::Stacking {
                spec.arch = if k % 2 == 0 { Arch::UnetLite } else { Arch::DilatedLite };
            }
            spec.seed = first.seed + k as u64;
            spec
        })
        .collect();
    let ens = EnsembleConfig {
        mode,
        fixed_weights: vec![1.0 / n as f64; n],
        members,
        bootstrap_seed: base.bootstrap_seed,
        test_augmentations: base.test_augmentations.clone(),
    };
    ens.validate()?;
    Ok(ens)
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub config: RunConfig,
    pub train: PathBuf,
    pub test: PathBuf,
    pub out: PathBuf,
    pub max_members: usize,
    pub modes: Vec<EnsembleMode>,
}

/// Columns of `ablation.csv`.
pub const ABLATION_COLUMNS: &str = "config,mode,members,dsc_rv,dsc_myo,dsc_lv,dsc_avg,hd_rv,hd_myo,hd_lv,hd_avg,ec";

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

/// Trains and scores every strategy with 1 to `max_members` members
/// (augmenting only with one). Writes `<mode>_n<k>.csv` per cell and
/// `ablation.csv` with one aggregate row per cell.
pub fn cmd_ablate(args: &AblateArgs, mut log: impl FnMut(&str)) -> Result<RunManifest> {
    let start = Instant::now();
    let base = &args.config;
    base.validate()?;
    if args.max_members == 0 {
        return Err(Error::config("--max-members must be at least 1"));
    }
    let train_ds = load_dataset(&args.train)?;
    let test_ds = load_dataset(&args.test)?;
    let mut inputs: Vec<_> = train_ds.input_files()?.into_iter().map(|(n, b)| (format!("train/{n}"), b)).collect();
    inputs.extend(test_ds.input_files()?.into_iter().map(|(n, b)| (format!("test/{n}"), b)));
    let trainset = prepare_training(base, &train_ds.labelled()?)?;
    let testset = test_ds
        .labelled()?
        .iter()
        .map(|(v, m)| prepare_frame(base, v, Some(m)).map(|(v, m)| (v, m.expect("mask given"))))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&args.out)?;
    let mut summary = format!("{ABLATION_COLUMNS}\n");
    let mut outputs = vec!["ablation.csv".to_string(), "manifest.json".into()];
    for &mode in &args.modes {
        let sizes = if mode == EnsembleMode::Augmenting { 1..=1 } else { 1..=args.max_members };
        for n in sizes {
            let ens = ablation_ensemble(&base.ensemble, mode, n)?;
            let members = if mode.is_end_to_end() {
                let mut state = TrainState::new(&ens.members)?;
                train_until(&mut state, &trainset, &ens, &base.loss, &base.train, |_, _| Ok(()))?;
                state.members
            } else {
                train_independent(&ens, &trainset, &base.loss, &base.train)?
                    .into_iter()
                    .flat_map(|s| s.members)
                    .collect()
            };
            let mut frames = Vec::with_capacity(testset.len());
            for (v, m) in &testset {
                frames.push((v.frame_id.clone(), predict_ensemble(&ens, &members, v)?.probs.argmax(), m.clone()));
            }
            let report = evaluate_testset(&frames, &base.eval)?;
            let name = format!("{}_n{n}", mode.name());
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &report)?;
            write_file(&args.out.join(format!("{name}.csv")), buf)?;
            outputs.push(format!("{name}.csv"));
            let a = &report.aggregate;
            writeln!(
                summary,
                "{name},{},{n},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.6}",
                mode.name(),
                a.dsc[0],
                a.dsc[1],
                a.dsc[2],
                a.average_dsc,
                fmt_opt(a.hd[0]),
                fmt_opt(a.hd[1]),
                fmt_opt(a.hd[2]),
                fmt_opt(a.hd_average),
                a.ec
            )
            .unwrap();
            log(&format!("{name}: dsc {:.4} ec {:.4}", a.average_dsc, a.ec));
        }
    }
    write_file(&args.out.join("ablation.csv"), summary)?;
    let config = serde_json::json!({
        "run": base,
        "max_members": args.max_members,
        "modes": args.modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
    });
    let manifest =
        RunManifest::new("ablate", config, base.train.seed, hash_inputs(&inputs)).finish(outputs, start.elapsed());
    manifest.write(&args.out)?;
    Ok(manifest)
}
