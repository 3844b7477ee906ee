//! Two-stage training, evaluation, the occlusion protocol and ablation
//! drivers.
//!
//! Stage one trains a detector without recurrent layers on single frames.
//! Stage two injects the recurrent layers, freezes the backbone, and trains
//! on windows of `unroll` consecutive frames with gradients truncated at the
//! window edge. Training is single-threaded and bitwise reproducible for a
//! given seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, BuildOptions, LayerKind, Placement};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::ParamStore;
use crate::cost;
use crate::data::{Augment, Dataset, VideoParams};
use crate::detection::{self, DecodeConfig, Detection, GroundTruth, LossConfig, MapReport, Target};
use crate::error::{Error, Result};
use crate::model::{FrameVars, Model, ModelState, ParamVars};
use crate::optim::{clip_global_norm, RmsProp, RmsPropConfig};
use crate::recurrent::{BottleneckForm, GateLayout, RecurrentKind, RecurrentWeights};
use crate::tensor::{ConvKernel, Real, Tensor};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TSL_SEED";

/// `TSL_SEED` when set, else `default`.
pub fn resolve_seed(default: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SsdOnly,
    LstmStage,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssd_only" | "stage1" => Ok(Stage::SsdOnly),
            "lstm_stage" | "stage2" => Ok(Stage::LstmStage),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub unroll: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optim: RmsPropConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Carry (detached) state from one window into the next window of the
    /// same videos; otherwise every window starts from zero state at a
    /// random offset.
    pub carry_state: bool,
    pub augment: bool,
    pub match_thresh: f64,
    pub loss: LossConfig,
    /// Last frozen layer during the recurrent stage; defaults to the
    /// backbone end.
    pub frozen_boundary: Option<String>,
    /// Probability of occluding each training box; masks are drawn once
    /// per run from the training seed.
    #[serde(default)]
    pub occlusion_p: f64,
    /// Start LSTM layers whose width matches their input close to a
    /// pass-through, with this gate gain, instead of random weights.
    #[serde(default)]
    pub pass_through_gain: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale single-frame stage.
    pub fn stage1_toy() -> Self {
        TrainConfig {
            stage: Stage::SsdOnly,
            unroll: 1,
            batch_size: 8,
            steps: 4000,
            optim: RmsPropConfig { lr: 0.002, ..Default::default() },
            clip_norm: 10.0,
            seed: 0,
            carry_state: false,
            augment: true,
            match_thresh: 0.5,
            loss: LossConfig::default(),
            frozen_boundary: None,
            occlusion_p: 0.0,
            pass_through_gain: None,
        }
    }

    /// Desk-scale recurrent stage.
    pub fn stage2_toy() -> Self {
        TrainConfig {
            stage: Stage::LstmStage,
            unroll: 10,
            batch_size: 4,
            steps: 600,
            carry_state: true,
            occlusion_p: 0.5,
            pass_through_gain: Some(4.0),
            ..TrainConfig::stage1_toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 {
            return Err(Error::Config("unroll must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.decay) || !(self.optim.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, decay in [0, 1), eps > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_p) {
            return Err(Error::Config(format!("occlusion probability {} outside [0, 1]", self.occlusion_p)));
        }
        Ok(())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub map: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,mAP\n");
    for r in rows {
        let map = r.map.map_or_else(String::new, |m| format!("{m:.6}"));
        let _ = writeln!(s, "{},{:.6},{map}", r.step, r.loss);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<MetricRow>,
}

/// Frames `[t]` of shape `(B, R, R, 3)` and ground truth `[t][b]`.
#[derive(Clone, Debug)]
pub struct Clip {
    pub frames: Vec<Tensor<f32>>,
    pub gt: Vec<Vec<Vec<GroundTruth>>>,
}

/// Per-image matching of ground truth to the model's anchors.
pub fn targets_for<T: Real>(model: &Model<T>, gt: &[Vec<GroundTruth>], match_thresh: f64) -> Result<Vec<Vec<Target>>> {
    gt.iter().map(|g| detection::assign_targets(model.anchors(), g, match_thresh)).collect()
}

/// Multibox loss of one batched frame, normalised by the batch's positives.
pub fn frame_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    out: &FrameVars,
    targets: &[Vec<Target>],
    cfg: &LossConfig,
) -> Result<Var> {
    let batch = targets.len();
    let lpr = model.labels_per_row();
    let mut plans = Vec::with_capacity(batch);
    for (b, t) in targets.iter().enumerate() {
        let heads = model.image_heads(tape, out, b);
        plans.push(detection::plan_loss(&heads.cls, lpr, t, cfg)?);
    }
    let positives: usize = plans.iter().map(|p| p.positives).sum();
    let norm = positives.max(1) as f64;
    // Rows on the tape run map, image, cell, anchor; plans run per image.
    let mut counts = Vec::with_capacity(out.cls.len());
    for &v in &out.cls {
        let s = tape.shape(v);
        counts.push(s.height * s.width * s.channels / lpr);
    }
    let (mut labels, mut cw, mut lt, mut lw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0;
    for &n in &counts {
        for p in &plans {
            for i in offset..offset + n {
                labels.push(p.labels[i]);
                cw.push(T::of(p.cls_weights[i] / norm));
                lw.push(T::of(p.loc_weights[i] / norm));
                lt.extend(p.loc_targets[i * 4..i * 4 + 4].iter().map(|&v| T::of(v)));
            }
        }
        offset += n;
    }
    let cls = tape.softmax_cross_entropy(&out.cls, lpr, labels, cw)?;
    let loc = tape.smooth_l1(&out.loc, lt, lw)?;
    tape.add(cls, loc)
}

/// Mean frame loss over a clip, carrying state from `init`. Returns the
/// loss var and the final state vars.
pub fn clip_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    pv: &ParamVars,
    frames: &[Tensor<T>],
    targets: &[Vec<Vec<Target>>],
    init: &ModelState<T>,
    cfg: &LossConfig,
) -> Result<(Var, ModelState<T>)> {
    if frames.is_empty() || frames.len() != targets.len() {
        return Err(Error::Contract(format!("{} frames for {} target sets", frames.len(), targets.len())));
    }
    let mut state = init.on_tape(tape);
    let mut total: Option<Var> = None;
    for (f, t) in frames.iter().zip(targets) {
        let x = tape.constant(f.clone());
        let out = model.forward(tape, pv, x, &state)?;
        let l = frame_loss(model, tape, &out, t, cfg)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        state = out.state;
    }
    let mean = tape.scale(total.expect("non-empty clip"), T::of(1.0 / frames.len() as f64));
    let next = ModelState::from_tape(tape, &state);
    Ok((mean, next))
}

/// Layer name owning a parameter.
pub fn layer_of(param: &str) -> &str {
    param.split('/').next().unwrap_or(param)
}

/// Called after every optimisation step with the step number and model.
pub type StepObserver<'a> = dyn FnMut(usize, &Model<f32>) -> Result<()> + 'a;

/// One optimisation step over a clip; returns the loss and the detached
/// final state.
fn train_step(
    model: &mut Model<f32>,
    opt: &mut RmsProp<f32>,
    clip: &Clip,
    init: &ModelState<f32>,
    trainable: &dyn Fn(&str) -> bool,
    cfg: &TrainConfig,
) -> Result<(f64, ModelState<f32>)> {
    let targets = clip.gt.iter().map(|g| targets_for(model, g, cfg.match_thresh)).collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, trainable);
    let (loss, next) = clip_loss(model, &mut tape, &pv, &clip.frames, &targets, init, &cfg.loss)?;
    let value = f64::from(tape.value(loss).data()[0]);
    if !value.is_finite() {
        return Err(Error::Contract(format!("training loss became {value}")));
    }
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in &pv {
        if let Some(g) = tape.grad(v) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    opt.step(&mut model.params, &grads)?;
    Ok((value, next))
}

/// Frames for a batch of `(video, start, len, augment)` picks.
fn render_clip(data: &Dataset, picks: &[(usize, usize, Augment)], len: usize) -> Result<Clip> {
    let mut frames = Vec::with_capacity(len);
    let mut gt = Vec::with_capacity(len);
    for t in 0..len {
        let imgs: Vec<Tensor<f32>> = picks.iter().map(|&(v, s, a)| data.videos[v].frame_augmented(s + t, &a)).collect();
        frames.push(Tensor::stack(&imgs)?);
        gt.push(picks.iter().map(|&(v, s, a)| data.videos[v].gt_augmented(s + t, &a)).collect());
    }
    Ok(Clip { frames, gt })
}

fn pick_augment<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Augment {
    if cfg.augment {
        Augment::random(rng, 0.8)
    } else {
        Augment::default()
    }
}

fn check_data(data: &Dataset, unroll: usize) -> Result<()> {
    if data.videos.is_empty() {
        return Err(Error::Config("training needs at least one video".into()));
    }
    if data.videos.iter().any(|v| v.len() < unroll) {
        return Err(Error::Config(format!("every video needs at least {unroll} frames")));
    }
    Ok(())
}

/// Trains a detector without recurrent layers on individual frames.
pub fn train_stage1(arch: &ArchSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_stage1_observed(arch, data, cfg, &mut |_, _| Ok(()))
}

/// [`train_stage1`] with a per-step callback.
pub fn train_stage1_observed(
    arch: &ArchSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    observe: &mut StepObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if arch.recurrent_layers().next().is_some() {
        return Err(Error::Config("stage one trains the model without recurrent layers".into()));
    }
    check_data(data, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(arch.clone(), &mut rng)?;
    let mut opt = RmsProp::new(cfg.optim);
    let none = model.zero_state(cfg.batch_size)?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let picks: Vec<(usize, usize, Augment)> = (0..cfg.batch_size)
            .map(|_| {
                let v = rng.gen_range(0..data.videos.len());
                let t = rng.gen_range(0..data.videos[v].len());
                (v, t, pick_augment(cfg, &mut rng))
            })
            .collect();
        let clip = render_clip(data, &picks, 1)?;
        let (loss, _) = train_step(&mut model, &mut opt, &clip, &none, &|_| true, cfg)?;
        metrics.push(MetricRow { step, loss, map: None });
        observe(step, &model)?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// Builds the stage-two model: frozen layers must appear in the stage-one
/// weights with identical shapes; other layers copy stage-one weights when
/// the shapes agree and keep their fresh initialisation otherwise.
pub fn load_stage1(arch: &ArchSpec, stage1: &ParamStore<f32>, frozen: &[String], seed: u64) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut model = Model::new(arch.clone(), &mut rng)?;
    let mut problems = Vec::new();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        let is_frozen = frozen.iter().any(|f| f == layer_of(name));
        let dst_shape = model.params.get(name)?.shape();
        match stage1.get(name) {
            Ok(src) if src.shape() == dst_shape => {
                *model.params.get_mut(name).expect("listed name") = src.clone();
            }
            Ok(src) if is_frozen => problems.push(format!("~ {name} {} vs {dst_shape}", src.shape())),
            Err(_) if is_frozen || !is_recurrent_param(arch, name) => {
                problems.push(format!("- {name} {dst_shape}"));
            }
            _ => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "stage-one weights do not align with the architecture: {}",
            problems.join(", ")
        )));
    }
    Ok(model)
}

fn is_recurrent_param(arch: &ArchSpec, name: &str) -> bool {
    arch.layer(layer_of(name)).is_some_and(|l| l.is_recurrent())
}

/// Layers frozen during stage two: everything up to `boundary` except
/// recurrent layers and heads.
pub fn frozen_set(arch: &ArchSpec, boundary: Option<&str>) -> Result<Vec<String>> {
    let end_name = boundary.unwrap_or(&arch.backbone_end);
    let end = arch
        .layers
        .iter()
        .position(|l| l.name == end_name)
        .ok_or_else(|| Error::Config(format!("frozen boundary `{end_name}` is not a layer")))?;
    Ok(arch.layers[..=end].iter().filter(|l| !l.is_recurrent() && !l.is_head()).map(|l| l.name.clone()).collect())
}

/// Stage two from a stage-one checkpoint.
pub fn train_stage2(
    arch: &ArchSpec,
    stage1: &ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stage2_observed(arch, stage1, data, cfg, &mut |_, _| Ok(()))
}

/// [`train_stage2`] with a per-step callback.
pub fn train_stage2_observed(
    arch: &ArchSpec,
    stage1: &ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    observe: &mut StepObserver,
) -> Result<TrainOutcome> {
    let frozen = frozen_set(arch, cfg.frozen_boundary.as_deref())?;
    let mut model = load_stage1(arch, stage1, &frozen, cfg.seed)?;
    if let Some(gain) = cfg.pass_through_gain {
        start_as_pass_through(&mut model, gain, cfg.seed)?;
    }
    continue_training_observed(model, &frozen, data, cfg, observe)
}

/// Noise on pass-through recurrent weights, enough to break symmetry.
const PASS_THROUGH_NOISE: f64 = 0.01;

/// Replaces the weights of every LSTM layer that keeps its channel count
/// with [`RecurrentWeights::pass_through`], so inserting it barely changes
/// what the layers after it see. Other recurrent layers keep their weights.
pub fn start_as_pass_through(model: &mut Model<f32>, gain: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0004);
    let layers: Vec<_> = model.arch.recurrent_layers().cloned().collect();
    for layer in layers {
        let rc = model.arch.recurrent_config(&layer);
        if !rc.kind.has_cell() || rc.layout != GateLayout::Combined || rc.input_channels != rc.output_channels {
            continue;
        }
        let w = RecurrentWeights::<ConvKernel<f32>>::pass_through(&rc, gain, PASS_THROUGH_NOISE, &mut rng)?;
        let mut fresh = ParamStore::new();
        w.insert_into(&layer.name, &mut fresh)?;
        for (name, t) in fresh.iter() {
            *model.params.get_mut(name).ok_or_else(|| Error::Contract(format!("missing `{name}`")))? = t.clone();
        }
    }
    Ok(())
}

/// Recurrent-stage training of an initialised model with `frozen` layers
/// held fixed.
pub fn continue_training(
    model: Model<f32>,
    frozen: &[String],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    continue_training_observed(model, frozen, data, cfg, &mut |_, _| Ok(()))
}

/// [`continue_training`] with a per-step callback.
pub fn continue_training_observed(
    mut model: Model<f32>,
    frozen: &[String],
    data: &Dataset,
    cfg: &TrainConfig,
    observe: &mut StepObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data, cfg.unroll)?;
    let occluded;
    let data = if cfg.occlusion_p > 0.0 {
        occluded = data.occluded(cfg.occlusion_p, cfg.seed ^ 0x5eed_0003)?;
        &occluded
    } else {
        data
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut opt = RmsProp::new(cfg.optim);
    let trainable = |name: &str| !frozen.iter().any(|f| f == layer_of(name));
    let len = data.videos.iter().map(|v| v.len()).min().unwrap_or(0);
    let windows_per_video = len / cfg.unroll;
    let mut state = model.zero_state(cfg.batch_size)?;
    let mut streams: Vec<(usize, Augment)> = Vec::new();
    let mut window = 0;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let picks: Vec<(usize, usize, Augment)> = if cfg.carry_state {
            // Lockstep streams: all restart together on fresh videos.
            if window == 0 || window == windows_per_video {
                streams = (0..cfg.batch_size)
                    .map(|_| (rng.gen_range(0..data.videos.len()), pick_augment(cfg, &mut rng)))
                    .collect();
                state = model.zero_state(cfg.batch_size)?;
                window = 0;
            }
            let start = window * cfg.unroll;
            window += 1;
            streams.iter().map(|&(v, a)| (v, start, a)).collect()
        } else {
            state = model.zero_state(cfg.batch_size)?;
            (0..cfg.batch_size)
                .map(|_| {
                    let v = rng.gen_range(0..data.videos.len());
                    let s = rng.gen_range(0..=data.videos[v].len() - cfg.unroll);
                    (v, s, pick_augment(cfg, &mut rng))
                })
                .collect()
        };
        let clip = render_clip(data, &picks, cfg.unroll)?;
        let (loss, next) = train_step(&mut model, &mut opt, &clip, &state, &trainable, cfg)?;
        state = next;
        metrics.push(MetricRow { step, loss, map: None });
        observe(step, &model)?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// Detections and ground truth of an evaluation run.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MapReport,
    pub detections: Vec<Vec<Detection>>,
    pub ground_truth: Vec<Vec<GroundTruth>>,
}

/// Runs every video from zero state and scores all frames together.
/// Videos of equal length run as one batch.
pub fn evaluate(model: &Model<f32>, data: &Dataset, decode: &DecodeConfig) -> Result<EvalOutcome> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, v) in data.videos.iter().enumerate() {
        by_len.entry(v.len()).or_default().push(i);
    }
    let mut per_video: Vec<Vec<Vec<Detection>>> = vec![Vec::new(); data.videos.len()];
    for (len, ids) in by_len {
        let mut state = model.zero_state(ids.len())?;
        for t in 0..len {
            let imgs: Vec<Tensor<f32>> = ids.iter().map(|&i| data.videos[i].frame(t)).collect();
            let (dets, next) = model.step_frame(&Tensor::stack(&imgs)?, &state, decode)?;
            for (&i, d) in ids.iter().zip(dets) {
                per_video[i].push(d);
            }
            state = next;
        }
    }
    let detections: Vec<Vec<Detection>> = per_video.into_iter().flatten().collect();
    let ground_truth: Vec<Vec<GroundTruth>> = data.videos.iter().flat_map(|v| v.gt_all()).collect();
    let report = detection::evaluate_map(&detections, &ground_truth, model.arch.classes, 0.5)?;
    Ok(EvalOutcome { report, detections, ground_truth })
}

/// mAP at each occlusion probability. Every `p` reuses the same random
/// stream, so the occluded boxes at a smaller `p` are a subset of those at a
/// larger one.
pub fn occlusion_sweep(
    model: &Model<f32>,
    eval: &Dataset,
    ps: &[f64],
    seed: u64,
    decode: &DecodeConfig,
) -> Result<Vec<(f64, f64)>> {
    ps.iter()
        .map(|&p| {
            let occluded = eval.occluded(p, seed)?;
            Ok((p, evaluate(model, &occluded, decode)?.report.map))
        })
        .collect()
}

/// Everything the two-stage protocol needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub video: VideoParams,
    pub train_videos: usize,
    pub eval_videos: usize,
    pub minival_len: usize,
    pub alpha: f64,
    pub lstm_type: RecurrentKind,
    pub form: BottleneckForm,
    pub placement: Placement,
    /// Recurrent output width as a fraction of its input width.
    #[serde(default = "default_lstm_ratio")]
    pub lstm_ratio: f64,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Fine-tune the single-frame baseline for as many steps as stage two,
    /// with the same frozen layers, so both models see equal training.
    pub baseline_finetune: bool,
    pub occlusion_ps: Vec<f64>,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        ExperimentConfig {
            video: VideoParams::toy(),
            train_videos: 200,
            eval_videos: 50,
            minival_len: 20,
            alpha: 0.25,
            lstm_type: RecurrentKind::BottleneckLstm,
            form: BottleneckForm::InputDepthwise,
            placement: Placement::SingleConv13,
            lstm_ratio: default_lstm_ratio(),
            stage1: TrainConfig::stage1_toy(),
            stage2: TrainConfig::stage2_toy(),
            baseline_finetune: true,
            occlusion_ps: vec![0.0, 0.25, 0.5, 0.75],
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }

    /// Per-stage seeds derived from the experiment seed.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stage1.seed = seed.wrapping_mul(31).wrapping_add(1);
        self.stage2.seed = seed.wrapping_mul(31).wrapping_add(2);
        self
    }

    pub fn build_options(&self, placement: Placement) -> BuildOptions {
        let mut o = BuildOptions::toy(self.alpha, placement);
        o.resolution = self.video.resolution;
        o.classes = self.video.classes;
        o.lstm_type = self.lstm_type;
        o.form = self.form;
        o.allow_early_sites = true;
        o.lstm_ratio = self.lstm_ratio;
        o
    }

    pub fn arch(&self, placement: Placement) -> Result<ArchSpec> {
        ArchSpec::build(&self.build_options(placement))
    }
}

fn default_lstm_ratio() -> f64 {
    1.0
}

/// Training videos and the minival windows of the evaluation videos.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::generate(cfg.train_videos, cfg.seed.wrapping_mul(2).wrapping_add(1), &cfg.video)?;
    let eval_full = Dataset::generate(cfg.eval_videos, cfg.seed.wrapping_mul(2).wrapping_add(2), &cfg.video)?;
    let lengths: Vec<usize> = eval_full.videos.iter().map(|v| v.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3141);
    let windows = detection::select_minival(&lengths, cfg.minival_len, &mut rng);
    Ok((train, eval_full.windows(&windows)?))
}

/// Trained models of one two-stage run.
#[derive(Clone, Debug)]
pub struct TwoStage {
    pub stage1: TrainOutcome,
    pub baseline: TrainOutcome,
    pub recurrent: TrainOutcome,
}

pub fn run_two_stage(cfg: &ExperimentConfig, train: &Dataset) -> Result<TwoStage> {
    let base_arch = cfg.arch(Placement::None)?;
    let stage1 = train_stage1(&base_arch, train, &cfg.stage1)?;
    let arch = cfg.arch(cfg.placement.clone())?;
    let recurrent = train_stage2(&arch, &stage1.model.params, train, &cfg.stage2)?;
    let baseline = if cfg.baseline_finetune {
        // Same schedule as stage two on frames treated one at a time.
        let mut c = cfg.stage2.clone();
        c.unroll = 1;
        c.batch_size = cfg.stage2.batch_size * cfg.stage2.unroll;
        c.carry_state = false;
        let frozen = frozen_set(&base_arch, c.frozen_boundary.as_deref())?;
        continue_training(stage1.model.clone(), &frozen, train, &c)?
    } else {
        stage1.clone()
    };
    Ok(TwoStage { stage1, baseline, recurrent })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Placement,
    LayerType,
    BottleneckDim,
    MultiPlacement,
    Occlusion,
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "placement" => Ok(AblationKind::Placement),
            "layer_type" => Ok(AblationKind::LayerType),
            "bottleneck_dim" => Ok(AblationKind::BottleneckDim),
            "multi_placement" => Ok(AblationKind::MultiPlacement),
            "occlusion" => Ok(AblationKind::Occlusion),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub map: f64,
    pub params: u64,
    pub mac: u64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mAP,params,mac\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{},{}", r.variant, r.map, r.params, r.mac);
    }
    s
}

/// Cost of the full-scale counterpart of a toy variant.
fn full_scale_cost(
    alpha: f64,
    placement: &Placement,
    kind: RecurrentKind,
    form: BottleneckForm,
    lstm_ratio: f64,
) -> Result<(u64, u64)> {
    let mut o = BuildOptions::full(alpha, 320, placement.clone());
    o.lstm_type = kind;
    o.form = form;
    o.allow_early_sites = true;
    o.lstm_ratio = lstm_ratio;
    let arch = ArchSpec::build(&o)?;
    let r = cost::model_report(&arch, 320)?;
    let mac = match form {
        BottleneckForm::InputDepthwise => r.total_mac_layer_sum,
        BottleneckForm::JointSeparable => r.total_mac_closed_form,
    };
    Ok((r.total_params, mac))
}

/// Full-scale width multiplier matching a toy `alpha` (the toy profile runs
/// at a quarter of full width).
fn full_alpha(toy_alpha: f64) -> f64 {
    (toy_alpha * 4.0).min(1.0)
}

/// Drives builder, trainer and evaluator over one ablation grid. Each
/// variant is trained from one shared stage-one model unless noted.
pub fn run_ablation(kind: AblationKind, cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let (train, eval) = prepare_data(cfg)?;
    let fa = full_alpha(cfg.alpha);
    let mut rows = Vec::new();
    let stage1_for =
        |c: &ExperimentConfig| -> Result<TrainOutcome> { train_stage1(&c.arch(Placement::None)?, &train, &c.stage1) };
    let score = |m: &Model<f32>| -> Result<f64> { Ok(evaluate(m, &eval, &cfg.decode)?.report.map) };
    match kind {
        AblationKind::Placement => {
            let s1 = stage1_for(cfg)?;
            let (p, m) = full_scale_cost(fa, &Placement::None, cfg.lstm_type, cfg.form, 0.25)?;
            rows.push(AblationRow { variant: "none".into(), map: score(&s1.model)?, params: p, mac: m });
            for site in toy_sites(cfg)? {
                let placement = Placement::SingleAfter(site.clone());
                let arch = cfg.arch(placement.clone())?;
                let out = train_stage2(&arch, &s1.model.params, &train, &cfg.stage2)?;
                let (p, m) = full_scale_cost(fa, &placement, cfg.lstm_type, cfg.form, 0.25)?;
                rows.push(AblationRow { variant: site, map: score(&out.model)?, params: p, mac: m });
            }
        }
        AblationKind::LayerType => {
            for toy_alpha in [cfg.alpha, cfg.alpha / 2.0] {
                let c = ExperimentConfig { alpha: toy_alpha, ..cfg.clone() };
                let s1 = stage1_for(&c)?;
                for k in [
                    RecurrentKind::Averaging,
                    RecurrentKind::ConvLstm,
                    RecurrentKind::ConvGru,
                    RecurrentKind::BottleneckLstm,
                ] {
                    let ck = ExperimentConfig { lstm_type: k, ..c.clone() };
                    let arch = ck.arch(cfg.placement.clone())?;
                    let out = train_stage2(&arch, &s1.model.params, &train, &ck.stage2)?;
                    let (p, m) = full_scale_cost(full_alpha(toy_alpha), &cfg.placement, k, cfg.form, 0.25)?;
                    rows.push(AblationRow {
                        variant: format!("{}@{}", k.as_str(), full_alpha(toy_alpha)),
                        map: score(&out.model)?,
                        params: p,
                        mac: m,
                    });
                }
            }
        }
        AblationKind::BottleneckDim => {
            let s1 = stage1_for(cfg)?;
            for ratio in [0.0625, 0.125, 0.25, 0.5, 1.0] {
                let mut o = cfg.build_options(cfg.placement.clone());
                o.lstm_ratio = ratio;
                let arch = ArchSpec::build(&o)?;
                let out = train_stage2(&arch, &s1.model.params, &train, &cfg.stage2)?;
                let (p, m) = full_scale_cost(fa, &cfg.placement, cfg.lstm_type, cfg.form, ratio)?;
                let n = arch.recurrent_layers().next().map_or(0, |l| l.out_channels);
                rows.push(AblationRow {
                    variant: format!("ratio={ratio} (toy N={n})"),
                    map: score(&out.model)?,
                    params: p,
                    mac: m,
                });
            }
        }
        AblationKind::MultiPlacement => {
            let s1 = stage1_for(cfg)?;
            let fms = cfg.arch(Placement::None)?.profile.feature_maps().len();
            let mut grid = vec![Placement::SingleConv13, Placement::StackedConv13];
            grid.extend((1..=fms).map(Placement::Conv13PlusFmPrefix));
            let mut prev = s1.model.params.clone();
            for placement in grid {
                let arch = cfg.arch(placement.clone())?;
                let frozen = frozen_set(&arch, cfg.stage2.frozen_boundary.as_deref())?;
                // Start from the previous row; new or resized layers keep a fresh init.
                let mut model = load_stage1(&arch, &s1.model.params, &frozen, cfg.stage2.seed)?;
                if let Some(gain) = cfg.stage2.pass_through_gain {
                    start_as_pass_through(&mut model, gain, cfg.stage2.seed)?;
                }
                let fresh = model.params.clone();
                for (name, t) in fresh.iter() {
                    if let Ok(src) = prev.get(name) {
                        if src.shape() == t.shape() {
                            *model.params.get_mut(name).expect("listed name") = src.clone();
                        }
                    }
                }
                let out = continue_training(model, &frozen, &train, &cfg.stage2)?;
                let (p, m) = full_scale_cost(fa, &placement, cfg.lstm_type, cfg.form, 0.25)?;
                rows.push(AblationRow { variant: placement.to_string(), map: score(&out.model)?, params: p, mac: m });
                prev = out.model.params.clone();
            }
        }
        AblationKind::Occlusion => {
            let two = run_two_stage(cfg, &train)?;
            let ps = [0.0, 0.25, 0.5, 0.75];
            for (name, model, placement) in [
                ("baseline", &two.baseline.model, Placement::None),
                (cfg.lstm_type.as_str(), &two.recurrent.model, cfg.placement.clone()),
            ] {
                let (p, m) = full_scale_cost(fa, &placement, cfg.lstm_type, cfg.form, 0.25)?;
                for (prob, map) in occlusion_sweep(model, &eval, &ps, cfg.seed ^ 0x0cc1, &cfg.decode)? {
                    rows.push(AblationRow { variant: format!("{name} p={prob:.2}"), map, params: p, mac: m });
                }
            }
        }
    }
    Ok(rows)
}

/// Single-placement sites available in the toy stack (an early backbone
/// site, the backbone end, and each feature map).
fn toy_sites(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let arch = cfg.arch(Placement::None)?;
    let mut sites = vec!["conv3".to_string(), "conv13".to_string()];
    sites.extend(
        arch.layers
            .iter()
            .filter(|l| l.kind == LayerKind::SeparableConv && l.name.starts_with("fm"))
            .map(|l| l.name.clone()),
    );
    Ok(sites)
}

/// Output directory of a run: `config`, `checkpoints/step_N`,
/// `metrics.csv`, `ablation.csv`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_config<C: Serialize>(&self, cfg: &C) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
        self.write("config", &text)
    }

    pub fn save_checkpoint(&self, step: usize, params: &ParamStore<f32>) -> Result<PathBuf> {
        let path = self.root.join("checkpoints").join(format!("step_{step}"));
        params.save(&path)?;
        Ok(path)
    }

    pub fn write_metrics(&self, rows: &[MetricRow]) -> Result<PathBuf> {
        self.write("metrics.csv", &metrics_csv(rows))
    }

    pub fn write_ablation(&self, rows: &[AblationRow]) -> Result<PathBuf> {
        self.write("ablation.csv", &ablation_csv(rows))
    }

    pub fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, text)?;
        Ok(path)
    }
}
