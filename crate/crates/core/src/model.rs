//! A realised network: weights for every layer of an [`ArchSpec`], run one
//! frame at a time with recurrent state carried between frames.
//!
//! The layer list splits at each recurrent layer into sub-networks
//! `g_0 .. g_m` ([`ArchSpec::partitions`]). A frame passes through `g_0`,
//! the first recurrent layer, `g_1`, and so on; box heads read their source
//! layer's output wherever it occurs.

use std::collections::BTreeMap;

use rand::Rng;

use crate::arch::{ArchSpec, LayerKind, LayerSpec, Profile};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::ParamStore;
use crate::detection::{self, Anchor, DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::recurrent::{RecurrentState, RecurrentWeights, StateVars};
use crate::tensor::{ConvKernel, KernelKind, Padding, Real, Shape, Tensor};

/// Names of the parameters a layer owns.
pub fn layer_param_names(arch: &ArchSpec, layer: &LayerSpec) -> Vec<String> {
    let n = &layer.name;
    match layer.kind {
        LayerKind::FullConv => vec![format!("{n}/full")],
        LayerKind::SeparableConv => vec![format!("{n}/dw"), format!("{n}/pw")],
        LayerKind::Recurrent(_) => arch.recurrent_config(layer).weight_names(n),
        LayerKind::BoxHead => {
            ["cls/full", "cls/bias", "loc/full", "loc/bias"].iter().map(|s| format!("{n}/{s}")).collect()
        }
    }
}

/// Expected tensor shape of every parameter, in layer order.
pub fn param_shapes(arch: &ArchSpec) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    let dims = |d: [usize; 4]| Shape::new(d[0], d[1], d[2], d[3]);
    for layer in &arch.layers {
        let (k, i, o) = (layer.kernel, layer.in_channels, layer.out_channels);
        let n = &layer.name;
        match layer.kind {
            LayerKind::FullConv => out.push((format!("{n}/full"), Shape::new(k, k, i, o))),
            LayerKind::SeparableConv => {
                out.push((format!("{n}/dw"), Shape::new(k, k, i, 1)));
                out.push((format!("{n}/pw"), Shape::new(1, 1, i, o)));
            }
            LayerKind::Recurrent(_) => {
                for s in arch.recurrent_config(layer).weight_specs() {
                    out.push((format!("{n}/{}/{}", s.role, s.kind.as_str()), dims(s.dims)));
                }
            }
            LayerKind::BoxHead => {
                let a = arch.anchors_per_cell;
                let cls = a * (arch.classes + 1);
                out.push((format!("{n}/cls/full"), Shape::new(k, k, i, cls)));
                out.push((format!("{n}/cls/bias"), Shape::new(1, 1, 1, cls)));
                out.push((format!("{n}/loc/full"), Shape::new(k, k, i, a * 4)));
                out.push((format!("{n}/loc/bias"), Shape::new(1, 1, 1, a * 4)));
            }
        }
    }
    out
}

/// Anchor set matching the head maps of `arch`.
pub fn anchors_for(arch: &ArchSpec) -> Result<Vec<Anchor>> {
    let maps: Vec<(usize, usize)> = arch.head_maps()?.into_iter().map(|s| (s, s)).collect();
    match arch.profile {
        Profile::Toy => {
            detection::generate_anchors(&maps, &detection::linear_scales(maps.len(), 0.25, 0.75), &[1.0, 2.0, 0.5])
        }
        Profile::Full => detection::ssd_anchors(&maps, 0.2, 0.95, &[1.0, 2.0, 0.5, 3.0, 1.0 / 3.0], true),
    }
}

/// Parameters recorded on a tape, by name.
pub type ParamVars = BTreeMap<String, Var>;

/// Head outputs of one frame on a tape, one var per source map.
#[derive(Clone, Debug)]
pub struct FrameVars {
    pub cls: Vec<Var>,
    pub loc: Vec<Var>,
    pub state: Vec<StateVars>,
}

/// Head outputs of one image, rows ordered map, row, column, anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageHeads {
    pub cls: Vec<f64>,
    pub loc: Vec<f64>,
}

/// Recurrent state of every recurrent layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub slots: Vec<RecurrentState<T>>,
}

impl<T: Real> ModelState<T> {
    pub fn on_tape(&self, tape: &mut Tape<T>) -> Vec<StateVars> {
        self.slots.iter().map(|s| s.on_tape(tape)).collect()
    }

    pub fn from_tape(tape: &Tape<T>, vars: &[StateVars]) -> Self {
        ModelState { slots: vars.iter().map(|v| RecurrentState::from_tape(tape, v)).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: ArchSpec,
    pub params: ParamStore<T>,
    anchors: Vec<Anchor>,
}

impl<T: Real> Model<T> {
    /// Fresh weights: He-normal convolutions, small Gaussian heads, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        for layer in &arch.layers {
            init_layer(&arch, layer, &mut params, rng)?;
        }
        Self::from_params(arch, params)
    }

    /// Wraps existing weights, checking every expected name and shape.
    pub fn from_params(arch: ArchSpec, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let expected = param_shapes(&arch);
        let mut problems = Vec::new();
        for (name, shape) in &expected {
            match params.get(name) {
                Err(_) => problems.push(format!("- {name} {shape}")),
                Ok(t) if t.shape() != *shape => problems.push(format!("~ {name} {} vs {shape}", t.shape())),
                Ok(_) => {}
            }
        }
        for name in params.names() {
            if !expected.iter().any(|(n, _)| n == name) {
                problems.push(format!("+ {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("weights do not match the architecture: {}", problems.join(", "))));
        }
        let anchors = anchors_for(&arch)?;
        Ok(Model { arch, params, anchors })
    }

    /// Reinitialises one layer's parameters.
    pub fn reinit_layer<R: Rng + ?Sized>(&mut self, name: &str, rng: &mut R) -> Result<()> {
        let layer = self.arch.layer(name).ok_or_else(|| Error::Spec(format!("no layer `{name}`")))?.clone();
        init_layer(&self.arch, &layer, &mut self.params, rng)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Labels per anchor row (object classes plus background).
    pub fn labels_per_row(&self) -> usize {
        self.arch.classes + 1
    }

    pub fn zero_state(&self, batch: usize) -> Result<ModelState<T>> {
        let sp = self.arch.spatial()?;
        Ok(ModelState {
            slots: self
                .arch
                .layers
                .iter()
                .zip(&sp)
                .filter(|(l, _)| l.is_recurrent())
                .map(|(l, s)| RecurrentState::zeros(&self.arch.recurrent_config(l), batch, s.output, s.output))
                .collect(),
        })
    }

    /// Records all parameters on `tape`; `trainable` picks which need gradients.
    pub fn record(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> ParamVars {
        self.params.iter().map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable(name)))).collect()
    }

    fn check_frame(&self, shape: Shape) -> Result<()> {
        let r = self.arch.resolution;
        if shape.height != r || shape.width != r || shape.channels != 3 {
            return Err(Error::shape("frame", shape, Shape::new(shape.batch, r, r, 3)));
        }
        Ok(())
    }

    /// One frame through `g_0`, the first recurrent layer, `g_1`, ...
    pub fn forward(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, state: &[StateVars]) -> Result<FrameVars> {
        self.check_frame(tape.shape(x))?;
        let parts = self.arch.partitions();
        if state.len() != parts.len() - 1 {
            return Err(Error::Contract(format!(
                "{} state slots for {} recurrent layers",
                state.len(),
                parts.len() - 1
            )));
        }
        let mut out = FrameVars { cls: Vec::new(), loc: Vec::new(), state: Vec::with_capacity(state.len()) };
        let mut cur = x;
        for (k, range) in parts.into_iter().enumerate() {
            for layer in &self.arch.layers[range] {
                if layer.is_recurrent() {
                    let cfg = self.arch.recurrent_config(layer);
                    let w = RecurrentWeights::from_lookup(&cfg, &layer.name, |n| lookup(pv, n))?;
                    let next = cfg.step(tape, &w, cur, &state[k])?;
                    cur = next.h;
                    out.state.push(next);
                } else {
                    self.apply_plain(tape, pv, layer, &mut cur, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// The whole layer list in one pass, for models without recurrent layers.
    pub fn forward_undivided(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<FrameVars> {
        self.check_frame(tape.shape(x))?;
        let mut out = FrameVars { cls: Vec::new(), loc: Vec::new(), state: Vec::new() };
        let mut cur = x;
        for layer in &self.arch.layers {
            if layer.is_recurrent() {
                return Err(Error::Contract(format!("undivided forward cannot run recurrent layer `{}`", layer.name)));
            }
            self.apply_plain(tape, pv, layer, &mut cur, &mut out)?;
        }
        Ok(out)
    }

    fn apply_plain(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        layer: &LayerSpec,
        cur: &mut Var,
        out: &mut FrameVars,
    ) -> Result<()> {
        let n = &layer.name;
        match layer.kind {
            LayerKind::FullConv => {
                let y = tape.conv2d(
                    *cur,
                    lookup(pv, &format!("{n}/full"))?,
                    KernelKind::Full,
                    layer.stride,
                    Padding::Same,
                )?;
                *cur = if layer.relu { tape.relu(y) } else { y };
            }
            LayerKind::SeparableConv => {
                let dw = lookup(pv, &format!("{n}/dw"))?;
                let pw = lookup(pv, &format!("{n}/pw"))?;
                let mid = tape.conv2d(*cur, dw, KernelKind::Depthwise, layer.stride, Padding::Same)?;
                let mid = if layer.relu { tape.relu(mid) } else { mid };
                let y = tape.conv2d(mid, pw, KernelKind::Pointwise, 1, Padding::Same)?;
                *cur = if layer.relu { tape.relu(y) } else { y };
            }
            LayerKind::BoxHead => {
                // Heads sit directly after their source layer.
                let mut head = |part: &str| -> Result<Var> {
                    let y = tape.conv2d(
                        *cur,
                        lookup(pv, &format!("{n}/{part}/full"))?,
                        KernelKind::Full,
                        1,
                        Padding::Same,
                    )?;
                    tape.bias_add(y, lookup(pv, &format!("{n}/{part}/bias"))?)
                };
                let c = head("cls")?;
                let l = head("loc")?;
                out.cls.push(c);
                out.loc.push(l);
            }
            LayerKind::Recurrent(_) => unreachable!("recurrent layers are handled by the caller"),
        }
        Ok(())
    }

    /// Head rows of image `b`, as `f64`.
    pub fn image_heads(&self, tape: &Tape<T>, out: &FrameVars, b: usize) -> ImageHeads {
        let gather = |vars: &[Var]| -> Vec<f64> {
            vars.iter()
                .flat_map(|&v| {
                    let t = tape.value(v);
                    let per = t.numel() / t.shape().batch;
                    t.data()[b * per..(b + 1) * per].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>()
                })
                .collect()
        };
        ImageHeads { cls: gather(&out.cls), loc: gather(&out.loc) }
    }

    /// Raw head outputs for a batch of frames and the next state.
    pub fn step_raw(&self, frames: &Tensor<T>, state: &ModelState<T>) -> Result<(Vec<ImageHeads>, ModelState<T>)> {
        let mut tape = Tape::new();
        let pv = self.record(&mut tape, |_| false);
        let x = tape.constant(frames.clone());
        let sv = state.on_tape(&mut tape);
        let out = self.forward(&mut tape, &pv, x, &sv)?;
        let heads = (0..frames.shape().batch).map(|b| self.image_heads(&tape, &out, b)).collect();
        Ok((heads, ModelState::from_tape(&tape, &out.state)))
    }

    /// Detections for each frame of the batch and the next state.
    pub fn step_frame(
        &self,
        frames: &Tensor<T>,
        state: &ModelState<T>,
        cfg: &DecodeConfig,
    ) -> Result<(Vec<Vec<Detection>>, ModelState<T>)> {
        let (heads, next) = self.step_raw(frames, state)?;
        let dets = heads.iter().map(|h| self.decode(h, cfg)).collect::<Result<_>>()?;
        Ok((dets, next))
    }

    pub fn decode(&self, heads: &ImageHeads, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
        detection::decode_detections(&heads.cls, &heads.loc, &self.anchors, self.labels_per_row(), cfg)
    }

    /// Raw heads per frame of a single stream, starting from zero state.
    /// Each frame's output is final before the next frame is read.
    pub fn run_sequence_raw(&self, frames: &[Tensor<T>]) -> Result<Vec<ImageHeads>> {
        let mut state = self.zero_state(1)?;
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let (mut h, next) = self.step_raw(f, &state)?;
            out.push(h.remove(0));
            state = next;
        }
        Ok(out)
    }

    pub fn run_sequence(&self, frames: &[Tensor<T>], cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
        self.run_sequence_raw(frames)?.iter().map(|h| self.decode(h, cfg)).collect()
    }
}

fn lookup(pv: &ParamVars, name: &str) -> Result<Var> {
    pv.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

fn init_layer<T: Real, R: Rng + ?Sized>(
    arch: &ArchSpec,
    layer: &LayerSpec,
    params: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    let (k, i, o) = (layer.kernel, layer.in_channels, layer.out_channels);
    let n = &layer.name;
    match layer.kind {
        LayerKind::FullConv => {
            params.insert_kernel(format!("{n}/full"), ConvKernel::he_normal(KernelKind::Full, [k, k, i, o], rng))
        }
        LayerKind::SeparableConv => {
            params.insert_kernel(format!("{n}/dw"), ConvKernel::he_normal(KernelKind::Depthwise, [k, k, i, 1], rng))?;
            params.insert_kernel(format!("{n}/pw"), ConvKernel::he_normal(KernelKind::Pointwise, [1, 1, i, o], rng))
        }
        LayerKind::Recurrent(_) => {
            let cfg = arch.recurrent_config(layer);
            RecurrentWeights::<ConvKernel<T>>::random(&cfg, rng)?.insert_into(n, params)
        }
        LayerKind::BoxHead => {
            let a = arch.anchors_per_cell;
            let cls = a * (arch.classes + 1);
            let std = 0.01;
            params.insert(format!("{n}/cls/full"), Tensor::randn(Shape::new(k, k, i, cls), std, rng))?;
            params.insert(format!("{n}/cls/bias"), Tensor::zeros(Shape::new(1, 1, 1, cls)))?;
            params.insert(format!("{n}/loc/full"), Tensor::randn(Shape::new(k, k, i, a * 4), std, rng))?;
            params.insert(format!("{n}/loc/bias"), Tensor::zeros(Shape::new(1, 1, 1, a * 4)))
        }
    }
}
