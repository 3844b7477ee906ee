//! Convolutional recurrent layers that refine a feature map across frames.
//!
//! Every gate convolution is depthwise-separable and bias-free; the
//! activation `phi` is ReLU so refined maps keep the value range of the
//! convolutional layers around them.
//!
//! Four layer types are provided:
//!
//! | kind | state | gates |
//! |------|-------|-------|
//! | [`RecurrentKind::ConvLstm`] | `h`, `c` | `f, i, o` and candidate from `[x, h]` |
//! | [`RecurrentKind::ConvGru`] | `h` | reset/update from `[x, h]`, candidate from `[x, r*h]` |
//! | [`RecurrentKind::BottleneckLstm`] | `h`, `c` | all four from the bottleneck map `b` |
//! | [`RecurrentKind::Averaging`] | previous input | none, `0.75 x_t + 0.25 x_{t-1}` |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, KernelKind, Padding, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecurrentKind {
    ConvLstm,
    ConvGru,
    BottleneckLstm,
    Averaging,
}

impl RecurrentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecurrentKind::ConvLstm => "conv_lstm",
            RecurrentKind::ConvGru => "conv_gru",
            RecurrentKind::BottleneckLstm => "bottleneck_lstm",
            RecurrentKind::Averaging => "averaging",
        }
    }

    pub fn has_cell(self) -> bool {
        matches!(self, RecurrentKind::ConvLstm | RecurrentKind::BottleneckLstm)
    }
}

impl fmt::Display for RecurrentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecurrentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_lstm" | "lstm" => Ok(RecurrentKind::ConvLstm),
            "conv_gru" | "gru" => Ok(RecurrentKind::ConvGru),
            "bottleneck_lstm" | "bottleneck" => Ok(RecurrentKind::BottleneckLstm),
            "averaging" => Ok(RecurrentKind::Averaging),
            other => Err(Error::Config(format!("unknown recurrent layer type `{other}`"))),
        }
    }
}

/// How the Bottleneck-LSTM forms `b_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum BottleneckForm {
    /// Depthwise over `x_t` only, concatenate `h_{t-1}`, pointwise `(M+N) -> N`.
    #[default]
    InputDepthwise,
    /// Depthwise-separable convolution over the concatenation `[x_t, h_{t-1}]`.
    JointSeparable,
}

impl FromStr for BottleneckForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" | "input_depthwise" => Ok(BottleneckForm::InputDepthwise),
            "eq4" | "joint_separable" => Ok(BottleneckForm::JointSeparable),
            other => Err(Error::Config(format!("unknown bottleneck form `{other}`"))),
        }
    }
}

impl BottleneckForm {
    pub fn as_str(self) -> &'static str {
        match self {
            BottleneckForm::InputDepthwise => "table1",
            BottleneckForm::JointSeparable => "eq4",
        }
    }
}

/// Whether gate convolutions of the standard LSTM/GRU share one
/// separable convolution or get one each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum GateLayout {
    /// One depthwise over the gate input and one pointwise emitting all gates.
    #[default]
    Combined,
    /// A separate depthwise + pointwise pair per gate.
    PerGate,
}

impl FromStr for GateLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(GateLayout::Combined),
            "per_gate" | "per-gate" => Ok(GateLayout::PerGate),
            other => Err(Error::Config(format!("unknown gate layout `{other}`"))),
        }
    }
}

impl GateLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            GateLayout::Combined => "combined",
            GateLayout::PerGate => "per_gate",
        }
    }
}

/// Static description of one recurrent layer: `M` input and `N` output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub kind: RecurrentKind,
    pub input_channels: usize,
    pub output_channels: usize,
    pub kernel: usize,
    pub form: BottleneckForm,
    pub layout: GateLayout,
}

/// Shape of one kernel owned by a recurrent layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightSpec {
    pub role: &'static str,
    pub kind: KernelKind,
    pub dims: [usize; 4],
}

impl RecurrentConfig {
    pub fn new(kind: RecurrentKind, input_channels: usize, output_channels: usize) -> Self {
        RecurrentConfig {
            kind,
            input_channels,
            output_channels,
            kernel: 3,
            form: BottleneckForm::InputDepthwise,
            layout: GateLayout::Combined,
        }
    }

    pub fn with_form(mut self, form: BottleneckForm) -> Self {
        self.form = form;
        self
    }

    pub fn with_layout(mut self, layout: GateLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.output_channels == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("degenerate recurrent layer {self:?}")));
        }
        if self.kind == RecurrentKind::Averaging && self.input_channels != self.output_channels {
            return Err(Error::Config("averaging layer must keep its channel count".into()));
        }
        Ok(())
    }

    /// Every kernel in the layer, in `(role, kind)` naming order.
    pub fn weight_specs(&self) -> Vec<WeightSpec> {
        let (m, n, k) = (self.input_channels, self.output_channels, self.kernel);
        let sep = |role, dw_in, pw_in, pw_out| {
            [
                WeightSpec { role, kind: KernelKind::Depthwise, dims: [k, k, dw_in, 1] },
                WeightSpec { role, kind: KernelKind::Pointwise, dims: [1, 1, pw_in, pw_out] },
            ]
        };
        let mut out = Vec::new();
        match (self.kind, self.layout) {
            (RecurrentKind::Averaging, _) => {}
            (RecurrentKind::ConvLstm, GateLayout::Combined) => {
                out.extend(sep("gates", m + n, m + n, 4 * n));
            }
            (RecurrentKind::ConvLstm, GateLayout::PerGate) => {
                for role in LSTM_GATES {
                    out.extend(sep(role, m + n, m + n, n));
                }
            }
            (RecurrentKind::ConvGru, GateLayout::Combined) => {
                out.extend(sep("gates", m + n, m + n, 2 * n));
                out.extend(sep("candidate", m + n, m + n, n));
            }
            (RecurrentKind::ConvGru, GateLayout::PerGate) => {
                out.extend(sep("reset", m + n, m + n, n));
                out.extend(sep("update", m + n, m + n, n));
                out.extend(sep("candidate", m + n, m + n, n));
            }
            (RecurrentKind::BottleneckLstm, layout) => {
                let dw_in = match self.form {
                    BottleneckForm::InputDepthwise => m,
                    BottleneckForm::JointSeparable => m + n,
                };
                out.extend(sep("bottleneck", dw_in, m + n, n));
                match layout {
                    GateLayout::Combined => out.extend(sep("gates", n, n, 4 * n)),
                    GateLayout::PerGate => {
                        for role in LSTM_GATES {
                            out.extend(sep(role, n, n, n));
                        }
                    }
                }
            }
        }
        out
    }

    /// Parameter count, summed directly over kernel sizes.
    pub fn param_count(&self) -> usize {
        self.weight_specs().iter().map(|w| w.dims.iter().product::<usize>()).sum()
    }

    /// Checkpoint names of every kernel, `<layer>/<role>/{dw,pw}`.
    pub fn weight_names(&self, layer: &str) -> Vec<String> {
        self.weight_specs().iter().map(|w| format!("{layer}/{}/{}", w.role, w.kind.as_str())).collect()
    }
}

const LSTM_GATES: [&str; 4] = ["forget", "input", "output", "cell"];

/// A depthwise kernel and the pointwise kernel that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct SepPair<K> {
    pub dw: K,
    pub pw: K,
}

/// Kernels of one recurrent layer keyed by role.
///
/// `K` is [`ConvKernel`] for stored weights and [`Var`] once recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentWeights<K> {
    pairs: Vec<(&'static str, SepPair<K>)>,
}

impl<K> RecurrentWeights<K> {
    pub fn get(&self, role: &str) -> Result<&SepPair<K>> {
        self.pairs
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Contract(format!("recurrent weights lack `{role}`")))
    }

    pub fn roles(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.pairs.iter().map(|(r, _)| *r)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn from_specs(cfg: &RecurrentConfig, mut make: impl FnMut(&WeightSpec) -> Result<K>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.weight_specs();
        let mut pairs = Vec::new();
        for pair in specs.chunks(2) {
            let dw = make(&pair[0])?;
            let pw = make(&pair[1])?;
            pairs.push((pair[0].role, SepPair { dw, pw }));
        }
        Ok(RecurrentWeights { pairs })
    }
}

impl<T: Real> RecurrentWeights<ConvKernel<T>> {
    pub fn zeros(cfg: &RecurrentConfig) -> Result<Self> {
        Self::from_specs(cfg, |s| ConvKernel::zeros(s.kind, s.dims))
    }

    /// He-normal initialisation.
    pub fn random<R: Rng + ?Sized>(cfg: &RecurrentConfig, rng: &mut R) -> Result<Self> {
        Self::from_specs(cfg, |s| Ok(ConvKernel::he_normal(s.kind, s.dims, rng)))
    }

    /// Gaussian weights with a fixed standard deviation.
    pub fn gaussian<R: Rng + ?Sized>(cfg: &RecurrentConfig, std: f64, rng: &mut R) -> Result<Self> {
        Self::from_specs(cfg, |s| {
            let t = Tensor::<T>::randn(Shape::new(s.dims[0], s.dims[1], s.dims[2], s.dims[3]), std, rng);
            ConvKernel::new(s.kind, s.dims, t.into_data())
        })
    }

    /// LSTM weights whose forget gate saturates to 1, input gate to 0 and
    /// output gate to 1 whenever the gate input is positive, with a zero
    /// candidate. The cell state is then carried through unchanged.
    pub fn saturated_persistence(cfg: &RecurrentConfig, magnitude: f64) -> Result<Self> {
        if !cfg.kind.has_cell() || cfg.layout != GateLayout::Combined {
            return Err(Error::Contract("gate saturation applies to combined-layout LSTM layers".into()));
        }
        let n = cfg.output_channels;
        let mag = T::of(magnitude);
        Self::from_specs(cfg, |s| match (s.role, s.kind) {
            (_, KernelKind::Depthwise) => Ok(ConvKernel::depthwise_identity(s.dims[0], s.dims[2])),
            ("bottleneck", KernelKind::Pointwise) => {
                ConvKernel::pointwise(s.dims[2], s.dims[3], vec![T::one(); s.dims[2] * s.dims[3]])
            }
            ("gates", KernelKind::Pointwise) => {
                let (cin, cout) = (s.dims[2], s.dims[3]);
                let mut w = vec![T::zero(); cin * cout];
                for ci in 0..cin {
                    for co in 0..cout {
                        w[ci * cout + co] = match co / n {
                            0 | 2 => mag,
                            1 => -mag,
                            _ => T::zero(),
                        };
                    }
                }
                ConvKernel::pointwise(cin, cout, w)
            }
            _ => ConvKernel::zeros(s.kind, s.dims),
        })
    }

    /// LSTM weights that start close to passing a non-negative input
    /// through: the candidate copies `x`, the input and output gates open
    /// and the forget gate closes as `gain` grows. Gaussian noise of
    /// `noise` std sits on every weight. Needs `M == N` and combined gates.
    pub fn pass_through<R: Rng + ?Sized>(cfg: &RecurrentConfig, gain: f64, noise: f64, rng: &mut R) -> Result<Self> {
        if !cfg.kind.has_cell() || cfg.layout != GateLayout::Combined || cfg.input_channels != cfg.output_channels {
            return Err(Error::Contract(
                "pass-through start needs a combined-layout LSTM with equal input and output width".into(),
            ));
        }
        let n = cfg.output_channels;
        Self::from_specs(cfg, |s| {
            let (cin, cout) = (s.dims[2], s.dims[3]);
            let mut w = vec![0.0; s.dims.iter().product()];
            match (s.role, s.kind) {
                (_, KernelKind::Depthwise) => {
                    let centre = (s.dims[0] / 2) * s.dims[1] + s.dims[1] / 2;
                    w[centre * cin..(centre + 1) * cin].fill(1.0);
                }
                ("bottleneck", KernelKind::Pointwise) => {
                    for c in 0..n {
                        w[c * cout + c] = 1.0;
                    }
                }
                ("gates", KernelKind::Pointwise) => {
                    // The first `n` gate inputs are `x` itself or the bottleneck copy of it.
                    for c in 0..n {
                        for (block, v) in [(0, -gain), (1, gain), (2, gain), (3, 1.0)] {
                            w[c * cout + block * n + c] = v;
                        }
                    }
                }
                _ => {}
            }
            let w =
                w.into_iter().map(|v| T::of(v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal))).collect();
            ConvKernel::new(s.kind, s.dims, w)
        })
    }

    pub fn from_store(cfg: &RecurrentConfig, layer: &str, store: &ParamStore<T>) -> Result<Self> {
        Self::from_specs(cfg, |s| {
            let k = store.kernel(&format!("{layer}/{}/{}", s.role, s.kind.as_str()))?;
            if k.dims() != s.dims {
                return Err(Error::Checkpoint(format!(
                    "{layer}/{}: stored dims {:?}, expected {:?}",
                    s.role,
                    k.dims(),
                    s.dims
                )));
            }
            Ok(k)
        })
    }

    pub fn insert_into(&self, layer: &str, store: &mut ParamStore<T>) -> Result<()> {
        for (role, p) in &self.pairs {
            store.insert_kernel(format!("{layer}/{role}/dw"), p.dw.clone())?;
            store.insert_kernel(format!("{layer}/{role}/pw"), p.pw.clone())?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|(_, p)| p.dw.params() + p.pw.params()).sum()
    }

    /// Records every kernel on `tape`.
    pub fn on_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> RecurrentWeights<Var> {
        RecurrentWeights {
            pairs: self
                .pairs
                .iter()
                .map(|(r, p)| {
                    (*r, SepPair { dw: tape.kernel(&p.dw, requires_grad), pw: tape.kernel(&p.pw, requires_grad) })
                })
                .collect(),
        }
    }
}

impl RecurrentWeights<Var> {
    /// Builds from vars already recorded for `<layer>/<role>/{dw,pw}`.
    pub fn from_lookup(
        cfg: &RecurrentConfig,
        layer: &str,
        mut lookup: impl FnMut(&str) -> Result<Var>,
    ) -> Result<Self> {
        Self::from_specs(cfg, |s| lookup(&format!("{layer}/{}/{}", s.role, s.kind.as_str())))
    }
}

/// Per-layer recurrent state for one stream (or a batch of streams).
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor<T>,
    pub c: Option<Tensor<T>>,
    /// True until the first step; only the averaging layer looks at it.
    pub fresh: bool,
}

impl<T: Real> RecurrentState<T> {
    /// Zero state for feature maps of `batch x height x width`.
    pub fn zeros(cfg: &RecurrentConfig, batch: usize, height: usize, width: usize) -> Self {
        let shape = Shape::new(batch, height, width, cfg.output_channels);
        RecurrentState { h: Tensor::zeros(shape), c: cfg.kind.has_cell().then(|| Tensor::zeros(shape)), fresh: true }
    }

    /// Records the state as constants (gradients stop here).
    pub fn on_tape(&self, tape: &mut Tape<T>) -> StateVars {
        StateVars {
            h: tape.constant(self.h.clone()),
            c: self.c.as_ref().map(|c| tape.constant(c.clone())),
            fresh: self.fresh,
        }
    }

    pub fn from_tape(tape: &Tape<T>, s: &StateVars) -> Self {
        RecurrentState { h: tape.value(s.h).clone(), c: s.c.map(|c| tape.value(c).clone()), fresh: s.fresh }
    }
}

/// Recurrent state as tape handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateVars {
    pub h: Var,
    pub c: Option<Var>,
    pub fresh: bool,
}

/// Gate pre-activations and activations of one LSTM step, exposed for tests.
#[derive(Clone, Copy, Debug)]
pub struct LstmGates {
    pub forget: Var,
    pub input: Var,
    pub output: Var,
}

impl RecurrentConfig {
    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var, state: &StateVars) -> Result<()> {
        let xs = tape.shape(x);
        let hs = tape.shape(state.h);
        if xs.channels != self.input_channels {
            return Err(Error::shape("recurrent input", xs, xs.with_channels(self.input_channels)));
        }
        if hs.channels != self.output_channels || (xs.batch, xs.height, xs.width) != (hs.batch, hs.height, hs.width) {
            return Err(Error::shape("recurrent state", xs, hs));
        }
        if self.kind.has_cell() {
            let c = state.c.ok_or_else(|| Error::Contract(format!("{} needs a cell state", self.kind)))?;
            if tape.shape(c) != hs {
                return Err(Error::shape("cell state", hs, tape.shape(c)));
            }
        }
        Ok(())
    }

    /// One time step. The new state's `h` is the layer output.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        w: &RecurrentWeights<Var>,
        x: Var,
        state: &StateVars,
    ) -> Result<StateVars> {
        self.step_traced(tape, w, x, state).map(|(s, _)| s)
    }

    /// Like [`RecurrentConfig::step`] but also returns the LSTM gate
    /// activations when the layer has them.
    pub fn step_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        w: &RecurrentWeights<Var>,
        x: Var,
        state: &StateVars,
    ) -> Result<(StateVars, Option<LstmGates>)> {
        self.check_input(tape, x, state)?;
        let n = self.output_channels;
        match self.kind {
            RecurrentKind::Averaging => {
                // `c` holds the previous input; `h` is the output.
                let h = match (state.fresh, state.c) {
                    (false, Some(prev)) => {
                        let a = tape.scale(x, T::of(0.75));
                        let b = tape.scale(prev, T::of(0.25));
                        tape.add(a, b)?
                    }
                    _ => x,
                };
                Ok((StateVars { h, c: Some(x), fresh: false }, None))
            }
            RecurrentKind::ConvGru => {
                let xh = tape.concat_channels(x, state.h)?;
                let (r, z) = match self.layout {
                    GateLayout::Combined => {
                        let p = w.get("gates")?;
                        let g = tape.separable(xh, p.dw, p.pw, 1)?;
                        let g = tape.sigmoid(g);
                        let mut parts = tape.split_channels(g, 2)?.into_iter();
                        (parts.next().unwrap(), parts.next().unwrap())
                    }
                    GateLayout::PerGate => {
                        let pr = w.get("reset")?;
                        let pz = w.get("update")?;
                        let r = tape.separable(xh, pr.dw, pr.pw, 1)?;
                        let z = tape.separable(xh, pz.dw, pz.pw, 1)?;
                        (tape.sigmoid(r), tape.sigmoid(z))
                    }
                };
                let rh = tape.mul(r, state.h)?;
                let xrh = tape.concat_channels(x, rh)?;
                let pc = w.get("candidate")?;
                let cand = tape.separable(xrh, pc.dw, pc.pw, 1)?;
                let cand = tape.relu(cand);
                let delta = tape.sub(cand, state.h)?;
                let zd = tape.mul(z, delta)?;
                let h = tape.add(state.h, zd)?;
                Ok((StateVars { h, c: None, fresh: false }, None))
            }
            RecurrentKind::ConvLstm | RecurrentKind::BottleneckLstm => {
                let pre = if self.kind == RecurrentKind::ConvLstm {
                    let xh = tape.concat_channels(x, state.h)?;
                    match self.layout {
                        GateLayout::Combined => {
                            let p = w.get("gates")?;
                            let g = tape.separable(xh, p.dw, p.pw, 1)?;
                            tape.split_channels(g, 4)?
                        }
                        GateLayout::PerGate => LSTM_GATES
                            .iter()
                            .map(|role| {
                                let p = w.get(role)?;
                                tape.separable(xh, p.dw, p.pw, 1)
                            })
                            .collect::<Result<Vec<_>>>()?,
                    }
                } else {
                    let pb = w.get("bottleneck")?;
                    let b = match self.form {
                        BottleneckForm::InputDepthwise => {
                            let dx = tape.conv2d(x, pb.dw, KernelKind::Depthwise, 1, Padding::Same)?;
                            let cat = tape.concat_channels(dx, state.h)?;
                            tape.conv2d(cat, pb.pw, KernelKind::Pointwise, 1, Padding::Same)?
                        }
                        BottleneckForm::JointSeparable => {
                            let xh = tape.concat_channels(x, state.h)?;
                            tape.separable(xh, pb.dw, pb.pw, 1)?
                        }
                    };
                    let b = tape.relu(b);
                    match self.layout {
                        GateLayout::Combined => {
                            let pg = w.get("gates")?;
                            let g = tape.separable(b, pg.dw, pg.pw, 1)?;
                            tape.split_channels(g, 4)?
                        }
                        GateLayout::PerGate => LSTM_GATES
                            .iter()
                            .map(|role| {
                                let p = w.get(role)?;
                                tape.separable(b, p.dw, p.pw, 1)
                            })
                            .collect::<Result<Vec<_>>>()?,
                    }
                };
                debug_assert_eq!(tape.shape(pre[0]).channels, n);
                let f = tape.sigmoid(pre[0]);
                let i = tape.sigmoid(pre[1]);
                let o = tape.sigmoid(pre[2]);
                let cand = tape.relu(pre[3]);
                let c_prev = state.c.expect("checked above");
                let fc = tape.mul(f, c_prev)?;
                let ic = tape.mul(i, cand)?;
                let c = tape.add(fc, ic)?;
                let pc = tape.relu(c);
                let h = tape.mul(o, pc)?;
                Ok((StateVars { h, c: Some(c), fresh: false }, Some(LstmGates { forget: f, input: i, output: o })))
            }
        }
    }

    /// Tensor-level step on a private tape.
    pub fn step_tensors<T: Real>(
        &self,
        x: &Tensor<T>,
        state: &RecurrentState<T>,
        w: &RecurrentWeights<ConvKernel<T>>,
    ) -> Result<RecurrentState<T>> {
        let mut tape = Tape::new();
        let wv = w.on_tape(&mut tape, false);
        let xv = tape.constant(x.clone());
        let sv = state.on_tape(&mut tape);
        let out = self.step(&mut tape, &wv, xv, &sv)?;
        Ok(RecurrentState::from_tape(&tape, &out))
    }
}

/// Standard convolutional LSTM step.
pub fn conv_lstm_step<T: Real>(
    cfg: &RecurrentConfig,
    x: &Tensor<T>,
    state: &RecurrentState<T>,
    w: &RecurrentWeights<ConvKernel<T>>,
) -> Result<RecurrentState<T>> {
    expect_kind(cfg, RecurrentKind::ConvLstm)?;
    cfg.step_tensors(x, state, w)
}

/// Convolutional GRU step.
pub fn conv_gru_step<T: Real>(
    cfg: &RecurrentConfig,
    x: &Tensor<T>,
    state: &RecurrentState<T>,
    w: &RecurrentWeights<ConvKernel<T>>,
) -> Result<RecurrentState<T>> {
    expect_kind(cfg, RecurrentKind::ConvGru)?;
    cfg.step_tensors(x, state, w)
}

/// Bottleneck-LSTM step in either form.
pub fn bottleneck_lstm_step<T: Real>(
    cfg: &RecurrentConfig,
    x: &Tensor<T>,
    state: &RecurrentState<T>,
    w: &RecurrentWeights<ConvKernel<T>>,
) -> Result<RecurrentState<T>> {
    expect_kind(cfg, RecurrentKind::BottleneckLstm)?;
    cfg.step_tensors(x, state, w)
}

/// Weighted average with the previous frame's features; identity on the
/// first frame.
pub fn averaging_step<T: Real>(x: &Tensor<T>, prev: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match prev {
        None => Ok(x.clone()),
        Some(p) => crate::ops::zip(x, p, "averaging", |a, b| T::of(0.75) * a + T::of(0.25) * b),
    }
}

fn expect_kind(cfg: &RecurrentConfig, kind: RecurrentKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Contract(format!("expected {kind}, got {}", cfg.kind)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Plain-loop reference convolutions on a single (h, w, c) image.
    fn naive_dw(x: &[f64], hh: usize, ww: usize, c: usize, k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; hh * ww * c];
        for y in 0..hh {
            for xx in 0..ww {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize {
                                continue;
                            }
                            acc += x[(iy as usize * ww + ix as usize) * c + ch] * k[(ky * 3 + kx) * c + ch];
                        }
                    }
                    out[(y * ww + xx) * c + ch] = acc;
                }
            }
        }
        out
    }

    fn naive_pw(x: &[f64], pixels: usize, cin: usize, cout: usize, k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; pixels * cout];
        for p in 0..pixels {
            for o in 0..cout {
                out[p * cout + o] = (0..cin).map(|i| x[p * cin + i] * k[i * cout + o]).sum();
            }
        }
        out
    }

    fn cat(a: &[f64], ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
        let pixels = a.len() / ca;
        let mut out = Vec::with_capacity(a.len() + b.len());
        for p in 0..pixels {
            out.extend_from_slice(&a[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&b[p * cb..(p + 1) * cb]);
        }
        out
    }

    fn gate(v: &[f64], pixels: usize, n: usize, parts: usize, idx: usize) -> Vec<f64> {
        let w = n * parts;
        (0..pixels).flat_map(|p| v[p * w + idx * n..p * w + (idx + 1) * n].to_vec()).collect()
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn rel(v: f64) -> f64 {
        v.max(0.0)
    }

    struct Case {
        cfg: RecurrentConfig,
        w: RecurrentWeights<ConvKernel<f64>>,
        x: Tensor<f64>,
        state: RecurrentState<f64>,
    }

    fn case(kind: RecurrentKind, form: BottleneckForm, seed: u64) -> Case {
        let (m, n, hh, ww) = (3, 2, 3, 4);
        let cfg = RecurrentConfig::new(kind, m, if kind == RecurrentKind::Averaging { m } else { n }).with_form(form);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = RecurrentWeights::gaussian(&cfg, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, hh, ww, m), 1.0, &mut rng);
        let mut state = RecurrentState::zeros(&cfg, 1, hh, ww);
        state.h = Tensor::uniform(state.h.shape(), 0.0, 1.0, &mut rng);
        if let Some(c) = state.c.as_mut() {
            *c = Tensor::randn(c.shape(), 1.0, &mut rng);
        }
        Case { cfg, w, x, state }
    }

    fn sep_ref(
        w: &RecurrentWeights<ConvKernel<f64>>,
        role: &str,
        inp: &[f64],
        px: (usize, usize),
        cin: usize,
    ) -> Vec<f64> {
        let p = w.get(role).unwrap();
        let d = naive_dw(inp, px.0, px.1, cin, p.dw.weights());
        naive_pw(&d, px.0 * px.1, cin, p.pw.output_channels(), p.pw.weights())
    }

    fn lstm_update(pre: &[f64], c_prev: &[f64], pixels: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
        let f = gate(pre, pixels, n, 4, 0);
        let i = gate(pre, pixels, n, 4, 1);
        let o = gate(pre, pixels, n, 4, 2);
        let g = gate(pre, pixels, n, 4, 3);
        let c: Vec<f64> = (0..c_prev.len()).map(|j| sig(f[j]) * c_prev[j] + sig(i[j]) * rel(g[j])).collect();
        let h = (0..c.len()).map(|j| sig(o[j]) * rel(c[j])).collect();
        (h, c)
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_lstm_matches_loop_reference() {
        let k = case(RecurrentKind::ConvLstm, BottleneckForm::InputDepthwise, 1);
        let (m, n, px) = (3, 2, (3, 4));
        let xh = cat(k.x.data(), m, k.state.h.data(), n);
        let pre = sep_ref(&k.w, "gates", &xh, px, m + n);
        let (h, c) = lstm_update(&pre, k.state.c.as_ref().unwrap().data(), 12, n);
        let out = conv_lstm_step(&k.cfg, &k.x, &k.state, &k.w).unwrap();
        assert_close(out.h.data(), &h);
        assert_close(out.c.unwrap().data(), &c);
    }

    #[test]
    fn bottleneck_input_depthwise_matches_loop_reference() {
        let k = case(RecurrentKind::BottleneckLstm, BottleneckForm::InputDepthwise, 2);
        let (m, n, px) = (3, 2, (3, 4));
        let p = k.w.get("bottleneck").unwrap();
        let dx = naive_dw(k.x.data(), 3, 4, m, p.dw.weights());
        let b: Vec<f64> =
            naive_pw(&cat(&dx, m, k.state.h.data(), n), 12, m + n, n, p.pw.weights()).into_iter().map(rel).collect();
        let pre = sep_ref(&k.w, "gates", &b, px, n);
        let (h, c) = lstm_update(&pre, k.state.c.as_ref().unwrap().data(), 12, n);
        let out = bottleneck_lstm_step(&k.cfg, &k.x, &k.state, &k.w).unwrap();
        assert_close(out.h.data(), &h);
        assert_close(out.c.unwrap().data(), &c);
    }

    #[test]
    fn bottleneck_joint_separable_matches_loop_reference() {
        let k = case(RecurrentKind::BottleneckLstm, BottleneckForm::JointSeparable, 3);
        let (m, n, px) = (3, 2, (3, 4));
        let xh = cat(k.x.data(), m, k.state.h.data(), n);
        let b: Vec<f64> = sep_ref(&k.w, "bottleneck", &xh, px, m + n).into_iter().map(rel).collect();
        let pre = sep_ref(&k.w, "gates", &b, px, n);
        let (h, c) = lstm_update(&pre, k.state.c.as_ref().unwrap().data(), 12, n);
        let out = bottleneck_lstm_step(&k.cfg, &k.x, &k.state, &k.w).unwrap();
        assert_close(out.h.data(), &h);
        assert_close(out.c.unwrap().data(), &c);
    }

    #[test]
    fn conv_gru_matches_loop_reference() {
        let k = case(RecurrentKind::ConvGru, BottleneckForm::InputDepthwise, 4);
        let (m, n, px) = (3, 2, (3, 4));
        let hp = k.state.h.data();
        let xh = cat(k.x.data(), m, hp, n);
        let g = sep_ref(&k.w, "gates", &xh, px, m + n);
        let r: Vec<f64> = gate(&g, 12, n, 2, 0).into_iter().map(sig).collect();
        let z: Vec<f64> = gate(&g, 12, n, 2, 1).into_iter().map(sig).collect();
        let rh: Vec<f64> = r.iter().zip(hp).map(|(a, b)| a * b).collect();
        let cand = sep_ref(&k.w, "candidate", &cat(k.x.data(), m, &rh, n), px, m + n);
        let h: Vec<f64> = (0..hp.len()).map(|j| hp[j] + z[j] * (rel(cand[j]) - hp[j])).collect();
        let out = conv_gru_step(&k.cfg, &k.x, &k.state, &k.w).unwrap();
        assert_close(out.h.data(), &h);
        assert!(out.c.is_none());
    }

    #[test]
    fn per_gate_layout_splits_the_combined_pointwise() {
        // A per-gate layer whose kernels are the column blocks of a combined
        // layer computes the same step.
        let k = case(RecurrentKind::ConvLstm, BottleneckForm::InputDepthwise, 5);
        let n = 2;
        let cfg = k.cfg.with_layout(GateLayout::PerGate);
        let comb = k.w.get("gates").unwrap();
        let mut store = ParamStore::new();
        for (gi, role) in LSTM_GATES.iter().enumerate() {
            let cin = comb.pw.in_channels();
            let w: Vec<f64> = (0..cin)
                .flat_map(|i| comb.pw.weights()[i * 4 * n + gi * n..i * 4 * n + (gi + 1) * n].to_vec())
                .collect();
            store.insert_kernel(format!("l/{role}/dw"), comb.dw.clone()).unwrap();
            store.insert_kernel(format!("l/{role}/pw"), ConvKernel::pointwise(cin, n, w).unwrap()).unwrap();
        }
        let pw = RecurrentWeights::from_store(&cfg, "l", &store).unwrap();
        let a = cfg.step_tensors(&k.x, &k.state, &pw).unwrap();
        let b = k.cfg.step_tensors(&k.x, &k.state, &k.w).unwrap();
        assert!(a.h.max_abs_diff(&b.h) < 1e-12);
    }

    #[test]
    fn averaging_is_identity_then_weighted() {
        let cfg = RecurrentConfig::new(RecurrentKind::Averaging, 2, 2);
        let w = RecurrentWeights::<ConvKernel<f64>>::zeros(&cfg).unwrap();
        assert!(w.is_empty());
        let x0 = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![4.0, -8.0]).unwrap();
        let x1 = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 8.0]).unwrap();
        let s0 = RecurrentState::zeros(&cfg, 1, 1, 1);
        let s1 = cfg.step_tensors(&x0, &s0, &w).unwrap();
        assert_eq!(s1.h.data(), &[4.0, -8.0]);
        let s2 = cfg.step_tensors(&x1, &s1, &w).unwrap();
        assert_eq!(s2.h.data(), &[1.0, 4.0]);
        assert_eq!(averaging_step(&x1, Some(&x0)).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(averaging_step(&x1, None).unwrap().data(), x1.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, kind) in
            [RecurrentKind::ConvLstm, RecurrentKind::ConvGru, RecurrentKind::BottleneckLstm, RecurrentKind::Averaging]
                .into_iter()
                .enumerate()
        {
            for form in [BottleneckForm::InputDepthwise, BottleneckForm::JointSeparable] {
                let k = case(kind, form, 10 + i as u64);
                let err = finite_diff_check(
                    |tape, xv| {
                        let wv = k.w.on_tape(tape, true);
                        let mut s = k.state.on_tape(tape);
                        // Two steps so the recurrence itself is differentiated.
                        s = k.cfg.step(tape, &wv, xv, &s)?;
                        s = k.cfg.step(tape, &wv, xv, &s)?;
                        let sq = tape.mul(s.h, s.h)?;
                        Ok(tape.sum(sq))
                    },
                    &k.x,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-6, "{kind} {form:?}: {err}");
            }
        }
    }

    #[test]
    fn saturated_gates_preserve_cell_state() {
        for kind in [RecurrentKind::ConvLstm, RecurrentKind::BottleneckLstm] {
            let cfg = RecurrentConfig::new(kind, 3, 2);
            let w = RecurrentWeights::<ConvKernel<f32>>::saturated_persistence(&cfg, 1e4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut s = RecurrentState::zeros(&cfg, 1, 4, 4);
            let c0 = Tensor::randn(s.h.shape(), 1.0, &mut rng);
            s.c = Some(c0.clone());
            for _ in 0..50 {
                let x = Tensor::uniform(Shape::new(1, 4, 4, 3), 0.5, 1.0, &mut rng);
                s = cfg.step_tensors(&x, &s, &w).unwrap();
                assert_eq!(s.c.as_ref().unwrap().data(), c0.data());
            }
        }
    }

    #[test]
    fn pass_through_start_copies_positive_inputs() {
        for (kind, form) in [
            (RecurrentKind::ConvLstm, BottleneckForm::InputDepthwise),
            (RecurrentKind::BottleneckLstm, BottleneckForm::InputDepthwise),
            (RecurrentKind::BottleneckLstm, BottleneckForm::JointSeparable),
        ] {
            let cfg = RecurrentConfig::new(kind, 3, 3).with_form(form);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let w = RecurrentWeights::<ConvKernel<f64>>::pass_through(&cfg, 60.0, 0.0, &mut rng).unwrap();
            let mut s = RecurrentState::zeros(&cfg, 1, 4, 4);
            for _ in 0..3 {
                let x = Tensor::uniform(Shape::new(1, 4, 4, 3), 0.5, 1.0, &mut rng);
                s = cfg.step_tensors(&x, &s, &w).unwrap();
                for (h, x) in s.h.data().iter().zip(x.data()) {
                    assert!((h - x).abs() < 1e-9, "{kind:?} {form:?}: {h} vs {x}");
                }
            }
        }
        let narrow = RecurrentConfig::new(RecurrentKind::BottleneckLstm, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RecurrentWeights::<ConvKernel<f64>>::pass_through(&narrow, 4.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let k = case(RecurrentKind::BottleneckLstm, BottleneckForm::InputDepthwise, 9);
        let bad = Tensor::zeros(Shape::new(1, 3, 4, 5));
        let err = k.cfg.step_tensors(&bad, &k.state, &k.w).unwrap_err();
        assert_eq!(err.code(), "E_SHAPE");
        let mut st = k.state.clone();
        st.c = None;
        assert!(k.cfg.step_tensors(&k.x, &st, &k.w).is_err());
        assert!(conv_gru_step(&k.cfg, &k.x, &k.state, &k.w).is_err());
    }

    #[test]
    fn full_size_parameter_counts() {
        let lstm = RecurrentConfig::new(RecurrentKind::ConvLstm, 1024, 1024);
        assert_eq!(lstm.param_count(), 8_407_040);
        assert_eq!(lstm.with_layout(GateLayout::PerGate).param_count(), 8_462_336);
        let gru = RecurrentConfig::new(RecurrentKind::ConvGru, 1024, 1024);
        assert_eq!(gru.param_count(), 6_328_320);
        let bl = RecurrentConfig::new(RecurrentKind::BottleneckLstm, 1024, 256);
        assert_eq!(bl.param_count(), 601_344);
        assert_eq!(RecurrentConfig::new(RecurrentKind::BottleneckLstm, 512, 128).param_count(), 153_216);
        let joint = bl.with_form(BottleneckForm::JointSeparable);
        assert_eq!(joint.param_count(), 603_648);
        assert_eq!(joint.with_layout(GateLayout::PerGate).param_count(), 610_560);
        assert_eq!(RecurrentConfig::new(RecurrentKind::Averaging, 8, 8).param_count(), 0);
    }

    #[test]
    fn names_round_trip_through_store() {
        let cfg = RecurrentConfig::new(RecurrentKind::ConvGru, 4, 3).with_layout(GateLayout::PerGate);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = RecurrentWeights::<ConvKernel<f32>>::random(&cfg, &mut rng).unwrap();
        let mut store = ParamStore::new();
        w.insert_into("fm1_lstm", &mut store).unwrap();
        let names: Vec<_> = store.names().map(str::to_owned).collect();
        let mut expected = cfg.weight_names("fm1_lstm");
        expected.sort();
        assert_eq!(names, expected);
        assert_eq!(RecurrentWeights::from_store(&cfg, "fm1_lstm", &store).unwrap(), w);
        assert_eq!(store.total_params(), cfg.param_count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn param_counts_follow_closed_forms(m in 1usize..300, n in 1usize..300, k in prop::sample::select(vec![1usize, 3, 5])) {
            let mk = |kind| RecurrentConfig { kernel: k, ..RecurrentConfig::new(kind, m, n) };
            let kk = k * k;
            prop_assert_eq!(mk(RecurrentKind::ConvLstm).param_count(), kk * (m + n) + 4 * (m + n) * n);
            prop_assert_eq!(
                mk(RecurrentKind::ConvLstm).with_layout(GateLayout::PerGate).param_count(),
                4 * (kk * (m + n) + (m + n) * n)
            );
            prop_assert_eq!(mk(RecurrentKind::ConvGru).param_count(), 2 * kk * (m + n) + 3 * (m + n) * n);
            prop_assert_eq!(
                mk(RecurrentKind::BottleneckLstm).param_count(),
                kk * m + (m + n) * n + kk * n + 4 * n * n
            );
            prop_assert_eq!(
                mk(RecurrentKind::BottleneckLstm).with_form(BottleneckForm::JointSeparable).param_count(),
                kk * (m + n) + (m + n) * n + kk * n + 4 * n * n
            );
            prop_assert_eq!(
                mk(RecurrentKind::BottleneckLstm)
                    .with_form(BottleneckForm::JointSeparable)
                    .with_layout(GateLayout::PerGate)
                    .param_count(),
                kk * (m + n) + (m + n) * n + 4 * (kk * n + n * n)
            );
        }

        #[test]
        fn lstm_outputs_are_nonnegative_and_bounded_by_cell(seed in 0u64..1000) {
            let k = case(RecurrentKind::BottleneckLstm, BottleneckForm::InputDepthwise, seed);
            let out = k.cfg.step_tensors(&k.x, &k.state, &k.w).unwrap();
            let c = out.c.unwrap();
            for (h, c) in out.h.data().iter().zip(c.data()) {
                prop_assert!(*h >= 0.0);
                prop_assert!(*h <= c.max(0.0) + 1e-12);
            }
        }

        #[test]
        fn gru_output_interpolates(seed in 0u64..1000) {
            // h_t lies between h_{t-1} and the (non-negative) candidate, so it
            // stays non-negative when the previous state is.
            let k = case(RecurrentKind::ConvGru, BottleneckForm::InputDepthwise, seed);
            let out = k.cfg.step_tensors(&k.x, &k.state, &k.w).unwrap();
            for v in out.h.data() {
                prop_assert!(*v >= 0.0);
            }
        }
    }
}
