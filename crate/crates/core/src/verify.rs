//! Self-checks behind `tsl verify`: finite-difference gradient checks over
//! every tape operation and recurrent layer, plus the cost-model identities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, Tape, Var};
use crate::checkpoint::ParamStore;
use crate::cost::{self, Crossover};
use crate::detection::{self, LossConfig, Target};
use crate::error::Result;
use crate::recurrent::{BottleneckForm, GateLayout, RecurrentConfig, RecurrentKind, RecurrentState, RecurrentWeights};
use crate::tensor::{ConvKernel, KernelKind, Padding, Shape, Tensor};

/// Central-difference step and the largest accepted relative error.
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    /// `PASS name: detail` or `FAIL name: detail`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

/// A scalar function of one probed tensor.
pub type Probe = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Named probe and the point at which it is checked.
pub struct GradCase {
    pub name: String,
    pub probe: Probe,
    pub at: Tensor<f64>,
}

impl GradCase {
    fn new(
        name: impl Into<String>,
        at: Tensor<f64>,
        probe: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
    ) -> Self {
        GradCase { name: name.into(), probe: Box::new(probe), at }
    }

    pub fn max_error(&self) -> Result<f64> {
        finite_diff_check(&self.probe, &self.at, GRAD_EPS)
    }
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output element reaches the gradient with a distinct coefficient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// Probes for every primitive tape operation at one seed.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(Shape::new(2, 5, 5, 3), 1.0, &mut rng);
    let other = Tensor::randn(x.shape(), 1.0, &mut rng);
    let kernels = [
        ConvKernel::<f64>::he_normal(KernelKind::Full, [3, 3, 3, 4], &mut rng),
        ConvKernel::he_normal(KernelKind::Depthwise, [3, 3, 3, 1], &mut rng),
        ConvKernel::he_normal(KernelKind::Pointwise, [1, 1, 3, 4], &mut rng),
    ];
    let mut cases = Vec::new();

    for k in kernels {
        let kind = k.kind();
        for stride in [1, 2] {
            for padding in [Padding::Same, Padding::Valid] {
                let tag = format!("conv {} s{stride} {padding:?}", kind.as_str());
                let kc = k.clone();
                cases.push(GradCase::new(format!("{tag} / input"), x.clone(), move |t, v| {
                    let kv = t.kernel(&kc, false);
                    let y = t.conv2d(v, kv, kind, stride, padding)?;
                    weighted_sum(t, y, seed)
                }));
                let xc = x.clone();
                cases.push(GradCase::new(format!("{tag} / kernel"), k.tensor().clone(), move |t, kv| {
                    let xv = t.constant(xc.clone());
                    let y = t.conv2d(xv, kv, kind, stride, padding)?;
                    weighted_sum(t, y, seed)
                }));
            }
        }
    }

    let dw = ConvKernel::<f64>::he_normal(KernelKind::Depthwise, [3, 3, 3, 1], &mut rng);
    let pw = ConvKernel::<f64>::he_normal(KernelKind::Pointwise, [1, 1, 3, 5], &mut rng);
    cases.push(GradCase::new("separable s2", x.clone(), move |t, v| {
        let d = t.kernel(&dw, false);
        let p = t.kernel(&pw, false);
        let y = t.separable(v, d, p, 2)?;
        weighted_sum(t, y, seed)
    }));

    type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(b, a)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("concat", |t, a, b| t.concat_channels(b, a)),
    ];
    for (name, f) in binary {
        let o = other.clone();
        cases.push(GradCase::new(name, x.clone(), move |t, v| {
            let ov = t.constant(o.clone());
            let y = f(t, v, ov)?;
            weighted_sum(t, y, seed)
        }));
    }
    type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;
    let unary: [(&str, Unary); 6] = [
        ("scale", |t, a| Ok(t.scale(a, -1.7))),
        ("relu", |t, a| Ok(t.relu(a))),
        ("sigmoid", |t, a| Ok(t.sigmoid(a))),
        ("square", |t, a| t.mul(a, a)),
        ("slice", |t, a| t.slice_channels(a, 1, 2)),
        ("split", |t, a| {
            let wide = t.concat_channels(a, a)?;
            let parts = t.split_channels(wide, 3)?;
            let m = t.mul(parts[0], parts[2])?;
            t.add(m, parts[1])
        }),
    ];
    for (name, f) in unary {
        cases.push(GradCase::new(name, x.clone(), move |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, seed)
        }));
    }
    let bias = Tensor::randn(Shape::new(1, 1, 1, 3), 1.0, &mut rng);
    let xb = x.clone();
    cases.push(GradCase::new("bias_add / bias", bias, move |t, b| {
        let xv = t.constant(xb.clone());
        let y = t.bias_add(xv, b)?;
        weighted_sum(t, y, seed)
    }));

    // Loss terms over 9 anchors of 4 labels; the mining plan is fixed at
    // the probe point so the selection stays constant under perturbation.
    let logits = Tensor::randn(Shape::new(1, 3, 3, 4), 1.5, &mut rng);
    let boxes = Tensor::randn(Shape::new(1, 3, 3, 4), 1.0, &mut rng);
    let targets: Vec<Target> = [0, 0, 2, 0, 1, 0, 0, 3, 0]
        .into_iter()
        .map(|label| Target { label, offsets: [0.3, -0.4, 1.7, -0.2], matched: None })
        .collect();
    let cfg = LossConfig { neg_ratio: 1, ..LossConfig::default() };
    let plan = detection::plan_loss(logits.data(), 4, &targets, &cfg).expect("consistent plan inputs");
    let (labels, cls_w) = (plan.labels.clone(), plan.cls_weights.clone());
    cases.push(GradCase::new("softmax cross-entropy", logits, move |t, v| {
        t.softmax_cross_entropy(&[v], 4, labels.clone(), cls_w.clone())
    }));
    let (loc_t, loc_w) = (plan.loc_targets.clone(), plan.loc_weights.clone());
    cases.push(GradCase::new("smooth L1", boxes, move |t, v| t.smooth_l1(&[v], loc_t.clone(), loc_w.clone())));
    cases
}

/// Every recurrent configuration the suite exercises.
pub fn recurrent_configs() -> Vec<RecurrentConfig> {
    let mut v = Vec::new();
    for layout in [GateLayout::Combined, GateLayout::PerGate] {
        v.push(RecurrentConfig::new(RecurrentKind::ConvLstm, 3, 2).with_layout(layout));
        v.push(RecurrentConfig::new(RecurrentKind::ConvGru, 3, 2).with_layout(layout));
        for form in [BottleneckForm::InputDepthwise, BottleneckForm::JointSeparable] {
            v.push(RecurrentConfig::new(RecurrentKind::BottleneckLstm, 4, 2).with_form(form).with_layout(layout));
        }
    }
    v.push(RecurrentConfig::new(RecurrentKind::Averaging, 3, 3));
    v
}

/// Which input of a two-step recurrent run the probe replaces.
#[derive(Clone, Copy)]
enum Slot<'a> {
    Input,
    Hidden,
    Cell,
    Weight(&'a str),
}

/// Probes through two consecutive steps of one recurrent layer, with
/// respect to the input, the incoming state and each kernel.
pub fn recurrent_cases(cfg: &RecurrentConfig, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(2, 3, 3, cfg.input_channels);
    let x0 = Tensor::randn(shape, 1.0, &mut rng);
    let x1 = Tensor::randn(shape, 1.0, &mut rng);
    let mut store = ParamStore::new();
    RecurrentWeights::<ConvKernel<f64>>::gaussian(cfg, 0.5, &mut rng)?.insert_into("l", &mut store)?;
    let mut s0 = RecurrentState::<f64>::zeros(cfg, 2, 3, 3);
    s0.h = Tensor::randn(s0.h.shape(), 0.5, &mut rng);
    if let Some(c) = &mut s0.c {
        *c = Tensor::randn(c.shape(), 0.5, &mut rng);
    }
    s0.fresh = false;
    let label = format!("{} {} {}", cfg.kind, cfg.form.as_str(), cfg.layout.as_str());

    let two_steps = {
        let (cfg, store, s0, x0) = (*cfg, store.clone(), s0.clone(), x0.clone());
        move |t: &mut Tape<f64>, v: Var, slot: Slot| -> Result<Var> {
            let w = RecurrentWeights::from_lookup(&cfg, "l", |name| match slot {
                Slot::Weight(probed) if probed == name => Ok(v),
                _ => Ok(t.constant(store.get(name)?.clone())),
            })?;
            let mut s = s0.on_tape(t);
            match slot {
                Slot::Hidden => s.h = v,
                Slot::Cell => s.c = Some(v),
                _ => {}
            }
            let x = match slot {
                Slot::Input => v,
                _ => t.constant(x0.clone()),
            };
            let a = cfg.step(t, &w, x, &s)?;
            let x1v = t.constant(x1.clone());
            let b = cfg.step(t, &w, x1v, &a)?;
            let out = match b.c {
                Some(cell) => t.add(b.h, cell)?,
                None => b.h,
            };
            weighted_sum(t, out, seed)
        }
    };

    let mut cases = Vec::new();
    let f = two_steps.clone();
    cases.push(GradCase::new(format!("{label} / input"), x0, move |t, v| f(t, v, Slot::Input)));
    let f = two_steps.clone();
    cases.push(GradCase::new(format!("{label} / hidden"), s0.h.clone(), move |t, v| f(t, v, Slot::Hidden)));
    if let Some(c) = s0.c.clone() {
        let f = two_steps.clone();
        cases.push(GradCase::new(format!("{label} / cell"), c, move |t, v| f(t, v, Slot::Cell)));
    }
    for name in cfg.weight_names("l") {
        let f = two_steps.clone();
        let at = store.get(&name)?.clone();
        cases.push(GradCase::new(format!("{label} / {name}"), at, {
            let name = name.clone();
            move |t, v| f(t, v, Slot::Weight(&name))
        }));
    }
    Ok(cases)
}

/// All probes at one seed.
pub fn all_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = op_cases(seed);
    for cfg in recurrent_configs() {
        cases.extend(recurrent_cases(&cfg, seed)?);
    }
    Ok(cases)
}

/// Finite-difference checks over seeds `0..seeds`: one [`Check`] per probe
/// with the worst error across seeds.
pub fn gradient_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..seeds {
        for (i, case) in all_cases(seed)?.into_iter().enumerate() {
            let err = case.max_error()?;
            match worst.get_mut(i) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, err)| Check::new(format!("grad {name}"), err < GRAD_TOL, format!("max rel err {err:.2e}")))
        .collect())
}

/// Recurrent-layer parameter and MAC figures at the Conv13 site, and the
/// exact crossover identities.
pub fn cost_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for (alpha, res, published) in [(1.0, 320, [8.41, 6.33, 0.60]), (0.5, 256, [2.11, 1.59, 0.15])] {
        let rows = cost::recurrent_comparison(alpha, res, GateLayout::Combined);
        for (row, want) in rows[1..].iter().zip(published) {
            let got = row.params as f64 / 1e6;
            let ok = if row.kind == RecurrentKind::BottleneckLstm {
                (got * 100.0).round() / 100.0 == want
            } else {
                (got - want).abs() / want <= 0.01
            };
            out.push(Check::new(format!("params {} alpha={alpha}", row.kind), ok, format!("{got:.3}M vs {want}M")));
        }
    }
    for (alpha, res, published) in [(1.0, 320, [840.0, 632.0]), (0.5, 256, [135.0, 102.0])] {
        let rows = cost::recurrent_comparison(alpha, res, GateLayout::Combined);
        for (row, want) in rows[1..3].iter().zip(published) {
            let got = row.mac_closed_form as f64 / 1e6;
            out.push(Check::new(
                format!("mac {} alpha={alpha}", row.kind),
                (got - want).abs() / want <= 0.015,
                format!("{got:.1}M vs {want}M"),
            ));
        }
        let b = &rows[3];
        let excluded = b.mac_gate_excluded.unwrap_or(0) as f64 / 1e6;
        let want = if alpha == 1.0 { 34.0 } else { 5.6 };
        out.push(Check::new(
            format!("mac bottleneck alpha={alpha} without final gate pointwise"),
            (excluded - want).abs() / want <= 0.01,
            format!("{excluded:.2}M vs {want}M (closed form {:.1}M)", b.mac_closed_form as f64 / 1e6),
        ));
    }
    let expect = |lhs: u64, rhs: u64| match lhs.cmp(&rhs) {
        std::cmp::Ordering::Less => Crossover::RivalCheaper,
        std::cmp::Ordering::Equal => Crossover::Equal,
        std::cmp::Ordering::Greater => Crossover::BottleneckCheaper,
    };
    let (mut lstm_ok, mut gru_ok) = (true, true);
    for n in 4..=1024u64 {
        for m in 1..=2 * n {
            let r = cost::crossover_check(m, n, 3);
            lstm_ok &= r.vs_lstm == expect(3 * m, n);
            gru_ok &= r.vs_gru == expect(m, n);
        }
    }
    out.push(Check::new("crossover vs lstm at M = N/3", lstm_ok, "N in 4..=1024, M in 1..=2N"));
    out.push(Check::new("crossover vs gru at M = N", gru_ok, "N in 4..=1024, M in 1..=2N"));
    out
}
