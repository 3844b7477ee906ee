//! Acceptance criteria 1-9. Each prints one `criterion N PASS|FAIL` line;
//! the process fails if any criterion fails. Pass a criterion number to
//! run only that one, e.g. `cargo test --test acceptance -- 8`.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsl_core::arch::{ArchSpec, BuildOptions, Placement};
use tsl_core::autodiff::Tape;
use tsl_core::checkpoint::ParamStore;
use tsl_core::cost::{self, CostForm};
use tsl_core::data::{self, Dataset, VideoParams};
use tsl_core::detection::{self, BBox, Detection, GroundTruth};
use tsl_core::model::Model;
use tsl_core::recurrent::{
    BottleneckForm, GateLayout, RecurrentConfig, RecurrentKind, RecurrentState, RecurrentWeights,
};
use tsl_core::tensor::{ConvKernel, Shape, Tensor};
use tsl_core::train::{self, ExperimentConfig, TrainConfig};
use tsl_core::verify;

type Verdict = (bool, String);

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

// ---------------------------------------------------------------- 1

/// Closed-form parameter counts of the layers as laid out, independent of
/// the crate's own counting.
fn lstm_params(m: u64, n: u64) -> u64 {
    9 * (m + n) + (m + n) * 4 * n
}

fn gru_params(m: u64, n: u64) -> u64 {
    2 * 9 * (m + n) + (m + n) * 3 * n
}

fn bottleneck_params(m: u64, n: u64) -> u64 {
    9 * m + (m + n) * n + 9 * n + n * 4 * n
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    let cases = [(1.0, 320, [8.41, 6.33, 0.60], 0.601), (0.5, 256, [2.11, 1.59, 0.15], 0.153)];
    for (alpha, res, paper, bottleneck_3dp) in cases {
        let rows = cost::recurrent_comparison(alpha, res, GateLayout::Combined);
        let per_gate = cost::recurrent_comparison(alpha, res, GateLayout::PerGate);
        let (m, nb) = (rows[1].m, rows[3].n);
        ok &= rows[1].params == lstm_params(m, m);
        ok &= rows[2].params == gru_params(m, m);
        ok &= rows[3].params == bottleneck_params(m, nb);
        let got: Vec<f64> = rows[1..].iter().map(|r| r.params as f64 / 1e6).collect();
        ok &= within(got[0], paper[0], 0.01) && within(got[1], paper[1], 0.01);
        ok &= round_to(got[2], 3) == bottleneck_3dp && round_to(got[2], 2) == paper[2];
        detail.push(format!(
            "a={alpha}: {:.3}/{:.3}/{:.3}M (per-gate {:.3}/{:.3}M)",
            got[0],
            got[1],
            got[2],
            per_gate[1].params as f64 / 1e6,
            per_gate[2].params as f64 / 1e6
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    (ok, format!("{}; {elapsed:.2?}", detail.join("; ")))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    // (alpha, resolution, LSTM, GRU, bottleneck closed form, gate-excluded), in millions.
    let cases = [(1.0, 320, 840.0, 632.0, 61.1, 34.0), (0.5, 256, 135.0, 102.0, 9.8, 5.6)];
    for (alpha, res, lstm, gru, quoted, excluded) in cases {
        let rows = cost::recurrent_comparison(alpha, res, GateLayout::Combined);
        let l = rows[1].mac_closed_form as f64 / 1e6;
        let g = rows[2].mac_closed_form as f64 / 1e6;
        ok &= within(l, lstm, 0.015) && within(g, gru, 0.015);
        let b = &rows[3];
        let closed = b.mac_closed_form as f64 / 1e6;
        let layers = b.mac_layers as f64 / 1e6;
        let excl = b.mac_gate_excluded.unwrap_or(0) as f64 / 1e6;
        ok &= within(excl, excluded, 0.01);
        // At alpha=1 the quoted figure is the closed form; at 0.5 it is the
        // layer sum (the closed form gives 10.1M there).
        ok &= within(closed, quoted, 0.01) || within(layers, quoted, 0.01);
        ok &= b.mac_closed_form == cost::bottleneck_cost(b.m, b.n, b.df, 3, CostForm::ClosedForm);

        let arch = ArchSpec::build(&BuildOptions::full(alpha, res, Placement::SingleConv13)).expect("arch");
        let report = cost::model_report(&arch, res).expect("report");
        let note = report.notes.iter().any(|n| n.contains(&b.mac_gate_excluded.unwrap_or(0).to_string()));
        let table = report.to_table();
        ok &= note && table.contains(&b.mac_closed_form.to_string());
        detail.push(format!(
            "a={alpha}: lstm {l:.1}M gru {g:.1}M bottleneck closed {closed:.2}M layers {layers:.2}M without-gate-pw {excl:.2}M"
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    (ok, format!("{}; {elapsed:.2?}", detail.join("; ")))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let df = 10;
    let b = |m, n| cost::bottleneck_cost(m, n, df, 3, CostForm::ClosedForm);
    let mut ok = true;
    let mut equalities = 0;
    for n in 4..=1024u64 {
        if n % 3 == 0 {
            let m = n / 3;
            ok &= b(m, n) == cost::lstm_cost(m, n, df, 3);
            equalities += 1;
        }
        // Strictly on either side of the crossover.
        let (lo, hi) = ((n - 1) / 3, n / 3 + 1);
        ok &= lo == 0 || b(lo, n) > cost::lstm_cost(lo, n, df, 3);
        ok &= b(hi, n) < cost::lstm_cost(hi, n, df, 3);
        ok &= b(n, n) == cost::gru_cost(n, n, df, 3);
        ok &= b(n - 1, n) > cost::gru_cost(n - 1, n, df, 3);
        ok &= b(n + 1, n) < cost::gru_cost(n + 1, n, df, 3);
        equalities += 1;
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    (ok, format!("{equalities} equalities and their neighbours over N in 4..=1024; {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let checks = match verify::gradient_suite(20) {
        Ok(c) => c,
        Err(e) => return (false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.line()).collect();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(120) && !checks.is_empty();
    let detail = if failed.is_empty() {
        format!("{} probes x 20 seeds below {:e}; {elapsed:.1?}", checks.len(), verify::GRAD_TOL)
    } else {
        failed.join("; ")
    };
    (ok, detail)
}

// ---------------------------------------------------------------- 5

/// Plain NHWC buffer for the reference transcriptions.
#[derive(Clone)]
struct Map {
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl Map {
    fn from_tensor(t: &Tensor<f64>) -> Map {
        let s = t.shape();
        assert_eq!(s.batch, 1);
        Map { h: s.height, w: s.width, c: s.channels, v: t.data().to_vec() }
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map { v: self.v.iter().map(|&a| f(a)).collect(), ..*self }
    }

    fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        Map { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..*self }
    }

    fn cat(&self, o: &Map) -> Map {
        let c = self.c + o.c;
        let mut v = Vec::with_capacity(self.h * self.w * c);
        for p in 0..self.h * self.w {
            v.extend_from_slice(&self.v[p * self.c..(p + 1) * self.c]);
            v.extend_from_slice(&o.v[p * o.c..(p + 1) * o.c]);
        }
        Map { c, v, ..*self }
    }

    fn channels(&self, start: usize, len: usize) -> Map {
        let mut v = Vec::with_capacity(self.h * self.w * len);
        for p in 0..self.h * self.w {
            v.extend_from_slice(&self.v[p * self.c + start..p * self.c + start + len]);
        }
        Map { c: len, v, ..*self }
    }
}

/// 3x3 depthwise, stride 1, one pixel of zero padding on every side.
fn depthwise(x: &Map, w: &[f64]) -> Map {
    let mut out = vec![0.0; x.v.len()];
    for y in 0..x.h {
        for xx in 0..x.w {
            for c in 0..x.c {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                            s += x.at(iy as usize, ix as usize, c) * w[(ky * 3 + kx) * x.c + c];
                        }
                    }
                }
                out[(y * x.w + xx) * x.c + c] = s;
            }
        }
    }
    Map { v: out, ..*x }
}

fn pointwise(x: &Map, w: &[f64], cout: usize) -> Map {
    let mut v = vec![0.0; x.h * x.w * cout];
    for p in 0..x.h * x.w {
        for o in 0..cout {
            v[p * cout + o] = (0..x.c).map(|i| x.v[p * x.c + i] * w[i * cout + o]).sum();
        }
    }
    Map { c: cout, v, ..*x }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn relu(a: f64) -> f64 {
    a.max(0.0)
}

struct Weights<'a>(&'a ParamStore<f64>);

impl Weights<'_> {
    fn data(&self, name: &str) -> &[f64] {
        self.0.get(&format!("l/{name}")).expect("weight").data()
    }

    fn sep(&self, role: &str, x: &Map, cout: usize) -> Map {
        pointwise(&depthwise(x, self.data(&format!("{role}/dw"))), self.data(&format!("{role}/pw")), cout)
    }

    /// Pre-activations of `roles.len()` gates of width `n` from `input`.
    fn gates(&self, layout: GateLayout, combined: &str, roles: &[&str], input: &Map, n: usize) -> Vec<Map> {
        match layout {
            GateLayout::Combined => {
                let all = self.sep(combined, input, roles.len() * n);
                (0..roles.len()).map(|g| all.channels(g * n, n)).collect()
            }
            GateLayout::PerGate => roles.iter().map(|r| self.sep(r, input, n)).collect(),
        }
    }
}

/// Equation-by-equation step of each layer type.
fn reference_step(cfg: &RecurrentConfig, w: &Weights, x: &Map, h: &Map, c: Option<&Map>) -> (Map, Option<Map>) {
    let n = cfg.output_channels;
    let lstm = |pre: Vec<Map>| {
        let (f, i, o, g) = (pre[0].map(sigmoid), pre[1].map(sigmoid), pre[2].map(sigmoid), pre[3].map(relu));
        let c_prev = c.expect("cell");
        let c_new = f.zip(c_prev, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b);
        let h_new = o.zip(&c_new.map(relu), |a, b| a * b);
        (h_new, Some(c_new))
    };
    let lstm_roles = ["forget", "input", "output", "cell"];
    match cfg.kind {
        RecurrentKind::ConvLstm => lstm(w.gates(cfg.layout, "gates", &lstm_roles, &x.cat(h), n)),
        RecurrentKind::BottleneckLstm => {
            let b = match cfg.form {
                BottleneckForm::InputDepthwise => {
                    let dx = depthwise(x, w.data("bottleneck/dw"));
                    pointwise(&dx.cat(h), w.data("bottleneck/pw"), n)
                }
                BottleneckForm::JointSeparable => w.sep("bottleneck", &x.cat(h), n),
            }
            .map(relu);
            lstm(w.gates(cfg.layout, "gates", &lstm_roles, &b, n))
        }
        RecurrentKind::ConvGru => {
            let rz = w.gates(cfg.layout, "gates", &["reset", "update"], &x.cat(h), n);
            let (r, z) = (rz[0].map(sigmoid), rz[1].map(sigmoid));
            let cand = w.sep("candidate", &x.cat(&r.zip(h, |a, b| a * b)), n).map(relu);
            let h_new = h.zip(&z.zip(&cand.zip(h, |a, b| a - b), |a, b| a * b), |a, b| a + b);
            (h_new, None)
        }
        RecurrentKind::Averaging => (x.zip(c.expect("previous input"), |a, b| 0.75 * a + 0.25 * b), Some(x.clone())),
    }
}

fn max_diff(a: &Map, b: &Tensor<f64>) -> f64 {
    a.v.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn recurrent_oracles() -> (bool, f64, usize) {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut configs = Vec::new();
    for layout in [GateLayout::Combined, GateLayout::PerGate] {
        configs.push(RecurrentConfig::new(RecurrentKind::ConvLstm, 4, 2).with_layout(layout));
        configs.push(RecurrentConfig::new(RecurrentKind::ConvGru, 4, 3).with_layout(layout));
        for form in [BottleneckForm::InputDepthwise, BottleneckForm::JointSeparable] {
            configs.push(RecurrentConfig::new(RecurrentKind::BottleneckLstm, 8, 2).with_form(form).with_layout(layout));
        }
    }
    configs.push(RecurrentConfig::new(RecurrentKind::Averaging, 3, 3));
    for seed in 0..10u64 {
        for cfg in &configs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let weights = RecurrentWeights::<ConvKernel<f64>>::gaussian(cfg, 0.7, &mut rng).expect("weights");
            let mut store = ParamStore::new();
            weights.insert_into("l", &mut store).expect("store");
            let x = Tensor::<f64>::randn(Shape::new(1, 3, 3, cfg.input_channels), 1.0, &mut rng);
            let mut state = RecurrentState::zeros(cfg, 1, 3, 3);
            state.h = Tensor::randn(state.h.shape(), 1.0, &mut rng);
            if cfg.kind.has_cell() || cfg.kind == RecurrentKind::Averaging {
                state.c = Some(Tensor::randn(state.h.shape(), 1.0, &mut rng));
            }
            state.fresh = false;
            let next = cfg.step_tensors(&x, &state, &weights).expect("step");
            let c_in = state.c.as_ref().map(Map::from_tensor);
            let (h_ref, c_ref) = reference_step(
                cfg,
                &Weights(&store),
                &Map::from_tensor(&x),
                &Map::from_tensor(&state.h),
                c_in.as_ref(),
            );
            worst = worst.max(max_diff(&h_ref, &next.h));
            if cfg.kind != RecurrentKind::Averaging {
                if let (Some(a), Some(b)) = (&c_ref, &next.c) {
                    worst = worst.max(max_diff(a, b));
                }
            }
            cases += 1;
        }
    }
    (worst < 1e-6, worst, cases)
}

/// AP by re-matching every score-threshold prefix from scratch and taking
/// the precision envelope by direct maximisation.
fn brute_force_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize) -> Option<f64> {
    let gt_count = gts.iter().flatten().filter(|g| g.class == class).count();
    if gt_count == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (f, *d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut thresholds: Vec<f64> = ranked.iter().map(|r| r.1.score).collect();
    thresholds.dedup();
    let mut points = Vec::new();
    for tau in thresholds {
        let kept: Vec<&(usize, Detection)> = ranked.iter().filter(|r| r.1.score >= tau).collect();
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (frame, d) in &kept {
            let best = gts[*frame]
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class == class)
                .map(|(i, g)| (i, detection::iou(&d.bbox, &g.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            if let Some((i, v)) = best {
                if v >= 0.5 && !used[*frame][i] {
                    used[*frame][i] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / kept.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * envelope;
        prev = r;
    }
    Some(ap)
}

fn map_oracle() -> (bool, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = [0.3, 0.35, 0.5, 0.7];
    let rand_box = |rng: &mut ChaCha8Rng| {
        BBox::new(grid[rng.gen_range(0..4)], grid[rng.gen_range(0..4)], 0.2 + 0.1 * rng.gen_range(0..3) as f64, 0.2)
    };
    let instances = 20_000;
    for _ in 0..instances {
        let frames = rng.gen_range(1..=2);
        let mut dets = vec![Vec::new(); frames];
        let mut gts = vec![Vec::new(); frames];
        for _ in 0..rng.gen_range(0..=3) {
            let b = rand_box(&mut rng);
            gts[rng.gen_range(0..frames)].push(GroundTruth { class: rng.gen_range(1..=2), bbox: b });
        }
        for _ in 0..rng.gen_range(0..=5) {
            let b = rand_box(&mut rng);
            let score = [0.2, 0.5, 0.9][rng.gen_range(0..3)];
            dets[rng.gen_range(0..frames)].push(Detection { class: rng.gen_range(1..=2), score, bbox: b });
        }
        let report = detection::evaluate_map(&dets, &gts, 2, 0.5).expect("evaluate");
        for c in &report.per_class {
            if c.ap != brute_force_ap(&dets, &gts, c.class) {
                return (false, instances);
            }
        }
    }
    (true, instances)
}

fn criterion_5() -> Verdict {
    let (rec_ok, worst, cases) = recurrent_oracles();
    let (map_ok, instances) = map_oracle();
    (
        rec_ok && map_ok,
        format!(
            "{cases} recurrent steps, max abs diff {worst:.1e}; AP equal on {instances} random instances: {map_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn toy_model(placement: Placement, seed: u64) -> Model<f64> {
    let arch = ArchSpec::build(&BuildOptions::toy(0.25, placement)).expect("arch");
    Model::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).expect("model")
}

fn random_frames(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::uniform(Shape::new(1, 64, 64, 3), 0.0, 1.0, &mut rng)).collect()
}

fn criterion_6() -> Verdict {
    let plain = toy_model(Placement::None, 1);
    let frames = random_frames(4, 2);
    let seq = plain.run_sequence_raw(&frames).expect("run");
    let mut identical = true;
    for (f, got) in frames.iter().zip(&seq) {
        let mut tape = Tape::new();
        let pv = plain.record(&mut tape, |_| false);
        let x = tape.constant(f.clone());
        let out = plain.forward_undivided(&mut tape, &pv, x).expect("forward");
        identical &= &plain.image_heads(&tape, &out, 0) == got;
    }

    let mut causal = true;
    let decode = detection::DecodeConfig::default();
    for s in 0..10u64 {
        let model = toy_model(Placement::SingleConv13, 100 + s);
        let frames = random_frames(6, 200 + s);
        let base = model.run_sequence_raw(&frames).expect("run");
        let base_dets = model.run_sequence(&frames, &decode).expect("run");
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        let j = rng.gen_range(0..frames.len());
        let mut changed = frames.clone();
        changed[j] = Tensor::uniform(changed[j].shape(), 0.0, 1.0, &mut rng);
        let got = model.run_sequence_raw(&changed).expect("run");
        let got_dets = model.run_sequence(&changed, &decode).expect("run");
        causal &= got[..j] == base[..j] && got_dets[..j] == base_dets[..j] && got[j] != base[j];
    }
    (
        identical && causal,
        format!(
            "no-placement heads bitwise equal to undivided inference: {identical}; causality on 10 sequences: {causal}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for (alpha, res, params, mac) in [(1.0, 320, 3.24e6, 1.13e9), (0.5, 256, 0.86e6, 0.19e9)] {
        let arch = ArchSpec::build(&BuildOptions::full(alpha, res, Placement::SingleConv13)).expect("arch");
        let r = cost::model_report(&arch, res).expect("report");
        let (p, m) = (r.total_params as f64, r.total_mac_layer_sum as f64);
        ok &= within(p, params, 0.10) && within(m, mac, 0.15);
        detail.push(format!(
            "a={alpha}: {:.3}M params (vs {:.2}M), {:.3}B MAC (vs {:.2}B)",
            p / 1e6,
            params / 1e6,
            m / 1e9,
            mac / 1e9
        ));
    }
    (ok, detail.join("; "))
}

// ---------------------------------------------------------------- 8

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

fn non_increasing(maps: &[f64]) -> bool {
    maps.windows(2).all(|w| w[1] <= w[0] + 0.01)
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let mut wins = 0;
    let mut monotone = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig::toy().seeded(seed);
        let run = || -> tsl_core::error::Result<(Vec<f64>, Vec<f64>)> {
            let (train_data, eval_data) = train::prepare_data(&cfg)?;
            let two = train::run_two_stage(&cfg, &train_data)?;
            let sweep = |m: &Model<f32>| -> tsl_core::error::Result<Vec<f64>> {
                Ok(train::occlusion_sweep(m, &eval_data, &PS, seed ^ 0x0cc1, &cfg.decode)?
                    .into_iter()
                    .map(|(_, v)| v)
                    .collect())
            };
            Ok((sweep(&two.baseline.model)?, sweep(&two.recurrent.model)?))
        };
        let (base, rec) = match run() {
            Ok(v) => v,
            Err(e) => return (false, format!("seed {seed}: {e}")),
        };
        if rec[2] > base[2] {
            wins += 1;
        }
        monotone &= non_increasing(&base) && non_increasing(&rec);
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        let line = format!("seed {seed}: baseline [{}] recurrent [{}]", fmt(&base), fmt(&rec));
        println!("    {line}");
        lines.push(line);
    }
    let elapsed = start.elapsed();
    let ok = wins >= 4 && monotone && elapsed <= Duration::from_secs(30 * 60);
    (ok, format!("recurrent ahead at p=0.5 in {wins}/5 seeds; non-increasing in p: {monotone}; {elapsed:.0?}"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let mut cfg = ExperimentConfig::toy().seeded(9);
    cfg.train_videos = 6;
    cfg.stage1.steps = 30;
    cfg.stage2 = TrainConfig { steps: 8, unroll: 4, batch_size: 2, ..cfg.stage2 };
    let run = || -> tsl_core::error::Result<(Vec<u8>, Vec<u8>, bool)> {
        let (train_data, _) = train::prepare_data(&cfg)?;
        let arch = cfg.arch(Placement::None)?;
        let s1 = train::train_stage1(&arch, &train_data, &cfg.stage1)?;
        let rec_arch = cfg.arch(cfg.placement.clone())?;
        let s2 = train::train_stage2(&rec_arch, &s1.model.params, &train_data, &cfg.stage2)?;
        let frozen = train::frozen_set(&rec_arch, None)?;
        let mut frozen_ok = !frozen.is_empty();
        let mut moved = false;
        for (name, t) in s2.model.params.iter() {
            let layer = train::layer_of(name);
            if frozen.iter().any(|f| f == layer) {
                let before = s1.model.params.get(name)?;
                frozen_ok &= before.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            } else if let Ok(before) = s1.model.params.get(name) {
                moved |= before.shape() == t.shape() && before.data() != t.data();
            }
        }
        Ok((s1.model.params.to_bytes(), s2.model.params.to_bytes(), frozen_ok && moved))
    };
    let (a1, a2, frozen_ok) = match run() {
        Ok(v) => v,
        Err(e) => return (false, e.to_string()),
    };
    let (b1, b2, _) = run().expect("second run");
    let reproducible = a1 == b1 && a2 == b2;

    // 125 videos x 2 objects x 40 frames = 10^4 boxes.
    let videos = Dataset::generate(125, 77, &VideoParams::toy()).expect("videos");
    let boxes: usize = videos.videos.iter().map(|v| v.gt_all().iter().map(Vec::len).sum::<usize>()).sum();
    let mut freq_ok = boxes >= 10_000;
    let mut freqs = Vec::new();
    for (i, p) in [0.25, 0.5, 0.75].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let mut occluded = 0;
        for v in &videos.videos {
            let o = data::occlude(v, p, &mut rng).expect("occlude");
            occluded += o.occlusions.iter().map(Vec::len).sum::<usize>();
        }
        let f = occluded as f64 / boxes as f64;
        freq_ok &= (f - p).abs() <= 0.02;
        freqs.push(format!("p={p}: {f:.4}"));
    }
    (
        frozen_ok && reproducible && freq_ok,
        format!(
            "frozen layers bitwise unchanged: {frozen_ok}; reruns bitwise identical: {reproducible}; occlusion over {boxes} boxes {}",
            freqs.join(", ")
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Verdict); 9] = [
        ("1", "recurrent parameter counts", criterion_1),
        ("2", "recurrent MAC counts", criterion_2),
        ("3", "cost crossover identities", criterion_3),
        ("4", "finite-difference gradients", criterion_4),
        ("5", "oracle equivalence", criterion_5),
        ("6", "structural identities", criterion_6),
        ("7", "full-model totals", criterion_7),
        ("8", "occlusion robustness at toy scale", criterion_8),
        ("9", "training contracts", criterion_9),
    ];
    let mut failures = 0;
    for (id, title, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let (ok, detail) = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(v) => v,
            Err(p) => {
                let msg =
                    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        println!("criterion {id} {} {title}: {detail}", if ok { "PASS" } else { "FAIL" });
        failures += usize::from(!ok);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
