//! `tsl`: cost reports, architecture builds, toy training, evaluation and
//! ablations over the temporal single-shot detector.

mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tsl_core::arch::{ArchSpec, BuildOptions, Placement};
use tsl_core::checkpoint::ParamStore;
use tsl_core::cost::{self, RecurrentRow};
use tsl_core::detection::{self, MapReport};
use tsl_core::error::{Error, Result};
use tsl_core::model::Model;
use tsl_core::train::{self, AblationKind, AblationRow, ExperimentConfig, MetricRow, RunDir, Stage};
use tsl_core::verify;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "tsl", version, about = "Temporal single-shot detection toolkit")]
struct Cli {
    /// Worker threads; recorded in run metadata. Execution is single-threaded,
    /// which keeps reruns bitwise reproducible.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and multiply-accumulate counts of a built architecture.
    CostReport(CostReportArgs),
    /// Print the layer table of an architecture.
    BuildArch(BuildArchArgs),
    /// Train one stage on synthetic videos.
    Train(TrainArgs),
    /// Score a checkpoint, or a detections file against ground truth.
    Eval(EvalArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
    /// Two-stage protocol followed by the occlusion sweep.
    OccludeEval(OccludeArgs),
    /// Gradient checks and cost identities.
    Verify(VerifyArgs),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    /// Width multiplier.
    #[arg(long)]
    alpha: Option<f64>,
    /// Input resolution in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    /// none, single_conv13, stacked_conv13, conv13_plus_fm_prefix(k),
    /// all_feature_maps or single_after(site).
    #[arg(long, default_value = "single_conv13")]
    placement: String,
    /// lstm, gru, bottleneck or averaging.
    #[arg(long, default_value = "bottleneck")]
    lstm_type: String,
    /// table1 or eq4.
    #[arg(long, default_value = "table1")]
    bottleneck_form: String,
    /// combined or per_gate.
    #[arg(long, default_value = "combined")]
    layout: String,
    /// Desk-scale stack and defaults.
    #[arg(long)]
    toy: bool,
}

impl ArchArgs {
    fn options(&self) -> Result<BuildOptions> {
        let placement: Placement = self.placement.parse()?;
        let mut o = if self.toy {
            BuildOptions::toy(self.alpha.unwrap_or(0.25), placement)
        } else {
            BuildOptions::full(self.alpha.unwrap_or(1.0), 320, placement)
        };
        if let Some(r) = self.resolution {
            o.resolution = r;
        }
        o.lstm_type = self.lstm_type.parse()?;
        o.form = self.bottleneck_form.parse()?;
        o.layout = self.layout.parse()?;
        Ok(o)
    }

    fn build(&self) -> Result<ArchSpec> {
        ArchSpec::build(&self.options()?)
    }
}

#[derive(Args, Debug)]
struct CostReportArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Compare the recurrent layer types at the Conv13 site instead of
    /// reporting the whole model.
    #[arg(long)]
    recurrent: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildArchArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Data and schedule flags shared by the training commands.
#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    /// Overridden by TSL_SEED.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Unrolled frames per recurrent training window.
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    train_videos: Option<usize>,
    #[arg(long)]
    eval_videos: Option<usize>,
}

impl ExperimentArgs {
    fn config(&self, arch: &ArchArgs) -> Result<ExperimentConfig> {
        if !arch.toy {
            return Err(Error::Config("training runs only at desk scale; pass --toy".into()));
        }
        let mut cfg = ExperimentConfig::toy().seeded(train::resolve_seed(self.seed)?);
        if let Some(a) = arch.alpha {
            cfg.alpha = a;
        }
        if let Some(r) = arch.resolution {
            cfg.video.resolution = r;
        }
        cfg.placement = arch.placement.parse()?;
        cfg.lstm_type = arch.lstm_type.parse()?;
        cfg.form = arch.bottleneck_form.parse()?;
        if let Some(u) = self.unroll {
            cfg.stage2.unroll = u;
        }
        if let Some(s) = self.stage1_steps {
            cfg.stage1.steps = s;
        }
        if let Some(s) = self.stage2_steps {
            cfg.stage2.steps = s;
        }
        if let Some(n) = self.train_videos {
            cfg.train_videos = n;
        }
        if let Some(n) = self.eval_videos {
            cfg.eval_videos = n;
        }
        cfg.stage1.validate()?;
        cfg.stage2.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
    /// ssd_only trains the single-frame detector; lstm_stage adds the
    /// recurrent layers on top of `--init`.
    #[arg(long, default_value = "ssd_only")]
    stage: String,
    /// Stage-one checkpoint (required for lstm_stage).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Also save a checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Occlude training boxes with this probability.
    #[arg(long)]
    occlusion_p: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score on synthetic minival segments.
    #[arg(long, requires = "arch_file")]
    checkpoint: Option<PathBuf>,
    /// Architecture text written by `build-arch` or `train`.
    #[arg(long = "arch")]
    arch_file: Option<PathBuf>,
    /// Detections file (`frame class score cx cy w h` per line).
    #[arg(long, requires = "ground_truth", conflicts_with = "checkpoint")]
    detections: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Object classes in file mode.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Occlude evaluation boxes with this probability.
    #[arg(long)]
    occlusion_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eval_videos: Option<usize>,
    /// Write the AP table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// placement, layer_type, bottleneck_dim, multi_placement or occlusion.
    #[arg(long)]
    kind: String,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OccludeArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Occlusion probabilities to evaluate; 0 is always included.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
    occlusion_p: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Random seeds for the gradient checks.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
    /// New output location; defaults to the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli, &argv[1..]) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e);
            ExitCode::from(1)
        }
    }
}

/// Dispatches one parsed command; `Ok(false)` signals failed checks.
fn run(cli: Cli, args: &[String]) -> Result<bool> {
    let threads = cli.threads;
    match cli.command {
        Command::CostReport(a) => cost_report(&a).map(|_| true),
        Command::BuildArch(a) => {
            let text = a.arch.build()?.to_text();
            emit(a.out.as_deref(), &text).map(|_| true)
        }
        Command::Train(a) => cmd_train(&a, args, threads).map(|_| true),
        Command::Eval(a) => cmd_eval(&a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(&a, args, threads).map(|_| true),
        Command::OccludeEval(a) => cmd_occlude(&a, args, threads).map(|_| true),
        Command::Verify(a) => cmd_verify(&a),
        Command::Rerun(a) => cmd_rerun(&a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
}

fn cost_report(a: &CostReportArgs) -> Result<()> {
    let opts = a.arch.options()?;
    let text = if a.recurrent {
        let rows = cost::recurrent_comparison(opts.alpha, opts.resolution, opts.layout);
        match a.format {
            Format::Json => json(&rows)?,
            Format::Csv => recurrent_csv(&rows),
            Format::Table => recurrent_table(&rows),
        }
    } else {
        let report = cost::model_report(&ArchSpec::build(&opts)?, opts.resolution)?;
        match a.format {
            Format::Json => report.to_json(),
            Format::Csv => report.to_csv(),
            Format::Table => report.to_table(),
        }
    };
    emit(a.out.as_deref(), &text)
}

fn recurrent_csv(rows: &[RecurrentRow]) -> String {
    let mut s = String::from("kind,m,n,df,params,mac_closed_form,mac_layers,mac_gate_excluded\n");
    for r in rows {
        let excl = r.mac_gate_excluded.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.kind, r.m, r.n, r.df, r.params, r.mac_closed_form, r.mac_layers, excl
        );
    }
    s
}

fn recurrent_table(rows: &[RecurrentRow]) -> String {
    let mut s = format!("{:<16} {:>6} {:>6} {:>4} {:>10} {:>10}\n", "type", "M", "N", "D_F", "params(M)", "MAC(M)");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>6} {:>4} {:>10.3} {:>10.1}",
            r.kind.as_str(),
            r.m,
            r.n,
            r.df,
            r.params as f64 / 1e6,
            r.mac_closed_form as f64 / 1e6
        );
        if let Some(excl) = r.mac_gate_excluded {
            let _ = writeln!(
                s,
                "note: {} closed-form MAC {:.1}M; as built {:.1}M; without the final N->4N gate pointwise {:.1}M",
                r.kind.as_str(),
                r.mac_closed_form as f64 / 1e6,
                r.mac_layers as f64 / 1e6,
                excl as f64 / 1e6
            );
        }
    }
    s
}

fn cmd_train(a: &TrainArgs, args: &[String], threads: u32) -> Result<()> {
    let mut cfg = a.exp.config(&a.arch)?;
    let stage: Stage = a.stage.parse()?;
    let run = RunDir::create(&a.out)?;
    let (train_data, eval_data) = train::prepare_data(&cfg)?;
    let every = a.checkpoint_every.unwrap_or(0);
    let mut artifacts = Vec::new();
    let mut save = |step: usize, m: &Model<f32>| -> Result<()> {
        if every > 0 && step.is_multiple_of(every) {
            artifacts.push(run.save_checkpoint(step, &m.params)?);
        }
        Ok(())
    };
    let (arch, mut outcome, tc) = match stage {
        Stage::SsdOnly => {
            let arch = cfg.arch(Placement::None)?;
            if let Some(p) = a.occlusion_p {
                cfg.stage1.occlusion_p = p;
            }
            let tc = cfg.stage1.clone();
            let out = train::train_stage1_observed(&arch, &train_data, &tc, &mut save)?;
            (arch, out, tc)
        }
        Stage::LstmStage => {
            let init = a
                .init
                .as_ref()
                .ok_or_else(|| Error::Config("lstm_stage needs a stage-one checkpoint (--init)".into()))?;
            let stage1 = ParamStore::<f32>::load(init)?;
            let arch = cfg.arch(cfg.placement.clone())?;
            if let Some(p) = a.occlusion_p {
                cfg.stage2.occlusion_p = p;
            }
            let tc = cfg.stage2.clone();
            let out = train::train_stage2_observed(&arch, &stage1, &train_data, &tc, &mut save)?;
            (arch, out, tc)
        }
    };
    if every == 0 || tc.steps % every != 0 {
        artifacts.push(run.save_checkpoint(tc.steps, &outcome.model.params)?);
    }
    let map = train::evaluate(&outcome.model, &eval_data, &cfg.decode)?.report.map;
    if let Some(last) = outcome.metrics.last_mut() {
        last.map = Some(map);
    }
    artifacts.push(run.write_config(&cfg)?);
    artifacts.push(run.write("arch", &arch.to_text())?);
    artifacts.push(run.write_metrics(&outcome.metrics)?);
    RunManifest::new("train", args, &cfg, cfg.seed, threads, &artifacts)?.write(run.root())?;
    println!("trained {} steps; final loss {:.4}; minival mAP {:.4}", tc.steps, last_loss(&outcome.metrics), map);
    Ok(())
}

fn last_loss(rows: &[MetricRow]) -> f64 {
    rows.last().map_or(f64::NAN, |r| r.loss)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report: MapReport = if let Some(det_path) = &a.detections {
        let gt_path = a.ground_truth.as_ref().expect("enforced by clap");
        let det_text = fs::read_to_string(det_path)?;
        let gt_text = fs::read_to_string(gt_path)?;
        let frames = detection::frame_count(&det_text).max(detection::frame_count(&gt_text));
        let dets = detection::read_detections(&det_text, frames)?;
        let gts = detection::read_ground_truth(&gt_text, frames)?;
        detection::evaluate_map(&dets, &gts, a.classes, a.iou)?
    } else if let Some(ckpt) = &a.checkpoint {
        let arch = ArchSpec::from_text(&fs::read_to_string(a.arch_file.as_ref().expect("enforced by clap"))?)?;
        let model = Model::from_params(arch.clone(), ParamStore::<f32>::load(ckpt)?)?;
        let mut cfg = ExperimentConfig::toy().seeded(train::resolve_seed(a.seed)?);
        cfg.video.resolution = arch.resolution;
        cfg.video.classes = arch.classes;
        if let Some(n) = a.eval_videos {
            cfg.eval_videos = n;
        }
        let (_, mut eval) = train::prepare_data(&ExperimentConfig { train_videos: 0, ..cfg.clone() })?;
        if let Some(p) = a.occlusion_p {
            eval = eval.occluded(p, cfg.seed ^ 0x0cc1)?;
        }
        train::evaluate(&model, &eval, &cfg.decode)?.report
    } else {
        return Err(Error::Config("eval needs --checkpoint with --arch, or --detections with --ground-truth".into()));
    };
    emit(a.out.as_deref(), &report.to_csv())
}

fn cmd_ablate(a: &AblateArgs, args: &[String], threads: u32) -> Result<()> {
    let cfg = a.exp.config(&a.arch)?;
    let kind: AblationKind = a.kind.parse()?;
    let run = RunDir::create(&a.out)?;
    let rows = train::run_ablation(kind, &cfg)?;
    let artifacts =
        vec![run.write_config(&cfg)?, run.write_ablation(&rows)?, run.write("ablation.dat", &ablation_dat(&rows))?];
    RunManifest::new("ablate", args, &cfg, cfg.seed, threads, &artifacts)?.write(run.root())?;
    print!("{}", train::ablation_csv(&rows));
    Ok(())
}

/// Gnuplot-friendly table: index, mAP, params, MAC, quoted variant.
fn ablation_dat(rows: &[AblationRow]) -> String {
    let mut s = String::from("# index mAP params mac variant\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s, "{i} {:.6} {} {} \"{}\"", r.map, r.params, r.mac, r.variant);
    }
    s
}

fn cmd_occlude(a: &OccludeArgs, args: &[String], threads: u32) -> Result<()> {
    let mut cfg = a.exp.config(&a.arch)?;
    let mut ps = vec![0.0];
    ps.extend(a.occlusion_p.iter().copied().filter(|&p| p != 0.0));
    for &p in &ps {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("occlusion probability {p} outside [0, 1]")));
        }
    }
    cfg.occlusion_ps = ps.clone();
    let run = RunDir::create(&a.out)?;
    let (train_data, eval_data) = train::prepare_data(&cfg)?;
    let two = train::run_two_stage(&cfg, &train_data)?;
    let sweep_seed = cfg.seed ^ 0x0cc1;
    let base = train::occlusion_sweep(&two.baseline.model, &eval_data, &ps, sweep_seed, &cfg.decode)?;
    let rec = train::occlusion_sweep(&two.recurrent.model, &eval_data, &ps, sweep_seed, &cfg.decode)?;
    let mut csv = format!("p,baseline,{}\n", cfg.lstm_type.as_str());
    let mut dat = format!("# p baseline {}\n", cfg.lstm_type.as_str());
    for ((p, b), (_, r)) in base.iter().zip(&rec) {
        let _ = writeln!(csv, "{p},{b:.6},{r:.6}");
        let _ = writeln!(dat, "{p} {b:.6} {r:.6}");
    }
    let artifacts = vec![
        run.write_config(&cfg)?,
        run.write("occlusion.csv", &csv)?,
        run.write("occlusion.dat", &dat)?,
        run.write("arch", &two.recurrent.model.arch.to_text())?,
        run.write_metrics(&two.recurrent.metrics)?,
        run.save_checkpoint(cfg.stage2.steps, &two.recurrent.model.params)?,
    ];
    RunManifest::new("occlude-eval", args, &cfg, cfg.seed, threads, &artifacts)?.write(run.root())?;
    print!("{csv}");
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let mut checks = verify::cost_suite();
    checks.extend(verify::gradient_suite(a.seeds)?);
    let mut ok = true;
    for c in &checks {
        println!("{}", c.line());
        ok &= c.passed;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(ok)
}

fn cmd_rerun(a: &RerunArgs) -> Result<bool> {
    let m = RunManifest::read(&a.manifest)?;
    if let Some(note) = manifest::seed_env_note() {
        eprintln!("{note}");
    }
    let mut argv = vec!["tsl".to_string()];
    argv.extend(m.replay_args(a.out.as_deref()));
    let cli =
        Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Error::Config("a manifest cannot record a rerun".into()));
    }
    run(cli, &argv[1..])
}
