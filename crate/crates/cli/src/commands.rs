use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mview_core::matching::Scorer;
use mview_core::model::{
    gallery_from, gen_synthetic, split_point, train, Repulsion, SyntheticConfig, TrainConfig, TrainReport,
};
use mview_core::qd_loss::{discrimination, dpp_loss, pairwise_repulsion_loss, DEFAULT_EPSILON};
use mview_core::retrieval::{evaluate_both, RETRIEVED_DEPTH};
use mview_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::gradcheck;
use crate::io::{dataset_to_mvt, read_checkpoint, read_dataset, write_checkpoint};
use crate::manifest::{absolute, sha256_file, RunManifest};

pub const DATASET_FILE: &str = "dataset.mvt";
pub const CHECKPOINT_FILE: &str = "checkpoint.mvt";
pub const REPORT_FILE: &str = "report.json";
pub const STEPS_FILE: &str = "steps.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const RANKS_FILE: &str = "ranks.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.json";
pub const DPP_DEMO_FILE: &str = "dpp_demo.csv";

#[derive(Debug, Parser)]
#[command(name = "mview", version, about = "Multi-view image-report alignment toolkit")]
pub struct Cli {
    /// Worker threads for the parallel paths; 1 keeps everything sequential.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic planted-concept dataset.
    GenData(GenDataArgs),
    /// Train the encoder on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Emit configurations that pairwise repulsion cannot tell apart but the DPP loss can.
    DppDemo(DppDemoArgs),
    /// Re-run a recorded command and verify its outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::GradCheck(_) => "grad-check",
            Command::DppDemo(_) => "dpp-demo",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, env = "MVIEW_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub positions: Option<usize>,
    /// Image feature dimension.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Sentence embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub instance_scale: Option<f64>,
    #[arg(long)]
    pub inclusion_prob: Option<f64>,
    #[arg(long)]
    pub report_keep: Option<f64>,
    #[arg(long)]
    pub background: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenDataArgs {
    pub fn config(&self) -> SyntheticConfig {
        let d = SyntheticConfig::default();
        SyntheticConfig {
            samples: self.samples.unwrap_or(d.samples),
            concepts: self.concepts.unwrap_or(d.concepts),
            positions: self.positions.unwrap_or(d.positions),
            feature_dim: self.feature_dim.unwrap_or(d.feature_dim),
            embed_dim: self.dim.unwrap_or(d.embed_dim),
            noise: self.noise.unwrap_or(d.noise),
            instance_scale: self.instance_scale.unwrap_or(d.instance_scale),
            inclusion_prob: self.inclusion_prob.unwrap_or(d.inclusion_prob),
            report_keep: self.report_keep.unwrap_or(d.report_keep),
            background: self.background.unwrap_or(d.background),
            max_sentences: d.max_sentences,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "MVIEW_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_latents: Option<f64>,
    #[arg(long)]
    pub lr_projections: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub learn_temperature: bool,
    #[arg(long)]
    pub lr_temperature: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Weight of the repulsion term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value = "pva")]
    pub matcher: Scorer,
    #[arg(long, default_value = "dpp")]
    pub repulsion: Repulsion,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub query_dim: Option<usize>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub probe: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            steps: self.steps.unwrap_or(d.steps),
            lr_latents: self.lr_latents.unwrap_or(d.lr_latents),
            lr_projections: self.lr_projections.unwrap_or(d.lr_projections),
            momentum: self.momentum.unwrap_or(d.momentum),
            temperature: self.temperature.unwrap_or(d.temperature),
            learn_temperature: self.learn_temperature,
            lr_temperature: self.lr_temperature.unwrap_or(d.lr_temperature),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            lambda: self.lambda.unwrap_or(d.lambda),
            matcher: self.matcher,
            repulsion: self.repulsion,
            views: self.views.unwrap_or(d.views),
            query_dim: self.query_dim.unwrap_or(d.query_dim),
            holdout_fraction: self.holdout.unwrap_or(d.holdout_fraction),
            probe_size: self.probe.unwrap_or(d.probe_size),
            grad_clip: self.grad_clip.unwrap_or(d.grad_clip),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "pva")]
    pub scorer: Scorer,
    /// Keep only held-out items with at least one positive finding.
    #[arg(long)]
    pub positive_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradCheckArgs {
    #[arg(long, env = "MVIEW_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Scale analytic gradients by (1 + δ) before comparing.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_analytic: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DppDemoArgs {
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Grid resolution of the even-family search.
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the re-executed outputs.
    #[arg(long)]
    pub out: PathBuf,
}

/// What a command produced, for the caller to print.
#[derive(Debug, Default)]
pub struct Outcome {
    pub manifest: Option<PathBuf>,
    pub stdout: String,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Input(e.to_string()))
}

fn args_json(cmd: &Command) -> CliResult<serde_json::Value> {
    serde_json::to_value(cmd).map_err(|e| CliError::Input(e.to_string()))
}

fn config_json<T: Serialize>(cfg: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| CliError::Input(e.to_string()))
}

/// Input paths are made absolute so a manifest replays from any directory.
fn with_absolute_inputs(cmd: &Command) -> CliResult<Command> {
    let mut c = cmd.clone();
    match &mut c {
        Command::Train(a) => a.data = absolute(&a.data)?,
        Command::Eval(a) => {
            a.data = absolute(&a.data)?;
            a.checkpoint = absolute(&a.checkpoint)?;
        }
        Command::Replay(a) => a.manifest = absolute(&a.manifest)?,
        Command::GenData(_) | Command::GradCheck(_) | Command::DppDemo(_) => {}
    }
    Ok(c)
}

pub fn run(cmd: &Command) -> CliResult<Outcome> {
    let cmd = &with_absolute_inputs(cmd)?;
    match cmd {
        Command::GenData(a) => gen_data(cmd, a),
        Command::Train(a) => train_cmd(cmd, a),
        Command::Eval(a) => eval(cmd, a),
        Command::GradCheck(a) => grad_check(cmd, a),
        Command::DppDemo(a) => dpp_demo(cmd, a),
        Command::Replay(a) => replay(a),
    }
}

fn gen_data(cmd: &Command, a: &GenDataArgs) -> CliResult<Outcome> {
    let cfg = a.config();
    let ds = gen_synthetic::<f64>(&cfg, a.seed)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::start(cmd.name(), Some(a.seed), args_json(cmd)?, config_json(&cfg)?);
    dataset_to_mvt(&ds)?.write(&a.out.join(DATASET_FILE))?;
    m.add_output(&a.out, DATASET_FILE)?;
    let manifest = m.finish(&a.out)?;
    Ok(Outcome { manifest: Some(manifest), stdout: format!("wrote {} samples\n", ds.len()) })
}

fn steps_csv(report: &TrainReport) -> String {
    let mut s = String::from("step,contrastive_loss,repulsion_loss,collapse,temperature\n");
    for r in &report.steps {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.contrastive, r.repulsion, r.collapse, r.temperature);
    }
    s
}

fn train_cmd(cmd: &Command, a: &TrainArgs) -> CliResult<Outcome> {
    let ds = read_dataset(&a.data)?;
    let cfg = a.config();
    create_dir(&a.out)?;
    let mut m = RunManifest::start(cmd.name(), Some(a.seed), args_json(cmd)?, config_json(&cfg)?);
    m.add_input(&a.data)?;
    match train(&cfg, &ds) {
        Ok(outcome) => {
            write_checkpoint(&a.out.join(CHECKPOINT_FILE), &outcome.params, &cfg, outcome.report.final_temperature)?;
            write_file(&a.out.join(REPORT_FILE), to_json(&outcome.report)?)?;
            write_file(&a.out.join(STEPS_FILE), steps_csv(&outcome.report))?;
            for f in [CHECKPOINT_FILE, REPORT_FILE, STEPS_FILE] {
                m.add_output(&a.out, f)?;
            }
            let manifest = m.finish(&a.out)?;
            let stdout = format!(
                "collapse {:.4} -> {:.4}, checksum {}\n",
                outcome.report.initial_collapse, outcome.report.final_collapse, outcome.report.final_checksum
            );
            Ok(Outcome { manifest: Some(manifest), stdout })
        }
        Err(Error::Divergence { step, report }) => {
            write_file(&a.out.join(REPORT_FILE), to_json(&report)?)?;
            write_file(&a.out.join(STEPS_FILE), steps_csv(&report))?;
            m.add_output(&a.out, REPORT_FILE)?;
            m.add_output(&a.out, STEPS_FILE)?;
            m.finish(&a.out)?;
            Err(CliError::Divergence(format!(
                "training diverged at step {step}; last good report in {}",
                a.out.join(REPORT_FILE).display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(cmd: &Command, a: &EvalArgs) -> CliResult<Outcome> {
    let (params, meta) = read_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let split = split_point(ds.len(), meta.train.holdout_fraction);
    let mut gallery = gallery_from(&params, &ds.samples[split..], split as u64)?;
    if a.positive_only {
        gallery = gallery.positive_only();
    }
    let results = evaluate_both(&gallery, a.scorer)?;
    create_dir(&a.out)?;
    let eval_cfg = json!({ "scorer": a.scorer, "positive_only": a.positive_only, "holdout_fraction": meta.train.holdout_fraction });
    let mut m = RunManifest::start(cmd.name(), None, args_json(cmd)?, eval_cfg);
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.data)?;

    let directions: Vec<_> =
        results.iter().map(|(t, metrics)| json!({ "direction": t.direction, "metrics": metrics })).collect();
    let metrics = json!({ "scorer": a.scorer, "gallery_size": gallery.len(), "directions": directions });
    write_file(&a.out.join(METRICS_FILE), to_json(&metrics)?)?;

    let mut ranks = String::from("direction,query_id,rank,top_retrieved\n");
    for (t, _) in &results {
        for (q, (&rank, retrieved)) in t.ranks.iter().zip(&t.retrieved).enumerate() {
            let top: Vec<String> =
                retrieved.iter().take(RETRIEVED_DEPTH).map(|&i| gallery.items()[i].id.to_string()).collect();
            let _ = writeln!(ranks, "{},{},{},{}", t.direction.as_str(), gallery.items()[q].id, rank, top.join(" "));
        }
    }
    write_file(&a.out.join(RANKS_FILE), ranks)?;
    m.add_output(&a.out, METRICS_FILE)?;
    m.add_output(&a.out, RANKS_FILE)?;
    let manifest = m.finish(&a.out)?;
    let mut stdout = String::new();
    for (t, r) in &results {
        let _ = writeln!(
            stdout,
            "{}: R@1 {:.4} R@5 {:.4} MdR {} MnR {:.2}",
            t.direction.as_str(),
            r.r_at_1,
            r.r_at_5,
            r.median_rank,
            r.mean_rank
        );
    }
    Ok(Outcome { manifest: Some(manifest), stdout })
}

fn grad_check(cmd: &Command, a: &GradCheckArgs) -> CliResult<Outcome> {
    let report = gradcheck::run(a.seed, a.perturb_analytic)?;
    create_dir(&a.out)?;
    let gc_cfg = json!({
        "seed": a.seed,
        "perturb_analytic": a.perturb_analytic,
        "tolerances": { "qd": gradcheck::QD_TOL, "contrastive": gradcheck::CONTRASTIVE_TOL, "end_to_end": gradcheck::END_TO_END_TOL },
    });
    let mut m = RunManifest::start(cmd.name(), Some(a.seed), args_json(cmd)?, gc_cfg);
    let text = to_json(&report)?;
    write_file(&a.out.join(GRAD_CHECK_FILE), &text)?;
    m.add_output(&a.out, GRAD_CHECK_FILE)?;
    let manifest = m.finish(&a.out)?;
    if !report.passed {
        let w = report.worst().expect("at least one component");
        return Err(CliError::Verification(format!(
            "gradient check failed; worst component {} with relative error {:e} (tolerance {:e})",
            w.component, w.max_rel_err, w.tolerance
        )));
    }
    Ok(Outcome { manifest: Some(manifest), stdout: text })
}

fn dpp_demo(cmd: &Command, a: &DppDemoArgs) -> CliResult<Outcome> {
    if !(a.epsilon > 0.0) || a.grid < 2 {
        return Err(CliError::Input("epsilon must be positive and grid at least 2".into()));
    }
    let pair = discrimination::search(a.epsilon, a.grid)
        .ok_or_else(|| CliError::Input("no even/clustered pair found on this grid".into()))?;
    let dup = discrimination::duplicate_rows();
    let mut csv = String::from("config,pairwise_loss,dpp_loss\n");
    let _ = writeln!(csv, "even,{},{}", pair.pairwise_even, pair.dpp_even);
    let _ = writeln!(csv, "clustered,{},{}", pair.pairwise_clustered, pair.dpp_clustered);
    let _ = writeln!(csv, "duplicate,{},{}", pairwise_repulsion_loss(&dup)?, dpp_loss(&dup, a.epsilon)?);
    create_dir(&a.out)?;
    let demo_cfg = json!({ "epsilon": a.epsilon, "grid": a.grid });
    let mut m = RunManifest::start(cmd.name(), None, args_json(cmd)?, demo_cfg);
    write_file(&a.out.join(DPP_DEMO_FILE), &csv)?;
    m.add_output(&a.out, DPP_DEMO_FILE)?;
    let manifest = m.finish(&a.out)?;
    Ok(Outcome { manifest: Some(manifest), stdout: csv })
}

fn with_out(cmd: &Command, out: &Path) -> CliResult<Command> {
    let mut c = cmd.clone();
    match &mut c {
        Command::GenData(a) => a.out = out.into(),
        Command::Train(a) => a.out = out.into(),
        Command::Eval(a) => a.out = out.into(),
        Command::GradCheck(a) => a.out = out.into(),
        Command::DppDemo(a) => a.out = out.into(),
        Command::Replay(_) => return Err(CliError::Input("cannot replay a replay".into())),
    }
    Ok(c)
}

fn replay(a: &ReplayArgs) -> CliResult<Outcome> {
    let recorded = RunManifest::read(&a.manifest)?;
    let cmd: Command = serde_json::from_value(recorded.args.clone())
        .map_err(|e| CliError::Input(format!("manifest arguments do not describe a command: {e}")))?;
    for input in &recorded.inputs {
        let now = sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::Verification(format!("input {} changed since the run", input.path.display())));
        }
    }
    let cmd = with_out(&cmd, &a.out)?;
    match run(&cmd) {
        Ok(_) | Err(CliError::Divergence(_)) => {}
        Err(e) => return Err(e),
    }
    let mut stdout = String::new();
    for art in &recorded.outputs {
        let now = sha256_file(&a.out.join(&art.path))?;
        if now != art.sha256 {
            return Err(CliError::Verification(format!("output {} differs from the recorded run", art.path.display())));
        }
        let _ = writeln!(stdout, "{} ok", art.path.display());
    }
    Ok(Outcome { manifest: None, stdout })
}
