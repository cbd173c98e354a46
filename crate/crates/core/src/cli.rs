//! Command-line front end.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{InputModality, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, check_sweep_lengths, cohens_d, metrics_report, predict, sweep_csv,
    wilcoxon_signed_rank_exact, write_sweep_svg, MetricsReport, RunAggregate, SweepPoint,
};
use crate::features::{
    encode_frames, encode_mhi, load_features_checked, save_features, FeatureSequence,
    FeatureStats, Modality,
};
use crate::losses::assign;
use crate::mhi::compute_mhi_sequence;
use crate::model::{forward, ModelConfig};
use crate::scalar::Scalar;
use crate::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, Sample, TrainOutcome};
use crate::videodata::{
    generate_synthetic_video, load_manifest, load_video, save_manifest, save_video, split_dataset,
    DatasetManifest, ManifestEntry, Split,
};

const ENV_OUT_ROOT: &str = "TRANSFACT_OUT_ROOT";
const ENV_JOBS: &str = "TRANSFACT_JOBS";

/// Scalar used for training and inference from the command line.
type Real = f32;

#[derive(Debug, Parser)]
#[command(name = "transfact", version, about = "Joint stage segmentation and transferability prediction for time-lapse embryo videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset with a stratified split.
    GenData(GenDataArgs),
    /// Compute motion history images for every video.
    ComputeMhi(ComputeMhiArgs),
    /// Encode frames or MHIs into per-frame feature files.
    ExtractFeatures(ExtractArgs),
    /// Train one model, or one per seed.
    Train(TrainArgs),
    /// Evaluate checkpoints on a split.
    Eval(EvalArgs),
    /// Accuracy as a function of clip length.
    TruncateSweep(SweepArgs),
    /// Paired comparison of two sets of runs.
    StatsCompare(StatsArgs),
    /// Render a sweep CSV as SVG.
    Plot(PlotArgs),
    #[command(hide = true)]
    SweepWorker(SweepWorkerArgs),
}

#[derive(Debug, Args, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML or JSON configuration file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// frames, mhi or frames+mhi.
    #[arg(long)]
    pub modality: Option<InputModality>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub encoder_seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<u16>,
    #[arg(long)]
    pub theta: Option<u8>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub w_trans: Option<f64>,
    #[arg(long)]
    pub w_frame: Option<f64>,
    #[arg(long)]
    pub w_stage: Option<f64>,
    #[arg(long)]
    pub w_cross: Option<f64>,
    #[arg(long)]
    pub w_smooth: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(modality => modality);
        set!(dim => features.dim);
        set!(encoder_seed => features.encoder_seed);
        set!(tau => features.tau);
        set!(theta => features.theta);
        set!(lr => train.learning_rate);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(warmup => train.warmup_steps);
        set!(weight_decay => train.weight_decay);
        set!(w_trans => train.weights.trans);
        set!(w_frame => train.weights.frame);
        set!(w_stage => train.weights.stage);
        set!(w_cross => train.weights.cross);
        set!(w_smooth => train.weights.smooth);
        set!(hidden_dim => model.hidden_dim);
        set!(tokens => model.num_tokens);
        set!(blocks => model.num_blocks);
        set!(heads => model.heads);
        c.resolve()
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub p_anomaly: Option<f64>,
    /// Train,val,test fractions, e.g. 0.7,0.1,0.2.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Restrict anomalies to the last third of each clip.
    #[arg(long)]
    pub late_anomaly: bool,
}

#[derive(Debug, Args)]
pub struct ComputeMhiArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the final map of each video as PGM.
    #[arg(long)]
    pub pgm: bool,
}

/// With `--seed` and no `--encoder-seed`, the seed also selects the
/// random projection.
#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Feature directory; defaults to `features` beside the manifest.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Train one model per seed, each in `seed-<k>`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Maximum concurrent worker processes.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// One or more checkpoints (one per run).
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write the final-block segment-to-token matching of every video
    /// to `assignments.jsonl`.
    #[arg(long)]
    pub dump_assignments: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Train once per seed at full length and only truncate test clips.
    /// Faster, but does not retrain per length.
    #[arg(long)]
    pub reuse_model: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepWorkerArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub length: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub result: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// CSV with one row per run.
    #[arg(long)]
    pub runs_a: PathBuf,
    #[arg(long)]
    pub runs_b: PathBuf,
    #[arg(long, default_value = "accuracy")]
    pub metric: String,
    /// Optional directory for stats.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long, default_value = "Accuracy vs. clip length")]
    pub title: String,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::ComputeMhi(a) => compute_mhi(a),
        Cmd::ExtractFeatures(a) => extract_features(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::TruncateSweep(a) => sweep_cmd(a),
        Cmd::StatsCompare(a) => stats_cmd(a),
        Cmd::Plot(a) => plot_cmd(a),
        Cmd::SweepWorker(a) => sweep_worker(a),
    }
}

fn out_dir(p: &Path) -> PathBuf {
    match std::env::var_os(ENV_OUT_ROOT) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn jobs(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var(ENV_JOBS).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Prepares an output directory holding a copy of the resolved
/// configuration and its fingerprint. `tag` distinguishes several kinds of
/// run sharing one directory.
fn claim_output(out: &OutArgs, cfg: &RunConfig, tag: &str) -> Result<PathBuf> {
    let dir = out_dir(&out.out);
    mkdir(&dir)?;
    let fp_path = dir.join(format!("fingerprint{tag}.txt"));
    if fp_path.exists() && !out.force {
        return Err(Error::RefuseOverwrite(dir));
    }
    write(&dir.join(format!("config{tag}.toml")), cfg.to_toml()?)?;
    write(&fp_path, format!("{}\n", cfg.fingerprint()?))?;
    Ok(dir)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(v) = a.count {
        cfg.data.count = v;
    }
    if let Some(v) = a.frames {
        cfg.data.generator.frames = v;
    }
    if let Some(v) = a.size {
        cfg.data.generator.size = v;
    }
    if let Some(v) = a.p_anomaly {
        cfg.data.generator.p_anomaly = v;
    }
    if let Some(r) = &a.ratios {
        let [tr, va, te] = r[..] else {
            return Err(Error::Config(format!("--ratios takes three values, got {}", r.len())));
        };
        cfg.data.ratios = [tr, va, te];
    }
    if a.late_anomaly {
        cfg.data.generator = cfg.data.generator.clone().late_anomaly();
    }
    let cfg = cfg.resolve()?;
    let dir = claim_output(&a.out, &cfg, "")?;
    let videos_dir = dir.join("videos");
    mkdir(&videos_dir)?;
    let mut entries = Vec::with_capacity(cfg.data.count);
    for i in 0..cfg.data.count {
        let v = generate_synthetic_video(crate::dataset::video_seed(cfg.seed, i), &cfg.data.generator)?;
        let rel = PathBuf::from("videos").join(format!("{}.tfv", v.id));
        save_video(&dir.join(&rel), &v)?;
        entries.push(ManifestEntry {
            id: v.id.clone(),
            path: rel,
            transfer: v.transfer,
            num_frames: v.num_frames(),
            split: None,
        });
    }
    let manifest = split_dataset(&DatasetManifest::new(entries)?, cfg.data.ratios, cfg.seed)?;
    save_manifest(&dir.join("manifest.jsonl"), &manifest)?;
    let sizes = Split::ALL.map(|s| manifest.split(s).count());
    println!(
        "generated {} videos (train {}, val {}, test {}) in {}",
        cfg.data.count,
        sizes[0],
        sizes[1],
        sizes[2],
        dir.display()
    );
    Ok(())
}

fn manifest_base(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn compute_mhi(a: ComputeMhiArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let manifest = load_manifest(&a.data)?;
    let base = manifest_base(&a.data);
    let dir = claim_output(&a.out, &cfg, "-mhi")?;
    for e in &manifest.entries {
        let v = load_video(&base.join(&e.path))?;
        let maps = compute_mhi_sequence(&v.frames, cfg.features.tau, cfg.features.theta)?;
        let (w, h) = (maps[0].width(), maps[0].height());
        let values: Vec<f32> = maps.iter().flat_map(|m| m.values().iter().map(|&x| f32::from(x))).collect();
        let seq = FeatureSequence::new(Modality::Mhi, maps.len(), w * h, values)?;
        save_features(&dir.join(format!("{}.mhi-raw.tff", e.id)), &seq)?;
        if a.pgm {
            maps[maps.len() - 1].write_pgm(&dir.join(format!("{}.pgm", e.id)))?;
        }
    }
    println!("computed MHIs for {} videos in {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn feature_file(dir: &Path, id: &str, m: Modality) -> PathBuf {
    dir.join(format!("{id}.{}.tff", m.as_str()))
}

fn stats_file(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("stats-{}.json", m.as_str()))
}

fn modalities(m: InputModality) -> Vec<Modality> {
    let mut out = Vec::new();
    if m.needs_frames() {
        out.push(Modality::Frame);
    }
    if m.needs_mhi() {
        out.push(Modality::Mhi);
    }
    out
}

fn extract_features(a: ExtractArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let (Some(seed), None) = (a.cfg.seed, a.cfg.encoder_seed) {
        cfg.features.encoder_seed = seed;
    }
    let manifest = load_manifest(&a.data)?;
    let base = manifest_base(&a.data);
    let tag = format!("-{}", cfg.modality.as_str().replace('+', "-"));
    let dir = claim_output(&a.out, &cfg, &tag)?;
    let kinds = modalities(cfg.modality);
    let mut train_feats: Vec<Vec<FeatureSequence>> = vec![Vec::new(); kinds.len()];
    for e in &manifest.entries {
        let v = load_video(&base.join(&e.path))?;
        for (k, &m) in kinds.iter().enumerate() {
            let seq = match m {
                Modality::Frame => encode_frames(&v, cfg.features.encoder_seed, cfg.features.dim)?,
                Modality::Mhi => {
                    let maps = compute_mhi_sequence(&v.frames, cfg.features.tau, cfg.features.theta)?;
                    encode_mhi(&maps, cfg.features.encoder_seed, cfg.features.dim)?
                }
            };
            save_features(&feature_file(&dir, &e.id, m), &seq)?;
            if e.split == Some(Split::Train) {
                train_feats[k].push(seq);
            }
        }
    }
    for (k, &m) in kinds.iter().enumerate() {
        let stats = FeatureStats::fit(&train_feats[k])?;
        let json = serde_json::to_string_pretty(&stats).map_err(|e| Error::Config(e.to_string()))?;
        write(&stats_file(&dir, m), json)?;
    }
    println!(
        "extracted {} features for {} videos in {}",
        cfg.modality,
        manifest.entries.len(),
        dir.display()
    );
    Ok(())
}

fn load_stats(dir: &Path, m: Modality) -> Result<FeatureStats> {
    let p = stats_file(dir, m);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(e.column() as u64, format!("{}: {e}", p.display())))
}

/// Standardized examples of one split, read from disk.
pub fn load_samples<S: Scalar>(
    manifest_path: &Path,
    features: &Path,
    cfg: &RunConfig,
    split: Split,
) -> Result<Vec<Sample<S>>> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_base(manifest_path);
    let standardizer = Standardizer {
        frames: if cfg.modality.needs_frames() { Some(load_stats(features, Modality::Frame)?) } else { None },
        mhi: if cfg.modality.needs_mhi() { Some(load_stats(features, Modality::Mhi)?) } else { None },
    };
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let v = load_video(&base.join(&e.path))?;
        let load = |m: Modality| -> Result<Option<FeatureSequence>> {
            let p = feature_file(features, &e.id, m);
            let seq = load_features_checked(&p, m, cfg.features.dim)?;
            if seq.len() != v.num_frames() {
                return Err(Error::Input(format!(
                    "{}: {} feature rows for {} frames",
                    p.display(),
                    seq.len(),
                    v.num_frames()
                )));
            }
            Ok(Some(seq))
        };
        let enc = crate::dataset::EncodedVideo {
            id: e.id.clone(),
            frames: if cfg.modality.needs_frames() { load(Modality::Frame)? } else { None },
            mhi: if cfg.modality.needs_mhi() { load(Modality::Mhi)? } else { None },
            labels: v.stage_labels.clone(),
            transfer: v.transfer,
        };
        out.push(standardizer.sample(&enc, cfg.modality)?);
    }
    if out.is_empty() {
        return Err(Error::InsufficientInput(format!("no {split:?} videos in manifest")));
    }
    Ok(out)
}

fn features_dir(flag: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    flag.clone().unwrap_or_else(|| manifest_base(manifest).join("features"))
}

fn history_csv(outcome: &TrainOutcome<Real>) -> String {
    let mut s = String::from(
        "epoch,train_total,val_trans,val_frame,val_stage,val_cross,val_smooth,val_total,val_accuracy,val_frame_accuracy\n",
    );
    for h in &outcome.history {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6}\n",
            h.epoch,
            h.train.total,
            h.val.trans,
            h.val.frame,
            h.val.stage,
            h.val.cross_att,
            h.val.smooth,
            h.val.total,
            h.val_accuracy,
            h.val_frame_accuracy
        ));
    }
    s
}

fn steps_csv(outcome: &TrainOutcome<Real>) -> String {
    let mut s = String::from("step,trans,frame,stage,cross,smooth,total\n");
    for r in &outcome.steps {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
            r.step, l.trans, l.frame, l.stage, l.cross_att, l.smooth, l.total
        ));
    }
    s
}

fn train_one(cfg: &RunConfig, data: &Path, features: &Path, dir: &Path) -> Result<()> {
    let tr = load_samples::<Real>(data, features, cfg, Split::Train)?;
    let va = load_samples::<Real>(data, features, cfg, Split::Val)?;
    let outcome = train(&cfg.model, &cfg.train, &tr, &va)?;
    save_checkpoint(&dir.join("best.ckpt"), &outcome.best)?;
    save_checkpoint(&dir.join("last.ckpt"), &outcome.last)?;
    write(&dir.join("history.csv"), history_csv(&outcome))?;
    write(&dir.join("losses.csv"), steps_csv(&outcome))?;
    println!(
        "trained {} epochs; best epoch {} with validation loss {:.4} -> {}",
        outcome.history.len(),
        outcome.best.epoch,
        outcome.best.val_loss,
        dir.display()
    );
    Ok(())
}

/// Runs the given argument lists as child processes of this executable,
/// at most `jobs` at a time.
fn run_workers(jobs: usize, tasks: Vec<Vec<String>>) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let mut running: Vec<(std::process::Child, String)> = Vec::new();
    let mut queue = tasks.into_iter();
    let mut failed = None;
    loop {
        while running.len() < jobs {
            let Some(args) = queue.next() else { break };
            let desc = args.join(" ");
            let child = Command::new(&exe)
                .args(&args)
                .spawn()
                .map_err(|e| Error::io(&exe, e))?;
            running.push((child, desc));
        }
        if running.is_empty() {
            break;
        }
        let (mut child, desc) = running.remove(0);
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        if !status.success() && failed.is_none() {
            failed = Some(format!("worker failed ({status}): {desc}"));
        }
    }
    match failed {
        Some(m) => Err(Error::Numeric(m)),
        None => Ok(()),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let features = features_dir(&a.features, &a.data);
    let dir = claim_output(&a.out, &cfg, "")?;
    let Some(seeds) = a.seeds.clone() else {
        return train_one(&cfg, &a.data, &features, &dir);
    };
    let n_jobs = jobs(a.jobs);
    let mut tasks = Vec::new();
    for &seed in &seeds {
        let sub = dir.join(format!("seed-{seed}"));
        let seeded = RunConfig { seed, ..cfg.clone() }.resolve()?;
        if n_jobs == 1 {
            let sub = claim_output(&OutArgs { out: sub, force: a.out.force }, &seeded, "")?;
            train_one(&seeded, &a.data, &features, &sub)?;
        } else {
            mkdir(&sub)?;
            let cfg_path = sub.join("requested.toml");
            write(&cfg_path, seeded.to_toml()?)?;
            let mut args = vec![
                "train".to_string(),
                "--config".into(),
                cfg_path.display().to_string(),
                "--data".into(),
                a.data.display().to_string(),
                "--features".into(),
                features.display().to_string(),
                "--out".into(),
                sub.display().to_string(),
            ];
            if a.out.force {
                args.push("--force".into());
            }
            tasks.push(args);
        }
    }
    run_workers(n_jobs, tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalSummary {
    split: String,
    runs: Vec<MetricsReport>,
    accuracy: RunAggregate,
    f1_transferable: RunAggregate,
    f1_not_transferable: RunAggregate,
    frame_accuracy: RunAggregate,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}"))),
    }
}

fn run_config_of(ck: &Checkpoint<Real>, modality: InputModality, features: crate::dataset::FeatureConfig) -> RunConfig {
    RunConfig {
        seed: ck.train.seed,
        modality,
        features,
        model: ck.model.clone(),
        train: ck.train.clone(),
        ..RunConfig::default()
    }
}

/// Modality and feature settings are not stored in checkpoints; they are
/// read from the run configuration saved beside it when present.
fn sidecar_config(ckpt: &Path) -> Result<Option<RunConfig>> {
    let p = ckpt.parent().map(|d| d.join("config.toml"));
    match p {
        Some(p) if p.exists() => RunConfig::load(&p).map(Some),
        _ => Ok(None),
    }
}

fn infer_modality(model: &ModelConfig, sidecar: &Option<RunConfig>) -> InputModality {
    match sidecar {
        Some(c) => c.modality,
        None if model.use_mhi => InputModality::FramesMhi,
        None => InputModality::Frames,
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let features = features_dir(&a.features, &a.data);
    let mut runs = Vec::new();
    let mut claimed: Option<PathBuf> = None;
    let mut preds_out = String::new();
    let mut assignments = String::new();
    for (i, path) in a.checkpoint.iter().enumerate() {
        let ck: Checkpoint<Real> = load_checkpoint(path)?;
        let side = sidecar_config(path)?;
        let features_cfg = side.as_ref().map(|c| c.features).unwrap_or_default();
        let cfg = run_config_of(&ck, infer_modality(&ck.model, &side), features_cfg);
        if claimed.is_none() {
            claimed = Some(claim_output(&a.out, &cfg, "-eval")?);
        }
        let samples = load_samples::<Real>(&a.data, &features, &cfg, split)?;
        let preds = predict(&ck.params, &ck.model, &samples)?;
        if a.dump_assignments {
            for s in &samples {
                let g = forward(&ck.params, &ck.model, &s.frames, s.mhi.as_ref())?;
                let line = serde_json::json!({
                    "run": i,
                    "id": s.id,
                    "assignment": assign(&g, &s.targets)?,
                });
                assignments.push_str(&line.to_string());
                assignments.push('\n');
            }
        }
        for p in &preds {
            let line = serde_json::json!({
                "run": i,
                "id": p.id,
                "transfer": p.transfer.as_str(),
                "p_transferable": p.p_transferable,
            });
            preds_out.push_str(&line.to_string());
            preds_out.push('\n');
        }
        runs.push(metrics_report(&preds, &samples)?);
    }
    let dir = claimed.expect("at least one checkpoint");
    let pick = |f: fn(&MetricsReport) -> f64, name: &str| {
        aggregate_runs(name, &runs.iter().map(f).collect::<Vec<_>>())
    };
    let summary = EvalSummary {
        split: a.split.clone(),
        accuracy: pick(|r| r.accuracy, "accuracy")?,
        f1_transferable: pick(|r| r.transferable.f1, "f1_transferable")?,
        f1_not_transferable: pick(|r| r.not_transferable.f1, "f1_not_transferable")?,
        frame_accuracy: pick(|r| r.frame_accuracy, "frame_accuracy")?,
        runs,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("metrics.json"), json + "\n")?;
    write(&dir.join("predictions.jsonl"), preds_out)?;
    if a.dump_assignments {
        write(&dir.join("assignments.jsonl"), assignments)?;
    }
    let mut csv = String::from("run,accuracy,precision_t,recall_t,f1_t,precision_nt,recall_nt,f1_nt,frame_accuracy\n");
    for (i, r) in summary.runs.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.accuracy,
            r.transferable.precision,
            r.transferable.recall,
            r.transferable.f1,
            r.not_transferable.precision,
            r.not_transferable.recall,
            r.not_transferable.f1,
            r.frame_accuracy
        ));
    }
    write(&dir.join("runs.csv"), csv)?;
    println!(
        "accuracy {:.4} ± {:.4} over {} run(s)",
        summary.accuracy.mean,
        summary.accuracy.std,
        summary.runs.len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkerResult {
    length: usize,
    seed: u64,
    accuracy: f64,
}

fn truncate_all(samples: &[Sample<Real>], len: usize) -> Result<Vec<Sample<Real>>> {
    samples.iter().map(|s| s.truncated(len)).collect()
}

/// Train on clips cut to `length` and return test accuracy.
fn sweep_run(cfg: &RunConfig, data: &Path, features: &Path, length: usize, seed: u64) -> Result<f64> {
    let cfg = RunConfig { seed, ..cfg.clone() }.resolve()?;
    let tr = truncate_all(&load_samples::<Real>(data, features, &cfg, Split::Train)?, length)?;
    let va = truncate_all(&load_samples::<Real>(data, features, &cfg, Split::Val)?, length)?;
    let te = truncate_all(&load_samples::<Real>(data, features, &cfg, Split::Test)?, length)?;
    let out = train(&cfg.model, &cfg.train, &tr, &va)?;
    Ok(metrics_report(&predict(&out.best.params, &cfg.model, &te)?, &te)?.accuracy)
}

fn sweep_worker(a: SweepWorkerArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let accuracy = sweep_run(&cfg, &a.data, &a.features, a.length, a.seed)?;
    let r = WorkerResult {
        length: a.length,
        seed: a.seed,
        accuracy,
    };
    write(&a.result, serde_json::to_string(&r).map_err(|e| Error::Config(e.to_string()))?)
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(l) = &a.lengths {
        cfg.eval.lengths = l.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.eval.seeds = s.clone();
    }
    cfg.eval.reuse_model |= a.reuse_model;
    let cfg = cfg.resolve()?;
    let features = features_dir(&a.features, &a.data);
    let full = load_manifest(&a.data)?
        .entries
        .iter()
        .map(|e| e.num_frames)
        .min()
        .ok_or_else(|| Error::InsufficientInput("empty manifest".into()))?;
    check_sweep_lengths(&cfg.eval.lengths, full)?;
    let dir = claim_output(&a.out, &cfg, "")?;
    let lengths = cfg.eval.lengths.clone();
    let seeds = cfg.eval.seeds.clone();
    let mut results: Vec<WorkerResult> = Vec::new();
    if cfg.eval.reuse_model {
        log::warn!("--reuse-model: one full-length model per seed; lengths are not retrained");
        for &seed in &seeds {
            let c = RunConfig { seed, ..cfg.clone() }.resolve()?;
            let tr = load_samples::<Real>(&a.data, &features, &c, Split::Train)?;
            let va = load_samples::<Real>(&a.data, &features, &c, Split::Val)?;
            let te = load_samples::<Real>(&a.data, &features, &c, Split::Test)?;
            let out = train(&c.model, &c.train, &tr, &va)?;
            for &length in &lengths {
                let cut = truncate_all(&te, length)?;
                let accuracy = metrics_report(&predict(&out.best.params, &c.model, &cut)?, &cut)?.accuracy;
                results.push(WorkerResult { length, seed, accuracy });
            }
        }
    } else if jobs(a.jobs) == 1 {
        for &length in &lengths {
            for &seed in &seeds {
                let accuracy = sweep_run(&cfg, &a.data, &features, length, seed)?;
                results.push(WorkerResult { length, seed, accuracy });
            }
        }
    } else {
        let runs = dir.join("runs");
        mkdir(&runs)?;
        let cfg_path = dir.join("config.toml");
        let mut tasks = Vec::new();
        for &length in &lengths {
            for &seed in &seeds {
                tasks.push(vec![
                    "sweep-worker".to_string(),
                    "--config".into(),
                    cfg_path.display().to_string(),
                    "--data".into(),
                    a.data.display().to_string(),
                    "--features".into(),
                    features.display().to_string(),
                    "--length".into(),
                    length.to_string(),
                    "--seed".into(),
                    seed.to_string(),
                    "--result".into(),
                    runs.join(format!("{length}-{seed}.json")).display().to_string(),
                ]);
            }
        }
        run_workers(jobs(a.jobs), tasks)?;
        for &length in &lengths {
            for &seed in &seeds {
                let p = runs.join(format!("{length}-{seed}.json"));
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                results.push(serde_json::from_str(&text).map_err(|e| Error::parse(0, e.to_string()))?);
            }
        }
    }
    let mut points = Vec::new();
    for &length in &lengths {
        let accs: Vec<f64> = results.iter().filter(|r| r.length == length).map(|r| r.accuracy).collect();
        let agg = aggregate_runs("accuracy", &accs)?;
        points.push(SweepPoint {
            length,
            accuracies: accs,
            mean: agg.mean,
            std: agg.std,
        });
    }
    write(&dir.join("sweep.csv"), sweep_csv(&points))?;
    let mut runs_csv = String::from("length,seed,accuracy\n");
    for r in &results {
        runs_csv.push_str(&format!("{},{},{:.6}\n", r.length, r.seed, r.accuracy));
    }
    write(&dir.join("runs.csv"), runs_csv)?;
    let title = if cfg.eval.reuse_model {
        "Accuracy vs. clip length (reused model)"
    } else {
        "Accuracy vs. clip length"
    };
    write_sweep_svg(&dir.join("sweep.svg"), &points, title)?;
    for p in &points {
        println!("length {:>4}: {:.4} ± {:.4}", p.length, p.mean, p.std);
    }
    Ok(())
}

/// Values of `metric` from a CSV with a header row.
pub fn read_metric_column(path: &Path, metric: &str) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(0, format!("{}: empty CSV", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == metric)
        .ok_or_else(|| Error::Input(format!("{}: no column {metric:?}", path.display())))?;
    let mut offset = header.len() as u64 + 1;
    let mut out = Vec::new();
    for line in lines {
        let cell = line.split(',').nth(col).map(str::trim).unwrap_or("");
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::parse(offset, format!("{}: bad value {cell:?}", path.display())))?;
        out.push(v);
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Comparison {
    metric: String,
    a: RunAggregate,
    b: RunAggregate,
    n: usize,
    w_plus: f64,
    w_minus: f64,
    p_value: f64,
    p_numerator: u64,
    p_denominator: u64,
    cohens_d: f64,
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let xa = read_metric_column(&a.runs_a, &a.metric)?;
    let xb = read_metric_column(&a.runs_b, &a.metric)?;
    if xa.len() != xb.len() {
        return Err(Error::Input(format!(
            "paired comparison needs equal run counts, got {} and {}",
            xa.len(),
            xb.len()
        )));
    }
    let diffs: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x - y).collect();
    let w = wilcoxon_signed_rank_exact(&diffs, true)?;
    let c = Comparison {
        metric: a.metric.clone(),
        a: aggregate_runs(&a.metric, &xa)?,
        b: aggregate_runs(&a.metric, &xb)?,
        n: w.n,
        w_plus: w.w_plus,
        w_minus: w.w_minus,
        p_value: w.p_value,
        p_numerator: w.extreme,
        p_denominator: w.patterns,
        cohens_d: cohens_d(&xa, &xb)?,
    };
    let json = serde_json::to_string_pretty(&c).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(out) = &a.out {
        let dir = out_dir(out);
        mkdir(&dir)?;
        let p = dir.join("stats.json");
        if p.exists() && !a.force {
            return Err(Error::RefuseOverwrite(dir));
        }
        write(&p, format!("{json}\n"))?;
    }
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{json}");
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.sweep).map_err(|e| Error::io(&a.sweep, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::parse(i as u64, format!("{}: bad sweep row {line:?}", a.sweep.display()));
        if f.len() < 3 {
            return Err(bad());
        }
        let mean: f64 = f[1].trim().parse().map_err(|_| bad())?;
        points.push(SweepPoint {
            length: f[0].trim().parse().map_err(|_| bad())?,
            accuracies: Vec::new(),
            mean,
            std: f[2].trim().parse().map_err(|_| bad())?,
        });
    }
    let dir = out_dir(&a.out.out);
    mkdir(&dir)?;
    let p = dir.join("sweep.svg");
    if p.exists() && !a.out.force {
        return Err(Error::RefuseOverwrite(dir));
    }
    write_sweep_svg(&p, &points, &a.title)?;
    println!("wrote {}", p.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlearning_rate = 0.001\nepochs = 3\n").unwrap();
        let args = ConfigArgs {
            config: Some(p.clone()),
            lr: Some(2e-4),
            ..ConfigArgs::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!(c.train.epochs, 3);
        let c = ConfigArgs { config: Some(p), ..ConfigArgs::default() }.resolve().unwrap();
        assert_eq!(c.train.learning_rate, 1e-3);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["transfact", "train", "--out", "x"]), 2);
        assert_eq!(main_with_args(["transfact", "bogus"]), 2);
        assert_eq!(main_with_args(["transfact", "gen-data", "--out", "x", "--nope"]), 2);
    }

    #[test]
    fn metric_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "run,accuracy\n0,0.5\n1,0.75\n").unwrap();
        assert_eq!(read_metric_column(&p, "accuracy").unwrap(), vec![0.5, 0.75]);
        assert!(read_metric_column(&p, "f1").is_err());
        std::fs::write(&p, "run,accuracy\n0,x\n").unwrap();
        assert!(matches!(read_metric_column(&p, "accuracy"), Err(Error::Parse { .. })));
    }
}
