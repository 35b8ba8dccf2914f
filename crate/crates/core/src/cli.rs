//! The `usnet` command-line tool.
//!
//! Exit codes: 0 success, 1 failed self-test, 2 usage error, 3 I/O or file
//! format error, 4 validation or configuration error, 5 numeric abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{GenConfigFile, TrainConfigFile};
use crate::error::{Error, Result};
use crate::io::{read_dataset, read_pnm, read_ust1, unit_map_pgm, write_bytes, write_dataset, write_pnm, PnmImage, Ust1};
use crate::metrics::{evaluate, predict_tensors};
use crate::model::{AblationMode, INPUT_MULTIPLE};
use crate::sl::{fuse_evidence, EvidenceMap, FusedResult};
use crate::synth::generate_dataset;
use crate::tensor::Tensor;
use crate::train::{train_to_files, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "usnet", version, about = "Evidential RGB + range road segmentation with uncertainty-aware fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset and write a checkpoint and history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write the metrics report.
    Eval(EvalArgs),
    /// Run one forward pass and write probability and uncertainty maps.
    Infer(InferArgs),
    /// Fuse two stored evidence maps with Dempster's rule.
    Fuse(FuseArgs),
    /// Run the built-in worked examples and invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub ablation: Option<AblationMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// History path; defaults to the checkpoint path with `.history.jsonl` appended.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub appearance: PathBuf,
    #[arg(long)]
    pub range: PathBuf,
    #[arg(long)]
    pub out_prob: PathBuf,
    #[arg(long)]
    pub out_unc: PathBuf,
    #[arg(long)]
    pub out_mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub evid_a: PathBuf,
    #[arg(long)]
    pub evid_b: PathBuf,
    #[arg(long)]
    pub out_prob: PathBuf,
    #[arg(long)]
    pub out_unc: PathBuf,
    #[arg(long)]
    pub out_json: PathBuf,
}

fn parse_mode(text: &str) -> std::result::Result<AblationMode, String> {
    AblationMode::parse(text).map_err(|e| e.to_string())
}

/// Parses `argv` and runs the command, printing diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("usnet: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Gen(a) => gen(&a).map(|_| 0),
        Command::Train(a) => train(&a).map(|_| 0),
        Command::Eval(a) => eval(&a).map(|_| 0),
        Command::Infer(a) => infer(&a).map(|_| 0),
        Command::Fuse(a) => fuse(&a).map(|_| 0),
        Command::Selftest => selftest(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => GenConfigFile::load(p)?.scene,
        None => GenConfigFile::default().scene,
    };
    cfg.validate()?;
    let samples = generate_dataset(&cfg, a.n, a.seed)?;
    write_dataset(&a.out, &cfg, a.seed, &samples)
}

pub fn default_history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".history.jsonl");
    PathBuf::from(name)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => TrainConfigFile::load(p)?,
        None => TrainConfigFile::default(),
    };
    if let Some(mode) = a.ablation {
        file.train.ablation = mode;
    }
    if let Some(seed) = a.seed {
        file.train.seed = seed;
    }
    let (_, data) = read_dataset(&a.data)?;
    let history = a.history.clone().unwrap_or_else(|| default_history_path(&a.out));
    train_to_files(&file.train, &file.model, &data, &a.out, &history)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let (_, data) = read_dataset(&a.data)?;
    let report = evaluate(&ckpt.arch, &ckpt.params, &data)?;
    write_json(&a.report, &report)
}

fn single_tensor(file: &Ust1, preferred: &str, origin: &Path) -> Result<Tensor> {
    if let Some(t) = file.get(preferred) {
        return Ok(t.clone());
    }
    match file.tensors.as_slice() {
        [(_, t)] => Ok(t.clone()),
        _ => Err(Error::Config(format!(
            "{}: expected a tensor named \"{preferred}\" or exactly one tensor, found {}",
            origin.display(),
            file.tensors.len()
        ))),
    }
}

/// Drops a leading unit batch axis: `[1, C, H, W]` becomes `[C, H, W]`.
fn planar(t: Tensor, channels: usize, what: &str) -> Result<Tensor> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] if c == channels => t.reshape(&[c, h, w]),
        ref s => Err(Error::Shape(format!("{what} must be [{channels},H,W] or [1,{channels},H,W], got {s:?}"))),
    }
}

pub fn infer(a: &InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let ckpt = Checkpoint::load(&a.model)?;
    let img = read_pnm(&a.appearance)?;
    if img.channels != 3 {
        return Err(Error::Shape(format!("{}: appearance needs 3 channels, got {}", a.appearance.display(), img.channels)));
    }
    let range = planar(single_tensor(&read_ust1(&a.range)?, "range", &a.range)?, 3, "range")?;
    let (h, w) = (img.height, img.width);
    if range.shape()[1..] != [h, w] {
        return Err(Error::Shape(format!(
            "appearance is {h}x{w} but range is {}x{}",
            range.shape()[1],
            range.shape()[2]
        )));
    }
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Shape(format!("image extents {h}x{w} must be multiples of {INPUT_MULTIPLE}")));
    }
    let hwc = img.to_unit();
    let appearance = Tensor::from_fn(&[1, 3, h, w], |i| hwc[3 * (i % (h * w)) + i / (h * w)]);
    let range = range.reshape(&[1, 3, h, w])?;
    let pred = predict_tensors(&ckpt.arch, &ckpt.params, appearance, range)?.remove(0);
    write_pnm(&a.out_prob, &unit_map_pgm(h, w, &pred.probability)?)?;
    write_pnm(&a.out_unc, &unit_map_pgm(h, w, &pred.combined_uncertainty)?)?;
    if let Some(path) = &a.out_mask {
        let samples = pred.probability.iter().map(|&p| if p >= a.threshold { 255 } else { 0 }).collect();
        write_pnm(path, &PnmImage::new(w, h, 1, 255, samples)?)?;
    }
    Ok(())
}

pub const FUSION_REPORT_VERSION: u32 = 1;

/// Per-pixel output of the `fuse` command; arrays are row-major, with the
/// class index fastest in `belief` and `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionReport {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub belief: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub conflict: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: Vec<f64>,
    pub probability: Vec<f64>,
}

impl FusionReport {
    pub fn from_result(f: &FusedResult) -> Self {
        FusionReport {
            format_version: FUSION_REPORT_VERSION,
            height: f.assignment.height,
            width: f.assignment.width,
            belief: f.assignment.belief.clone(),
            uncertainty: f.assignment.uncertainty.clone(),
            conflict: f.conflict.clone(),
            alpha: f.alpha.alpha.clone(),
            strength: f.alpha.strength.clone(),
            probability: f.probability.clone(),
        }
    }
}

/// Reads a two-class evidence map stored channel-major as `[2,H,W]` or `[1,2,H,W]`.
pub fn read_evidence(path: &Path) -> Result<EvidenceMap> {
    let t = planar(single_tensor(&read_ust1(path)?, "evidence", path)?, 2, "evidence")?;
    EvidenceMap::from_channel_major(&t)
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let (ea, eb) = (read_evidence(&a.evid_a)?, read_evidence(&a.evid_b)?);
    let fused = fuse_evidence(&ea, &eb)?;
    let (h, w) = (fused.assignment.height, fused.assignment.width);
    write_pnm(&a.out_prob, &unit_map_pgm(h, w, &fused.probability)?)?;
    write_pnm(&a.out_unc, &unit_map_pgm(h, w, &fused.assignment.uncertainty)?)?;
    write_json(&a.out_json, &FusionReport::from_result(&fused))
}

fn selftest() -> Result<i32> {
    let checks = crate::selftest::run()?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
