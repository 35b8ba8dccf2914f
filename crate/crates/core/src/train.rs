//! Optimizer, augmentation, the training loop and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::{read_ust1, write_ust1, Ust1};
use crate::loss::{lambda_schedule, total_loss, LossSettings, OneHotLabel, Reduction, DEFAULT_BETA};
use crate::metrics::{max_f_measure, predict};
use crate::model::{usnet_forward, AblationMode, Architecture, ModelParams, SubnetConfig};
use crate::rng::CounterRng;
use crate::synth::SceneSample;
use crate::tensor::Tensor;

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update at 1-based `step`: decoupled decay `θ ← θ(1 − lr·wd)`,
/// then the bias-corrected Adam step. Parameters without a gradient are only
/// decayed. Every gradient is checked before anything is modified.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamW,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Domain("AdamW step index starts at 1".into()));
    }
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient of {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    let decay = 1.0 - hp.lr * hp.weight_decay;
    let c1 = 1.0 - hp.beta1.powf(step as f64);
    let c2 = 1.0 - hp.beta2.powf(step as f64);
    for (name, p) in params.iter_mut() {
        let theta = p.data_mut();
        for t in theta.iter_mut() {
            *t *= decay;
        }
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; theta.len()]);
        for (((t, &gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            *t -= hp.lr * (*mi / c1) / ((*vi / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub reduction: Reduction,
    pub seed: u64,
    pub ablation: AblationMode,
    /// The first this-many dataset scenes, unaugmented, give the per-epoch MaxF.
    pub validation_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta: DEFAULT_BETA,
            reduction: Reduction::Mean,
            seed: 0,
            ablation: AblationMode::Full,
            validation_samples: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Mean loss terms over the batches of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub fused: Option<f64>,
    pub rgb: Option<f64>,
    pub depth: Option<f64>,
    pub paths: Vec<f64>,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub loss: LossSummary,
    pub val_max_f: f64,
}

// Stream ids below the training seed.
const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;

/// Augmentation probabilities and scales.
pub const FLIP_PROBABILITY: f64 = 0.5;
pub const NOISE_SIGMA: f64 = 0.01;
pub const BLUR_PROBABILITY: f64 = 0.2;

fn flip_rows(data: &mut [f64], w: usize) {
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// 3×3 binomial blur of each plane with clamped borders.
fn blur_planes(data: &mut [f64], h: usize, w: usize) {
    let taps = [0.25, 0.5, 0.25];
    for plane in data.chunks_exact_mut(h * w) {
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (0..3).map(|k| taps[k] * plane[y * w + (x + k).saturating_sub(1).min(w - 1)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = (0..3).map(|k| taps[k] * tmp[(y + k).saturating_sub(1).min(h - 1) * w + x]).sum();
            }
        }
    }
}

/// Planar appearance, range and mask of one scene after random augmentation:
/// a horizontal flip of everything (mirroring the normals' x component),
/// appearance noise, and an occasional appearance blur.
pub fn augment(s: &SceneSample, rng: &mut CounterRng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = (s.height, s.width);
    let mut a = s.appearance_tensor().into_data();
    let mut r = s.range_tensor().into_data();
    let mut m = s.mask_tensor().into_data();
    if rng.bernoulli(FLIP_PROBABILITY) {
        flip_rows(&mut a, w);
        flip_rows(&mut r, w);
        flip_rows(&mut m, w);
        for v in &mut r[..h * w] {
            *v = -*v;
        }
    }
    for v in &mut a {
        *v = (*v + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
    }
    if rng.bernoulli(BLUR_PROBABILITY) {
        blur_planes(&mut a, h, w);
    }
    (a, r, m)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub arch: Architecture,
    pub params: ModelParams,
    pub history: Vec<HistoryRecord>,
}

/// Trains a fresh model on `data`, calling `on_epoch` after every epoch.
pub fn train(
    cfg: &TrainConfig,
    model: &SubnetConfig,
    data: &[SceneSample],
    mut on_epoch: impl FnMut(&HistoryRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = Architecture::new(model.clone(), cfg.ablation)?;
    let first = data.first().ok_or_else(|| Error::Config("training needs at least one scene".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = data.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Config(format!("dataset mixes {h}x{w} and {}x{} scenes", bad.height, bad.width)));
    }
    let mut params = ModelParams::init(&arch, cfg.seed);
    let mut state = AdamState::default();
    let hp = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let settings = LossSettings { beta: cfg.beta, reduction: cfg.reduction };
    let root = CounterRng::new(cfg.seed);
    let validation = &data[..cfg.validation_samples.min(data.len())];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.derive(SHUFFLE).derive(epoch as u64).shuffle(&mut order);
        let augment_stream = root.derive(AUGMENT).derive(epoch as u64);
        let mut sums: Option<LossSummary> = None;
        let batches = order.chunks(cfg.batch_size).count();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let n = batch.len();
            let (mut a, mut r, mut m) = (Vec::new(), Vec::new(), Vec::new());
            for &i in batch {
                let (ai, ri, mi) = augment(&data[i], &mut augment_stream.derive(i as u64));
                a.extend(ai);
                r.extend(ri);
                m.extend(mi);
            }
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let appearance = g.constant(Tensor::new(vec![n, 3, h, w], a)?);
            let range = g.constant(Tensor::new(vec![n, 3, h, w], r)?);
            let labels = OneHotLabel::new(Tensor::new(vec![n, 1, h, w], m)?)?;
            let context = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            };
            let out = usnet_forward(&mut g, &bound, &arch, appearance, range).map_err(context)?;
            let inputs = out.loss_inputs(&mut g);
            let (loss, parts) = total_loss(&mut g, &inputs, &labels, epoch as i64, settings).map_err(context)?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {b}: loss is {}", parts.total)));
            }
            let mut grads = g.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = bound
                .iter()
                .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
                .collect();
            step += 1;
            adamw_step(&mut params, &grads, &mut state, &hp, step).map_err(context)?;
            let acc = sums.get_or_insert_with(|| LossSummary {
                total: 0.0,
                fused: parts.fused.map(|_| 0.0),
                rgb: parts.rgb.map(|_| 0.0),
                depth: parts.depth.map(|_| 0.0),
                paths: vec![0.0; parts.paths.len()],
            });
            acc.total += parts.total;
            for (slot, v) in [(&mut acc.fused, parts.fused), (&mut acc.rgb, parts.rgb), (&mut acc.depth, parts.depth)] {
                if let (Some(s), Some(v)) = (slot.as_mut(), v) {
                    *s += v;
                }
            }
            for (s, v) in acc.paths.iter_mut().zip(&parts.paths) {
                *s += v;
            }
        }
        let mut loss = sums.expect("at least one batch");
        let k = batches as f64;
        loss.total /= k;
        for v in [&mut loss.fused, &mut loss.rgb, &mut loss.depth].into_iter().flatten() {
            *v /= k;
        }
        for v in &mut loss.paths {
            *v /= k;
        }
        let val_max_f = if validation.is_empty() {
            0.0
        } else {
            let preds = predict(&arch, &params, validation, cfg.batch_size)?;
            let probs: Vec<&[f64]> = preds.iter().map(|p| p.probability.as_slice()).collect();
            let masks: Vec<&[u8]> = validation.iter().map(|s| s.mask.as_slice()).collect();
            max_f_measure(&probs, &masks, None)?.max_f
        };
        let record = HistoryRecord { epoch, lambda: lambda_schedule(epoch as i64)?, loss, val_max_f };
        on_epoch(&record)?;
        history.push(record);
    }
    Ok(TrainOutcome { arch, params, history })
}

/// Serializes one history record as a JSON line.
pub fn history_line(record: &HistoryRecord) -> String {
    serde_json::to_string(record).expect("history records serialize")
}

/// [`train`] with the history streamed to `history_path` as JSON lines.
pub fn train_to_files(
    cfg: &TrainConfig,
    model: &SubnetConfig,
    data: &[SceneSample],
    checkpoint_path: &Path,
    history_path: &Path,
) -> Result<TrainOutcome> {
    let mut file = std::fs::File::create(history_path).map_err(|e| Error::io(history_path, e))?;
    let outcome = train(cfg, model, data, |r| {
        writeln!(file, "{}", history_line(r)).map_err(|e| Error::io(history_path, e))
    })?;
    file.flush().map_err(|e| Error::io(history_path, e))?;
    Checkpoint { arch: outcome.arch.clone(), params: outcome.params.clone(), train: Some(cfg.clone()) }
        .save(checkpoint_path)?;
    Ok(outcome)
}

pub const CHECKPOINT_FORMAT: &str = "usnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: String,
    format_version: u32,
    architecture: Architecture,
    train: Option<TrainConfig>,
}

/// Trained weights with the architecture needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: ModelParams,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_ust1(&self) -> Ust1 {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            train: self.train.clone(),
        };
        Ust1 {
            tensors: self.params.iter().map(|(k, t)| (k.clone(), t.clone())).collect(),
            metadata: Some(serde_json::to_value(meta).expect("metadata serializes")),
        }
    }

    pub fn from_ust1(file: Ust1) -> Result<Self> {
        let meta = file.metadata.ok_or_else(|| Error::Config("checkpoint has no metadata block".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT || meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} version {}",
                meta.format, meta.format_version
            )));
        }
        let arch = Architecture::new(meta.architecture.subnet, meta.architecture.mode)?;
        let params = ModelParams::from_tensors(&arch, file.tensors.into_iter().collect())?;
        Ok(Checkpoint { arch, params, train: meta.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_ust1(path, &self.to_ust1())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ust1(read_ust1(path)?)
    }
}
