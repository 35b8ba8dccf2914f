//! Threshold-swept F-measure, inference and the evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{usnet_forward, AblationMode, Architecture, Fusion, Modality, ModelParams};
use crate::sl::{belief_from_evidence, expected_probability, DirichletParams, EvidenceMap};
use crate::synth::{batch_tensors, SceneSample};

/// Number of decision thresholds `k / 255`, `k = 0..=255`.
pub const THRESHOLDS: usize = 256;

/// Scores at the F-maximizing threshold; rates are percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub max_f: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub threshold: f64,
    pub pixels: u64,
}

/// Pooled confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// Largest `k` with `k/255 ≤ p`: the pixel is predicted road at thresholds `0..=k`.
fn last_passed(p: f64) -> usize {
    let mut k = ((p * 255.0).floor() as usize).min(THRESHOLDS - 1);
    while k + 1 < THRESHOLDS && threshold(k + 1) <= p {
        k += 1;
    }
    while k > 0 && threshold(k) > p {
        k -= 1;
    }
    k
}

/// Confusion counts at every threshold, pooled over all selected pixels.
pub fn sweep(probabilities: &[&[f64]], masks: &[&[u8]], region: Option<&[&[u8]]>) -> Result<Vec<Confusion>> {
    if probabilities.len() != masks.len() || region.is_some_and(|r| r.len() != masks.len()) {
        return Err(Error::Shape("probability, mask and region lists differ in length".into()));
    }
    let (mut pos, mut neg) = ([0u64; THRESHOLDS], [0u64; THRESHOLDS]);
    for (i, (p, m)) in probabilities.iter().zip(masks).enumerate() {
        if p.len() != m.len() || region.is_some_and(|r| r[i].len() != m.len()) {
            return Err(Error::Shape(format!("image {i}: probability, mask and region extents differ")));
        }
        for (j, (&pj, &mj)) in p.iter().zip(m.iter()).enumerate() {
            if region.is_some_and(|r| r[i][j] == 0) {
                continue;
            }
            if !(0.0..=1.0).contains(&pj) {
                return Err(Error::Domain(format!("probability {pj} outside [0, 1]")));
            }
            let k = last_passed(pj);
            if mj == 1 {
                pos[k] += 1;
            } else {
                neg[k] += 1;
            }
        }
    }
    let (total_pos, total_neg) = (pos.iter().sum::<u64>(), neg.iter().sum::<u64>());
    if total_pos + total_neg == 0 {
        return Err(Error::Domain("no pixels to evaluate".into()));
    }
    let mut out = vec![Confusion::default(); THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..THRESHOLDS).rev() {
        tp += pos[k];
        fp += neg[k];
        out[k] = Confusion { tp, fp, fn_: total_pos - tp, tn: total_neg - fp };
    }
    Ok(out)
}

/// Maximum F1 over the 256 thresholds, ties going to the lower threshold.
pub fn max_f_measure(probabilities: &[&[f64]], masks: &[&[u8]], region: Option<&[&[u8]]>) -> Result<ThresholdMetrics> {
    let counts = sweep(probabilities, masks, region)?;
    let mut best = 0;
    for k in 1..THRESHOLDS {
        if counts[k].f1() > counts[best].f1() {
            best = k;
        }
    }
    let c = counts[best];
    Ok(ThresholdMetrics {
        max_f: 100.0 * c.f1(),
        precision: 100.0 * c.precision(),
        recall: 100.0 * c.recall(),
        fpr: 100.0 * Confusion::ratio(c.fp, c.fp + c.tn),
        fnr: 100.0 * Confusion::ratio(c.fn_, c.fn_ + c.tp),
        threshold: threshold(best),
        pixels: c.tp + c.fp + c.fn_ + c.tn,
    })
}

/// Network outputs for one scene, each `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probability: Vec<f64>,
    /// Per-modality uncertainty `2 / S` of the head evidence.
    pub uncertainty: BTreeMap<Modality, Vec<f64>>,
    /// Per-modality expected road probability `α_road / S`.
    pub modality_probability: BTreeMap<Modality, Vec<f64>>,
    /// Uncertainty of the combined opinion: the fused `u` under Dempster
    /// fusion, the mean of the modality uncertainties under averaging, and
    /// the single modality's `u` otherwise.
    pub combined_uncertainty: Vec<f64>,
}

/// Runs the network on `samples` in batches; no augmentation.
pub fn predict(arch: &Architecture, params: &ModelParams, samples: &[SceneSample], batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    let refs: Vec<&SceneSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (a, r, _) = batch_tensors(chunk)?;
        out.extend(predict_tensors(arch, params, a, r)?);
    }
    Ok(out)
}

/// Runs the network on `N×3×H×W` appearance and range tensors.
pub fn predict_tensors(
    arch: &Architecture,
    params: &ModelParams,
    appearance: crate::Tensor,
    range: crate::Tensor,
) -> Result<Vec<Prediction>> {
    let [n, _, h, w] = appearance.dims4()?;
    let plane = h * w;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let a = g.constant(appearance);
    let r = g.constant(range);
    let outputs = usnet_forward(&mut g, &bound, arch, a, r)?;
    let prob = g.value(outputs.probability).data();
    let fused_u = outputs.fused.map(|f| g.value(f.uncertainty).data().to_vec());
    let mut preds = Vec::with_capacity(n);
    for b in 0..n {
        let mut uncertainty = BTreeMap::new();
        let mut modality_probability = BTreeMap::new();
        for m in arch.mode.modalities() {
            let head = outputs.modality(*m).expect("modality present");
            let e = g.value(head.evidence.mean).data();
            let slice = crate::Tensor::new(vec![2, h, w], e[b * 2 * plane..(b + 1) * 2 * plane].to_vec())?;
            let ev = EvidenceMap::from_channel_major(&slice)?;
            uncertainty.insert(*m, belief_from_evidence(&ev).uncertainty);
            let dir = DirichletParams::from_evidence(&ev);
            modality_probability.insert(*m, expected_probability(&dir).into_iter().skip(1).step_by(2).collect());
        }
        let combined_uncertainty = match (&fused_u, arch.mode.fusion()) {
            (Some(u), Some(Fusion::Dempster)) => u[b * plane..(b + 1) * plane].to_vec(),
            _ => {
                let k = uncertainty.len() as f64;
                (0..plane).map(|i| uncertainty.values().map(|u| u[i]).sum::<f64>() / k).collect()
            }
        };
        preds.push(Prediction { probability: prob[b * plane..(b + 1) * plane].to_vec(),
            uncertainty,
            modality_probability,
            combined_uncertainty,
        });
    }
    Ok(preds)
}

/// Mean of a per-pixel map inside and outside a binary region; `None` where
/// the selection is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMeans {
    pub inside: Option<f64>,
    pub outside: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    pub overall: f64,
    pub corrupt_a: RegionMeans,
    pub corrupt_b: RegionMeans,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub mode: AblationMode,
    pub samples: usize,
    pub overall: ThresholdMetrics,
    /// Pixels outside both corruption masks.
    pub clean: Option<ThresholdMetrics>,
    /// Pixels inside either corruption mask.
    pub corrupted: Option<ThresholdMetrics>,
    pub corrupt_a: Option<ThresholdMetrics>,
    pub corrupt_b: Option<ThresholdMetrics>,
    /// Keyed by modality name; only the modalities the model uses.
    pub uncertainty: BTreeMap<Modality, UncertaintyStats>,
}

fn region_means(maps: &[&[f64]], regions: &[&[u8]]) -> RegionMeans {
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0u64, 0.0, 0u64);
    for (m, r) in maps.iter().zip(regions) {
        for (&v, &inside) in m.iter().zip(r.iter()) {
            if inside == 1 {
                s_in += v;
                n_in += 1;
            } else {
                s_out += v;
                n_out += 1;
            }
        }
    }
    let mean = |s: f64, n: u64| (n > 0).then(|| s / n as f64);
    RegionMeans { inside: mean(s_in, n_in), outside: mean(s_out, n_out) }
}

/// Scores precomputed predictions against their scenes.
pub fn report(mode: AblationMode, samples: &[SceneSample], preds: &[Prediction]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty dataset".into()));
    }
    if samples.len() != preds.len() {
        return Err(Error::Shape("prediction count differs from sample count".into()));
    }
    let probs: Vec<&[f64]> = preds.iter().map(|p| p.probability.as_slice()).collect();
    let masks: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
    let a: Vec<&[u8]> = samples.iter().map(|s| s.corrupt_a.as_slice()).collect();
    let b: Vec<&[u8]> = samples.iter().map(|s| s.corrupt_b.as_slice()).collect();
    let union: Vec<Vec<u8>> = samples.iter().map(|s| s.corrupt_a.iter().zip(&s.corrupt_b).map(|(x, y)| x | y).collect()).collect();
    let clean: Vec<Vec<u8>> = union.iter().map(|u| u.iter().map(|v| 1 - v).collect()).collect();
    fn as_refs(v: &[Vec<u8>]) -> Vec<&[u8]> {
        v.iter().map(Vec::as_slice).collect()
    }
    let subset = |region: &[&[u8]]| -> Result<Option<ThresholdMetrics>> {
        if region.iter().all(|r| !r.contains(&1)) {
            return Ok(None);
        }
        max_f_measure(&probs, &masks, Some(region)).map(Some)
    };
    let mut uncertainty = BTreeMap::new();
    for &m in preds[0].uncertainty.keys() {
        let maps: Vec<&[f64]> = preds.iter().map(|p| p.uncertainty[&m].as_slice()).collect();
        let total: f64 = maps.iter().map(|u| u.iter().sum::<f64>()).sum();
        let count: usize = maps.iter().map(|u| u.len()).sum();
        let stats = UncertaintyStats {
            overall: total / count as f64,
            corrupt_a: region_means(&maps, &a),
            corrupt_b: region_means(&maps, &b),
        };
        uncertainty.insert(m, stats);
    }
    Ok(MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        mode,
        samples: samples.len(),
        overall: max_f_measure(&probs, &masks, None)?,
        clean: subset(&as_refs(&clean))?,
        corrupted: subset(&as_refs(&union))?,
        corrupt_a: subset(&a)?,
        corrupt_b: subset(&b)?,
        uncertainty,
    })
}

/// Runs a model over `samples` and scores it.
pub fn evaluate(arch: &Architecture, params: &ModelParams, samples: &[SceneSample]) -> Result<MetricsReport> {
    if let Some(s) = samples.first() {
        if s.height % crate::model::INPUT_MULTIPLE != 0 || s.width % crate::model::INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!("scene extents {}x{} are not model-compatible", s.height, s.width)));
        }
    }
    let preds = predict(arch, params, samples, 4)?;
    report(arch.mode, samples, &preds)
}
