//! Two independent segmentation subnetworks with evidence heads, joined by
//! uncertainty-aware fusion.
//!
//! Each subnetwork is a small strided encoder (stem plus four two-conv blocks
//! down to 1/16 scale), an atrous pyramid at the deepest scale, compression
//! and channel-attention side branches at 1/2, 1/4 and 1/8, and a decoder that
//! only upsamples and sums. The evidence head turns the 1/2-scale decoder
//! feature into non-negative two-class evidence at full resolution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{LossInputs, ModalityAlphas};
use crate::rng::{fnv1a, CounterRng};
use crate::sl::{fuse_graph, road_probability_graph, FusedVars};
use crate::tensor::{Conv2dSpec, Tensor};

/// Dilations of the two 3×3 evidence paths.
pub const EVIDENCE_PATH_DILATIONS: [usize; 2] = [3, 6];

/// Spatial extents of network inputs must be multiples of this.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubnetConfig {
    pub base_channels: usize,
    pub decoder_channels: usize,
    pub attention_reduction: usize,
    pub aspp_dilations: [usize; 3],
}

impl Default for SubnetConfig {
    fn default() -> Self {
        SubnetConfig { base_channels: 16, decoder_channels: 32, attention_reduction: 4, aspp_dilations: [1, 2, 4] }
    }
}

impl SubnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 || self.decoder_channels < 4 {
            return Err(Error::Config("base and decoder channels must be at least 4".into()));
        }
        if self.attention_reduction == 0 || self.decoder_channels % self.attention_reduction != 0 {
            return Err(Error::Config(format!(
                "decoder channels {} not divisible by attention reduction {}",
                self.decoder_channels, self.attention_reduction
            )));
        }
        if self.aspp_dilations.contains(&0) {
            return Err(Error::Config("ASPP dilations must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of encoder blocks 1..=4.
    pub fn block_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 4 * c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

/// Which wiring a model uses; mirrors the rows of the module ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Multi-scale evidence heads and Dempster fusion.
    #[default]
    Full,
    /// Single-path heads, fused by averaging expected road probabilities.
    AddFusion,
    RgbOnly,
    DepthOnly,
    /// Single-path heads with Dempster fusion.
    NoMec,
    /// Multi-scale heads fused by averaging.
    NoUaf,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::AddFusion,
        AblationMode::RgbOnly,
        AblationMode::DepthOnly,
        AblationMode::NoMec,
        AblationMode::NoUaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::AddFusion => "add-fusion",
            AblationMode::RgbOnly => "rgb-only",
            AblationMode::DepthOnly => "depth-only",
            AblationMode::NoMec => "no-mec",
            AblationMode::NoUaf => "no-uaf",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == text)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {text:?}")))
    }

    pub fn modalities(self) -> &'static [Modality] {
        match self {
            AblationMode::RgbOnly => &[Modality::Rgb],
            AblationMode::DepthOnly => &[Modality::Depth],
            _ => &Modality::BOTH,
        }
    }

    pub fn multi_scale_evidence(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoUaf)
    }

    pub fn fusion(self) -> Option<Fusion> {
        match self {
            AblationMode::Full | AblationMode::NoMec => Some(Fusion::Dempster),
            AblationMode::AddFusion | AblationMode::NoUaf => Some(Fusion::Average),
            AblationMode::RgbOnly | AblationMode::DepthOnly => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Dempster,
    Average,
}

/// Full description of a network: layer sizes plus wiring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub subnet: SubnetConfig,
    pub mode: AblationMode,
}

impl Architecture {
    pub fn new(subnet: SubnetConfig, mode: AblationMode) -> Result<Self> {
        subnet.validate()?;
        Ok(Architecture { subnet, mode })
    }

    pub fn evidence_paths(&self) -> usize {
        if self.mode.multi_scale_evidence() {
            3
        } else {
            1
        }
    }

    /// Every parameter as `(name, shape)`, in name order.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let cfg = &self.subnet;
        let d = cfg.decoder_channels;
        let blocks = cfg.block_channels();
        let mut shapes = BTreeMap::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            shapes.insert(format!("{name}.weight"), vec![cout, cin, k, k]);
            shapes.insert(format!("{name}.bias"), vec![cout]);
        };
        for m in self.mode.modalities() {
            let p = format!("subnet.{}", m.name());
            conv(format!("{p}.stem"), cfg.base_channels, 3, 3);
            let mut cin = cfg.base_channels;
            for (i, &cout) in blocks.iter().enumerate() {
                conv(format!("{p}.block{}.down", i + 1), cout, cin, 3);
                conv(format!("{p}.block{}.conv", i + 1), cout, cout, 3);
                cin = cout;
            }
            conv(format!("{p}.aspp.branch1"), d, blocks[3], 1);
            conv(format!("{p}.aspp.branch2"), d, blocks[3], 3);
            conv(format!("{p}.aspp.branch3"), d, blocks[3], 3);
            for (i, &ch) in blocks[..3].iter().enumerate() {
                conv(format!("{p}.fca{}.compress", i + 1), d, ch, 1);
                conv(format!("{p}.fca{}.squeeze", i + 1), d / cfg.attention_reduction, d, 1);
                conv(format!("{p}.fca{}.excite", i + 1), d, d / cfg.attention_reduction, 1);
            }
            conv(format!("{p}.mec.path1"), 2, d, 1);
            if self.mode.multi_scale_evidence() {
                conv(format!("{p}.mec.path2"), 2, d, 3);
                conv(format!("{p}.mec.path3"), 2, d, 3);
            }
        }
        shapes
    }
}

/// Named parameter tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// He-normal kernels (σ = √(2 / fan-in)) and zero biases; each tensor
    /// draws from a stream derived from the seed and its name.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let root = CounterRng::new(seed);
        let tensors = arch
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let sigma = (2.0 / fan_in as f64).sqrt();
                    let mut rng = root.derive(fnv1a(&name));
                    Tensor::from_fn(&shape, |_| sigma * rng.normal())
                };
                (name, t)
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn from_tensors(arch: &Architecture, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = arch.parameter_shapes();
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::Numeric(format!("parameter {name} holds non-finite values")))
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a gradient-requiring leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect() }
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

/// Parameters registered in a particular graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), spec)
}

const DOWN: Conv2dSpec = Conv2dSpec { stride: 2, dilation: 1, padding: 1 };

/// 1×1 compression of an encoder side output to the decoder width.
pub fn fca_compress(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    conv(g, p, &format!("{name}.compress"), x, Conv2dSpec::UNIT)
}

/// Squeeze-and-excitation gate `N×D×1×1` for a compressed feature.
pub fn fca_gate(g: &mut Graph, p: &BoundParams, name: &str, compressed: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(compressed)?;
    let squeezed = conv(g, p, &format!("{name}.squeeze"), pooled, Conv2dSpec::UNIT)?;
    let squeezed = g.relu(squeezed);
    let excited = conv(g, p, &format!("{name}.excite"), squeezed, Conv2dSpec::UNIT)?;
    Ok(g.sigmoid(excited))
}

pub fn fca_forward(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let compressed = fca_compress(g, p, name, x)?;
    let gate = fca_gate(g, p, name, compressed)?;
    g.scale_channels(compressed, gate)
}

/// Parameter-free decoder: three ×2 upsample-and-add stages, deepest side output first.
pub fn decode(g: &mut Graph, deepest: Var, side: [Var; 3]) -> Result<Var> {
    let mut x = deepest;
    for s in side.into_iter().rev() {
        let up = g.upsample_bilinear(x, 2)?;
        x = g.add(up, s)?;
    }
    Ok(x)
}

/// One modality's encoder and decoder; returns the 1/2-scale, D-channel feature.
pub fn subnet_forward(g: &mut Graph, p: &BoundParams, cfg: &SubnetConfig, modality: Modality, image: Var) -> Result<Var> {
    let [_, c, h, w] = g.value(image).dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("subnet input needs 3 channels, got {c}")));
    }
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input extents {h}x{w} must be positive multiples of {INPUT_MULTIPLE}")));
    }
    let prefix = format!("subnet.{}", modality.name());
    let stem = conv(g, p, &format!("{prefix}.stem"), image, Conv2dSpec::same(3, 1))?;
    let mut x = g.relu(stem);
    let mut sides = Vec::with_capacity(3);
    for i in 1..=4 {
        let down = conv(g, p, &format!("{prefix}.block{i}.down"), x, DOWN)?;
        let down = g.relu(down);
        let body = conv(g, p, &format!("{prefix}.block{i}.conv"), down, Conv2dSpec::same(3, 1))?;
        x = g.relu(body);
        if i < 4 {
            sides.push(fca_forward(g, p, &format!("{prefix}.fca{i}"), x)?);
        }
    }
    let [d1, d2, d3] = cfg.aspp_dilations;
    let b1 = conv(g, p, &format!("{prefix}.aspp.branch1"), x, Conv2dSpec { stride: 1, dilation: d1, padding: 0 })?;
    let b2 = conv(g, p, &format!("{prefix}.aspp.branch2"), x, Conv2dSpec::same(3, d2))?;
    let b3 = conv(g, p, &format!("{prefix}.aspp.branch3"), x, Conv2dSpec::same(3, d3))?;
    let sum = g.add(b1, b2)?;
    let sum = g.add(sum, b3)?;
    let aspp = g.relu(sum);
    decode(g, aspp, [sides[0], sides[1], sides[2]])
}

/// Per-path evidence maps and their mean, each `N×2×H×W` at full resolution.
#[derive(Clone, Debug)]
pub struct EvidenceOutputs {
    pub paths: Vec<Var>,
    pub mean: Var,
}

/// Evidence head: per path conv → ×2 bilinear upsample → softplus, then the path mean.
pub fn mec_forward(g: &mut Graph, p: &BoundParams, modality: Modality, paths: usize, feature: Var) -> Result<EvidenceOutputs> {
    let prefix = format!("subnet.{}.mec", modality.name());
    let mut specs = vec![Conv2dSpec::UNIT];
    specs.extend(EVIDENCE_PATH_DILATIONS.iter().map(|&d| Conv2dSpec::same(3, d)));
    let mut maps = Vec::with_capacity(paths);
    for (h, spec) in specs.into_iter().take(paths).enumerate() {
        let logits = conv(g, p, &format!("{prefix}.path{}", h + 1), feature, spec)?;
        let up = g.upsample_bilinear(logits, 2)?;
        maps.push(g.softplus(up));
    }
    let mean = mean_evidence(g, &maps)?;
    Ok(EvidenceOutputs { paths: maps, mean })
}

/// Arithmetic mean of equally shaped evidence maps.
pub fn mean_evidence(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps.split_first().ok_or_else(|| Error::Shape("no evidence paths".into()))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &m in rest {
        acc = g.add(acc, m)?;
    }
    Ok(g.mul_scalar(acc, 1.0 / maps.len() as f64))
}

#[derive(Clone, Debug)]
pub struct SubnetOutputs {
    pub feature: Var,
    pub evidence: EvidenceOutputs,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub rgb: Option<SubnetOutputs>,
    pub depth: Option<SubnetOutputs>,
    /// Present when the two modalities are combined by Dempster's rule.
    pub fused: Option<FusedVars>,
    /// Road probability map `N×1×H×W` under the configured wiring.
    pub probability: Var,
}

impl ForwardOutputs {
    pub fn modality(&self, m: Modality) -> Option<&SubnetOutputs> {
        match m {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Depth => self.depth.as_ref(),
        }
    }

    /// Dirichlet parameters of every head, for the loss.
    pub fn loss_inputs(&self, g: &mut Graph) -> LossInputs {
        let mut alphas = |s: &Option<SubnetOutputs>| {
            s.as_ref().map(|s| {
                let mean = g.add_scalar(s.evidence.mean, 1.0);
                // A single path is the mean itself; it is not counted twice.
                let paths = if s.evidence.paths.len() > 1 {
                    s.evidence.paths.iter().map(|&e| g.add_scalar(e, 1.0)).collect()
                } else {
                    Vec::new()
                };
                ModalityAlphas { mean, paths }
            })
        };
        let rgb = alphas(&self.rgb);
        let depth = alphas(&self.depth);
        LossInputs { fused: self.fused.map(|f| f.alpha), rgb, depth }
    }
}

/// Full network forward pass on `N×3×H×W` appearance and range-normal inputs.
/// Inputs for a modality the architecture does not use are ignored.
pub fn usnet_forward(
    g: &mut Graph,
    p: &BoundParams,
    arch: &Architecture,
    appearance: Var,
    range: Var,
) -> Result<ForwardOutputs> {
    if g.shape(appearance) != g.shape(range) {
        return Err(Error::Shape(format!(
            "appearance {:?} and range {:?} extents differ",
            g.shape(appearance),
            g.shape(range)
        )));
    }
    let paths = arch.evidence_paths();
    let run = |g: &mut Graph, m: Modality, image: Var| -> Result<Option<SubnetOutputs>> {
        if !arch.mode.modalities().contains(&m) {
            return Ok(None);
        }
        let feature = subnet_forward(g, p, &arch.subnet, m, image)?;
        let evidence = mec_forward(g, p, m, paths, feature)?;
        Ok(Some(SubnetOutputs { feature, evidence }))
    };
    let rgb = run(g, Modality::Rgb, appearance)?;
    let depth = run(g, Modality::Depth, range)?;
    let (fused, probability) = match (&rgb, &depth, arch.mode.fusion()) {
        (Some(r), Some(d), Some(Fusion::Dempster)) => {
            let f = fuse_graph(g, r.evidence.mean, d.evidence.mean)?;
            (Some(f), f.probability)
        }
        (Some(r), Some(d), Some(Fusion::Average)) => {
            let pr = road_probability_graph(g, r.evidence.mean)?;
            let pd = road_probability_graph(g, d.evidence.mean)?;
            let sum = g.add(pr, pd)?;
            (None, g.mul_scalar(sum, 0.5))
        }
        (Some(only), None, _) | (None, Some(only), _) => (None, road_probability_graph(g, only.evidence.mean)?),
        _ => return Err(Error::Config(format!("inconsistent wiring for mode {}", arch.mode.name()))),
    };
    Ok(ForwardOutputs { rgb, depth, fused, probability })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full() -> Architecture {
        Architecture::new(SubnetConfig::default(), AblationMode::Full).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SubnetConfig::default().validate().is_ok());
        let bad = SubnetConfig { decoder_channels: 30, ..SubnetConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SubnetConfig { base_channels: 2, ..SubnetConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&full(), 11);
        assert_eq!(a, ModelParams::init(&full(), 11));
        assert_ne!(a, ModelParams::init(&full(), 12));
        assert!(a.iter().filter(|(n, _)| n.ends_with(".bias")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn names_follow_scheme() {
        let p = ModelParams::init(&full(), 0);
        assert!(p.get("subnet.rgb.stem.weight").is_some());
        assert!(p.get("subnet.depth.mec.path3.bias").is_some());
        assert!(p.get("subnet.depth.fca2.excite.weight").is_some());
        let single = Architecture::new(SubnetConfig::default(), AblationMode::AddFusion).unwrap();
        assert!(ModelParams::init(&single, 0).get("subnet.rgb.mec.path2.weight").is_none());
        let rgb = Architecture::new(SubnetConfig::default(), AblationMode::RgbOnly).unwrap();
        assert!(ModelParams::init(&rgb, 0).iter().all(|(n, _)| n.starts_with("subnet.rgb.")));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(AblationMode::parse(m.name()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!(AblationMode::parse("both").is_err());
    }
}
