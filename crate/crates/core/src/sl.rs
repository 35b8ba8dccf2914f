//! Subjective-logic algebra: evidence to belief, Dempster combination of two
//! binary belief assignments, and recovery of the fused Dirichlet.
//!
//! Every formula exists twice: as plain per-pixel functions over
//! [`EvidenceMap`] grids and as graph operations ([`fuse_graph`]). The two
//! evaluate the same expressions in the same order, so they agree bit for bit.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor applied to the Dempster normalizer `1 − C`.
///
/// The normalizer is evaluated as the sum of the unnormalized masses, which
/// equals `1 − C` exactly in real arithmetic but avoids cancellation when two
/// confident opinions disagree.
pub const CONFLICT_FLOOR: f64 = 1e-12;

/// Per-pixel class evidence, stored `H×W×K` with the class index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl EvidenceMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Shape("evidence needs at least one class".into()));
        }
        if values.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "{height}x{width}x{classes} evidence grid needs {} values, got {}",
                height * width * classes,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("evidence must be finite and non-negative, got {bad}")));
        }
        Ok(EvidenceMap { height, width, classes, values })
    }

    /// Builds a map from a channel-major `[N=1, K, H, W]` or `[K, H, W]` tensor.
    pub fn from_channel_major(t: &Tensor) -> Result<Self> {
        let (k, h, w) = match t.shape() {
            &[1, k, h, w] | &[k, h, w] => (k, h, w),
            s => return Err(Error::Shape(format!("expected [1,K,H,W] or [K,H,W] evidence, got {s:?}"))),
        };
        let src = t.data();
        let values = (0..h * w).flat_map(|p| (0..k).map(move |c| src[c * h * w + p])).collect();
        Self::new(h, w, k, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Belief masses (`H×W×K`) and uncertainty (`H×W`); per pixel `u + Σ b_k = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefAssignment {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub belief: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl BeliefAssignment {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Binary opinion at pixel `i`; only meaningful for `K = 2`.
    pub fn opinion(&self, i: usize) -> Opinion {
        Opinion { belief: [self.belief[2 * i], self.belief[2 * i + 1]], uncertainty: self.uncertainty[i] }
    }
}

/// Dirichlet concentrations (`H×W×K`) and strengths (`H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletParams {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub alpha: Vec<f64>,
    pub strength: Vec<f64>,
}

impl DirichletParams {
    /// `α = e + 1`, `S = Σ α`.
    pub fn from_evidence(e: &EvidenceMap) -> Self {
        let alpha: Vec<f64> = e.values.iter().map(|v| v + 1.0).collect();
        let strength = alpha.chunks_exact(e.classes).map(|a| a.iter().sum()).collect();
        DirichletParams { height: e.height, width: e.width, classes: e.classes, alpha, strength }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedResult {
    pub assignment: BeliefAssignment,
    pub conflict: Vec<f64>,
    /// Road probability `α₁ / S`.
    pub probability: Vec<f64>,
    pub alpha: DirichletParams,
}

/// A binary belief assignment at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Opinion {
    pub belief: [f64; 2],
    pub uncertainty: f64,
}

impl Opinion {
    pub const VACUOUS: Opinion = Opinion { belief: [0.0, 0.0], uncertainty: 1.0 };

    pub fn from_evidence(e0: f64, e1: f64) -> Opinion {
        let s = (e0 + e1) + 2.0;
        Opinion { belief: [e0 / s, e1 / s], uncertainty: 2.0 / s }
    }
}

/// Result of fusing two binary opinions at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedPixel {
    pub opinion: Opinion,
    pub conflict: f64,
    pub strength: f64,
    pub alpha: [f64; 2],
    pub probability: f64,
}

/// Dempster's rule for two binary opinions, followed by Dirichlet recovery.
///
/// Written so that swapping `a` and `b` yields bitwise-identical output.
pub fn fuse_opinions(a: Opinion, b: Opinion) -> FusedPixel {
    let conflict = a.belief[0] * b.belief[1] + a.belief[1] * b.belief[0];
    let mass = |k: usize| a.belief[k] * b.belief[k] + (b.uncertainty * a.belief[k] + a.uncertainty * b.belief[k]);
    let (m0, m1, joint) = (mass(0), mass(1), a.uncertainty * b.uncertainty);
    let norm = ((m0 + m1) + joint).max(CONFLICT_FLOOR);
    let belief = [m0 / norm, m1 / norm];
    let uncertainty = joint / norm;
    let strength = 2.0 / uncertainty;
    let alpha = [belief[0] * strength + 1.0, belief[1] * strength + 1.0];
    FusedPixel {
        opinion: Opinion { belief, uncertainty },
        conflict,
        strength,
        alpha,
        probability: alpha[1] / strength,
    }
}

/// `b_k = e_k / S`, `u = K / S` with `S = Σ (e_k + 1)`.
pub fn belief_from_evidence(e: &EvidenceMap) -> BeliefAssignment {
    let k = e.classes;
    let mut belief = Vec::with_capacity(e.values.len());
    let mut uncertainty = Vec::with_capacity(e.pixels());
    for px in e.values.chunks_exact(k) {
        let s = px.iter().sum::<f64>() + k as f64;
        belief.extend(px.iter().map(|v| v / s));
        uncertainty.push(k as f64 / s);
    }
    BeliefAssignment { height: e.height, width: e.width, classes: k, belief, uncertainty }
}

/// Expected class probabilities `α_k / S`, laid out `H×W×K`.
pub fn expected_probability(d: &DirichletParams) -> Vec<f64> {
    d.alpha
        .chunks_exact(d.classes)
        .zip(&d.strength)
        .flat_map(|(a, &s)| a.iter().map(move |v| v / s))
        .collect()
}

fn require_binary_pair(a: &BeliefAssignment, b: &BeliefAssignment) -> Result<()> {
    if a.classes != 2 || b.classes != 2 {
        return Err(Error::Domain(format!(
            "fusion is defined for two classes, got {} and {}",
            a.classes, b.classes
        )));
    }
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "fusing {}x{} with {}x{} assignments",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Pixel-wise Dempster combination of two binary belief assignments.
pub fn dempster_fuse(a: &BeliefAssignment, b: &BeliefAssignment) -> Result<FusedResult> {
    require_binary_pair(a, b)?;
    let n = a.pixels();
    let mut out = FusedBuffers::with_capacity(n);
    for i in 0..n {
        out.push(fuse_opinions(a.opinion(i), b.opinion(i)));
    }
    Ok(out.finish(a.height, a.width))
}

/// Evidence-to-fusion in one pass without materializing the intermediate assignments.
pub fn fuse_evidence(a: &EvidenceMap, b: &EvidenceMap) -> Result<FusedResult> {
    if a.classes != 2 || b.classes != 2 {
        return Err(Error::Domain("fusion is defined for two classes".into()));
    }
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "fusing {}x{} with {}x{} evidence",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut out = FusedBuffers::with_capacity(a.pixels());
    for (ea, eb) in a.values.chunks_exact(2).zip(b.values.chunks_exact(2)) {
        out.push(fuse_opinions(Opinion::from_evidence(ea[0], ea[1]), Opinion::from_evidence(eb[0], eb[1])));
    }
    Ok(out.finish(a.height, a.width))
}

struct FusedBuffers {
    belief: Vec<f64>,
    uncertainty: Vec<f64>,
    conflict: Vec<f64>,
    probability: Vec<f64>,
    alpha: Vec<f64>,
    strength: Vec<f64>,
}

impl FusedBuffers {
    fn with_capacity(n: usize) -> Self {
        FusedBuffers {
            belief: Vec::with_capacity(2 * n),
            uncertainty: Vec::with_capacity(n),
            conflict: Vec::with_capacity(n),
            probability: Vec::with_capacity(n),
            alpha: Vec::with_capacity(2 * n),
            strength: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, f: FusedPixel) {
        self.belief.extend_from_slice(&f.opinion.belief);
        self.uncertainty.push(f.opinion.uncertainty);
        self.conflict.push(f.conflict);
        self.probability.push(f.probability);
        self.alpha.extend_from_slice(&f.alpha);
        self.strength.push(f.strength);
    }

    fn finish(self, height: usize, width: usize) -> FusedResult {
        FusedResult {
            assignment: BeliefAssignment {
                height,
                width,
                classes: 2,
                belief: self.belief,
                uncertainty: self.uncertainty,
            },
            conflict: self.conflict,
            probability: self.probability,
            alpha: DirichletParams { height, width, classes: 2, alpha: self.alpha, strength: self.strength },
        }
    }
}

/// Graph handles for a per-modality belief assignment (each `N×1×H×W`).
#[derive(Clone, Copy, Debug)]
pub struct OpinionVars {
    pub belief: [Var; 2],
    pub uncertainty: Var,
}

/// Graph handles produced by [`fuse_graph`].
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    /// Road probability `P`, `N×1×H×W`.
    pub probability: Var,
    /// Fused uncertainty `u`, `N×1×H×W`.
    pub uncertainty: Var,
    /// Fused concentrations, `N×2×H×W`.
    pub alpha: Var,
    pub conflict: Var,
}

/// Belief and uncertainty of an `N×2×H×W` evidence tensor.
pub fn opinion_graph(g: &mut Graph, evidence: Var) -> Result<OpinionVars> {
    let [_, k, _, _] = g.value(evidence).dims4()?;
    if k != 2 {
        return Err(Error::Shape(format!("expected 2 evidence channels, got {k}")));
    }
    let e0 = g.channel(evidence, 0)?;
    let e1 = g.channel(evidence, 1)?;
    let total = g.add(e0, e1)?;
    let s = g.add_scalar(total, 2.0);
    let b0 = g.div(e0, s)?;
    let b1 = g.div(e1, s)?;
    let two = g.constant(Tensor::scalar(2.0));
    let u = g.div(two, s)?;
    Ok(OpinionVars { belief: [b0, b1], uncertainty: u })
}

/// Expected road probability `(e₁ + 1) / S` of an `N×2×H×W` evidence tensor.
pub fn road_probability_graph(g: &mut Graph, evidence: Var) -> Result<Var> {
    let e0 = g.channel(evidence, 0)?;
    let e1 = g.channel(evidence, 1)?;
    let total = g.add(e0, e1)?;
    let s = g.add_scalar(total, 2.0);
    let a1 = g.add_scalar(e1, 1.0);
    g.div(a1, s)
}

/// Uncertainty-aware fusion of two `N×2×H×W` evidence tensors as graph operations.
pub fn fuse_graph(g: &mut Graph, e_a: Var, e_b: Var) -> Result<FusedVars> {
    if g.shape(e_a) != g.shape(e_b) {
        return Err(Error::Shape(format!(
            "fusing evidence of shapes {:?} and {:?}",
            g.shape(e_a),
            g.shape(e_b)
        )));
    }
    let a = opinion_graph(g, e_a)?;
    let b = opinion_graph(g, e_b)?;
    let c0 = g.mul(a.belief[0], b.belief[1])?;
    let c1 = g.mul(a.belief[1], b.belief[0])?;
    let conflict = g.add(c0, c1)?;
    let mut mass = [conflict; 2];
    for (k, slot) in mass.iter_mut().enumerate() {
        let agree = g.mul(a.belief[k], b.belief[k])?;
        let a_weighted = g.mul(b.uncertainty, a.belief[k])?;
        let b_weighted = g.mul(a.uncertainty, b.belief[k])?;
        let discounted = g.add(a_weighted, b_weighted)?;
        *slot = g.add(agree, discounted)?;
    }
    let joint = g.mul(a.uncertainty, b.uncertainty)?;
    let masses = g.add(mass[0], mass[1])?;
    let total = g.add(masses, joint)?;
    let norm = g.clamp_min(total, CONFLICT_FLOOR);
    let belief = [g.div(mass[0], norm)?, g.div(mass[1], norm)?];
    let u = g.div(joint, norm)?;
    let two = g.constant(Tensor::scalar(2.0));
    let strength = g.div(two, u)?;
    let mut alpha = [u; 2];
    for (k, slot) in alpha.iter_mut().enumerate() {
        let scaled = g.mul(belief[k], strength)?;
        *slot = g.add_scalar(scaled, 1.0);
    }
    let probability = g.div(alpha[1], strength)?;
    let alpha = g.concat_channels(&alpha)?;
    Ok(FusedVars { probability, uncertainty: u, alpha, conflict })
}
