//! Evidential Dirichlet objective: adjusted cross-entropy, KL pull towards the
//! uniform Dirichlet on wrong-class evidence, the annealed combination of the
//! two, and the multi-head total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Number of epochs over which the KL weight ramps from 0 to 1.
pub const KL_ANNEAL_EPOCHS: f64 = 50.0;

/// Default weight of the fused term in the total loss.
pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over batch and pixels.
    #[default]
    Mean,
    /// Sum over batch and pixels.
    Sum,
}

/// Binary road labels for a batch, stored as the road indicator `N×1×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabel {
    road: Tensor,
}

impl OneHotLabel {
    pub fn new(road: Tensor) -> Result<Self> {
        let [_, c, _, _] = road.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("road labels need one channel, got {c}")));
        }
        if let Some(bad) = road.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("road labels must be 0 or 1, got {bad}")));
        }
        Ok(OneHotLabel { road })
    }

    pub fn road(&self) -> &Tensor {
        &self.road
    }

    /// One-hot tensor `N×2×H×W` with channel 0 = non-road, 1 = road.
    pub fn one_hot(&self) -> Tensor {
        let [n, _, h, w] = self.road.dims4().expect("validated on construction");
        let plane = h * w;
        let mut data = Vec::with_capacity(2 * n * plane);
        for b in 0..n {
            let road = &self.road.data()[b * plane..(b + 1) * plane];
            data.extend(road.iter().map(|r| 1.0 - r));
            data.extend_from_slice(road);
        }
        Tensor::new(vec![n, 2, h, w], data).expect("consistent extents")
    }
}

fn check_alpha(g: &Graph, alpha: Var, y: &OneHotLabel) -> Result<()> {
    let [n, k, h, w] = g.value(alpha).dims4()?;
    let [yn, _, yh, yw] = y.road.dims4()?;
    if k != 2 || (n, h, w) != (yn, yh, yw) {
        return Err(Error::Shape(format!(
            "alpha {:?} does not match labels {:?}",
            g.shape(alpha),
            y.road.shape()
        )));
    }
    if let Some(bad) = g.value(alpha).data().iter().find(|a| !(**a >= 1.0)) {
        return Err(Error::Domain(format!("Dirichlet parameters must be at least 1, got {bad}")));
    }
    Ok(())
}

/// Per-pixel strength and the true-class and wrong-class parameters, each `N×1×H×W`.
fn split_by_label(g: &mut Graph, alpha: Var, y: &OneHotLabel) -> Result<(Var, Var, Var)> {
    let a0 = g.channel(alpha, 0)?;
    let a1 = g.channel(alpha, 1)?;
    let s = g.add(a0, a1)?;
    let road = g.constant(y.road.clone());
    let truth = g.mul(road, a1)?;
    let truth = {
        let off = g.constant(y.road.map(|r| 1.0 - r));
        let t0 = g.mul(off, a0)?;
        g.add(truth, t0)?
    };
    let wrong = g.sub(s, truth)?;
    Ok((s, truth, wrong))
}

/// Per-pixel `ψ(S) − ψ(α_true)`, shape `N×1×H×W`.
pub fn adjusted_ce(g: &mut Graph, alpha: Var, y: &OneHotLabel) -> Result<Var> {
    check_alpha(g, alpha, y)?;
    let (s, truth, _) = split_by_label(g, alpha, y)?;
    let psi_s = g.digamma(s)?;
    let psi_true = g.digamma(truth)?;
    g.sub(psi_s, psi_true)
}

/// `KL(α̃)` with `α̃` the filtered parameters of `alpha`, shape `N×1×H×W`.
///
/// With two classes the filtered true-class entry is 1, so for the remaining
/// entry `a` the log-gamma and digamma differences telescope to
/// `ln a − (a − 1)/a`. Equal to `kl_to_uniform(filtered_alpha(..))`.
pub fn filtered_kl(g: &mut Graph, alpha: Var, y: &OneHotLabel) -> Result<Var> {
    check_alpha(g, alpha, y)?;
    let (_, _, wrong) = split_by_label(g, alpha, y)?;
    let log = g.ln(wrong)?;
    let inv = g.reciprocal(wrong)?;
    let inv = g.add_scalar(inv, -1.0);
    g.add(log, inv)
}

/// `α̃ = y + (1 − y) ⊙ α`: the true-class entry becomes exactly 1 and passes no gradient.
pub fn filtered_alpha(g: &mut Graph, alpha: Var, y: &OneHotLabel) -> Result<Var> {
    check_alpha(g, alpha, y)?;
    let one_hot = y.one_hot();
    let keep = g.constant(one_hot.map(|v| 1.0 - v));
    let y = g.constant(one_hot);
    let kept = g.mul(keep, alpha)?;
    g.add(y, kept)
}

/// Per-pixel `KL[Dir(α̃) ‖ Dir(1)]` for two classes, shape `N×1×H×W`.
pub fn kl_to_uniform(g: &mut Graph, alpha_tilde: Var) -> Result<Var> {
    let [_, k, _, _] = g.value(alpha_tilde).dims4()?;
    if k != 2 {
        return Err(Error::Shape(format!("expected 2 classes, got {k}")));
    }
    if let Some(bad) = g.value(alpha_tilde).data().iter().find(|a| !(**a >= 1.0)) {
        return Err(Error::Domain(format!("filtered parameters must be at least 1, got {bad}")));
    }
    let a0 = g.channel(alpha_tilde, 0)?;
    let a1 = g.channel(alpha_tilde, 1)?;
    let s = g.add(a0, a1)?;
    // ln Γ(S) − ln Γ(2) − Σ ln Γ(α̃_k); ln Γ(2) = 0.
    let lg_s = g.lgamma(s)?;
    let lg0 = g.lgamma(a0)?;
    let lg1 = g.lgamma(a1)?;
    let lg_sum = g.add(lg0, lg1)?;
    let log_ratio = g.sub(lg_s, lg_sum)?;
    let psi_s = g.digamma(s)?;
    let mut acc = log_ratio;
    for a in [a0, a1] {
        let psi = g.digamma(a)?;
        let gap = g.sub(psi, psi_s)?;
        let excess = g.add_scalar(a, -1.0);
        let term = g.mul(excess, gap)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

/// KL weight `min(1, t / 50)` for 0-based epoch index `t`.
pub fn lambda_schedule(epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::Domain(format!("epoch index must be non-negative, got {epoch}")));
    }
    Ok((epoch as f64 / KL_ANNEAL_EPOCHS).min(1.0))
}

fn reduce(g: &mut Graph, per_pixel: Var, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Mean => g.mean(per_pixel),
        Reduction::Sum => Ok(g.sum(per_pixel)),
    }
}

/// `L(α) = L_a(α) + λ·KL(α̃)` reduced over batch and pixels to a scalar.
pub fn unified_term(
    g: &mut Graph,
    alpha: Var,
    y: &OneHotLabel,
    lambda: f64,
    reduction: Reduction,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let ce = adjusted_ce(g, alpha, y)?;
    let per_pixel = if lambda == 0.0 {
        ce
    } else {
        let kl = filtered_kl(g, alpha, y)?;
        let weighted = g.mul_scalar(kl, lambda);
        g.add(ce, weighted)?
    };
    reduce(g, per_pixel, reduction)
}

/// Dirichlet parameters of one modality: the head mean and each evidence path.
#[derive(Clone, Debug)]
pub struct ModalityAlphas {
    pub mean: Var,
    pub paths: Vec<Var>,
}

/// Every Dirichlet head that contributes to the objective.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub fused: Option<Var>,
    pub rgb: Option<ModalityAlphas>,
    pub depth: Option<ModalityAlphas>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub beta: f64,
    pub reduction: Reduction,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings { beta: DEFAULT_BETA, reduction: Reduction::Mean }
    }
}

/// Values of every term, for logging. Absent heads are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fused: Option<f64>,
    pub rgb: Option<f64>,
    pub depth: Option<f64>,
    /// RGB paths first, then depth paths.
    pub paths: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

/// `β·L(fused) + L(rgb) + L(depth) + Σ_h (L(rgb path h) + L(depth path h))`.
pub fn total_loss(
    g: &mut Graph,
    inputs: &LossInputs,
    y: &OneHotLabel,
    epoch: i64,
    settings: LossSettings,
) -> Result<(Var, LossBreakdown)> {
    let lambda = lambda_schedule(epoch)?;
    let term = |g: &mut Graph, alpha: Var| -> Result<(Var, f64)> {
        let v = unified_term(g, alpha, y, lambda, settings.reduction)?;
        Ok((v, g.value(v).data()[0]))
    };
    let mut parts: Vec<Var> = Vec::new();
    let mut breakdown = LossBreakdown { fused: None, rgb: None, depth: None, paths: Vec::new(), lambda, total: 0.0 };
    if let Some(f) = inputs.fused {
        let (v, x) = term(g, f)?;
        parts.push(g.mul_scalar(v, settings.beta));
        breakdown.fused = Some(x);
    }
    for (modality, slot) in [(&inputs.rgb, &mut breakdown.rgb), (&inputs.depth, &mut breakdown.depth)] {
        if let Some(m) = modality {
            let (v, x) = term(g, m.mean)?;
            parts.push(v);
            *slot = Some(x);
        }
    }
    for m in [&inputs.rgb, &inputs.depth].into_iter().flatten() {
        for &p in &m.paths {
            let (v, x) = term(g, p)?;
            parts.push(v);
            breakdown.paths.push(x);
        }
    }
    let (&first, rest) = parts.split_first().ok_or_else(|| Error::Config("loss has no terms".into()))?;
    let mut total = first;
    for &p in rest {
        total = g.add(total, p)?;
    }
    breakdown.total = g.value(total).data()[0];
    Ok((total, breakdown))
}
