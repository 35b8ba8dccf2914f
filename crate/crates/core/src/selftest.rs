//! Built-in worked examples and fusion invariants, run by `usnet selftest`.

use crate::error::Result;
use crate::graph::Graph;
use crate::loss::{adjusted_ce, filtered_alpha, kl_to_uniform, OneHotLabel};
use crate::rng::CounterRng;
use crate::sl::{fuse_opinions, Opinion};
use crate::special::{digamma, trigamma};
use crate::tensor::Tensor;

/// Tolerance of the worked examples.
pub const EXAMPLE_TOLERANCE: f64 = 1e-9;
/// Tolerance of the algebraic invariants.
pub const INVARIANT_TOLERANCE: f64 = 1e-12;
/// Number of random evidence pairs in the invariant suite.
pub const INVARIANT_PAIRS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn close(name: &'static str, got: f64, want: f64, tol: f64) -> Check {
    let err = (got - want).abs();
    Check { name, passed: err <= tol, detail: format!("got {got:.15e}, want {want:.15e}, |err| {err:.2e}") }
}

fn pixel(g: &mut Graph, alpha: [f64; 2], road: f64) -> Result<(crate::graph::Var, OneHotLabel)> {
    let a = g.param(Tensor::new(vec![1, 2, 1, 1], alpha.to_vec())?);
    let y = OneHotLabel::new(Tensor::new(vec![1, 1, 1, 1], vec![road])?)?;
    Ok((a, y))
}

/// The hand-derived values: fusion, loss, gradient and special functions.
pub fn worked_examples() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let f = fuse_opinions(Opinion::from_evidence(4.0, 0.0), Opinion::from_evidence(0.0, 4.0));
    checks.push(close("fusion b0 of e=(4,0) with e=(0,4)", f.opinion.belief[0], 0.4, EXAMPLE_TOLERANCE));
    checks.push(close("fusion b1 of e=(4,0) with e=(0,4)", f.opinion.belief[1], 0.4, EXAMPLE_TOLERANCE));
    checks.push(close("fusion u of e=(4,0) with e=(0,4)", f.opinion.uncertainty, 0.2, EXAMPLE_TOLERANCE));
    checks.push(close("fusion P of e=(4,0) with e=(0,4)", f.probability, 0.5, EXAMPLE_TOLERANCE));

    let mut g = Graph::new();
    let (alpha, y) = pixel(&mut g, [1.0, 3.0], 1.0)?;
    let la = adjusted_ce(&mut g, alpha, &y)?;
    checks.push(close("adjusted CE at alpha=(1,3), road", g.value(la).data()[0], 1.0 / 3.0, EXAMPLE_TOLERANCE));
    let grads = g.backward(la)?;
    let d_alpha = grads.get(alpha).map_or(f64::NAN, |t| t.data()[1]);
    checks.push(close("d adjusted CE / d alpha_road at alpha=(1,3)", d_alpha, -1.0 / 9.0, EXAMPLE_TOLERANCE));

    let mut g = Graph::new();
    let (alpha, y) = pixel(&mut g, [2.0, 7.0], 1.0)?;
    let tilde = filtered_alpha(&mut g, alpha, &y)?;
    let kl = kl_to_uniform(&mut g, tilde)?;
    checks.push(close("KL of filtered alpha=(2,1)", g.value(kl).data()[0], std::f64::consts::LN_2 - 0.5, EXAMPLE_TOLERANCE));

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
    checks.push(close("digamma(1) = -gamma", digamma(1.0)?, -EULER_GAMMA, EXAMPLE_TOLERANCE));
    checks.push(close("digamma(2) = 1 - gamma", digamma(2.0)?, 1.0 - EULER_GAMMA, EXAMPLE_TOLERANCE));
    checks.push(close("digamma(1/2) = -gamma - 2 ln 2", digamma(0.5)?, -EULER_GAMMA - 2.0 * std::f64::consts::LN_2, EXAMPLE_TOLERANCE));
    checks.push(close("trigamma(1) = pi^2/6", trigamma(1.0)?, pi2_6, EXAMPLE_TOLERANCE));
    checks.push(close("trigamma(2) = pi^2/6 - 1", trigamma(2.0)?, pi2_6 - 1.0, EXAMPLE_TOLERANCE));
    checks.push(close("trigamma(1/2) = pi^2/2", trigamma(0.5)?, 3.0 * pi2_6, EXAMPLE_TOLERANCE));
    Ok(checks)
}

/// Largest violations of the fusion invariants over random evidence pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InvariantReport {
    pub pairs: usize,
    pub belief_normalization: f64,
    pub fused_normalization: f64,
    /// Largest `u_fused − min(u_a, u_b)`; non-positive when the contraction holds.
    pub contraction: f64,
    pub commutativity: f64,
}

/// Draws `pairs` evidence pairs with `e ∈ [0, 100]²` and measures the invariants.
pub fn invariant_report(pairs: usize, seed: u64) -> InvariantReport {
    let mut rng = CounterRng::new(seed);
    let mut r = InvariantReport { pairs, contraction: f64::NEG_INFINITY, ..Default::default() };
    for _ in 0..pairs {
        let mut draw = || Opinion::from_evidence(rng.uniform(0.0, 100.0), rng.uniform(0.0, 100.0));
        let (a, b) = (draw(), draw());
        for o in [a, b] {
            r.belief_normalization = r.belief_normalization.max((o.belief[0] + o.belief[1] + o.uncertainty - 1.0).abs());
        }
        let ab = fuse_opinions(a, b);
        let ba = fuse_opinions(b, a);
        let o = ab.opinion;
        r.fused_normalization = r.fused_normalization.max((o.belief[0] + o.belief[1] + o.uncertainty - 1.0).abs());
        r.contraction = r.contraction.max(o.uncertainty - a.uncertainty.min(b.uncertainty));
        let diffs = [
            ab.opinion.belief[0] - ba.opinion.belief[0],
            ab.opinion.belief[1] - ba.opinion.belief[1],
            ab.opinion.uncertainty - ba.opinion.uncertainty,
            ab.probability - ba.probability,
        ];
        r.commutativity = diffs.iter().fold(r.commutativity, |m, d| m.max(d.abs()));
    }
    r
}

impl InvariantReport {
    pub fn checks(&self, tol: f64) -> Vec<Check> {
        let line = |name, v: f64, ok: bool| Check { name, passed: ok, detail: format!("worst {v:.3e} over {} pairs", self.pairs) };
        vec![
            line("belief normalization", self.belief_normalization, self.belief_normalization <= tol),
            line("fused normalization", self.fused_normalization, self.fused_normalization <= tol),
            line("uncertainty contraction", self.contraction, self.contraction <= tol),
            line("commutativity", self.commutativity, self.commutativity <= tol),
        ]
    }
}

/// Every check run by the `selftest` command.
pub fn run() -> Result<Vec<Check>> {
    let mut checks = worked_examples()?;
    checks.extend(invariant_report(INVARIANT_PAIRS, 0x5e1f_7e57).checks(INVARIANT_TOLERANCE));
    Ok(checks)
}
