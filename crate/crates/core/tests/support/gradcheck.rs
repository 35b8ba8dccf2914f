//! Central-difference gradient checks shared by the gradient test suite and
//! the acceptance runner.

use usnet::graph::{ReduceOp, UnaryOp};
use usnet::loss::{adjusted_ce, filtered_alpha, kl_to_uniform, total_loss, unified_term, LossInputs, LossSettings, ModalityAlphas, OneHotLabel, Reduction};
use usnet::rng::{fnv1a, CounterRng};
use usnet::sl::fuse_graph;
use usnet::{Conv2dSpec, Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
pub const MAX_ELEMENTS: usize = 64;
pub const SEEDS: u64 = 100;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub make: Box<dyn Fn(&mut CounterRng) -> (Build, Vec<Tensor>)>,
}

fn case(name: impl Into<String>, make: impl Fn(&mut CounterRng) -> (Build, Vec<Tensor>) + 'static) -> Case {
    Case { name: name.into(), make: Box::new(make) }
}

/// Reduces `out` to `Σ w ⊙ out` with fixed random weights so every output
/// element contributes with its own sensitivity.
fn scalarize(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = CounterRng::new(seed).derive(fnv1a("output weights"));
    let w = Tensor::from_fn(g.shape(out), |_| rng.uniform(-1.0, 1.0));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn evaluate(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward pass");
    let s = scalarize(&mut g, out, seed).expect("scalarize");
    g.value(s).data()[0]
}

/// Compares every analytic input gradient with a central difference.
/// Returns the largest ratio of error to tolerance, or a description of the
/// first element that fails.
pub fn check(build: &Build, inputs: &[Tensor], seed: u64) -> std::result::Result<f64, String> {
    let elements: usize = inputs.iter().map(|t| t.len()).sum();
    if elements > MAX_ELEMENTS {
        return Err(format!("{elements} input elements exceed the limit of {MAX_ELEMENTS}"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).map_err(|e| e.to_string())?;
    let s = scalarize(&mut g, out, seed).map_err(|e| e.to_string())?;
    let grads = g.backward(s).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            minus[k].data_mut()[i] -= STEP;
            let numeric = (evaluate(build, &plus, seed) - evaluate(build, &minus, seed)) / (2.0 * STEP);
            let tol = (REL_TOL * a.abs().max(numeric.abs())).max(ABS_FLOOR);
            let err = (a - numeric).abs();
            if !(err <= tol) {
                return Err(format!("input {k} element {i}: analytic {a:.10e}, numeric {numeric:.10e}"));
            }
            worst = worst.max(err / tol);
        }
    }
    Ok(worst)
}

/// Runs `case` for seeds `0..seeds`; returns the worst error ratio.
pub fn run_case(c: &Case, seeds: u64) -> std::result::Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = CounterRng::new(seed).derive(fnv1a(&c.name));
        let (build, inputs) = (c.make)(&mut rng);
        let w = check(&build, &inputs, seed).map_err(|e| format!("{} seed {seed}: {e}", c.name))?;
        worst = worst.max(w);
    }
    Ok(worst)
}

pub fn uniform(rng: &mut CounterRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Magnitudes in `[lo, hi]` with random signs, keeping kinks and poles
/// outside the difference stencil.
pub fn signed(rng: &mut CounterRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(lo, hi);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn labels(rng: &mut CounterRng, shape: &[usize]) -> OneHotLabel {
    let road = Tensor::from_fn(shape, |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
    OneHotLabel::new(road).expect("labels")
}

fn unary_case(name: &str, op: UnaryOp, lo: f64, hi: f64, signs: bool) -> Case {
    case(name, move |rng| {
        let x = if signs { signed(rng, &[1, 2, 3, 3], lo, hi) } else { uniform(rng, &[1, 2, 3, 3], lo, hi) };
        let build: Build = Box::new(move |g, v| g.unary(op, v[0]));
        (build, vec![x])
    })
}

fn conv_cases() -> Vec<Case> {
    // (batch, cin, cout, kernel, stride, dilation, padding, extent): covers the
    // im2col path, the direct path, strides, dilation wider than the input
    // and unpadded kernels.
    let configs = [
        (1, 2, 2, 3, 1, 1, 1, 3),
        (1, 1, 2, 3, 1, 1, 1, 5),
        (2, 1, 1, 3, 1, 1, 1, 4),
        (1, 1, 2, 3, 2, 1, 1, 5),
        (1, 2, 2, 3, 1, 2, 2, 3),
        (1, 3, 5, 1, 1, 1, 0, 3),
        (1, 1, 5, 3, 1, 3, 3, 3),
        (1, 1, 1, 2, 2, 1, 0, 5),
        (1, 2, 1, 3, 1, 4, 4, 3),
    ];
    configs
        .iter()
        .map(|&(n, cin, cout, k, stride, dilation, padding, e)| {
            let name = format!("conv2d n{n} c{cin}->{cout} k{k} s{stride} d{dilation} p{padding} {e}x{e}");
            case(name, move |rng| {
                let spec = Conv2dSpec { stride, dilation, padding };
                let x = uniform(rng, &[n, cin, e, e], -1.0, 1.0);
                let w = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
                let b = uniform(rng, &[cout], -1.0, 1.0);
                let build: Build = Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec));
                (build, vec![x, w, b])
            })
        })
        .collect()
}

fn binary_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        for (layout, shapes) in [("equal", [[1usize, 2, 2, 3], [1, 2, 2, 3]]), ("scalar rhs", [[1, 2, 2, 3], [1, 1, 1, 1]]), ("scalar lhs", [[1, 1, 1, 1], [1, 2, 2, 3]])] {
            let shapes = shapes.map(|s| if s == [1, 1, 1, 1] { vec![1] } else { s.to_vec() });
            cases.push(case(format!("{name} {layout}"), move |rng| {
                let a = uniform(rng, &shapes[0], -2.0, 2.0);
                let b = if op == 3 { signed(rng, &shapes[1], 0.3, 2.0) } else { uniform(rng, &shapes[1], -2.0, 2.0) };
                let build: Build = Box::new(move |g, v| match op {
                    0 => g.add(v[0], v[1]),
                    1 => g.sub(v[0], v[1]),
                    2 => g.mul(v[0], v[1]),
                    _ => g.div(v[0], v[1]),
                });
                (build, vec![a, b])
            }));
        }
    }
    cases
}

fn structural_cases() -> Vec<Case> {
    vec![
        case("upsample_bilinear x2", |rng| {
            let x = uniform(rng, &[1, 2, 3, 4], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.upsample_bilinear(v[0], 2)) as Build, vec![x])
        }),
        case("upsample_bilinear x4", |rng| {
            let x = uniform(rng, &[2, 1, 2, 3], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.upsample_bilinear(v[0], 4)) as Build, vec![x])
        }),
        case("reduce sum all", |rng| {
            let x = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.reduce(ReduceOp::Sum, v[0], &[])) as Build, vec![x])
        }),
        case("reduce sum channels", |rng| {
            let x = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.reduce(ReduceOp::Sum, v[0], &[1])) as Build, vec![x])
        }),
        case("reduce mean spatial", |rng| {
            let x = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.reduce(ReduceOp::Mean, v[0], &[2, 3])) as Build, vec![x])
        }),
        case("mean", |rng| {
            let x = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.mean(v[0])) as Build, vec![x])
        }),
        case("global_avg_pool", |rng| {
            let x = uniform(rng, &[2, 3, 2, 3], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.global_avg_pool(v[0])) as Build, vec![x])
        }),
        case("channel", |rng| {
            let x = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
            let index = rng.below(3);
            (Box::new(move |g: &mut Graph, v: &[Var]| g.channel(v[0], index)) as Build, vec![x])
        }),
        case("concat_channels", |rng| {
            let a = uniform(rng, &[2, 1, 2, 3], -1.0, 1.0);
            let b = uniform(rng, &[2, 2, 2, 3], -1.0, 1.0);
            let c = uniform(rng, &[2, 1, 2, 3], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.concat_channels(&[v[0], v[1], v[2], v[0]])) as Build, vec![a, b, c])
        }),
        case("scale_channels", |rng| {
            let x = uniform(rng, &[2, 3, 2, 3], -1.0, 1.0);
            let gate = uniform(rng, &[2, 3, 1, 1], -1.0, 1.0);
            (Box::new(|g: &mut Graph, v: &[Var]| g.scale_channels(v[0], v[1])) as Build, vec![x, gate])
        }),
    ]
}

fn elementwise_cases() -> Vec<Case> {
    vec![
        unary_case("relu", UnaryOp::Relu, 0.05, 2.0, true),
        unary_case("sigmoid", UnaryOp::Sigmoid, 0.0, 6.0, true),
        unary_case("softplus", UnaryOp::Softplus, 0.0, 6.0, true),
        unary_case("add_scalar", UnaryOp::AddScalar(0.7), 0.0, 3.0, true),
        unary_case("mul_scalar", UnaryOp::MulScalar(-1.3), 0.0, 3.0, true),
        unary_case("reciprocal", UnaryOp::Reciprocal, 0.2, 3.0, true),
        case("clamp_min", |rng| {
            let x = Tensor::from_fn(&[1, 2, 3, 3], |_| 0.5 + rng.uniform(0.05, 1.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 });
            (Box::new(|g: &mut Graph, v: &[Var]| Ok(g.clamp_min(v[0], 0.5))) as Build, vec![x])
        }),
        unary_case("ln", UnaryOp::Ln, 0.1, 5.0, false),
        unary_case("digamma", UnaryOp::Digamma, 0.2, 40.0, false),
        unary_case("lgamma", UnaryOp::Lgamma, 0.2, 40.0, false),
    ]
}

fn loss_cases() -> Vec<Case> {
    vec![
        case("adjusted_ce", |rng| {
            let alpha = uniform(rng, &[2, 2, 2, 3], 1.05, 30.0);
            let y = labels(rng, &[2, 1, 2, 3]);
            (Box::new(move |g: &mut Graph, v: &[Var]| adjusted_ce(g, v[0], &y)) as Build, vec![alpha])
        }),
        case("kl_to_uniform", |rng| {
            let alpha = uniform(rng, &[2, 2, 2, 3], 1.05, 30.0);
            (Box::new(|g: &mut Graph, v: &[Var]| kl_to_uniform(g, v[0])) as Build, vec![alpha])
        }),
        case("kl_to_uniform of filtered alpha", |rng| {
            let alpha = uniform(rng, &[2, 2, 2, 3], 1.05, 30.0);
            let y = labels(rng, &[2, 1, 2, 3]);
            let build: Build = Box::new(move |g, v| {
                let tilde = filtered_alpha(g, v[0], &y)?;
                kl_to_uniform(g, tilde)
            });
            (build, vec![alpha])
        }),
        case("unified_term", |rng| {
            let alpha = uniform(rng, &[2, 2, 2, 3], 1.05, 30.0);
            let y = labels(rng, &[2, 1, 2, 3]);
            let lambda = rng.uniform(0.0, 1.0);
            let reduction = if rng.bernoulli(0.5) { Reduction::Mean } else { Reduction::Sum };
            (Box::new(move |g: &mut Graph, v: &[Var]| unified_term(g, v[0], &y, lambda, reduction)) as Build, vec![alpha])
        }),
        case("total_loss through fuse_graph", |rng| {
            // Mean evidence of each modality plus two path maps each.
            let shape = [1, 2, 2, 2];
            let inputs: Vec<Tensor> = (0..6).map(|_| uniform(rng, &shape, 0.05, 25.0)).collect();
            let y = labels(rng, &[1, 1, 2, 2]);
            let epoch = rng.below(70) as i64;
            let settings = LossSettings { beta: 2.0, reduction: Reduction::Mean };
            let build: Build = Box::new(move |g, v| {
                let alpha = |g: &mut Graph, e: Var| Ok::<Var, usnet::Error>(g.add_scalar(e, 1.0));
                let fused = fuse_graph(g, v[0], v[1])?;
                let modality = |g: &mut Graph, mean: Var, paths: &[Var]| -> Result<ModalityAlphas> {
                    Ok(ModalityAlphas { mean: alpha(g, mean)?, paths: paths.iter().map(|&p| g.add_scalar(p, 1.0)).collect() })
                };
                let inputs = LossInputs {
                    fused: Some(fused.alpha),
                    rgb: Some(modality(g, v[0], &v[2..4])?),
                    depth: Some(modality(g, v[1], &v[4..6])?),
                };
                Ok(total_loss(g, &inputs, &y, epoch, settings)?.0)
            });
            (build, inputs)
        }),
        case("fuse_graph outputs", |rng| {
            let a = uniform(rng, &[1, 2, 2, 3], 0.0, 40.0);
            let b = uniform(rng, &[1, 2, 2, 3], 0.0, 40.0);
            let build: Build = Box::new(|g, v| {
                let f = fuse_graph(g, v[0], v[1])?;
                let parts = [f.probability, f.uncertainty, f.conflict];
                let cat = g.concat_channels(&parts)?;
                let scaled = g.mul_scalar(f.alpha, 0.01);
                g.concat_channels(&[cat, scaled])
            });
            (build, vec![a, b])
        }),
    ]
}

/// Every graph operation.
pub fn op_cases() -> Vec<Case> {
    let mut cases = conv_cases();
    cases.extend(binary_cases());
    cases.extend(elementwise_cases());
    cases.extend(structural_cases());
    cases
}

/// Every loss term, including the full objective through the fusion graph.
pub fn loss_term_cases() -> Vec<Case> {
    loss_cases()
}
