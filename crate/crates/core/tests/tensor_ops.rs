//! Convolution and upsampling against independent reference implementations.

use usnet::rng::CounterRng;
use usnet::{Conv2dSpec, Graph, Tensor};

fn random(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Textbook cross-correlation with zero padding.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, s: Conv2dSpec) -> Tensor {
    let [n, cin, h, w] = x.dims4().unwrap();
    let [cout, _, kh, kw] = k.dims4().unwrap();
    let ho = (h + 2 * s.padding - s.dilation * (kh - 1) - 1) / s.stride + 1;
    let wo = (w + 2 * s.padding - s.dilation * (kw - 1) - 1) / s.stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b_ in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b_ * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data_mut()[((b_ * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_matches_the_naive_reference() {
    let mut rng = CounterRng::new(11);
    let mut cases = 0;
    for n in [1, 2] {
        for cin in [1, 3, 4] {
            for cout in [1, 2, 4, 6] {
                for (k, stride, dilation) in [(3, 1, 1), (3, 1, 2), (3, 2, 1), (1, 1, 1), (3, 1, 4), (2, 2, 1), (3, 1, 12)] {
                    for extent in [1, 4, 9] {
                        for padding in [0, dilation * (k - 1) / 2] {
                            let spec = Conv2dSpec { stride, dilation, padding };
                            if spec.output_extent(extent, k).is_none() {
                                continue;
                            }
                            let x = random(&mut rng, &[n, cin, extent, extent]);
                            let w = random(&mut rng, &[cout, cin, k, k]);
                            let b = random(&mut rng, &[cout]);
                            let mut g = Graph::new();
                            let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
                            let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
                            let want = naive_conv(&x, &w, &b, spec);
                            assert_eq!(g.shape(y), want.shape());
                            let err = max_abs_diff(g.value(y).data(), want.data());
                            assert!(err <= 1e-12, "forward n{n} c{cin}->{cout} k{k} {spec:?} {extent}: {err:e}");

                            // Input and kernel gradients: the reference conv is
                            // linear in each, so ⟨dy, conv(e_i)⟩ gives every
                            // partial derivative exactly.
                            let dy = random(&mut rng, want.shape());
                            let wy = g.constant(dy.clone());
                            let prod = g.mul(y, wy).unwrap();
                            let loss = g.sum(prod);
                            let grads = g.backward(loss).unwrap();
                            let zero_b = Tensor::zeros(&[cout]);
                            for i in 0..x.len() {
                                let mut e = Tensor::zeros(x.shape());
                                e.data_mut()[i] = 1.0;
                                let want = dot(naive_conv(&e, &w, &zero_b, spec).data(), dy.data());
                                let got = grads.get(xv).unwrap().data()[i];
                                assert!((got - want).abs() <= 1e-12, "input grad {i}: {got} vs {want}");
                            }
                            for i in 0..w.len() {
                                let mut e = Tensor::zeros(w.shape());
                                e.data_mut()[i] = 1.0;
                                let want = dot(naive_conv(&x, &e, &zero_b, spec).data(), dy.data());
                                let got = grads.get(wv).unwrap().data()[i];
                                assert!((got - want).abs() <= 1e-12, "kernel grad {i}: {got} vs {want}");
                            }
                            let [_, _, ho, wo] = want.dims4().unwrap();
                            for co in 0..cout {
                                let want: f64 = (0..n).flat_map(|b_| (0..ho * wo).map(move |p| ((b_ * cout + co) * ho * wo) + p)).map(|i| dy.data()[i]).sum();
                                let got = grads.get(bv).unwrap().data()[co];
                                assert!((got - want).abs() <= 1e-12, "bias grad {co}");
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 300, "only {cases} configurations ran");
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, k, None, Conv2dSpec::UNIT).is_err());
    let k = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(g.conv2d(x, k, None, Conv2dSpec::UNIT).is_err());
    let k = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.conv2d(x, k, Some(b), Conv2dSpec::same(3, 1)).is_err());
}

#[test]
fn upsample_worked_example() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 4]);
    let want = [0.0, 0.25, 0.75, 1.0];
    for row in g.value(y).data().chunks(4) {
        assert!(max_abs_diff(row, &want) <= 1e-15, "{row:?}");
    }
}

#[test]
fn upsample_preserves_constants_and_passes_the_adjoint_test() {
    let mut rng = CounterRng::new(5);
    for &(shape, factor) in &[([1, 1, 3, 5], 2), ([2, 3, 4, 4], 2), ([1, 2, 1, 1], 4), ([1, 1, 6, 10], 16), ([2, 2, 3, 2], 3)] {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&shape, 0.37));
        let up = g.upsample_bilinear(c, factor).unwrap();
        assert!(g.value(up).data().iter().all(|v| (v - 0.37).abs() <= 1e-15));

        let x = random(&mut rng, &shape);
        let xv = g.param(x.clone());
        let ax = g.upsample_bilinear(xv, factor).unwrap();
        let y = random(&mut rng, g.shape(ax));
        let yv = g.constant(y.clone());
        let prod = g.mul(ax, yv).unwrap();
        let loss = g.sum(prod);
        let aty = g.backward(loss).unwrap().get(xv).unwrap().clone();
        let lhs = dot(g.value(ax).data(), y.data());
        let rhs = dot(x.data(), aty.data());
        assert!((lhs - rhs).abs() <= 1e-10, "{shape:?} x{factor}: {lhs} vs {rhs}");
    }
}
