//! Dense row-major `f64` tensors and the raw kernels behind the graph ops.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Shape(format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents as `[n, c, h, w]`; fails unless the tensor is 4-D.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!("expected a 4-D tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const UNIT: Conv2dSpec = Conv2dSpec { stride: 1, dilation: 1, padding: 0 };

    /// Stride 1 with "same" padding for a `k×k` kernel at the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dSpec { stride: 1, dilation, padding: dilation * (kernel - 1) / 2 }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(Error::Shape(format!(
                "conv2d needs 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::Shape("conv2d stride and dilation must be at least 1".into()));
        }
        let (Some(ho), Some(wo)) = (spec.output_extent(h, kh), spec.output_extent(w, kw)) else {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} (dilation {}) does not fit input {h}x{w} with padding {}",
                spec.dilation, spec.padding
            )));
        };
        Ok(ConvGeometry { n, cin, h, w, cout, kh, kw, ho, wo, spec })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Few output channels at stride 1: im2col would mostly copy memory, so
    /// the kernel is applied tap by tap as shifted row updates instead.
    fn is_direct(&self) -> bool {
        self.spec.stride == 1 && self.cout <= 4 && !self.is_pointwise()
    }

    /// For one kernel tap: the valid output rows and columns and the input
    /// offset `(dy, dx)` they read from.
    fn tap_window(&self, ky: usize, kx: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, isize, isize) {
        let d = self.spec.dilation as isize;
        let pad = self.spec.padding as isize;
        let (dy, dx) = (ky as isize * d - pad, kx as isize * d - pad);
        let span = |off: isize, out: usize, len: usize| {
            let lo = (-off).max(0) as usize;
            let hi = ((len as isize - off).max(0) as usize).min(out);
            lo.min(hi)..hi
        };
        (span(dy, self.ho, self.h), span(dx, self.wo, self.w), dy, dx)
    }

    fn direct_forward(&self, image: &[f64], kernel: &[f64], out: &mut [f64]) {
        let (hw, p) = (self.h * self.w, self.out_pixels());
        for co in 0..self.cout {
            let dst = &mut out[co * p..(co + 1) * p];
            for ci in 0..self.cin {
                let plane = &image[ci * hw..(ci + 1) * hw];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wgt = kernel[((co * self.cin + ci) * self.kh + ky) * self.kw + kx];
                        let (rows, cols, dy, dx) = self.tap_window(ky, kx);
                        if cols.is_empty() {
                            continue;
                        }
                        for oy in rows {
                            let iy = (oy as isize + dy) as usize;
                            let ix0 = (cols.start as isize + dx) as usize;
                            let src = &plane[iy * self.w + ix0..iy * self.w + ix0 + cols.len()];
                            let line = &mut dst[oy * self.wo + cols.start..oy * self.wo + cols.end];
                            for (o, &v) in line.iter_mut().zip(src) {
                                *o += wgt * v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct_backward(&self, image: &[f64], kernel: &[f64], up: &[f64], mut dk: Option<&mut [f64]>, mut di: Option<&mut [f64]>) {
        let (hw, p) = (self.h * self.w, self.out_pixels());
        for co in 0..self.cout {
            let g = &up[co * p..(co + 1) * p];
            for ci in 0..self.cin {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let ki = ((co * self.cin + ci) * self.kh + ky) * self.kw + kx;
                        let (rows, cols, dy, dx) = self.tap_window(ky, kx);
                        if rows.is_empty() || cols.is_empty() {
                            continue;
                        }
                        let ix0 = (cols.start as isize + dx) as usize;
                        let mut acc = 0.0;
                        for oy in rows {
                            let iy = (oy as isize + dy) as usize;
                            let at = ci * hw + iy * self.w + ix0;
                            let line = &g[oy * self.wo + cols.start..oy * self.wo + cols.end];
                            if dk.is_some() {
                                let src = &image[at..at + cols.len()];
                                acc += dot(line, src);
                            }
                            if let Some(di) = di.as_deref_mut() {
                                let wgt = kernel[ki];
                                for (d, &u) in di[at..at + cols.len()].iter_mut().zip(line) {
                                    *d += wgt * u;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[ki] += acc;
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Unfolds one image into a `[cin·kh·kw, ho·wo]` column matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let Conv2dSpec { stride, dilation, padding } = self.spec;
        let p = self.out_pixels();
        for c in 0..self.cin {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            *out = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters a column matrix back onto an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let Conv2dSpec { stride, dilation, padding } = self.spec;
        let p = self.out_pixels();
        for c in 0..self.cin {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Inner product with four independent partial sums so the loop pipelines.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` where each operand is given with its row
/// and column strides, so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices that cover every index addressed by the
    // stated extents and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    geo: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (k, p) = (geo.patch(), geo.out_pixels());
    let in_stride = geo.cin * geo.h * geo.w;
    let out_stride = geo.cout * p;
    let mut out = vec![0.0; geo.n * out_stride];
    let direct = geo.is_direct();
    let mut cols = if geo.is_pointwise() || direct { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..geo.n {
        let image = &input[b * in_stride..(b + 1) * in_stride];
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                row.fill(bias[co]);
            }
        }
        if direct {
            geo.direct_forward(image, kernel, dst);
            continue;
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let cols: &[f64] = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut cols);
            &cols
        };
        gemm(geo.cout, k, p, kernel, (k, 1), cols, (p, 1), beta, dst);
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (geo.patch(), geo.out_pixels());
    let in_stride = geo.cin * geo.h * geo.w;
    let out_stride = geo.cout * p;
    let mut d_input = need.0.then(|| vec![0.0; input.len()]);
    let mut d_kernel = need.1.then(|| vec![0.0; kernel.len()]);
    let d_bias = need.2.then(|| {
        let mut db = vec![0.0; geo.cout];
        for b in 0..geo.n {
            let up = &upstream[b * out_stride..(b + 1) * out_stride];
            for (co, row) in up.chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        db
    });
    let pointwise = geo.is_pointwise();
    let direct = geo.is_direct();
    let mut cols = if pointwise || direct { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..geo.n {
        let image = &input[b * in_stride..(b + 1) * in_stride];
        let up = &upstream[b * out_stride..(b + 1) * out_stride];
        if direct {
            let di = d_input.as_mut().map(|d| &mut d[b * in_stride..(b + 1) * in_stride]);
            geo.direct_backward(image, kernel, up, d_kernel.as_deref_mut(), di);
            continue;
        }
        if let Some(dk) = d_kernel.as_mut() {
            let cols: &[f64] = if pointwise {
                image
            } else {
                geo.im2col(image, &mut cols);
                &cols
            };
            // dK[cout×k] += dOut[cout×p] · colsᵀ[p×k]
            gemm(geo.cout, p, k, up, (p, 1), cols, (1, p), 1.0, dk);
        }
        if let Some(di) = d_input.as_mut() {
            let dst = &mut di[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(k, geo.cout, p, kernel, (1, k), up, (p, 1), 1.0, dst);
            } else {
                // dCols[k×p] = Kᵀ[k×cout] · dOut[cout×p]
                gemm(k, geo.cout, p, kernel, (1, k), up, (p, 1), 0.0, &mut cols);
                geo.col2im(&cols, dst);
            }
        }
    }
    ConvGrads { input: d_input, kernel: d_kernel, bias: d_bias }
}

/// Interpolation taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

/// Half-pixel (non-corner-aligned) sample positions: the source coordinate of
/// output index `i` is `(i + 0.5) / factor - 0.5`, clamped to the input range.
fn taps(extent: usize, factor: usize) -> Vec<Tap> {
    (0..extent * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            Tap { lo, hi, w_hi: src - lo as f64 }
        })
        .collect()
}

pub(crate) fn upsample_forward(shape: [usize; 4], factor: usize, input: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    if factor == 1 {
        return input.to_vec();
    }
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane, dst) in input.chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
        for (oy, t) in ty.iter().enumerate() {
            let (r0, r1) = (&plane[t.lo * w..(t.lo + 1) * w], &plane[t.hi * w..(t.hi + 1) * w]);
            let line = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, s) in tx.iter().enumerate() {
                let top = r0[s.lo] + s.w_hi * (r0[s.hi] - r0[s.lo]);
                let bottom = r1[s.lo] + s.w_hi * (r1[s.hi] - r1[s.lo]);
                line[ox] = top + t.w_hi * (bottom - top);
            }
        }
    }
    out
}

/// Transpose of [`upsample_forward`].
pub(crate) fn upsample_backward(shape: [usize; 4], factor: usize, upstream: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    if factor == 1 {
        return upstream.to_vec();
    }
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * h * w];
    for (src, plane) in upstream.chunks_exact(ho * wo).zip(out.chunks_exact_mut(h * w)) {
        for (oy, t) in ty.iter().enumerate() {
            let line = &src[oy * wo..(oy + 1) * wo];
            for (ox, s) in tx.iter().enumerate() {
                let g = line[ox];
                let (gy0, gy1) = (g * (1.0 - t.w_hi), g * t.w_hi);
                plane[t.lo * w + s.lo] += gy0 * (1.0 - s.w_hi);
                plane[t.lo * w + s.hi] += gy0 * s.w_hi;
                plane[t.hi * w + s.lo] += gy1 * (1.0 - s.w_hi);
                plane[t.hi * w + s.hi] += gy1 * s.w_hi;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn output_extent_formula() {
        let spec = Conv2dSpec { stride: 2, dilation: 1, padding: 1 };
        assert_eq!(spec.output_extent(96, 3), Some(48));
        assert_eq!(spec.output_extent(7, 3), Some(4));
        assert_eq!(Conv2dSpec { stride: 1, dilation: 2, padding: 0 }.output_extent(5, 3), Some(1));
        assert_eq!(Conv2dSpec { stride: 1, dilation: 3, padding: 0 }.output_extent(5, 3), None);
    }

    #[test]
    fn half_pixel_taps() {
        let out = upsample_forward([1, 1, 1, 2], 2, &[0.0, 1.0]);
        assert_eq!(out, [0.0, 0.25, 0.75, 1.0].repeat(2));
    }
}
