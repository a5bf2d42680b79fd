//! Convolution, transposed convolution, pooling and dense kernels.
//!
//! Every forward kernel computes one output row at a time from a list of
//! input row slabs. The whole-tensor entry points loop over rows, and the
//! fused executor calls the same row functions on ring-buffered rows, so the
//! two paths accumulate each output element in the same order: bias first,
//! then input channel, kernel row, kernel column. Plain convolutions over
//! whole tensors use an unrolled-column layout with the same order, where
//! padding contributes an explicit `w·0`. Integer-valued inputs are
//! therefore bit-exact between all paths, and float results agree up to the
//! sign of zero.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Real, Scalar, Shape, Tensor};

/// Spatial geometry of a (possibly transposed) square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Extra rows/columns appended to a transposed convolution's output.
    pub output_pad: usize,
    pub transposed: bool,
}

impl ConvGeom {
    pub fn conv(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            output_pad: 0,
            transposed: false,
        }
    }

    pub fn deconv(kernel: usize, stride: usize, pad: usize, output_pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            output_pad,
            transposed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            bail!(InvalidArgument, "kernel and stride must be at least 1");
        }
        if self.pad >= self.kernel {
            bail!(InvalidArgument, "pad {} must be smaller than kernel {}", self.pad, self.kernel);
        }
        if self.transposed {
            if self.output_pad >= self.stride {
                bail!(InvalidArgument, "output_pad {} must be smaller than stride {}", self.output_pad, self.stride);
            }
        } else if self.output_pad != 0 {
            bail!(InvalidArgument, "output_pad only applies to transposed convolution");
        }
        Ok(())
    }

    /// Output extent along one spatial axis.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        if len == 0 {
            bail!(ShapeMismatch, "empty spatial extent");
        }
        if self.transposed {
            let full = (len - 1) * self.stride + self.kernel + self.output_pad;
            if full <= 2 * self.pad {
                bail!(ShapeMismatch, "transposed convolution output would be empty");
            }
            Ok(full - 2 * self.pad)
        } else {
            if len + 2 * self.pad < self.kernel {
                bail!(ShapeMismatch, "input extent {} smaller than kernel {}", len, self.kernel);
            }
            Ok((len + 2 * self.pad - self.kernel) / self.stride + 1)
        }
    }

    /// Input rows feeding output row `y`, as `(kernel_row, input_row)` with
    /// ascending kernel row.
    pub fn taps(&self, y: usize, in_len: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.kernel);
        for kh in 0..self.kernel {
            if let Some(iy) = self.tap(y, kh, in_len) {
                out.push((kh, iy));
            }
        }
        out
    }

    #[inline]
    fn tap(&self, y: usize, kh: usize, in_len: usize) -> Option<usize> {
        if self.transposed {
            let t = (y + self.pad).checked_sub(kh)?;
            if t % self.stride != 0 {
                return None;
            }
            let iy = t / self.stride;
            (iy < in_len).then_some(iy)
        } else {
            let iy = (y * self.stride + kh).checked_sub(self.pad)?;
            (iy < in_len).then_some(iy)
        }
    }

    /// Input rows a streaming consumer must hold at once.
    pub fn rows_needed(&self) -> usize {
        if self.transposed {
            self.kernel.div_ceil(self.stride)
        } else {
            self.kernel
        }
    }

    /// Whether neighbouring output rows share input rows.
    pub fn overlaps(&self) -> bool {
        self.kernel > self.stride
    }
}

/// A row of a multi-channel map: channel `c` starts at `c * channel_stride`.
#[derive(Clone, Copy)]
pub struct RowSlab<'a, S> {
    pub data: &'a [S],
    pub channel_stride: usize,
}

impl<'a, S> RowSlab<'a, S> {
    #[inline]
    pub fn channel(&self, c: usize, width: usize) -> &'a [S] {
        let start = c * self.channel_stride;
        &self.data[start..start + width]
    }
}

/// Range of `(output index or input index)` for which the kernel column `kw`
/// lands inside the valid extent. Returns `(lo, hi)` exclusive.
#[inline]
fn col_range(g: &ConvGeom, kw: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let s = g.stride;
    let p = g.pad;
    if g.transposed {
        // iterate input columns ix with x = ix*s - p + kw in [0, out_w)
        let lo = if p > kw { (p - kw).div_ceil(s) } else { 0 };
        let hi = ((out_w - 1 + p).saturating_sub(kw)) / s + 1;
        let hi = if out_w + p <= kw { 0 } else { hi.min(in_w) };
        (lo, hi.max(lo))
    } else {
        // iterate output columns x with ix = x*s + kw - p in [0, in_w)
        let lo = if p > kw { (p - kw).div_ceil(s) } else { 0 };
        let hi = if in_w + p <= kw { 0 } else { ((in_w - 1 + p - kw) / s + 1).min(out_w) };
        (lo, hi.max(lo))
    }
}

/// Computes one output row (`cout × out_w`, channel-major) of a convolution.
///
/// `taps` lists `(kernel_row, slab)` for the valid input rows, ascending in
/// kernel row. Weights are `(cout, cin, k, k)` for both plain and transposed
/// convolution.
pub fn conv_row<S: Scalar>(
    g: &ConvGeom,
    weight: &Tensor<S>,
    bias: &[S],
    in_w: usize,
    taps: &[(usize, RowSlab<'_, S>)],
    out_w: usize,
    out: &mut [S],
) {
    let ws = weight.shape();
    let (cout, cin, k) = (ws.n, ws.c, ws.h);
    let w = weight.data();
    let s = g.stride;
    for co in 0..cout {
        let dst = &mut out[co * out_w..(co + 1) * out_w];
        dst.fill(bias[co]);
        for ci in 0..cin {
            for &(kh, slab) in taps {
                let src = slab.channel(ci, in_w);
                let wrow = &w[((co * cin + ci) * k + kh) * k..][..k];
                for (kw, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = col_range(g, kw, in_w, out_w);
                    if g.transposed {
                        for ix in lo..hi {
                            let x = ix * s + kw - g.pad;
                            dst[x] += wv * src[ix];
                        }
                    } else if s == 1 {
                        let off = kw as isize - g.pad as isize;
                        for x in lo..hi {
                            dst[x] += wv * src[(x as isize + off) as usize];
                        }
                    } else {
                        for x in lo..hi {
                            dst[x] += wv * src[x * s + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Whole-tensor convolution via [`conv_row`], with optional fused ReLU.
pub fn conv_apply<S: Scalar>(
    x: &Tensor<S>,
    g: &ConvGeom,
    weight: &Tensor<S>,
    bias: &[S],
    relu: bool,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.c || ws.h != g.kernel || ws.w != g.kernel || bias.len() != ws.n {
        bail!(
            ShapeMismatch,
            "weights {} / bias {} do not fit input {} with kernel {}",
            ws,
            bias.len(),
            xs,
            g.kernel
        );
    }
    let oh = g.out_len(xs.h)?;
    let ow = g.out_len(xs.w)?;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(os);
    if !g.transposed {
        conv_columns(x, g, weight, bias, relu, &mut out);
        return Ok(out);
    }
    let mut row = vec![S::ZERO; ws.n * ow];
    let plane = xs.plane_len();
    for n in 0..xs.n {
        let sample = x.sample(n);
        for y in 0..oh {
            let taps: Vec<(usize, RowSlab<'_, S>)> = g
                .taps(y, xs.h)
                .into_iter()
                .map(|(kh, iy)| {
                    (
                        kh,
                        RowSlab {
                            data: &sample[iy * xs.w..],
                            channel_stride: plane,
                        },
                    )
                })
                .collect();
            conv_row(g, weight, bias, xs.w, &taps, ow, &mut row);
            let dst = out.sample_mut(n);
            for co in 0..ws.n {
                let r = &row[co * ow..(co + 1) * ow];
                let d = &mut dst[(co * oh + y) * ow..][..ow];
                if relu {
                    for (o, &v) in d.iter_mut().zip(r) {
                        *o = v.relu();
                    }
                } else {
                    d.copy_from_slice(r);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a (transposed) convolution with respect to its input,
/// weights and bias, given the gradient at the pre-activation output.
pub fn conv_grads<T: Real>(
    x: &Tensor<T>,
    g: &ConvGeom,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let xs = x.shape();
    let ws = weight.shape();
    let us = upstream.shape();
    let oh = g.out_len(xs.h)?;
    let ow = g.out_len(xs.w)?;
    if us != Shape::new(xs.n, ws.n, oh, ow) || ws.c != xs.c {
        bail!(ShapeMismatch, "upstream {} does not match forward output", us);
    }
    let (cout, cin, k) = (ws.n, ws.c, g.kernel);
    let mut gw = Tensor::<T>::zeros(ws);
    let mut gb = vec![T::ZERO; cout];
    let mut gx = want_input.then(|| Tensor::<T>::zeros(xs));
    if !g.transposed {
        conv_grads_columns(x, g, weight, upstream, &mut gx, &mut gw, &mut gb);
        return Ok((gx, gw, gb));
    }
    let wd = weight.data();
    let s = g.stride;
    for n in 0..xs.n {
        let xsamp = x.sample(n);
        let usamp = upstream.sample(n);
        for co in 0..cout {
            let uplane = &usamp[co * oh * ow..(co + 1) * oh * ow];
            for &v in uplane {
                gb[co] += v;
            }
            for ci in 0..cin {
                let xplane = &xsamp[ci * xs.h * xs.w..(ci + 1) * xs.h * xs.w];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                        let mut acc = T::ZERO;
                        let (lo, hi) = col_range(g, kw, xs.w, ow);
                        if g.transposed {
                            for iy in 0..xs.h {
                                let Some(y) = (iy * s + kh).checked_sub(g.pad) else { continue };
                                if y >= oh {
                                    continue;
                                }
                                let urow = &uplane[y * ow..(y + 1) * ow];
                                let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                                for ix in lo..hi {
                                    let xo = ix * s + kw - g.pad;
                                    acc += urow[xo] * xrow[ix];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let gxrow = &mut gx.sample_mut(n)[(ci * xs.h + iy) * xs.w..][..xs.w];
                                    for ix in lo..hi {
                                        let xo = ix * s + kw - g.pad;
                                        gxrow[ix] += urow[xo] * wv;
                                    }
                                }
                            }
                        } else {
                            for y in 0..oh {
                                let Some(iy) = (y * s + kh).checked_sub(g.pad) else { continue };
                                if iy >= xs.h {
                                    continue;
                                }
                                let urow = &uplane[y * ow..(y + 1) * ow];
                                let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                                for xo in lo..hi {
                                    acc += urow[xo] * xrow[xo * s + kw - g.pad];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let gxrow = &mut gx.sample_mut(n)[(ci * xs.h + iy) * xs.w..][..xs.w];
                                    for xo in lo..hi {
                                        gxrow[xo * s + kw - g.pad] += urow[xo] * wv;
                                    }
                                }
                            }
                        }
                        let gi = gw.offset(co, ci, kh, kw);
                        gw.data_mut()[gi] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0 && !g.transposed
}

/// Unrolls one sample into `(cin·k·k) × (oh·ow)` columns; padding reads as 0.
fn im2col<S: Scalar>(x: &[S], xs: Shape, g: &ConvGeom, oh: usize, ow: usize, col: &mut Vec<S>) {
    let k = g.kernel;
    let plen = oh * ow;
    col.clear();
    col.resize(xs.c * k * k * plen, S::ZERO);
    for ci in 0..xs.c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let dst = &mut col[r * plen..(r + 1) * plen];
                let (lo, hi) = col_range(g, kw, xs.w, ow);
                for y in 0..oh {
                    let Some(iy) = g.tap(y, kh, xs.h) else { continue };
                    let src = &x[(ci * xs.h + iy) * xs.w..][..xs.w];
                    let d = &mut dst[y * ow..(y + 1) * ow];
                    for xo in lo..hi {
                        d[xo] = src[xo * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
}

/// Adds unrolled-column gradients back onto the input positions they came from.
fn col2im<S: Scalar>(gcol: &[S], xs: Shape, g: &ConvGeom, oh: usize, ow: usize, gx: &mut [S]) {
    let k = g.kernel;
    let plen = oh * ow;
    for ci in 0..xs.c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let src = &gcol[r * plen..(r + 1) * plen];
                let (lo, hi) = col_range(g, kw, xs.w, ow);
                for y in 0..oh {
                    let Some(iy) = g.tap(y, kh, xs.h) else { continue };
                    let d = &mut gx[(ci * xs.h + iy) * xs.w..][..xs.w];
                    let s = &src[y * ow..(y + 1) * ow];
                    for xo in lo..hi {
                        d[xo * g.stride + kw - g.pad] += s[xo];
                    }
                }
            }
        }
    }
}

fn conv_columns<S: Scalar>(x: &Tensor<S>, g: &ConvGeom, weight: &Tensor<S>, bias: &[S], relu: bool, out: &mut Tensor<S>) {
    let xs = x.shape();
    let os = out.shape();
    let plen = os.h * os.w;
    let rlen = weight.shape().sample_len();
    let w = weight.data();
    let mut col = Vec::new();
    for n in 0..xs.n {
        let cols: &[S] = if is_pointwise(g) {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs, g, os.h, os.w, &mut col);
            &col
        };
        let dst = out.sample_mut(n);
        for co in 0..os.c {
            let d = &mut dst[co * plen..(co + 1) * plen];
            d.fill(bias[co]);
            for (r, &wv) in w[co * rlen..(co + 1) * rlen].iter().enumerate() {
                for (o, &v) in d.iter_mut().zip(&cols[r * plen..(r + 1) * plen]) {
                    *o += wv * v;
                }
            }
            if relu {
                for o in d.iter_mut() {
                    *o = o.relu();
                }
            }
        }
    }
}

/// Dot product with eight fixed accumulator lanes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = T::ZERO;
    for l in lanes {
        acc += l;
    }
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    acc
}

fn conv_grads_columns<T: Real>(
    x: &Tensor<T>,
    g: &ConvGeom,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    gx: &mut Option<Tensor<T>>,
    gw: &mut Tensor<T>,
    gb: &mut [T],
) {
    let xs = x.shape();
    let us = upstream.shape();
    let plen = us.h * us.w;
    let rlen = weight.shape().sample_len();
    let w = weight.data();
    let mut col = Vec::new();
    let mut gcol = Vec::new();
    for n in 0..xs.n {
        let cols: &[T] = if is_pointwise(g) {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs, g, us.h, us.w, &mut col);
            &col
        };
        let u = upstream.sample(n);
        let gwd = gw.data_mut();
        for co in 0..us.c {
            let urow = &u[co * plen..(co + 1) * plen];
            for &v in urow {
                gb[co] += v;
            }
            for r in 0..rlen {
                gwd[co * rlen + r] += dot(urow, &cols[r * plen..(r + 1) * plen]);
            }
        }
        if let Some(gx) = gx.as_mut() {
            gcol.clear();
            gcol.resize(rlen * plen, T::ZERO);
            for co in 0..us.c {
                let urow = &u[co * plen..(co + 1) * plen];
                for r in 0..rlen {
                    let wv = w[co * rlen + r];
                    for (d, &uv) in gcol[r * plen..(r + 1) * plen].iter_mut().zip(urow) {
                        *d += wv * uv;
                    }
                }
            }
            let gxs = gx.sample_mut(n);
            if is_pointwise(g) {
                for (d, &v) in gxs.iter_mut().zip(&gcol) {
                    *d += v;
                }
            } else {
                col2im(&gcol, xs, g, us.h, us.w, gxs);
            }
        }
    }
}

/// Convolution weights, bias and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, geom: ConvGeom) -> Result<Self> {
        geom.validate()?;
        let s = weight.shape();
        if !s.is_live() || s.h != geom.kernel || s.w != geom.kernel {
            bail!(ShapeMismatch, "weight shape {} does not match kernel {}", s, geom.kernel);
        }
        if bias.len() != s.n {
            bail!(ShapeMismatch, "bias has {} entries for {} output channels", bias.len(), s.n);
        }
        Ok(Self { weight, bias, geom })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

pub fn conv_forward<S: Scalar>(x: &Tensor<S>, p: &ConvParams<S>, act: Activation) -> Result<Tensor<S>> {
    conv_apply(x, &p.geom, &p.weight, &p.bias, act == Activation::Relu)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Backward pass for the pre-activation output of [`conv_forward`].
pub fn conv_backward<T: Real>(upstream: &Tensor<T>, x: &Tensor<T>, p: &ConvParams<T>) -> Result<ConvGrads<T>> {
    let (gx, gw, gb) = conv_grads(x, &p.geom, &p.weight, upstream, true)?;
    Ok(ConvGrads {
        input: gx.expect("requested"),
        weight: gw,
        bias: gb,
    })
}

/// Transposed convolution; `p.geom.transposed` must be set.
pub fn deconv_forward<S: Scalar>(x: &Tensor<S>, p: &ConvParams<S>, act: Activation) -> Result<Tensor<S>> {
    if !p.geom.transposed {
        bail!(InvalidArgument, "deconv_forward needs transposed geometry");
    }
    conv_forward(x, p, act)
}

pub fn deconv_backward<T: Real>(upstream: &Tensor<T>, x: &Tensor<T>, p: &ConvParams<T>) -> Result<ConvGrads<T>> {
    if !p.geom.transposed {
        bail!(InvalidArgument, "deconv_backward needs transposed geometry");
    }
    conv_backward(upstream, x, p)
}

/// Max pooling geometry. With `ceil` the output size rounds up, and a window
/// that would start past the input is dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolGeom {
    pub window: usize,
    pub stride: usize,
    pub ceil: bool,
}

impl PoolGeom {
    pub fn out_len(&self, len: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            bail!(InvalidArgument, "pool window and stride must be at least 1");
        }
        if self.window > len {
            bail!(ShapeMismatch, "pool window {} larger than input extent {}", self.window, len);
        }
        let span = len - self.window;
        let mut out = if self.ceil { span.div_ceil(self.stride) } else { span / self.stride } + 1;
        if self.ceil && (out - 1) * self.stride >= len {
            out -= 1;
        }
        Ok(out)
    }

    pub fn rows(&self, y: usize, in_len: usize) -> std::ops::Range<usize> {
        let start = y * self.stride;
        start..(start + self.window).min(in_len)
    }

    fn as_conv(&self) -> ConvGeom {
        ConvGeom::conv(self.window, self.stride, 0)
    }

    pub fn rows_needed(&self) -> usize {
        self.window
    }

    pub fn overlaps(&self) -> bool {
        self.as_conv().overlaps()
    }
}

/// One output row of max pooling; returns flat argmax offsets within the
/// input plane when `argmax` is provided. Ties keep the first index in
/// row-major window order.
pub fn maxpool_row<S: Scalar>(
    g: &PoolGeom,
    channels: usize,
    in_w: usize,
    rows: &[(usize, RowSlab<'_, S>)],
    out_w: usize,
    out: &mut [S],
) {
    for c in 0..channels {
        for x in 0..out_w {
            let x0 = x * g.stride;
            let x1 = (x0 + g.window).min(in_w);
            let mut best: Option<S> = None;
            for &(_, slab) in rows {
                let src = slab.channel(c, in_w);
                for &v in &src[x0..x1] {
                    if best.is_none_or(|b| v > b) {
                        best = Some(v);
                    }
                }
            }
            out[c * out_w + x] = best.expect("window is non-empty");
        }
    }
}

pub fn maxpool_forward<S: Scalar>(x: &Tensor<S>, window: usize, stride: usize) -> Result<Tensor<S>> {
    maxpool_apply(
        x,
        &PoolGeom {
            window,
            stride,
            ceil: false,
        },
    )
}

pub fn maxpool_apply<S: Scalar>(x: &Tensor<S>, g: &PoolGeom) -> Result<Tensor<S>> {
    let xs = x.shape();
    let oh = g.out_len(xs.h)?;
    let ow = g.out_len(xs.w)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    let mut row = vec![S::ZERO; xs.c * ow];
    for n in 0..xs.n {
        let sample = x.sample(n);
        for y in 0..oh {
            let rows: Vec<_> = g
                .rows(y, xs.h)
                .map(|iy| {
                    (
                        iy,
                        RowSlab {
                            data: &sample[iy * xs.w..],
                            channel_stride: xs.plane_len(),
                        },
                    )
                })
                .collect();
            maxpool_row(g, xs.c, xs.w, &rows, ow, &mut row);
            let dst = out.sample_mut(n);
            for c in 0..xs.c {
                dst[(c * oh + y) * ow..][..ow].copy_from_slice(&row[c * ow..(c + 1) * ow]);
            }
        }
    }
    Ok(out)
}

/// Flat argmax (within each input plane) of every pooling window.
pub fn maxpool_argmax<S: Scalar>(x: &Tensor<S>, g: &PoolGeom) -> Result<Vec<usize>> {
    let xs = x.shape();
    let oh = g.out_len(xs.h)?;
    let ow = g.out_len(xs.w)?;
    let mut idx = Vec::with_capacity(xs.n * xs.c * oh * ow);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let plane = x.plane(n, c);
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = None::<(usize, S)>;
                    for iy in g.rows(y, xs.h) {
                        for ix in xo * g.stride..(xo * g.stride + g.window).min(xs.w) {
                            let v = plane[iy * xs.w + ix];
                            if best.is_none_or(|(_, b)| v > b) {
                                best = Some((iy * xs.w + ix, v));
                            }
                        }
                    }
                    idx.push(best.expect("non-empty").0);
                }
            }
        }
    }
    Ok(idx)
}

pub fn maxpool_backward<T: Real>(upstream: &Tensor<T>, x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool_grad(
        upstream,
        x,
        &PoolGeom {
            window,
            stride,
            ceil: false,
        },
    )
}

pub fn maxpool_grad<T: Real>(upstream: &Tensor<T>, x: &Tensor<T>, g: &PoolGeom) -> Result<Tensor<T>> {
    let xs = x.shape();
    let idx = maxpool_argmax(x, g)?;
    if upstream.shape().numel() != idx.len() {
        bail!(ShapeMismatch, "upstream {} does not match pooled output", upstream.shape());
    }
    let mut gx = Tensor::zeros(xs);
    let per_plane = idx.len() / (xs.n * xs.c);
    for (plane_id, chunk) in idx.chunks(per_plane).enumerate() {
        let base = plane_id * xs.plane_len();
        for (o, &i) in chunk.iter().enumerate() {
            gx.data_mut()[base + i] += upstream.data()[plane_id * per_plane + o];
        }
    }
    Ok(gx)
}

/// Mean over each channel plane.
pub fn global_avgpool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let xs = x.shape();
    let hw = xs.plane_len() as f64;
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, 1, 1));
    for n in 0..xs.n {
        for c in 0..xs.c {
            let mut acc = S::ZERO;
            for &v in x.plane(n, c) {
                acc += v;
            }
            out.set(n, c, 0, 0, S::from_f64(acc.to_f64() / hw));
        }
    }
    out
}

pub fn global_avgpool_backward<T: Real>(upstream: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let scale = T::from_f64(1.0 / in_shape.plane_len() as f64);
    let mut gx = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = upstream.at(n, c, 0, 0) * scale;
            let start = (n * in_shape.c + c) * in_shape.plane_len();
            for v in &mut gx.data_mut()[start..start + in_shape.plane_len()] {
                *v = g;
            }
        }
    }
    gx
}

/// Dense layer over the flattened `C·H·W` sample; weight shape `(out, in, 1, 1)`.
pub fn fc_forward<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &[S]) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.sample_len() || bias.len() != ws.n {
        bail!(ShapeMismatch, "dense weights {} do not fit input {}", ws, xs);
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
    for n in 0..xs.n {
        let xin = x.sample(n);
        for o in 0..ws.n {
            let mut acc = bias[o];
            for (&w, &v) in weight.data()[o * ws.c..(o + 1) * ws.c].iter().zip(xin) {
                acc += w * v;
            }
            out.set(n, o, 0, 0, acc);
        }
    }
    Ok(out)
}

pub fn fc_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let xs = x.shape();
    let ws = weight.shape();
    if upstream.shape() != Shape::new(xs.n, ws.n, 1, 1) {
        bail!(ShapeMismatch, "upstream {} does not match dense output", upstream.shape());
    }
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = vec![T::ZERO; ws.n];
    for n in 0..xs.n {
        let xin = x.sample(n);
        for o in 0..ws.n {
            let g = upstream.at(n, o, 0, 0);
            gb[o] += g;
            let wrow = &weight.data()[o * ws.c..(o + 1) * ws.c];
            let gwrow = &mut gw.data_mut()[o * ws.c..(o + 1) * ws.c];
            for i in 0..ws.c {
                gwrow[i] += g * xin[i];
            }
            let gxs = gx.sample_mut(n);
            for i in 0..ws.c {
                gxs[i] += g * wrow[i];
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Frozen batch-norm statistics, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm {
    pub fn apply<T: Real>(&self, x: &Tensor<T>, eps: f64) -> Tensor<T> {
        let s = x.shape();
        let mut out = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let inv = self.gamma[c] / (self.var[c] + eps).sqrt();
                let start = (n * s.c + c) * s.plane_len();
                for v in &mut out.data_mut()[start..start + s.plane_len()] {
                    *v = T::from_f64((v.to_f64() - self.mean[c]) * inv + self.beta[c]);
                }
            }
        }
        out
    }
}

/// Merges a frozen batch norm into the preceding convolution:
/// `W' = W·γ/√(var+ε)`, `b' = (b − mean)·γ/√(var+ε) + β`.
pub fn fold_batchnorm<T: Real>(conv: &ConvParams<T>, bn: &BatchNorm, eps: f64) -> Result<ConvParams<T>> {
    let cout = conv.out_channels();
    for v in [&bn.mean, &bn.var, &bn.gamma, &bn.beta] {
        if v.len() != cout {
            bail!(ShapeMismatch, "batch-norm has {} channels, conv has {}", v.len(), cout);
        }
    }
    let mut weight = conv.weight.clone();
    let mut bias = conv.bias.clone();
    let per_out = weight.shape().sample_len();
    for c in 0..cout {
        let denom = bn.var[c] + eps;
        if !(denom.is_finite() && denom > 0.0) || !bn.mean[c].is_finite() || !bn.gamma[c].is_finite() || !bn.beta[c].is_finite() {
            bail!(InvalidArgument, "batch-norm channel {} has var+eps = {} or non-finite stats", c, denom);
        }
        let factor = bn.gamma[c] / denom.sqrt();
        for w in &mut weight.data_mut()[c * per_out..(c + 1) * per_out] {
            *w = T::from_f64(w.to_f64() * factor);
        }
        bias[c] = T::from_f64((bias[c].to_f64() - bn.mean[c]) * factor + bn.beta[c]);
    }
    ConvParams::new(weight, bias, conv.geom)
}
