//! Raw forward/backward loops behind the differentiable ops.
//!
//! Everything here works on flat NHWC slices. Parallel loops only split
//! over the batch axis and each worker writes a disjoint output slice, so
//! results do not depend on the thread count.

use rayon::prelude::*;

/// Geometry of a 2-D convolution from an `(n, ih, iw, ic)` input to an
/// `(n, oh, ow, oc)` output with `(oc, ic, kh, kw)` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ih: usize,
    pub iw: usize,
    pub ic: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// "Same" padding: `ceil(in / stride)` outputs, zero padding split
    /// evenly with the odd pixel going to the bottom/right.
    #[allow(clippy::too_many_arguments)]
    pub fn same(n: usize, ih: usize, iw: usize, ic: usize, oc: usize, k: usize, stride: usize) -> Self {
        let oh = ih.div_ceil(stride);
        let ow = iw.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + k).saturating_sub(ih);
        let pad_w = ((ow - 1) * stride + k).saturating_sub(iw);
        Self {
            n,
            ih,
            iw,
            ic,
            oc,
            kh: k,
            kw: k,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            oh,
            ow,
        }
    }

    /// No padding; caller guarantees `k <= ih, iw`.
    #[allow(clippy::too_many_arguments)]
    pub fn valid(n: usize, ih: usize, iw: usize, ic: usize, oc: usize, k: usize, stride: usize) -> Self {
        Self {
            n,
            ih,
            iw,
            ic,
            oc,
            kh: k,
            kw: k,
            stride,
            pad_top: 0,
            pad_left: 0,
            oh: (ih - k) / stride + 1,
            ow: (iw - k) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.ic
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn input_len(&self) -> usize {
        self.ih * self.iw * self.ic
    }

    pub fn output_len(&self) -> usize {
        self.oh * self.ow * self.oc
    }
}

/// `(oc, ic, kh, kw)` weights to a `(kh*kw*ic) x oc` row-major matrix.
fn weights_to_matrix(g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let k = g.patch_len();
    let mut m = vec![0.0; k * g.oc];
    for o in 0..g.oc {
        for c in 0..g.ic {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ky * g.kw + kx) * g.ic + c;
                    m[row * g.oc + o] = w[((o * g.ic + c) * g.kh + ky) * g.kw + kx];
                }
            }
        }
    }
    m
}

fn matrix_to_weights(g: &ConvGeom, m: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; g.oc * g.ic * g.kh * g.kw];
    for o in 0..g.oc {
        for c in 0..g.ic {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ky * g.kw + kx) * g.ic + c;
                    w[((o * g.ic + c) * g.kh + ky) * g.kw + kx] = m[row * g.oc + o];
                }
            }
        }
    }
    w
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let k = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.ic..(ky * g.kw + kx + 1) * g.ic];
                    if iy < 0 || ix < 0 || iy >= g.ih as isize || ix >= g.iw as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.iw + ix as usize) * g.ic;
                        dst.copy_from_slice(&x[src..src + g.ic]);
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let k = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.ih as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.iw as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.iw + ix as usize) * g.ic;
                    let src = &row[(ky * g.kw + kx) * g.ic..(ky * g.kw + kx + 1) * g.ic];
                    for (d, s) in dx[dst..dst + g.ic].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c = a (m x k) * b (k x n)`, or `c = a^T * b` / `a * b^T` via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the callers size `a`, `b`, `c` to cover every index reachable
    // through the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let wm = weights_to_matrix(g, w);
    let (k, p) = (g.patch_len(), g.positions());
    let mut y = vec![0.0; g.n * g.output_len()];
    y.par_chunks_mut(g.output_len().max(1))
        .zip(x.par_chunks(g.input_len().max(1)))
        .for_each(|(yn, xn)| {
            let mut cols = vec![0.0; p * k];
            im2col(g, xn, &mut cols);
            gemm(p, k, g.oc, &cols, k as isize, 1, &wm, g.oc as isize, 1, yn, false);
        });
    y
}

/// Gradient of the convolution with respect to its input.
pub fn conv_backward_input(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let wm = weights_to_matrix(g, w);
    let (k, p) = (g.patch_len(), g.positions());
    let mut dx = vec![0.0; g.n * g.input_len()];
    dx.par_chunks_mut(g.input_len().max(1))
        .zip(dy.par_chunks(g.output_len().max(1)))
        .for_each(|(dxn, dyn_)| {
            let mut dcols = vec![0.0; p * k];
            // dcols (p x k) = dy (p x oc) * wm^T (oc x k)
            gemm(p, g.oc, k, dyn_, g.oc as isize, 1, &wm, 1, g.oc as isize, &mut dcols, false);
            col2im(g, &dcols, dxn);
        });
    dx
}

/// Gradient of the convolution with respect to its `(oc, ic, kh, kw)` weights.
pub fn conv_backward_weight(g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.positions());
    let mut dwm = vec![0.0; k * g.oc];
    let mut cols = vec![0.0; p * k];
    for (xn, dyn_) in x
        .chunks(g.input_len().max(1))
        .zip(dy.chunks(g.output_len().max(1)))
        .take(g.n)
    {
        im2col(g, xn, &mut cols);
        // dwm (k x oc) += cols^T (k x p) * dy (p x oc)
        gemm(k, p, g.oc, &cols, 1, k as isize, dyn_, g.oc as isize, 1, &mut dwm, true);
    }
    matrix_to_weights(g, &dwm)
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub n: usize,
    pub ih: usize,
    pub iw: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(n: usize, ih: usize, iw: usize, c: usize, window: usize, stride: usize) -> Self {
        Self {
            n,
            ih,
            iw,
            c,
            window,
            stride,
            oh: (ih - window) / stride + 1,
            ow: (iw - window) / stride + 1,
        }
    }
}

/// Window maxima plus the flat input index each came from. Ties keep the
/// first position in row-major window order.
pub fn maxpool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let out_len = g.n * g.oh * g.ow * g.c;
    let mut y = vec![f64::NEG_INFINITY; out_len];
    let mut arg = vec![0usize; out_len];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for ch in 0..g.c {
                    let o = ((b * g.oh + oy) * g.ow + ox) * g.c + ch;
                    for wy in 0..g.window {
                        for wx in 0..g.window {
                            let iy = oy * g.stride + wy;
                            let ix = ox * g.stride + wx;
                            let i = ((b * g.ih + iy) * g.iw + ix) * g.c + ch;
                            if x[i] > y[o] {
                                y[o] = x[i];
                                arg[o] = i;
                            }
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

/// Nearest-neighbour upsampling of an NHWC buffer by an integer factor.
pub fn upsample_forward(x: &[f64], n: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut y = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((b * h + oy / f) * w + ox / f) * c;
                let dst = ((b * oh + oy) * ow + ox) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &[f64], n: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * h + oy / f) * w + ox / f) * c;
                let src = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    dx[dst + ch] += dy[src + ch];
                }
            }
        }
    }
    dx
}

/// Geometry shared by the involution-family kernels: `(n, h, w, c)`
/// features, an `f x f` window, and `groups` channel groups.
#[derive(Clone, Copy, Debug)]
pub struct InvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub f: usize,
    pub groups: usize,
}

impl InvGeom {
    fn taps(&self) -> usize {
        self.f * self.f
    }

    fn group_of(&self, ch: usize) -> usize {
        ch * self.groups / self.c
    }
}

/// `out[i,j,k] = sum_t kern[i,j,t,g(k)] * wt[i,j,t] * x[(i,j)+off(t), k]`
/// with zero padding. `wt` defaults to all ones.
pub fn involution_forward(g: &InvGeom, x: &[f64], kern: &[f64], wt: Option<&[f64]>) -> Vec<f64> {
    let (taps, r) = (g.taps(), (g.f / 2) as isize);
    let per = g.h * g.w * g.c;
    let mut out = vec![0.0; g.n * per];
    out.par_chunks_mut(per.max(1)).enumerate().for_each(|(b, ob)| {
        for i in 0..g.h {
            for j in 0..g.w {
                let pos = (b * g.h + i) * g.w + j;
                let kb = &kern[pos * taps * g.groups..(pos + 1) * taps * g.groups];
                for t in 0..taps {
                    let yy = i as isize + (t / g.f) as isize - r;
                    let xx = j as isize + (t % g.f) as isize - r;
                    if yy < 0 || xx < 0 || yy >= g.h as isize || xx >= g.w as isize {
                        continue;
                    }
                    let wv = wt.map_or(1.0, |w| w[pos * taps + t]);
                    let src = ((b * g.h + yy as usize) * g.w + xx as usize) * g.c;
                    let dst = (i * g.w + j) * g.c;
                    for k in 0..g.c {
                        ob[dst + k] += kb[t * g.groups + g.group_of(k)] * wv * x[src + k];
                    }
                }
            }
        }
    });
    out
}

/// Returns `(d_input, d_kernels)`.
pub fn involution_backward(
    g: &InvGeom,
    x: &[f64],
    kern: &[f64],
    wt: Option<&[f64]>,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (taps, r) = (g.taps(), (g.f / 2) as isize);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kern.len()];
    for b in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let pos = (b * g.h + i) * g.w + j;
                let dst = pos * g.c;
                for t in 0..taps {
                    let yy = i as isize + (t / g.f) as isize - r;
                    let xx = j as isize + (t % g.f) as isize - r;
                    if yy < 0 || xx < 0 || yy >= g.h as isize || xx >= g.w as isize {
                        continue;
                    }
                    let wv = wt.map_or(1.0, |w| w[pos * taps + t]);
                    let src = ((b * g.h + yy as usize) * g.w + xx as usize) * g.c;
                    for k in 0..g.c {
                        let kidx = pos * taps * g.groups + t * g.groups + g.group_of(k);
                        let gout = dy[dst + k];
                        dk[kidx] += gout * wv * x[src + k];
                        dx[src + k] += gout * wv * kern[kidx];
                    }
                }
            }
        }
    }
    (dx, dk)
}
