//! 2-D convolutions in NCHW layout.
//!
//! Dense convolution lowers each sample to a patch matrix (im2col) and
//! multiplies it by the kernel. The multiply accumulates every output in
//! kernel-index order, so a convolution whose kernel covers the whole input
//! is bit-identical to a plain row-major weighted sum.

use rayon::prelude::*;

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Output size `ceil(in / stride)`; padding split as evenly as possible,
    /// the extra cell going to the bottom/right.
    #[default]
    Same,
    /// No padding; output size `(in - k) / stride + 1`.
    Valid,
}

/// Output size and leading pad of one spatial dimension.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

/// `c += a * b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[Float], b: &[Float], c: &mut [Float]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut rows = c.chunks_exact_mut(n);
    let mut i = 0;
    // Four output rows per pass share each load of `b`.
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let (a0, a1, a2, a3) = (
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            );
            for ((((bv, x0), x1), x2), x3) in brow
                .iter()
                .zip(c0.iter_mut())
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += 4;
    }
    for crow in rows {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (x, bv) in crow.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
        i += 1;
    }
}

fn transpose(rows: usize, cols: usize, src: &[Float]) -> Vec<Float> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(shape: &[usize], kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (h, w) = (shape[2], shape[3]);
        let (oh, pad_t) = conv2d_output_size(h, kh, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh} stride {stride} on height {h}")))?;
        let (ow, pad_l) = conv2d_output_size(w, kw, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kw} stride {stride} on width {w}")))?;
        Ok(Geometry {
            channels: shape[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad_t,
            pad_l,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Whether the patch matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_t == 0 && self.pad_l == 0
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if inside the input.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < limit)
    }

    fn im2col(&self, x: &[Float], cols: &mut [Float]) {
        let p = self.out_pixels();
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ki, self.pad_t, self.h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kj, self.pad_l, self.w) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[Float], dx: &mut [Float]) {
        let p = self.out_pixels();
        for c in 0..self.channels {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ki, self.pad_t, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kj, self.pad_l, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(input: &[usize], kernel: &[usize], bias: Option<&[usize]>) -> Result<()> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected NCHW input and OIHW kernel, got {input:?} and {kernel:?}"),
        ));
    }
    if input[1] != kernel[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", input[1], kernel[1]),
        ));
    }
    if let Some(b) = bias {
        if b != [kernel[0]] {
            return Err(Error::shape("conv2d", format!("bias {b:?} for {} filters", kernel[0])));
        }
    }
    Ok(())
}

/// Forward convolution. Returns the output and, unless the patch matrix is
/// the input itself, the per-sample patch matrices.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Option<Vec<Float>>)> {
    check_conv_shapes(input.shape(), kernel.shape(), bias.map(|b| b.shape()))?;
    let ks = kernel.shape();
    let geo = Geometry::new(input.shape(), ks[2], ks[3], stride, padding)?;
    let n = input.shape()[0];
    let cout = ks[0];
    let (kl, p) = (geo.patch_len(), geo.out_pixels());
    let in_len = geo.channels * geo.h * geo.w;

    let cols = (!geo.is_pointwise()).then(|| {
        let mut cols = vec![0.0; n * kl * p];
        cols.par_chunks_mut(kl * p)
            .zip(input.data().par_chunks(in_len))
            .for_each(|(c, x)| geo.im2col(x, c));
        cols
    });
    let patches = cols.as_deref().unwrap_or(input.data());

    let mut out = vec![0.0; n * cout * p];
    out.par_chunks_mut(cout * p)
        .zip(patches.par_chunks(kl * p))
        .for_each(|(o, c)| {
            gemm_acc(cout, kl, p, kernel.data(), c, o);
            if let Some(b) = bias {
                for (row, &bv) in o.chunks_exact_mut(p).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok((Tensor::from_parts(vec![n, cout, geo.oh, geo.ow], out), cols))
}

struct Conv2d {
    geo: Geometry,
    cols: Option<Vec<Float>>,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], needs: &[bool]) -> Vec<Option<Vec<Float>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let geo = self.geo;
        let cout = kernel.shape()[0];
        let (kl, p) = (geo.patch_len(), geo.out_pixels());
        let in_len = geo.channels * geo.h * geo.w;
        let patches = self.cols.as_deref().unwrap_or(x.data());

        let dx = needs[0].then(|| {
            let kt = transpose(cout, kl, kernel.data());
            let mut dx = vec![0.0; x.numel()];
            dx.par_chunks_mut(in_len)
                .zip(g.par_chunks(cout * p))
                .for_each(|(dx, go)| {
                    if geo.is_pointwise() {
                        gemm_acc(kl, cout, p, &kt, go, dx);
                    } else {
                        let mut dcols = vec![0.0; kl * p];
                        gemm_acc(kl, cout, p, &kt, go, &mut dcols);
                        geo.col2im(&dcols, dx);
                    }
                });
            dx
        });

        let dk = needs[1].then(|| {
            let partial: Vec<Vec<Float>> = patches
                .par_chunks(kl * p)
                .zip(g.par_chunks(cout * p))
                .map(|(c, go)| {
                    let ct = transpose(kl, p, c);
                    let mut dk = vec![0.0; cout * kl];
                    gemm_acc(cout, p, kl, go, &ct, &mut dk);
                    dk
                })
                .collect();
            sum_in_order(partial, cout * kl)
        });

        let mut grads = vec![dx, dk];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut db = vec![0.0; cout];
                for go in g.chunks_exact(cout * p) {
                    for (d, row) in db.iter_mut().zip(go.chunks_exact(p)) {
                        *d += row.iter().sum::<Float>();
                    }
                }
                db
            });
            grads.push(db);
        }
        grads
    }
}

/// Sums per-sample partial results in sample order.
fn sum_in_order(parts: Vec<Vec<Float>>, len: usize) -> Vec<Float> {
    let mut acc = vec![0.0; len];
    for part in parts {
        acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    acc
}

struct DepthwiseConv2d {
    geo: Geometry,
}

impl DepthwiseConv2d {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let geo = self.geo;
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                for ki in 0..geo.kh {
                    let Some(iy) = geo.src(oy, ki, geo.pad_t, geo.h) else { continue };
                    for kj in 0..geo.kw {
                        if let Some(ix) = geo.src(ox, kj, geo.pad_l, geo.w) {
                            f(oy * geo.ow + ox, iy * geo.w + ix, ki * geo.kw + kj);
                        }
                    }
                }
            }
        }
    }
}

impl Backward for DepthwiseConv2d {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], needs: &[bool]) -> Vec<Option<Vec<Float>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let geo = self.geo;
        let c = geo.channels;
        let (plane, oplane, taps) = (geo.h * geo.w, geo.out_pixels(), geo.kh * geo.kw);

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.numel()];
            dx.par_chunks_mut(plane)
                .zip(g.par_chunks(oplane))
                .enumerate()
                .for_each(|(nc, (dx, go))| {
                    let k = &kernel.data()[(nc % c) * taps..(nc % c + 1) * taps];
                    self.for_each_tap(|o, i, t| dx[i] += go[o] * k[t]);
                });
            dx
        });

        let dk = needs[1].then(|| {
            let partial: Vec<Vec<Float>> = x
                .data()
                .par_chunks(plane * c)
                .zip(g.par_chunks(oplane * c))
                .map(|(xs, gs)| {
                    let mut dk = vec![0.0; c * taps];
                    for ch in 0..c {
                        let xp = &xs[ch * plane..(ch + 1) * plane];
                        let gp = &gs[ch * oplane..(ch + 1) * oplane];
                        let dkc = &mut dk[ch * taps..(ch + 1) * taps];
                        self.for_each_tap(|o, i, t| dkc[t] += gp[o] * xp[i]);
                    }
                    dk
                })
                .collect();
            sum_in_order(partial, c * taps)
        });
        vec![dx, dk]
    }
}

impl Tape {
    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (value, cols) = conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let ks = self.shape(kernel);
        let geo = Geometry::new(self.shape(input), ks[2], ks[3], stride, padding)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let cols = if inputs.iter().any(|&v| self.requires_grad(v)) { cols } else { None };
        self.record(
            &inputs,
            value,
            Conv2d {
                geo,
                cols,
                has_bias: bias.is_some(),
            },
        )
    }

    /// Per-channel convolution with a `C×1×kh×kw` kernel.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.len() != 4 || ks.len() != 4 || ks[1] != 1 || ks[0] != xs[1] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {xs:?} with kernel {ks:?}"),
            ));
        }
        let geo = Geometry::new(xs, ks[2], ks[3], stride, padding)?;
        let op = DepthwiseConv2d { geo };
        let c = geo.channels;
        let (plane, oplane, taps) = (geo.h * geo.w, geo.out_pixels(), geo.kh * geo.kw);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let n = xs[0];
        let mut out = vec![0.0; n * c * oplane];
        out.par_chunks_mut(oplane)
            .zip(x.par_chunks(plane))
            .enumerate()
            .for_each(|(nc, (o, xp))| {
                let kc = &k[(nc % c) * taps..(nc % c + 1) * taps];
                op.for_each_tap(|oi, ii, t| o[oi] += kc[t] * xp[ii]);
            });
        let value = Tensor::from_parts(vec![n, c, geo.oh, geo.ow], out);
        self.record(&[input, kernel], value, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(input: Tensor, kernel: Tensor, padding: Padding) -> Tensor {
        conv2d_forward(&input, &kernel, None, 1, padding).unwrap().0
    }

    #[test]
    fn pointwise_scaling_kernel() {
        let out = run(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::full(&[1, 1, 1, 1], 2.0), Padding::Valid);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_support_kernel_sums_input() {
        let input = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as Float).collect()).unwrap();
        let out = run(input, Tensor::full(&[1, 1, 3, 3], 1.0), Padding::Valid);
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.item(), 45.0);
    }

    #[test]
    fn same_padding_sizes() {
        assert_eq!(conv2d_output_size(5, 3, 1, Padding::Same), Some((5, 1)));
        assert_eq!(conv2d_output_size(5, 3, 2, Padding::Same), Some((3, 1)));
        assert_eq!(conv2d_output_size(64, 3, 2, Padding::Same), Some((32, 0)));
        assert_eq!(conv2d_output_size(8, 3, 1, Padding::Valid), Some((6, 0)));
        assert_eq!(conv2d_output_size(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn channel_mismatch() {
        let r = conv2d_forward(&Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1, 3, 1, 1]), None, 1, Padding::Same);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (6, 5, 7);
        let a: Vec<Float> = (0..m * k).map(|v| (v as Float * 0.37).sin()).collect();
        let b: Vec<Float> = (0..k * n).map(|v| (v as Float * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                assert_eq!(c[i * n + j], s);
            }
        }
    }
}
