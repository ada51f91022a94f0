//! Normalization, pooling, resampling and slicing ops used by the network.

use rayon::prelude::*;

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Per-channel mean and (biased) variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

struct BatchNorm {
    normalized: Vec<Float>,
    inv_std: Vec<Float>,
    channels: usize,
    inner: usize,
    /// Whether mean and variance came from this batch (and so depend on x).
    batch_statistics: bool,
}

impl Backward for BatchNorm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], needs: &[bool]) -> Vec<Option<Vec<Float>>> {
        let (c, inner) = (self.channels, self.inner);
        let n = g.len() / (c * inner);
        let m = (n * inner) as Float;
        let gamma = inputs[1].data();

        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (i, (gv, xh)) in g.chunks_exact(inner).zip(self.normalized.chunks_exact(inner)).enumerate() {
            let ch = i % c;
            for (a, b) in gv.iter().zip(xh) {
                sum_g[ch] += a;
                sum_gx[ch] += a * b;
            }
        }

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            dx.par_chunks_mut(inner)
                .zip(g.par_chunks(inner))
                .zip(self.normalized.par_chunks(inner))
                .enumerate()
                .for_each(|(i, ((dx, gv), xh))| {
                    let ch = i % c;
                    let scale = gamma[ch] * self.inv_std[ch];
                    if self.batch_statistics {
                        let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                        for ((d, &a), &b) in dx.iter_mut().zip(gv).zip(xh) {
                            *d = scale * (a - mg - b * mgx);
                        }
                    } else {
                        for (d, &a) in dx.iter_mut().zip(gv) {
                            *d = scale * a;
                        }
                    }
                });
            dx
        });
        vec![dx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

struct MaxPool2 {
    winners: Vec<usize>,
}

impl Backward for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        for (&w, &gv) in self.winners.iter().zip(g) {
            dx[w] += gv;
        }
        vec![Some(dx)]
    }
}

struct Upsample2;

impl Backward for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample_nearest2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let mut dx = vec![0.0; inputs[0].numel()];
        for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    plane[(y / 2) * w + x / 2] += gp[y * 2 * w + x];
                }
            }
        }
        vec![Some(dx)]
    }
}

struct Narrow {
    outer: usize,
    axis_len: usize,
    start: usize,
    len: usize,
    inner: usize,
}

impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        let block = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.axis_len + self.start) * self.inner;
            dx[dst..dst + block].copy_from_slice(&g[o * block..(o + 1) * block]);
        }
        vec![Some(dx)]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        vec![Some(g.to_vec())]
    }
}

fn require_nchw(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() == 4 {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected NCHW, got {shape:?}")))
    }
}

impl Tape {
    /// Batch normalization over every axis but axis 1.
    ///
    /// With `running = None` the statistics of this batch are used and
    /// returned; otherwise the given running mean and variance are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[Float], &[Float])>,
        eps: Float,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {shape:?}")));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let data = self.value(x).data();
        let (mean, var, batch_statistics) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let count = (data.len() / c) as Float;
                let mut mean = vec![0.0; c];
                for (i, chunk) in data.chunks_exact(inner).enumerate() {
                    mean[i % c] += chunk.iter().sum::<Float>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; c];
                for (i, chunk) in data.chunks_exact(inner).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<Float>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
        };
        let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for (i, ((xs, ns), os)) in data
            .chunks_exact(inner)
            .zip(normalized.chunks_exact_mut(inner))
            .zip(out.chunks_exact_mut(inner))
            .enumerate()
        {
            let ch = i % c;
            for ((&xv, nv), ov) in xs.iter().zip(ns.iter_mut()).zip(os.iter_mut()) {
                *nv = (xv - mean[ch]) * inv_std[ch];
                *ov = gm[ch] * *nv + bt[ch];
            }
        }
        let stats = batch_statistics.then(|| BatchStats { mean, var });
        let v = self.record(
            &[x, gamma, beta],
            Tensor::from_parts(shape, out),
            BatchNorm {
                normalized,
                inv_std,
                channels: c,
                inner,
                batch_statistics,
            },
        )?;
        Ok((v, stats))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        require_nchw("max_pool2d", &shape)?;
        let (h, w) = (shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2d", format!("odd spatial size {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(x).data();
        let planes = shape[0] * shape[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut winners = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    winners.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![shape[0], shape[1], oh, ow], out);
        self.record(&[x], value, MaxPool2 { winners })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        require_nchw("upsample_nearest2d", &shape)?;
        let (h, w) = (shape[2], shape[3]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(data.len() * 4);
        for plane in data.chunks_exact(h * w) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.push(plane[(y / 2) * w + x / 2]);
                }
            }
        }
        let value = Tensor::from_parts(vec![shape[0], shape[1], 2 * h, 2 * w], out);
        self.record(&[x], value, Upsample2)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} of axis with {} entries", start + len, shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let block = len * inner;
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            let src = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[src..src + block]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let op = Narrow {
            outer,
            axis_len: shape[axis],
            start,
            len,
            inner,
        };
        self.record(&[x], Tensor::from_parts(out_shape, out), op)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.record(&[x], value, Reshape)
    }
}
