//! Spatial softmax, soft-argmax and joint presence probability.
//!
//! Maps are stored row-major as `H×W` (row = y). Ramp weights follow the
//! 1-based convention `x = i / W`, `y = j / H` with `i ∈ 1..=W`,
//! `j ∈ 1..=H`, so every soft-argmax output lies in `(0, 1]²`.

use crate::autodiff::{Backward, Padding, ReduceOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Float, Tensor};

/// Normalized coordinate ramps of a `W×H` map.
#[derive(Clone, Debug, PartialEq)]
pub struct RampWeights {
    width: usize,
    height: usize,
}

impl RampWeights {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "empty ramp");
        RampWeights { width, height }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Horizontal ramp value of column `i` (1-based).
    pub fn x(&self, i: usize) -> Float {
        i as Float / self.width as Float
    }

    /// Vertical ramp value of row `j` (1-based).
    pub fn y(&self, j: usize) -> Float {
        j as Float / self.height as Float
    }

    /// Both ramps laid out like the map, `[wx, wy]`, each `H×W` row-major.
    pub fn planes(&self) -> [Vec<Float>; 2] {
        let n = self.width * self.height;
        let wx = (0..n).map(|k| self.x(k % self.width + 1)).collect();
        let wy = (0..n).map(|k| self.y(k / self.width + 1)).collect();
        [wx, wy]
    }

    /// The ramps as a `2×1×H×W` convolution kernel.
    pub fn as_kernel(&self) -> Tensor {
        let [wx, wy] = self.planes();
        Tensor::from_parts(vec![2, 1, self.height, self.width], [wx, wy].concat())
    }
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => Err(Error::shape("spatial_softmax", format!("need at least 2 axes, got {shape:?}"))),
    }
}

/// Max-shifted softmax of one map.
fn softmax_plane(h: &[Float], out: &mut [Float]) {
    let max = h.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(h) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-major weighted sum of a probability plane against both ramps,
/// clamped to the ramp range to absorb rounding in the convex combination.
fn expectation(p: &[Float], wx: &[Float], wy: &[Float]) -> (Float, Float) {
    let (mut x, mut y) = (0.0, 0.0);
    for ((&pv, &a), &b) in p.iter().zip(wx).zip(wy) {
        x += a * pv;
        y += b * pv;
    }
    let last = wx.len() - 1;
    (x.clamp(wx[0], wx[last]), y.clamp(wy[0], wy[last]))
}

fn softmax_planes(h: &Tensor) -> Result<(Tensor, usize)> {
    ensure_finite("spatial_softmax", h.data())?;
    let (rows, cols) = map_dims(h.shape())?;
    let plane = rows * cols;
    let mut out = vec![0.0; h.numel()];
    for (o, x) in out.chunks_exact_mut(plane).zip(h.data().chunks_exact(plane)) {
        softmax_plane(x, o);
    }
    Ok((Tensor::from_parts(h.shape().to_vec(), out), plane))
}

/// Softmax over the last two axes of `h`.
pub fn spatial_softmax(h: &Tensor) -> Result<Tensor> {
    softmax_planes(h).map(|(t, _)| t)
}

/// Soft-argmax of a single `H×W` map.
pub fn soft_argmax(h: &Tensor) -> Result<(Float, Float)> {
    let (rows, cols) = single_map(h)?;
    let p = spatial_softmax(h)?;
    let [wx, wy] = RampWeights::new(cols, rows).planes();
    Ok(expectation(p.data(), &wx, &wy))
}

/// Gradient of `gx·x + gy·y` with respect to the map, where `(x, y)` is the
/// soft-argmax of `h`. Uses the full softmax Jacobian.
pub fn soft_argmax_backward(h: &Tensor, upstream: (Float, Float)) -> Result<Tensor> {
    let (rows, cols) = single_map(h)?;
    let p = spatial_softmax(h)?;
    let [wx, wy] = RampWeights::new(cols, rows).planes();
    let mut grad = vec![0.0; h.numel()];
    softargmax_plane_grad(p.data(), &wx, &wy, upstream, &mut grad);
    Ok(Tensor::from_parts(h.shape().to_vec(), grad))
}

fn softargmax_plane_grad(p: &[Float], wx: &[Float], wy: &[Float], (gx, gy): (Float, Float), out: &mut [Float]) {
    let mut centre = 0.0;
    for ((&pv, &a), &b) in p.iter().zip(wx).zip(wy) {
        centre += pv * (gx * a + gy * b);
    }
    for (((o, &pv), &a), &b) in out.iter_mut().zip(p).zip(wx).zip(wy) {
        *o = pv * (gx * a + gy * b - centre);
    }
}

/// Presence probability: sigmoid of the global maximum of the raw map.
pub fn joint_probability(h: &Tensor) -> Result<Float> {
    ensure_finite("joint_probability", h.data())?;
    let max = h.data().iter().copied().fold(Float::NEG_INFINITY, Float::max);
    Ok(crate::autodiff::sigmoid_value(max))
}

fn single_map(h: &Tensor) -> Result<(usize, usize)> {
    match h.shape() {
        [rows, cols] => Ok((*rows, *cols)),
        s => Err(Error::shape("soft_argmax", format!("expected a single H×W map, got {s:?}"))),
    }
}

struct SpatialSoftmax {
    plane: usize,
}

impl Backward for SpatialSoftmax {
    fn name(&self) -> &'static str {
        "spatial_softmax"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let mut grad = vec![0.0; g.len()];
        for ((o, p), gv) in grad
            .chunks_exact_mut(self.plane)
            .zip(output.data().chunks_exact(self.plane))
            .zip(g.chunks_exact(self.plane))
        {
            let dot: Float = p.iter().zip(gv).map(|(a, b)| a * b).sum();
            for ((d, &pv), &gi) in o.iter_mut().zip(p).zip(gv) {
                *d = pv * (gi - dot);
            }
        }
        vec![Some(grad)]
    }
}

struct SoftArgmax {
    probs: Vec<Float>,
    ramps: [Vec<Float>; 2],
}

impl Backward for SoftArgmax {
    fn name(&self) -> &'static str {
        "soft_argmax"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let plane = self.ramps[0].len();
        let mut grad = vec![0.0; self.probs.len()];
        for ((o, p), gv) in grad
            .chunks_exact_mut(plane)
            .zip(self.probs.chunks_exact(plane))
            .zip(g.chunks_exact(2))
        {
            softargmax_plane_grad(p, &self.ramps[0], &self.ramps[1], (gv[0], gv[1]), o);
        }
        vec![Some(grad)]
    }
}

impl Tape {
    /// Softmax over the last two axes.
    pub fn spatial_softmax(&mut self, h: Var) -> Result<Var> {
        let (value, plane) = softmax_planes(self.value(h))?;
        self.record(&[h], value, SpatialSoftmax { plane })
    }

    /// Soft-argmax over the last two axes: `[.., H, W] → [.., 2]`, holding `(x, y)`.
    pub fn soft_argmax(&mut self, h: Var) -> Result<Var> {
        let input = self.value(h);
        let (rows, cols) = map_dims(input.shape())?;
        let (probs, plane) = softmax_planes(input)?;
        let ramps = RampWeights::new(cols, rows).planes();
        let mut out = Vec::with_capacity(2 * probs.numel() / plane);
        for p in probs.data().chunks_exact(plane) {
            let (x, y) = expectation(p, &ramps[0], &ramps[1]);
            out.extend([x, y]);
        }
        let mut shape = input.shape()[..input.rank() - 2].to_vec();
        shape.push(2);
        let op = SoftArgmax {
            probs: probs.into_data(),
            ramps,
        };
        self.record(&[h], Tensor::from_parts(shape, out), op)
    }

    /// Soft-argmax realized as a spatial softmax followed by a convolution
    /// with two fixed `H×W` ramp filters. Same output layout as [`Tape::soft_argmax`].
    pub fn soft_argmax_conv(&mut self, h: Var) -> Result<Var> {
        let shape = self.shape(h).to_vec();
        let (rows, cols) = map_dims(&shape)?;
        let maps = shape.iter().product::<usize>() / (rows * cols);
        let flat = self.reshape(h, &[maps, 1, rows, cols])?;
        let probs = self.spatial_softmax(flat)?;
        let kernel = self.constant(RampWeights::new(cols, rows).as_kernel())?;
        let coords = self.conv2d(probs, kernel, None, 1, Padding::Valid)?;
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(2);
        self.reshape(coords, &out_shape)
    }

    /// Sigmoid of the maximum over the last two axes: `[.., H, W] → [..]`.
    pub fn joint_probability(&mut self, h: Var) -> Result<Var> {
        let rank = self.value(h).rank();
        if rank < 2 {
            return Err(Error::shape("joint_probability", format!("rank {rank}")));
        }
        let max = self.reduce(ReduceOp::Max, h, &[rank - 2, rank - 1])?;
        self.sigmoid(max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: usize, cols: usize, data: Vec<Float>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn uniform_softmax() {
        let p = spatial_softmax(&Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_of_logs() {
        let h = map(2, 2, vec![1.0, 3.0, 2.0, 2.0].into_iter().map(Float::ln).collect());
        let p = spatial_softmax(&h).unwrap();
        for (a, b) in p.data().iter().zip([0.125, 0.375, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_centroid() {
        let (x, y) = soft_argmax(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!((x, y), (0.625, 0.625));
    }

    #[test]
    fn ramp_corners() {
        let r = RampWeights::new(5, 3);
        let [wx, wy] = r.planes();
        assert_eq!(wx[4], 1.0);
        assert_eq!(wy[14], 1.0);
        assert_eq!(wx[0], 0.2);
        assert!(wy[..5].iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn probability_values() {
        assert_eq!(joint_probability(&Tensor::zeros(&[3, 3])).unwrap(), 0.5);
        let mut h = Tensor::full(&[2, 2], -1.0);
        h.data_mut()[3] = (3.0 as Float).ln();
        assert!((joint_probability(&h).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn uniform_map_gradient_has_zero_mean() {
        let g = soft_argmax_backward(&Tensor::zeros(&[4, 4]), (1.0, 0.0)).unwrap();
        let mean: Float = g.data().iter().sum::<Float>() / 16.0;
        assert!(mean.abs() < 1e-16);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut h = Tensor::zeros(&[2, 2]);
        h.data_mut()[0] = Float::NAN;
        assert!(soft_argmax(&h).is_err());
        assert!(joint_probability(&h).is_err());
    }
}
