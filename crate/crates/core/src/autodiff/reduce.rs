use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
}

/// Output shape (reduced axes removed) and, for every input element in
/// row-major order, the flat index of the output element it feeds.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = (0..shape.len()).map(|a| !axes.contains(&a)).collect();
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&d, _)| d)
        .collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..numel {
        let mut out = 0;
        for (a, &i) in index.iter().enumerate() {
            if keep[a] {
                out = out * shape[a] + i;
            }
        }
        map.push(out);
        for a in (0..shape.len()).rev() {
            index[a] += 1;
            if index[a] < shape[a] {
                break;
            }
            index[a] = 0;
        }
    }
    (out_shape, map)
}

struct Reduce {
    op: ReduceOp,
    map: Vec<usize>,
    /// For max: the input element selected for each output.
    winners: Vec<usize>,
    group: usize,
}

impl Backward for Reduce {
    fn name(&self) -> &'static str {
        match self.op {
            ReduceOp::Sum => "sum",
            ReduceOp::Max => "max",
            ReduceOp::Mean => "mean",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let n = inputs[0].numel();
        let grad = match self.op {
            ReduceOp::Sum => self.map.iter().map(|&o| g[o]).collect(),
            ReduceOp::Mean => {
                let inv = 1.0 / self.group as Float;
                self.map.iter().map(|&o| g[o] * inv).collect()
            }
            ReduceOp::Max => {
                let mut grad = vec![0.0; n];
                for (o, &w) in self.winners.iter().enumerate() {
                    grad[w] += g[o];
                }
                grad
            }
        };
        vec![Some(grad)]
    }
}

impl Tape {
    /// Reduces over `axes`, removing them from the shape. Max routes its
    /// gradient to the first maximal element in row-major order.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let input = self.value(a);
        let rank = input.rank();
        if let Some(&axis) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (out_shape, map) = reduction_map(input.shape(), axes);
        let out_n: usize = out_shape.iter().product();
        let group = input.numel() / out_n;
        let data = input.data();

        let mut winners = Vec::new();
        let out = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0; out_n];
                for (&o, &v) in map.iter().zip(data) {
                    acc[o] += v;
                }
                if op == ReduceOp::Mean {
                    let inv = group as Float;
                    acc.iter_mut().for_each(|v| *v /= inv);
                }
                acc
            }
            ReduceOp::Max => {
                let mut best = vec![Float::NEG_INFINITY; out_n];
                winners = vec![usize::MAX; out_n];
                for (i, (&o, &v)) in map.iter().zip(data).enumerate() {
                    if winners[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        winners[o] = i;
                    }
                }
                best
            }
        };
        let value = Tensor::from_parts(out_shape, out);
        self.record(
            &[a],
            value,
            Reduce {
                op,
                map,
                winners,
                group,
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(ReduceOp::Mean, a, &axes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reduce(op: ReduceOp, t: Tensor, axes: &[usize]) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(t).unwrap();
        let r = tape.reduce(op, v, axes).unwrap();
        tape.value(r).clone()
    }

    #[test]
    fn trivial_reductions() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(reduce(ReduceOp::Sum, m, &[0, 1]).item(), 10.0);
        let m = Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        assert_eq!(reduce(ReduceOp::Max, m, &[0, 1]).item(), 5.0);
        assert_eq!(reduce(ReduceOp::Mean, Tensor::from_vec(vec![2.0, 4.0]), &[0]).item(), 3.0);
    }

    #[test]
    fn partial_axes() {
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = reduce(ReduceOp::Sum, m.clone(), &[1]);
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = reduce(ReduceOp::Max, m, &[0]);
        assert_eq!(cols.data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn invalid_axis() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(vec![1.0])).unwrap();
        assert!(matches!(
            tape.reduce(ReduceOp::Sum, v, &[1]),
            Err(Error::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn max_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 1.0, 3.0, 3.0]).unwrap(), true).unwrap();
        let m = tape.reduce(ReduceOp::Max, x, &[0, 1]).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
