use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Relu,
    Sigmoid,
    Scale(Float),
}

pub(crate) fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    fn apply(self, x: Float) -> Float {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Scale(c) => c * x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Scale(_) => "scale",
        }
    }
}

struct Unary(UnaryOp);

impl Backward for Unary {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[Float], _: &[bool]) -> Vec<Option<Vec<Float>>> {
        let x = inputs[0].data();
        let y = output.data();
        let grad = match self.0 {
            UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
            UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
            UnaryOp::Relu => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            UnaryOp::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            UnaryOp::Scale(c) => g.iter().map(|g| g * c).collect(),
        };
        vec![Some(grad)]
    }
}

struct Binary {
    op: BinaryOp,
    a_scalar: bool,
    b_scalar: bool,
}

impl Binary {
    fn element(&self, x: &[Float], i: usize, scalar: bool) -> Float {
        if scalar {
            x[0]
        } else {
            x[i]
        }
    }

    fn reduce_to(&self, grad: Vec<Float>, scalar: bool) -> Vec<Float> {
        if scalar {
            vec![grad.iter().sum()]
        } else {
            grad
        }
    }
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[Float], needs: &[bool]) -> Vec<Option<Vec<Float>>> {
        let a = inputs[0].data();
        let b = inputs[1].data();
        let ga = needs[0].then(|| {
            let raw: Vec<Float> = match self.op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * self.element(b, i, self.b_scalar))
                    .collect(),
            };
            self.reduce_to(raw, self.a_scalar)
        });
        let gb = needs[1].then(|| {
            let raw: Vec<Float> = match self.op {
                BinaryOp::Add => g.to_vec(),
                BinaryOp::Sub => g.iter().map(|g| -g).collect(),
                BinaryOp::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * self.element(a, i, self.a_scalar))
                    .collect(),
            };
            self.reduce_to(raw, self.b_scalar)
        });
        vec![ga, gb]
    }
}

impl Tape {
    /// Elementwise binary operation. Shapes must match, or one operand must
    /// hold a single element, which is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let same = ta.shape() == tb.shape();
        let a_scalar = !same && ta.numel() == 1;
        let b_scalar = !same && !a_scalar && tb.numel() == 1;
        if !same && !a_scalar && !b_scalar {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let shape = if a_scalar { tb.shape() } else { ta.shape() }.to_vec();
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let f = |x: Float, y: Float| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<Float> = (0..n)
            .map(|i| {
                let x = if a_scalar { da[0] } else { da[i] };
                let y = if b_scalar { db[0] } else { db[i] };
                f(x, y)
            })
            .collect();
        self.record(
            &[a, b],
            Tensor::from_parts(shape, data),
            Binary {
                op,
                a_scalar,
                b_scalar,
            },
        )
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| op.apply(x));
        self.record(&[a], value, Unary(op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), a)
    }
}
