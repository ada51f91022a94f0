//! Convolutional building blocks. Every unit is conv → batch norm → ReLU
//! unless batch norm is disabled, in which case the conv carries a bias.

use super::params::{BatchNormUpdate, BufferId, Ctx, Mode, ParamBuilder, ParamId};
use crate::autodiff::{Padding, Var};
use crate::error::Result;
use crate::tensor::Float;

pub const BN_EPS: Float = 1e-5;
pub const BN_MOMENTUM: Float = 0.9;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let weight = pb.fan_in_uniform("weight", &[cout, cin, k, k], cin * k * k);
        let bias = bias.then(|| pb.constant("bias", &[cout], 0.0));
        Conv2d {
            weight,
            bias,
            stride,
            padding: Padding::Same,
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
        cout * cin * k * k + if bias { cout } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        BatchNorm2d {
            gamma: pb.constant("gamma", &[channels], 1.0),
            beta: pb.constant("beta", &[channels], 0.0),
            running_mean: pb.buffer("running_mean", &[channels], 0.0),
            running_var: pb.buffer("running_var", &[channels], 1.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma)?;
        let beta = ctx.param(self.beta)?;
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, None, BN_EPS)?;
                if let Some(stats) = stats {
                    ctx.push_update(BatchNormUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.buffer(self.running_mean).data().to_vec();
                let var = ctx.buffer(self.running_var).data().to_vec();
                Ok(ctx.tape.batch_norm(x, gamma, beta, Some((&mean, &var)), BN_EPS)?.0)
            }
        }
    }
}

/// Optional batch norm followed by ReLU.
#[derive(Clone, Debug)]
struct Activation {
    bn: Option<BatchNorm2d>,
}

impl Activation {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let x = match &self.bn {
            Some(bn) => bn.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.relu(x)
    }
}

#[derive(Clone, Debug)]
pub struct ConvUnit {
    conv: Conv2d,
    act: Activation,
}

impl ConvUnit {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, batch_norm: bool) -> Self {
        let conv = Conv2d::new(&mut pb.scope("conv"), cin, cout, k, stride, !batch_norm);
        let bn = batch_norm.then(|| BatchNorm2d::new(&mut pb.scope("bn"), cout));
        ConvUnit {
            conv,
            act: Activation { bn },
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize, batch_norm: bool) -> usize {
        Conv2d::param_count(cin, cout, k, !batch_norm) + if batch_norm { 2 * cout } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.act.forward(ctx, y)
    }
}

/// Depthwise `k×k` convolution followed by a `1×1` projection.
#[derive(Clone, Debug)]
pub struct SepConv2d {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: Option<ParamId>,
}

impl SepConv2d {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        SepConv2d {
            depthwise: pb.fan_in_uniform("depthwise", &[cin, 1, k, k], k * k),
            pointwise: pb.fan_in_uniform("pointwise", &[cout, cin, 1, 1], cin),
            bias: bias.then(|| pb.constant("bias", &[cout], 0.0)),
        }
    }

    /// `cin·k² + cin·cout`, plus `cout` with a bias.
    pub fn param_count(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
        cin * k * k + cin * cout + if bias { cout } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let dw = ctx.param(self.depthwise)?;
        let pw = ctx.param(self.pointwise)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        let mid = ctx.tape.depthwise_conv2d(x, dw, 1, Padding::Same)?;
        ctx.tape.conv2d(mid, pw, b, 1, Padding::Same)
    }
}

#[derive(Clone, Debug)]
pub struct SepConvUnit {
    pub sep: SepConv2d,
    act: Activation,
}

impl SepConvUnit {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, batch_norm: bool) -> Self {
        let sep = SepConv2d::new(&mut pb.scope("sep"), cin, cout, k, !batch_norm);
        let bn = batch_norm.then(|| BatchNorm2d::new(&mut pb.scope("bn"), cout));
        SepConvUnit {
            sep,
            act: Activation { bn },
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize, batch_norm: bool) -> usize {
        SepConv2d::param_count(cin, cout, k, !batch_norm) + if batch_norm { 2 * cout } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.sep.forward(ctx, x)?;
        self.act.forward(ctx, y)
    }
}

/// Residual unit with a separable-convolution branch. The shortcut is the
/// identity when channel counts match, otherwise a `1×1` convolution.
#[derive(Clone, Debug)]
pub struct ResSepConv {
    pub branch: SepConvUnit,
    pub shortcut: Option<Conv2d>,
}

impl ResSepConv {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, batch_norm: bool) -> Self {
        let branch = SepConvUnit::new(&mut pb.scope("branch"), cin, cout, 3, batch_norm);
        let shortcut = (cin != cout).then(|| Conv2d::new(&mut pb.scope("shortcut"), cin, cout, 1, 1, true));
        ResSepConv { branch, shortcut }
    }

    pub fn param_count(cin: usize, cout: usize, batch_norm: bool) -> usize {
        SepConvUnit::param_count(cin, cout, 3, batch_norm)
            + if cin != cout { Conv2d::param_count(cin, cout, 1, true) } else { 0 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(ctx, x)?,
            None => x,
        };
        let branch = self.branch.forward(ctx, x)?;
        ctx.tape.add(skip, branch)
    }
}
