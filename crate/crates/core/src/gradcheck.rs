//! Finite-difference verification of every differentiable operation.
//!
//! Each case draws random instances, projects the output onto a fixed random
//! tensor to get a scalar, and compares the reverse-mode gradient with
//! central differences on a random subset of input coordinates plus a few
//! random directions. The error of an instance is the largest absolute
//! mismatch divided by the largest gradient magnitude of that instance.
//!
//! A probe whose difference quotient changes when the step is halved
//! straddles a kink (ReLU, max) and is skipped; the skip count is reported
//! and a case fails if more than a tenth of its probes are skipped.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BinaryOp, Padding, ReduceOp, Tape, UnaryOp, Var};
use crate::error::{Error, Result};
use crate::losses::{training_loss_on_tape, LossConfig, TruthBatch};
use crate::nn::{
    BlockA, BlockB, BlockConfig, Ctx, Mode, ParamBuilder, ParamStore, ResSepConv, SepConv2d, Stem,
};
use crate::tensor::{Float, Tensor};
use crate::{Model, ModelConfig, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: Float,
    pub instances: usize,
    /// Coordinates probed per input tensor and instance.
    pub coords_per_tensor: usize,
    /// Random directional derivatives probed per instance.
    pub directions: usize,
    pub tolerance: Float,
    pub end_to_end_tolerance: Float,
    pub seed: u64,
    /// Architecture whose widths and map counts the layer and model cases use.
    pub model: ModelConfig,
}

impl GradcheckConfig {
    pub fn for_model(model: ModelConfig) -> Self {
        GradcheckConfig {
            step: 1e-6,
            instances: 20,
            coords_per_tensor: 6,
            directions: 2,
            tolerance: 1e-5,
            end_to_end_tolerance: 1e-4,
            seed: 0,
            model,
        }
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig::for_model(ModelConfig::desk())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub probes: usize,
    pub skipped: usize,
    pub max_error: Float,
    pub tolerance: Float,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance && self.skipped * 10 <= self.probes
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("case,instances,probes,skipped,max_error,tolerance,seconds,status\n");
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3e},{:.0e},{:.2},{}",
                c.name,
                c.instances,
                c.probes,
                c.skipped,
                c.max_error,
                c.tolerance,
                c.elapsed.as_secs_f64(),
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

/// Scalar objective of a set of input values, with gradients when asked.
type Objective<'a> = dyn Fn(&[Tensor], bool) -> Result<(Float, Vec<Vec<Float>>)> + 'a;

struct InstanceOutcome {
    error: Float,
    probes: usize,
    skipped: usize,
}

fn perturbed(values: &[Tensor], dir: &[Vec<Float>], t: Float) -> Vec<Tensor> {
    values
        .iter()
        .zip(dir)
        .map(|(v, d)| {
            let mut v = v.clone();
            for (x, dx) in v.data_mut().iter_mut().zip(d) {
                *x += t * dx;
            }
            v
        })
        .collect()
}

fn check_instance(f: &Objective, values: &[Tensor], cfg: &GradcheckConfig, coords: usize, rng: &mut ChaCha8Rng) -> Result<InstanceOutcome> {
    let (_, analytic) = f(values, true)?;
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0 as Float, |m, g| m.max(g.abs()));
    let h = cfg.step;
    let mut directions: Vec<Vec<Vec<Float>>> = Vec::new();
    for (k, v) in values.iter().enumerate() {
        let n = v.numel();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, coords).into_vec()
        };
        for i in picks {
            let mut dir: Vec<Vec<Float>> = values.iter().map(|v| vec![0.0; v.numel()]).collect();
            dir[k][i] = 1.0;
            directions.push(dir);
        }
    }
    for _ in 0..cfg.directions {
        let dir: Vec<Vec<Float>> = values
            .iter()
            .map(|v| (0..v.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        directions.push(dir);
    }
    let central = |dir: &[Vec<Float>], h: Float| -> Result<Float> {
        let (fp, _) = f(&perturbed(values, dir, h), false)?;
        let (fm, _) = f(&perturbed(values, dir, -h), false)?;
        Ok((fp - fm) / (2.0 * h))
    };
    let (mut worst, mut skipped) = (0.0 as Float, 0);
    let mut numeric_scale = scale;
    for dir in &directions {
        let analytic_dd: Float = analytic
            .iter()
            .zip(dir)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<Float>())
            .sum();
        let norm: Float = dir.iter().flatten().fold(1.0, |m, d| m.max(d.abs()));
        let numeric = central(dir, h)?;
        let mismatch = (analytic_dd - numeric).abs();
        if mismatch > 0.1 * cfg.tolerance * scale * norm {
            // A kink inside the stencil makes the difference quotient depend
            // on the step; a wrong gradient does not.
            let half = central(dir, h / 2.0)?;
            if (numeric - half).abs() > 0.5 * mismatch {
                skipped += 1;
                continue;
            }
        }
        numeric_scale = numeric_scale.max(numeric.abs() / norm);
        worst = worst.max(mismatch / norm);
    }
    let denom = numeric_scale.max(Float::MIN_POSITIVE);
    Ok(InstanceOutcome {
        error: if worst == 0.0 { 0.0 } else { worst / denom },
        probes: directions.len(),
        skipped,
    })
}

fn run_case(
    report: &mut GradcheckReport,
    name: &str,
    cfg: &GradcheckConfig,
    tolerance: Float,
    coords: usize,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<(Vec<Tensor>, Box<Objective<'static>>)>,
) -> Result<()> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(report.cases.len() as u64 + 1);
    let mut result = CaseResult {
        name: name.to_string(),
        instances: cfg.instances,
        probes: 0,
        skipped: 0,
        max_error: 0.0,
        tolerance,
        elapsed: Duration::ZERO,
    };
    for _ in 0..cfg.instances {
        let (values, f) = make(&mut rng)?;
        let out = check_instance(f.as_ref(), &values, cfg, coords, &mut rng)?;
        result.max_error = result.max_error.max(out.error);
        result.probes += out.probes;
        result.skipped += out.skipped;
    }
    result.elapsed = start.elapsed();
    report.cases.push(result);
    Ok(())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Float, hi: Float) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("nonzero shape")
}

/// Projects `out` onto fixed weights, making a scalar.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(out, w)?;
    tape.sum_all(p)
}

/// Objective of a pure tape function of its inputs.
fn tape_objective(
    weights: Tensor,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Box<Objective<'static>> {
    Box::new(move |values: &[Tensor], grad: bool| {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.leaf(v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = if tape.shape(out).is_empty() {
            out
        } else {
            project(&mut tape, out, &weights)?
        };
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| tape.grad(v).map(<[Float]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, grads))
    })
}

/// Random weights matching the output shape of `f` on `values`.
fn projection_for(rng: &mut ChaCha8Rng, values: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = values
        .iter()
        .map(|v| tape.constant(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    Ok(if shape.is_empty() {
        Tensor::scalar(1.0)
    } else {
        random_tensor(rng, &shape, -1.0, 1.0)
    })
}

fn tape_case(
    report: &mut GradcheckReport,
    name: &str,
    cfg: &GradcheckConfig,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Clone + 'static,
) -> Result<()> {
    run_case(report, name, cfg, cfg.tolerance, cfg.coords_per_tensor, |rng| {
        let values = inputs(rng);
        let weights = projection_for(rng, &values, &f)?;
        Ok((values, tape_objective(weights, f.clone())))
    })
}

/// Objective of a parameterized layer: values are the input followed by
/// every parameter of `store`.
fn layer_objective(
    store: ParamStore,
    weights: Tensor,
    forward: impl Fn(&mut Ctx, Var) -> Result<Var> + 'static,
) -> Box<Objective<'static>> {
    Box::new(move |values: &[Tensor], grad: bool| {
        let mut store = store.clone();
        for (slot, v) in store.param_values_mut().zip(&values[1..]) {
            *slot = v.clone();
        }
        let mut ctx = Ctx::new(&store, Mode::Train, true);
        let x = ctx.tape.leaf(values[0].clone(), true)?;
        let out = forward(&mut ctx, x)?;
        let loss = project(&mut ctx.tape, out, &weights)?;
        let value = ctx.tape.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        ctx.tape.backward(loss)?;
        let mut grads = vec![ctx.tape.grad(x).map(<[Float]>::to_vec).unwrap_or_else(|| vec![0.0; values[0].numel()])];
        grads.extend(ctx.param_grads());
        Ok((value, grads))
    })
}

fn layer_case<L: 'static>(
    report: &mut GradcheckReport,
    name: &str,
    cfg: &GradcheckConfig,
    input_shape: &[usize],
    build: impl Fn(&mut ParamBuilder) -> Result<L>,
    forward: impl Fn(&L, &mut Ctx, Var) -> Result<Var> + Clone + 'static,
) -> Result<()> {
    let input_shape = input_shape.to_vec();
    run_case(report, name, cfg, cfg.tolerance, cfg.coords_per_tensor, |rng| {
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let layer = build(&mut ParamBuilder::new(&mut store, &mut init_rng))?;
        // Perturb the deterministic initial values (unit gammas, zero biases)
        // so every parameter is probed at a generic point.
        for t in store.param_values_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let x = random_tensor(rng, &input_shape, -1.0, 1.0);
        let out_shape = {
            let mut ctx = Ctx::new(&store, Mode::Train, false);
            let xv = ctx.tape.constant(x.clone())?;
            let out = forward(&layer, &mut ctx, xv)?;
            ctx.tape.shape(out).to_vec()
        };
        let weights = random_tensor(rng, &out_shape, -1.0, 1.0);
        let mut values = vec![x];
        values.extend(store.params().iter().map(|(_, t)| t.clone()));
        let fwd = forward.clone();
        let layer = std::sync::Arc::new(layer);
        Ok((values, layer_objective(store, weights, move |ctx, x| fwd(&layer, ctx, x))))
    })
}

/// Smallest model with the preset's block count, maps and widths.
pub fn toy_model_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        base_resolution: 2,
        num_resolutions: cfg.num_resolutions.min(2),
        width_multiplier: cfg.width_multiplier.min(0.125),
        blocks: 2,
        ..cfg.clone()
    }
}

fn end_to_end_case(report: &mut GradcheckReport, cfg: &GradcheckConfig) -> Result<()> {
    let model_cfg = toy_model_config(&cfg.model);
    run_case(report, "model_end_to_end", cfg, cfg.end_to_end_tolerance, 2, |rng| {
        let mut model = Model::new(ModelConfig {
            seed: rng.gen(),
            ..model_cfg.clone()
        })?;
        for t in model.store_mut().param_values_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let n = 2;
        let s = model_cfg.input_size;
        let images = random_tensor(rng, &[n, 3, s, s], 0.0, 1.0);
        let poses: Vec<Pose> = (0..n)
            .map(|_| {
                let joints = (0..model_cfg.num_joints).map(|_| [rng.gen(), rng.gen()]).collect();
                let vis = (0..model_cfg.num_joints).map(|_| rng.gen_bool(0.8)).collect();
                Pose::truth(joints, vis)
            })
            .collect();
        let truth = TruthBatch::new(&poses.iter().collect::<Vec<_>>(), model_cfg.num_context)?;
        let mut values = vec![images];
        values.extend(model.store().params().iter().map(|(_, t)| t.clone()));
        let f: Box<Objective<'static>> = Box::new(move |values: &[Tensor], grad: bool| {
            let mut model = model.clone();
            for (slot, v) in model.store_mut().param_values_mut().zip(&values[1..]) {
                *slot = v.clone();
            }
            let mut ctx = Ctx::new(model.store(), Mode::Train, true);
            let x = ctx.tape.leaf(values[0].clone(), true)?;
            let outputs = model.forward(&mut ctx, x)?;
            let (loss, _) = training_loss_on_tape(&mut ctx.tape, &outputs, &truth, &LossConfig::default(), None)?;
            let value = ctx.tape.value(loss).item();
            if !grad {
                return Ok((value, Vec::new()));
            }
            ctx.tape.backward(loss)?;
            let mut grads = vec![ctx.tape.grad(x).map(<[Float]>::to_vec).unwrap_or_else(|| vec![0.0; values[0].numel()])];
            grads.extend(ctx.param_grads());
            Ok((value, grads))
        });
        Ok((values, f))
    })
}

/// Runs every case and returns the per-case results.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("gradcheck needs at least one instance and a positive step".into()));
    }
    let mut r = GradcheckReport::default();
    let maps = |rng: &mut ChaCha8Rng| vec![random_tensor(rng, &[2, 3, 5, 4], -2.0, 2.0)];
    let pair = |rng: &mut ChaCha8Rng| {
        vec![random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[3, 4], -1.0, 1.0)]
    };
    let positive = |rng: &mut ChaCha8Rng| vec![random_tensor(rng, &[3, 4], 0.2, 2.0)];
    let single = |rng: &mut ChaCha8Rng| vec![random_tensor(rng, &[3, 4], -1.0, 1.0)];

    for (name, op) in [("add", BinaryOp::Add), ("sub", BinaryOp::Sub), ("mul", BinaryOp::Mul)] {
        tape_case(&mut r, name, cfg, pair, move |t, v| t.binary(op, v[0], v[1]))?;
    }
    tape_case(&mut r, "mul_scalar", cfg, |rng| vec![random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[], -1.0, 1.0)], |t, v| {
        t.mul(v[0], v[1])
    })?;
    tape_case(&mut r, "exp", cfg, single, |t, v| t.exp(v[0]))?;
    tape_case(&mut r, "log", cfg, positive, |t, v| t.log(v[0]))?;
    tape_case(&mut r, "relu", cfg, single, |t, v| t.relu(v[0]))?;
    tape_case(&mut r, "sigmoid", cfg, single, |t, v| t.sigmoid(v[0]))?;
    tape_case(&mut r, "scale", cfg, single, |t, v| t.unary(UnaryOp::Scale(-1.7), v[0]))?;
    for (name, op) in [("reduce_sum", ReduceOp::Sum), ("reduce_max", ReduceOp::Max), ("reduce_mean", ReduceOp::Mean)] {
        tape_case(&mut r, name, cfg, maps, move |t, v| t.reduce(op, v[0], &[1, 3]))?;
    }
    tape_case(&mut r, "conv2d", cfg, |rng| {
        vec![
            random_tensor(rng, &[2, 3, 6, 5], -1.0, 1.0),
            random_tensor(rng, &[4, 3, 3, 3], -1.0, 1.0),
            random_tensor(rng, &[4], -1.0, 1.0),
        ]
    }, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same))?;
    tape_case(&mut r, "conv2d_strided_valid", cfg, |rng| {
        vec![random_tensor(rng, &[2, 2, 7, 6], -1.0, 1.0), random_tensor(rng, &[3, 2, 3, 2], -1.0, 1.0)]
    }, |t, v| t.conv2d(v[0], v[1], None, 2, Padding::Valid))?;
    tape_case(&mut r, "depthwise_conv2d", cfg, |rng| {
        vec![random_tensor(rng, &[2, 3, 6, 5], -1.0, 1.0), random_tensor(rng, &[3, 1, 3, 3], -1.0, 1.0)]
    }, |t, v| t.depthwise_conv2d(v[0], v[1], 2, Padding::Same))?;
    tape_case(&mut r, "batch_norm", cfg, |rng| {
        vec![
            random_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0),
            random_tensor(rng, &[2], 0.5, 1.5),
            random_tensor(rng, &[2], -0.5, 0.5),
        ]
    }, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0))?;
    tape_case(&mut r, "max_pool2", cfg, |rng| vec![random_tensor(rng, &[2, 2, 4, 6], -1.0, 1.0)], |t, v| t.max_pool2(v[0]))?;
    tape_case(&mut r, "upsample2", cfg, |rng| vec![random_tensor(rng, &[2, 2, 3, 2], -1.0, 1.0)], |t, v| t.upsample2(v[0]))?;
    tape_case(&mut r, "narrow_reshape", cfg, maps, |t, v| {
        let n = t.narrow(v[0], 1, 1, 2)?;
        t.reshape(n, &[4, 5, 4])
    })?;
    tape_case(&mut r, "spatial_softmax", cfg, maps, |t, v| t.spatial_softmax(v[0]))?;
    tape_case(&mut r, "soft_argmax", cfg, maps, |t, v| t.soft_argmax(v[0]))?;
    tape_case(&mut r, "soft_argmax_conv", cfg, maps, |t, v| t.soft_argmax_conv(v[0]))?;
    tape_case(&mut r, "joint_probability", cfg, maps, |t, v| t.joint_probability(v[0]))?;

    let (nj, nc) = (cfg.model.num_joints, cfg.model.num_context);
    let m = nj * (1 + nc);
    let alpha = cfg.model.alpha as Float;
    tape_case(&mut r, "aggregate", cfg, move |rng| {
        vec![random_tensor(rng, &[2, m, 2], 0.0, 1.0), random_tensor(rng, &[2, m], 0.05, 0.95)]
    }, move |t, v| t.aggregate(v[0], v[1], nj, nc, alpha))?;
    tape_case(&mut r, "elastic_net_loss", cfg, move |rng| vec![random_tensor(rng, &[2, nj, 2], 0.0, 1.0)], move |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = random_tensor(&mut rng, &[2, nj, 2], 0.0, 1.0);
        let mask: Vec<bool> = (0..2 * nj).map(|i| i % 3 != 2).collect();
        t.elastic_net_loss(v[0], &truth, &mask)
    })?;
    tape_case(&mut r, "bce_loss", cfg, move |rng| vec![random_tensor(rng, &[2, nj], 0.02, 0.98)], move |t, v| {
        let targets = Tensor::new(vec![2, nj], (0..2 * nj).map(|i| (i % 2) as Float).collect())?;
        t.bce_loss(v[0], &targets)
    })?;

    let bn = cfg.model.batch_norm;
    let widths = cfg.model.widths();
    let c = widths[2];
    let res = cfg.model.base_resolution;
    layer_case(&mut r, "sep_conv2d", cfg, &[2, 3, 5, 5], |pb| Ok(SepConv2d::new(pb, 3, 4, 3, true)), |l, ctx, x| l.forward(ctx, x))?;
    layer_case(&mut r, "res_sepconv_identity", cfg, &[2, 4, 4, 4], move |pb| Ok(ResSepConv::new(pb, 4, 4, bn)), |l, ctx, x| l.forward(ctx, x))?;
    layer_case(&mut r, "res_sepconv_projection", cfg, &[2, 3, 4, 4], move |pb| Ok(ResSepConv::new(pb, 3, 5, bn)), |l, ctx, x| l.forward(ctx, x))?;
    layer_case(&mut r, "stem", cfg, &[2, 3, 16, 16], move |pb| Ok(Stem::new(pb, [4, 6, 8], 16, bn)), |l, ctx, x| l.forward(ctx, x))?;
    let block_cfg = BlockConfig {
        channels_in: c,
        channels_out: c,
        num_resolutions: cfg.model.num_resolutions,
        base_resolution: res,
        growth: cfg.model.growth,
        batch_norm: bn,
    };
    layer_case(&mut r, "block_a", cfg, &[2, c, res, res], move |pb| BlockA::new(pb, &block_cfg), |l, ctx, x| l.forward(ctx, x))?;
    layer_case(&mut r, "block_b", cfg, &[2, c, res, res], move |pb| Ok(BlockB::new(pb, c, m, bn)), move |l, ctx, x| {
        // Both outputs feed the objective through fixed random weights.
        let out = l.forward(ctx, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wm = random_tensor(&mut rng, &[2, m, res, res], -1.0, 1.0);
        let wr = random_tensor(&mut rng, &[2, c, res, res], -1.0, 1.0);
        let a = project(&mut ctx.tape, out.maps, &wm)?;
        let b = project(&mut ctx.tape, out.reinjected, &wr)?;
        let s = ctx.tape.add(a, b)?;
        ctx.tape.reshape(s, &[1])
    })?;
    end_to_end_case(&mut r, cfg)?;
    Ok(r)
}
