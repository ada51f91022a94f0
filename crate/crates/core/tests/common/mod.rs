//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softpose::autodiff::{Padding, Tape};
use softpose::metrics::{Limb, Metric, MetricConfig, MetricReport};
use softpose::nn::{Ctx, Mode, ParamBuilder, ParamStore, SepConv2d};
use softpose::softargmax::{self, RampWeights};
use softpose::train::{rmsprop_step, RmsProp};
use softpose::{aggregate, Float, Pose, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: Float) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn max_abs_diff(a: &[Float], b: &[Float]) -> Float {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Float::max)
}

/// Output size and leading pad, recomputed from the padding definitions.
fn geometry(input: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = (input + stride - 1) / stride;
        let total = ((out - 1) * stride + k).saturating_sub(input);
        (out, total / 2)
    } else {
        ((input - k) / stride + 1, 0)
    }
}

/// Nested-loop cross-correlation, NCHW input, OIHW kernel.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, bias: Option<&[Float]>, stride: usize, same: bool) -> Vec<Float> {
    let [n, cin, h, w] = x.shape().try_into().unwrap();
    let [cout, kcin, kh, kw] = k.shape().try_into().unwrap();
    assert_eq!(cin, kcin);
    let (oh, pt) = geometry(h, kh, stride, same);
    let (ow, pl) = geometry(w, kw, stride, same);
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.get(&[b, c, iy as usize, ix as usize]) * k.get(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Per-channel nested-loop correlation, `C×1×kh×kw` kernel, stride 1.
pub fn naive_depthwise(x: &Tensor, k: &Tensor, same: bool) -> Vec<Float> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let xs = Tensor::new(vec![1, 1, h, w], x.index_first(b).index_first(ch).into_data()).unwrap();
            let ks = Tensor::new(vec![1, 1, k.shape()[2], k.shape()[3]], k.index_first(ch).into_data()).unwrap();
            out.extend(naive_conv2d(&xs, &ks, None, 1, same));
        }
    }
    out
}

/// Largest deviation of the tape convolutions from the naive loops over a
/// sweep of shapes, strides and paddings.
pub fn conv_oracle_error(seed: u64) -> Float {
    let mut rng = rng(seed);
    let mut worst: Float = 0.0;
    for &(cin, cout, size, k, stride, same) in &[
        (2, 3, 5, 3, 1, true),
        (2, 3, 5, 3, 1, false),
        (1, 2, 8, 3, 2, true),
        (3, 2, 7, 2, 2, true),
        (2, 2, 6, 4, 2, false),
        (3, 4, 8, 1, 1, true),
        (1, 1, 5, 5, 1, false),
    ] {
        let x = random_tensor(&mut rng, &[2, cin, size, size], 1.0);
        let kern = random_tensor(&mut rng, &[cout, cin, k, k], 1.0);
        let bias = random_tensor(&mut rng, &[cout], 1.0);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let mut tape = Tape::new();
        let (xv, kv, bv) = (
            tape.constant(x.clone()).unwrap(),
            tape.constant(kern.clone()).unwrap(),
            tape.constant(bias.clone()).unwrap(),
        );
        let y = tape.conv2d(xv, kv, Some(bv), stride, padding).unwrap();
        worst = worst.max(max_abs_diff(
            tape.value(y).data(),
            &naive_conv2d(&x, &kern, Some(bias.data()), stride, same),
        ));

        let dk = random_tensor(&mut rng, &[cin, 1, k, k], 1.0);
        let dv = tape.constant(dk.clone()).unwrap();
        if stride == 1 {
            let y = tape.depthwise_conv2d(xv, dv, 1, padding).unwrap();
            worst = worst.max(max_abs_diff(tape.value(y).data(), &naive_depthwise(&x, &dk, same)));
        }
    }
    worst
}

/// Separable convolution layer against a depthwise loop followed by a 1×1 loop.
pub fn sepconv_oracle_error(seed: u64) -> Float {
    let mut worst: Float = 0.0;
    for (i, &(cin, cout, size, k)) in [(2, 3, 5, 3), (3, 3, 8, 3), (4, 2, 6, 5), (1, 4, 4, 1)].iter().enumerate() {
        let mut init = rng(seed + i as u64);
        let mut store = ParamStore::new();
        let layer = SepConv2d::new(&mut ParamBuilder::new(&mut store, &mut init), cin, cout, k, true);
        let bias = random_tensor(&mut init, &[cout], 1.0);
        *store.param_mut(layer.bias.unwrap()) = bias.clone();
        let x = random_tensor(&mut init, &[2, cin, size, size], 1.0);

        let mut ctx = Ctx::new(&store, Mode::Eval, false);
        let xv = ctx.tape.constant(x.clone()).unwrap();
        let y = layer.forward(&mut ctx, xv).unwrap();

        let mid = naive_depthwise(&x, store.param(layer.depthwise), true);
        let mid = Tensor::new(vec![2, cin, size, size], mid).unwrap();
        let expected = naive_conv2d(&mid, store.param(layer.pointwise), Some(bias.data()), 1, true);
        worst = worst.max(max_abs_diff(ctx.tape.value(y).data(), &expected));
    }
    worst
}

/// Softmax straight from its definition, without max-subtraction.
pub fn direct_softmax(map: &[Float]) -> Vec<Float> {
    let z: Float = map.iter().map(|v| v.exp()).sum();
    map.iter().map(|v| v.exp() / z).collect()
}

/// Soft-argmax straight from its definition, with 1-based ramps.
pub fn direct_soft_argmax(map: &[Float], w: usize, h: usize) -> (Float, Float) {
    let p = direct_softmax(map);
    let (mut x, mut y) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            x += p[r * w + c] * (c + 1) as Float / w as Float;
            y += p[r * w + c] * (r + 1) as Float / h as Float;
        }
    }
    (x, y)
}

pub fn random_pose(rng: &mut ChaCha8Rng, joints: usize, visible_prob: f64) -> Pose {
    let coords = (0..joints).map(|_| [rng.gen::<Float>(), rng.gen::<Float>()]).collect();
    let vis = (0..joints).map(|_| rng.gen_bool(visible_prob)).collect();
    Pose::truth(coords, vis)
}

/// Elastic net as separate L1 and squared-L2 sums over visible joints.
pub fn naive_elastic_net(pred: &Pose, truth: &Pose) -> Float {
    let (mut l1, mut l2) = (0.0, 0.0);
    for n in 0..truth.num_joints() {
        if !truth.visibility[n] {
            continue;
        }
        for d in 0..2 {
            let e = truth.joints[n][d] - pred.joints[n][d];
            l1 += e.abs();
            l2 += e.powi(2);
        }
    }
    (l1 + l2) / truth.num_joints() as Float
}

pub fn naive_bce(pred: &[Float], truth: &[Float]) -> Float {
    let mut total = 0.0;
    for i in 0..pred.len() {
        let p = pred[i].max(1e-7).min(1.0 - 1e-7);
        total += if truth[i] == 1.0 {
            -p.ln()
        } else if truth[i] == 0.0 {
            -(1.0 - p).ln()
        } else {
            -(truth[i] * p.ln() + (1.0 - truth[i]) * (1.0 - p).ln())
        };
    }
    total / pred.len() as Float
}

/// Largest deviation of both loss routes (scalar and tape) from the loops.
pub fn loss_oracle_error(seed: u64) -> Float {
    let mut rng = rng(seed);
    let mut worst: Float = 0.0;
    for _ in 0..100 {
        let joints = rng.gen_range(1..=8);
        let (p, t) = (random_pose(&mut rng, joints, 0.9), random_pose(&mut rng, joints, 0.7));
        let want = naive_elastic_net(&p, &t);
        worst = worst.max((softpose::losses::elastic_net_loss(&p, &t).unwrap() - want).abs());

        let mut tape = Tape::new();
        let flat = |pose: &Pose| Tensor::new(vec![1, joints, 2], pose.joints.iter().flatten().copied().collect()).unwrap();
        let pv = tape.constant(flat(&p)).unwrap();
        let l = tape.elastic_net_loss(pv, &flat(&t), &t.visibility).unwrap();
        worst = worst.max((tape.value(l).item() - want).abs());

        let probs: Vec<Float> = (0..joints).map(|_| rng.gen()).collect();
        let targets: Vec<Float> = (0..joints).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let want = naive_bce(&probs, &targets);
        worst = worst.max((softpose::losses::bce_loss(&probs, &targets).unwrap() - want).abs());
        let pv = tape.constant(Tensor::new(vec![1, joints], probs).unwrap()).unwrap();
        let l = tape.bce_loss(pv, &Tensor::new(vec![1, joints], targets).unwrap()).unwrap();
        worst = worst.max((tape.value(l).item() - want).abs());
    }
    worst
}

pub fn naive_aggregate(yd: [Float; 2], p: &[Float], y: &[[Float; 2]], alpha: Float) -> [Float; 2] {
    let total: Float = p.iter().sum();
    if total < 1e-8 {
        return yd;
    }
    let mut out = [0.0; 2];
    for d in 0..2 {
        let ctx: Float = p.iter().zip(y).map(|(w, v)| w * v[d]).sum::<Float>() / total;
        out[d] = alpha * yd[d] + (1.0 - alpha) * ctx;
    }
    out
}

/// Scalar and tape aggregation against the direct weighted average.
pub fn aggregate_oracle_error(seed: u64) -> Float {
    let mut rng = rng(seed);
    let mut worst: Float = 0.0;
    for _ in 0..100 {
        let (joints, context) = (rng.gen_range(1..=4), rng.gen_range(0..=3));
        let maps = joints * (1 + context);
        let alpha = rng.gen::<Float>();
        let coords: Vec<Float> = (0..2 * maps).map(|_| rng.gen()).collect();
        let probs: Vec<Float> = (0..maps).map(|_| rng.gen()).collect();
        let mut tape = Tape::new();
        let cv = tape.constant(Tensor::new(vec![1, maps, 2], coords.clone()).unwrap()).unwrap();
        let pv = tape.constant(Tensor::new(vec![1, maps], probs.clone()).unwrap()).unwrap();
        let out = tape.aggregate(cv, pv, joints, context, alpha).unwrap();
        for j in 0..joints {
            let slots: Vec<usize> = (0..context).map(|i| joints + j * context + i).collect();
            let p: Vec<Float> = slots.iter().map(|&k| probs[k]).collect();
            let y: Vec<[Float; 2]> = slots.iter().map(|&k| [coords[2 * k], coords[2 * k + 1]]).collect();
            let yd = [coords[2 * j], coords[2 * j + 1]];
            let want = naive_aggregate(yd, &p, &y, alpha);
            let got = aggregate(yd, &p, &y, alpha);
            worst = worst.max(max_abs_diff(&got, &want));
            worst = worst.max(max_abs_diff(&tape.value(out).data()[2 * j..2 * j + 2], &want));
        }
    }
    worst
}

/// Ten dyadic values spanning `[0, 1]`; sums, products and quotients of
/// these are exact, so the contract can be checked with `==`.
pub const DYADIC_GRID: [Float; 10] = [0.0, 0.0625, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

/// Exhaustive aggregation contract over a 10×10×10 grid of weights,
/// probabilities and context locations. Returns the failures found.
pub fn aggregate_grid_failures() -> Vec<String> {
    let mut failures = Vec::new();
    let grid = |i: usize| DYADIC_GRID[i];
    let yd = [0.25, 0.625];
    for a in 0..10 {
        let alpha = grid(a);
        for pi in 0..10 {
            let p = grid(pi);
            for yi in 0..10 {
                let y = [grid(yi), 1.0 - grid(yi)];
                let other = [0.875, 0.125];
                let probs = [p, 1.0 - p];
                let ys = [y, other];

                // α = 1 ignores context entirely.
                if aggregate(yd, &probs, &ys, 1.0) != yd {
                    failures.push(format!("alpha=1 p={p} y={y:?}"));
                }
                // α = 0 with a single context returns that context location.
                if p > 0.0 && aggregate(yd, &[p], &[y], 0.0) != y {
                    failures.push(format!("alpha=0 single p={p} y={y:?}"));
                }
                // Result stays in the convex hull of detection and contexts.
                let out = aggregate(yd, &probs, &ys, alpha);
                for d in 0..2 {
                    let lo = yd[d].min(y[d]).min(other[d]);
                    let hi = yd[d].max(y[d]).max(other[d]);
                    if out[d] < lo || out[d] > hi {
                        failures.push(format!("hull alpha={alpha} p={p} y={y:?} -> {out:?}"));
                    }
                }
                // Vanishing total context probability falls back to detection.
                let tiny = p * 1e-9;
                if aggregate(yd, &[tiny, tiny], &ys, alpha) != yd || aggregate(yd, &[0.0, 0.0], &ys, alpha) != yd {
                    failures.push(format!("fallback alpha={alpha} p={p}"));
                }
            }
        }
    }
    failures
}

pub fn pixel_dist(a: [Float; 2], b: [Float; 2], size: (Float, Float)) -> Float {
    (((a[0] - b[0]) * size.0).powi(2) + ((a[1] - b[1]) * size.1).powi(2)).sqrt()
}

/// Per-column correct/total counts by direct enumeration.
pub fn naive_counts(preds: &[Pose], truths: &[Pose], cfg: &MetricConfig) -> (Vec<usize>, Vec<usize>) {
    let mut names: Vec<String> = Vec::new();
    let labels: Vec<String> = match cfg.metric {
        Metric::Pcp => cfg.skeleton.iter().map(|l| l.name.clone()).collect(),
        _ => cfg.joint_names.clone(),
    };
    for l in &labels {
        if !names.contains(l) {
            names.push(l.clone());
        }
    }
    let col = |l: &String| names.iter().position(|n| n == l).unwrap();
    let (mut correct, mut total) = (vec![0; names.len()], vec![0; names.len()]);
    for (p, t) in preds.iter().zip(truths) {
        match cfg.metric {
            Metric::Pcp => {
                for limb in &cfg.skeleton {
                    let len = pixel_dist(t.joints[limb.a], t.joints[limb.b], cfg.image_size);
                    if !t.visibility[limb.a] || !t.visibility[limb.b] || len == 0.0 {
                        continue;
                    }
                    let c = col(&limb.name);
                    total[c] += 1;
                    let ea = pixel_dist(p.joints[limb.a], t.joints[limb.a], cfg.image_size);
                    let eb = pixel_dist(p.joints[limb.b], t.joints[limb.b], cfg.image_size);
                    if ea <= cfg.threshold * len && eb <= cfg.threshold * len {
                        correct[c] += 1;
                    }
                }
            }
            _ => {
                let (a, b) = cfg.normalizer;
                let reference = pixel_dist(t.joints[a], t.joints[b], cfg.image_size);
                for j in 0..t.num_joints() {
                    if t.visibility[j] {
                        let c = col(&cfg.joint_names[j]);
                        total[c] += 1;
                        if pixel_dist(p.joints[j], t.joints[j], cfg.image_size) <= cfg.threshold * reference {
                            correct[c] += 1;
                        }
                    }
                }
            }
        }
    }
    (correct, total)
}

pub fn metric_config(metric: Metric, threshold: Float) -> MetricConfig {
    let names = ["head", "neck", "wrist", "wrist", "hip", "hip"];
    MetricConfig {
        metric,
        threshold,
        normalizer: if metric == Metric::Pckh { (0, 1) } else { (1, 4) },
        joint_names: names.iter().map(|s| s.to_string()).collect(),
        skeleton: vec![
            Limb::new("head", 0, 1),
            Limb::new("arm", 1, 2),
            Limb::new("arm", 1, 3),
            Limb::new("torso", 1, 4),
            Limb::new("torso", 1, 5),
        ],
        image_size: (64.0, 48.0),
    }
}

/// Random sets where predictions are jittered truths, with the reference
/// joints always visible.
pub fn metric_fixture(rng: &mut ChaCha8Rng, samples: usize) -> (Vec<Pose>, Vec<Pose>) {
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..samples {
        let mut t = random_pose(rng, 6, 0.8);
        for j in [0, 1, 4] {
            t.visibility[j] = true;
        }
        let noise = rng.gen_range(0.0..0.3);
        let joints = t
            .joints
            .iter()
            .map(|j| [j[0] + rng.gen_range(-noise..noise), j[1] + rng.gen_range(-noise..noise)])
            .collect();
        preds.push(Pose::truth(joints, vec![true; 6]));
        truths.push(t);
    }
    (preds, truths)
}

/// Number of (metric, threshold, set) combinations whose counts differ from
/// the enumeration oracle, out of the number checked.
pub fn metric_oracle_mismatches(seed: u64) -> (usize, usize) {
    let mut rng = rng(seed);
    let (mut bad, mut checked) = (0, 0);
    for _ in 0..20 {
        let (preds, truths) = metric_fixture(&mut rng, 20);
        for metric in [Metric::Pck, Metric::Pckh, Metric::Pcp] {
            for threshold in [0.1, 0.2, 0.5, 1.0] {
                let cfg = metric_config(metric, threshold);
                let report: MetricReport = softpose::metrics::evaluate(&preds, &truths, &cfg).unwrap();
                let (c, t) = naive_counts(&preds, &truths, &cfg);
                checked += 1;
                if report.correct != c || report.total != t {
                    bad += 1;
                }
            }
        }
    }
    (bad, checked)
}

/// Multi-step RMSProp against the update rule written out per element.
pub fn rmsprop_oracle_error(seed: u64) -> Float {
    let mut rng = rng(seed);
    let opt = RmsProp { rho: 0.9, eps: 1e-8 };
    let n = 64;
    let mut p: Vec<Float> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v = vec![0.0; n];
    let (mut p_ref, mut v_ref) = (p.clone(), v.clone());
    for step in 0..10 {
        let g: Vec<Float> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lr = 1e-3 / (1 + step) as Float;
        rmsprop_step(&mut p, &g, &mut v, lr, &opt).unwrap();
        for i in 0..n {
            v_ref[i] = 0.9 * v_ref[i] + 0.1 * g[i].powi(2);
            p_ref[i] = p_ref[i] - lr * g[i] / (v_ref[i].sqrt() + 1e-8);
        }
    }
    max_abs_diff(&p, &p_ref).max(max_abs_diff(&v, &v_ref))
}

/// Random `h×w` map with entries in `[-scale, scale]`.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: Float) -> Tensor {
    random_tensor(rng, &[h, w], scale)
}

/// Soft-argmax invariants over `count` random maps; returns the failures.
pub fn softargmax_invariant_failures(seed: u64, count: usize) -> Vec<String> {
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    for case in 0..count {
        let (h, w) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let map = random_map(&mut rng, h, w, 5.0);
        let p = softargmax::spatial_softmax(&map).unwrap();
        let sum: Float = p.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            failures.push(format!("case {case}: softmax sums to {sum}"));
        }
        let (x, y) = softargmax::soft_argmax(&map).unwrap();
        if !(x > 0.0 && x <= 1.0 && y > 0.0 && y <= 1.0) {
            failures.push(format!("case {case}: ({x}, {y}) outside (0,1]"));
        }

        // On a dyadic grid both the shift and the max-subtraction are exact,
        // so the outputs must agree bit for bit.
        let dyadic = map.map(|v| (v * 1024.0).round() / 1024.0);
        let c = [-4.0, 0.5, 8.25][case % 3];
        let shifted = dyadic.map(|v| v + c);
        if softargmax::soft_argmax(&shifted).unwrap() != softargmax::soft_argmax(&dyadic).unwrap() {
            failures.push(format!("case {case}: not shift invariant"));
        }

        // Translating a map inside a zero-padded canvas moves the output by
        // exactly the offset over the canvas size.
        let (oy, ox) = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));
        let (ch, cw) = (h + 4, w + 4);
        let canvas = |dy: usize, dx: usize| {
            let mut data = vec![-1e3; ch * cw];
            for r in 0..h {
                for col in 0..w {
                    data[(r + dy) * cw + col + dx] = map.get(&[r, col]);
                }
            }
            Tensor::new(vec![ch, cw], data).unwrap()
        };
        let (bx, by) = softargmax::soft_argmax(&canvas(0, 0)).unwrap();
        let (tx, ty) = softargmax::soft_argmax(&canvas(oy, ox)).unwrap();
        let ex = (tx - bx - ox as Float / cw as Float).abs();
        let ey = (ty - by - oy as Float / ch as Float).abs();
        if ex > 1e-9 || ey > 1e-9 {
            failures.push(format!("case {case}: translation error ({ex}, {ey})"));
        }

        // Uniform maps land on the ramp centroid: bit-exact when both sides
        // are powers of two (1/(H·W) is then representable), otherwise to
        // within rounding of the weighted sum.
        let uniform = Tensor::full(&[h, w], rng.gen_range(-3.0..3.0));
        let want = ((w + 1) as Float / (2 * w) as Float, (h + 1) as Float / (2 * h) as Float);
        let got = softargmax::soft_argmax(&uniform).unwrap();
        let exact = w.is_power_of_two() && h.is_power_of_two();
        let err = (got.0 - want.0).abs().max((got.1 - want.1).abs());
        if (exact && got != want) || err > 1e-15 {
            failures.push(format!("case {case}: uniform {h}x{w} centroid off by {err}"));
        }
    }
    failures.extend(sharpening_failures(seed, count / 4));
    failures
}

/// β=50 on 8×8 maps whose maximum beats all others by at least 1.
pub fn sharpening_failures(seed: u64, count: usize) -> Vec<String> {
    let mut rng = rng(seed ^ 0x5eed);
    let mut failures = Vec::new();
    for case in 0..count {
        let mut map = random_map(&mut rng, 8, 8, 1.0).into_data();
        let peak = rng.gen_range(0..64);
        let runner_up = map.iter().copied().fold(Float::NEG_INFINITY, Float::max);
        map[peak] = runner_up + rng.gen_range(1.0..2.0);
        let scaled = Tensor::new(vec![8, 8], map.iter().map(|v| 50.0 * v).collect()).unwrap();
        let (x, y) = softargmax::soft_argmax(&scaled).unwrap();
        let ramps = RampWeights::new(8, 8);
        let (ex, ey) = (ramps.x(peak % 8 + 1), ramps.y(peak / 8 + 1));
        if (x - ex).abs() > 1e-6 || (y - ey).abs() > 1e-6 {
            failures.push(format!("sharpening case {case}: ({x}, {y}) vs ({ex}, {ey})"));
        }
    }
    failures
}

pub struct Fixture {
    pub model: softpose::ModelConfig,
    pub train: softpose::train::TrainConfig,
    pub train_set: softpose::data::Dataset,
    pub val_set: softpose::data::Dataset,
    pub metric: MetricConfig,
}

/// Desk model on freshly generated synthetic data; validation samples come
/// after the training samples in the generator's index space.
pub fn desk_fixture(train: usize, val: usize) -> Fixture {
    use softpose::data::{synth_range, Dataset, SyntheticSpec};
    let spec = SyntheticSpec::default();
    Fixture {
        model: softpose::ModelConfig::desk(),
        train: softpose::train::TrainConfig::desk(),
        train_set: Dataset::from_synth(synth_range(&spec, 0, train).unwrap()),
        val_set: Dataset::from_synth(synth_range(&spec, train, val).unwrap()),
        metric: spec.metric_config(Metric::Pck, 0.2),
    }
}

/// Bytes of a checkpoint as written to disk.
pub fn checkpoint_bytes(ckpt: &softpose::checkpoint::Checkpoint) -> (String, Vec<u8>) {
    (ckpt.manifest().unwrap(), ckpt.blob())
}

/// Trains `first` epochs, saves, reloads from disk and trains to
/// `first + second`; compares against one unbroken run. Returns whether
/// the final checkpoints and the timing-free logs are identical.
pub fn split_run_matches(fx: &Fixture, cfg: &softpose::train::TrainConfig, first: usize, second: usize) -> (bool, bool) {
    use softpose::checkpoint::Checkpoint;
    use softpose::train::{TrainConfig, Trainer};
    use softpose::Model;

    let total = TrainConfig {
        epochs: first + second,
        ..cfg.clone()
    };
    let mut whole = Trainer::new(Model::new(fx.model.clone()).unwrap(), total.clone(), &fx.train_set, &fx.val_set, fx.metric.clone()).unwrap();
    whole.run(|_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let part = TrainConfig {
        epochs: first,
        ..cfg.clone()
    };
    let mut a = Trainer::new(Model::new(fx.model.clone()).unwrap(), part, &fx.train_set, &fx.val_set, fx.metric.clone()).unwrap();
    a.run(|_| {}).unwrap();
    a.checkpoint().save(dir.path()).unwrap();
    let ckpt = Checkpoint::load(dir.path()).unwrap();
    let mut b = Trainer::resume(&ckpt, total, &fx.train_set, &fx.val_set, fx.metric.clone()).unwrap();
    b.run(|_| {}).unwrap();

    let mut split_log = a.log().without_timing();
    split_log.extend(b.log().without_timing());
    (
        checkpoint_bytes(&whole.checkpoint()) == checkpoint_bytes(&b.checkpoint()),
        whole.log().without_timing() == split_log,
    )
}

/// Save → load → save of `ckpt`; whether both written files are byte-identical.
pub fn checkpoint_round_trip_identical(ckpt: &softpose::checkpoint::Checkpoint) -> bool {
    use softpose::checkpoint::{Checkpoint, BLOB_FILE, MANIFEST_FILE};
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ckpt.save(d1.path()).unwrap();
    let loaded = Checkpoint::load(d1.path()).unwrap();
    loaded.save(d2.path()).unwrap();
    [MANIFEST_FILE, BLOB_FILE].iter().all(|f| {
        std::fs::read(d1.path().join(f)).unwrap() == std::fs::read(d2.path().join(f)).unwrap()
    }) && &loaded == ckpt
}
