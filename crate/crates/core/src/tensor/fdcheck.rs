//! Finite-difference validation of the analytic gradients.
//!
//! Every differentiable operation gets a small randomized case: a graph
//! is built twice — once to read analytic gradients off the tape, then
//! repeatedly with single coordinates nudged by ±h to measure central
//! differences. Inputs are generated away from kinks (relu/pool/clamp
//! thresholds) so the numeric derivative is well defined, and the
//! relative-error floor absorbs 32-bit forward noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, TensorId};
use crate::rng::substream;

/// Graph builder: receives the tape, one id per parameter tensor, and
/// one id per constant tensor; returns the scalar loss node.
pub type BuildFn = fn(&mut Tape, &[TensorId], &[TensorId]) -> Result<TensorId, TensorError>;

/// One finite-difference scenario for a single op kind.
pub struct FdCase {
    pub name: &'static str,
    pub param_shapes: Vec<Vec<usize>>,
    pub init: Vec<Vec<f32>>,
    pub const_shapes: Vec<Vec<usize>>,
    pub consts: Vec<Vec<f32>>,
    pub build: BuildFn,
}

/// Outcome of one case: worst relative error over the sampled coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error; absorbs f32 forward noise
/// when both derivatives are near zero.
const REL_FLOOR: f64 = 1e-2;

fn eval_loss(case: &FdCase, params: &[Vec<f32>]) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let mut pids = Vec::with_capacity(params.len());
    for (shape, values) in case.param_shapes.iter().zip(params.iter()) {
        let t = Tensor::new(shape, values.clone())?;
        pids.push(tape.input(&t));
    }
    let mut cids = Vec::with_capacity(case.consts.len());
    for (shape, values) in case.const_shapes.iter().zip(case.consts.iter()) {
        let t = Tensor::new(shape, values.clone())?;
        cids.push(tape.input(&t));
    }
    let loss = (case.build)(&mut tape, &pids, &cids)?;
    Ok(tape.value_scalar(loss) as f64)
}

/// Runs one case: analytic gradients against central differences with
/// step `h` on up to `samples` randomly chosen parameter coordinates.
pub fn run_case(
    case: &FdCase,
    h: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FdReport, TensorError> {
    // Analytic pass.
    let mut tape = Tape::new();
    let mut pids = Vec::new();
    for (shape, values) in case.param_shapes.iter().zip(case.init.iter()) {
        let t = Tensor::new(shape, values.clone())?.with_grad();
        pids.push(tape.variable(&t));
    }
    let mut cids = Vec::new();
    for (shape, values) in case.const_shapes.iter().zip(case.consts.iter()) {
        let t = Tensor::new(shape, values.clone())?;
        cids.push(tape.input(&t));
    }
    let loss = (case.build)(&mut tape, &pids, &cids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = pids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    // Coordinate sampling across all parameters.
    let total: usize = case.init.iter().map(|v| v.len()).sum();
    let count = samples.min(total);
    let mut order: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = rng.gen_range(i..total);
        order.swap(i, j);
    }

    let mut max_rel = 0.0f64;
    for &flat in order[..count].iter() {
        // locate (param index, offset)
        let mut remaining = flat;
        let mut pi = 0;
        while remaining >= case.init[pi].len() {
            remaining -= case.init[pi].len();
            pi += 1;
        }
        let mut plus = case.init.clone();
        plus[pi][remaining] += h as f32;
        let mut minus = case.init.clone();
        minus[pi][remaining] -= h as f32;
        let fd = (eval_loss(case, &plus)? - eval_loss(case, &minus)?) / (2.0 * h);
        let a = analytic[pi].get(remaining).copied().unwrap_or(0.0) as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(FdReport { name: case.name, max_rel_err: max_rel, checked: count })
}

/// Runs the whole standard suite. `samples` coordinates per case.
pub fn run_all(h: f64, samples: usize, seed: u64) -> Result<Vec<FdReport>, TensorError> {
    let mut reports = Vec::new();
    for case in standard_cases(seed) {
        let mut rng = substream(seed, case.name);
        reports.push(run_case(&case, h, samples, &mut rng)?);
    }
    Ok(reports)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values kept at least `margin` away from every point in `avoid`.
fn uniform_away(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32, avoid: &[f32], margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if avoid.iter().all(|&p| (v - p).abs() > margin) {
                break v;
            }
        })
        .collect()
}

/// The standard case list: one scenario per differentiable op kind plus
/// a composite two-layer network.
///
/// Each scenario's scalar loss is normalized to O(1): the loss value is
/// stored in 32-bit precision, so central differences on a large sum pick
/// up rounding noise of ulp(loss)/2h, which would swamp small-magnitude
/// gradient coordinates compared against the relative-error floor.
pub fn standard_cases(seed: u64) -> Vec<FdCase> {
    let mut cases: Vec<FdCase> = Vec::new();
    let r = |label: &str| substream(seed, label);

    // ---- elementwise activations ----
    {
        let mut rng = r("fd-relu");
        let x = uniform_away(&mut rng, 12, -1.0, 1.0, &[0.0], 0.05);
        let c = uniform(&mut rng, 12, -1.0, 1.0);
        cases.push(FdCase {
            name: "relu",
            param_shapes: vec![vec![3, 4]],
            init: vec![x],
            const_shapes: vec![vec![3, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.relu(p[0])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 12.0)
            },
        });
    }
    {
        let mut rng = r("fd-sigmoid");
        let x = uniform(&mut rng, 12, -2.0, 2.0);
        let c = uniform(&mut rng, 12, 0.0, 1.0);
        cases.push(FdCase {
            name: "sigmoid",
            param_shapes: vec![vec![3, 4]],
            init: vec![x],
            const_shapes: vec![vec![3, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.sigmoid(p[0])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 12.0)
            },
        });
    }
    {
        let mut rng = r("fd-tanh");
        let x = uniform(&mut rng, 12, -2.0, 2.0);
        let c = uniform(&mut rng, 12, -1.0, 1.0);
        cases.push(FdCase {
            name: "tanh",
            param_shapes: vec![vec![3, 4]],
            init: vec![x],
            const_shapes: vec![vec![3, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.tanh(p[0])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 12.0)
            },
        });
    }
    {
        let mut rng = r("fd-clamp01");
        let x = uniform_away(&mut rng, 12, -0.5, 1.5, &[0.0, 1.0], 0.05);
        let c = uniform(&mut rng, 12, 0.0, 1.0);
        cases.push(FdCase {
            name: "clamp01",
            param_shapes: vec![vec![3, 4]],
            init: vec![x],
            const_shapes: vec![vec![3, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.clamp01(p[0])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 12.0)
            },
        });
    }

    // ---- arithmetic ----
    {
        let mut rng = r("fd-add");
        let a = uniform(&mut rng, 8, -1.0, 1.0);
        let b = uniform(&mut rng, 8, -1.0, 1.0);
        let c = uniform(&mut rng, 8, -1.0, 1.0);
        cases.push(FdCase {
            name: "add",
            param_shapes: vec![vec![2, 4], vec![2, 4]],
            init: vec![a, b],
            const_shapes: vec![vec![2, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.add(p[0], p[1])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 8.0)
            },
        });
    }
    {
        let mut rng = r("fd-sub");
        let a = uniform(&mut rng, 8, -1.0, 1.0);
        let b = uniform(&mut rng, 8, -1.0, 1.0);
        let c = uniform(&mut rng, 8, -1.0, 1.0);
        cases.push(FdCase {
            name: "sub",
            param_shapes: vec![vec![2, 4], vec![2, 4]],
            init: vec![a, b],
            const_shapes: vec![vec![2, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.sub(p[0], p[1])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 8.0)
            },
        });
    }
    {
        let mut rng = r("fd-affine");
        let x = uniform(&mut rng, 8, -1.0, 1.0);
        let c = uniform(&mut rng, 8, -1.0, 1.0);
        cases.push(FdCase {
            name: "affine",
            param_shapes: vec![vec![2, 4]],
            init: vec![x],
            const_shapes: vec![vec![2, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.affine(p[0], 1.7, -0.3)?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 8.0)
            },
        });
    }

    // ---- linear algebra ----
    {
        let mut rng = r("fd-matmul");
        let a = uniform(&mut rng, 12, -1.0, 1.0);
        let b = uniform(&mut rng, 8, -1.0, 1.0);
        let c = uniform(&mut rng, 6, -1.0, 1.0);
        cases.push(FdCase {
            name: "matmul",
            param_shapes: vec![vec![3, 4], vec![4, 2]],
            init: vec![a, b],
            const_shapes: vec![vec![3, 2]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.matmul(p[0], p[1])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 6.0)
            },
        });
    }
    {
        let mut rng = r("fd-linear");
        let x = uniform(&mut rng, 6, -1.0, 1.0);
        let w = uniform(&mut rng, 12, -1.0, 1.0);
        let b = uniform(&mut rng, 4, -0.5, 0.5);
        let c = uniform(&mut rng, 8, -1.0, 1.0);
        cases.push(FdCase {
            name: "linear",
            param_shapes: vec![vec![2, 3], vec![3, 4], vec![4]],
            init: vec![x, w, b],
            const_shapes: vec![vec![2, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.linear(p[0], p[1], p[2])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 8.0)
            },
        });
    }

    // ---- convolution family ----
    {
        let mut rng = r("fd-conv2d");
        let x = uniform(&mut rng, 2 * 2 * 5 * 5, -1.0, 1.0);
        let w = uniform(&mut rng, 3 * 2 * 3 * 3, -0.5, 0.5);
        let b = uniform(&mut rng, 3, -0.2, 0.2);
        // stride 2, pad 1 on 5x5 with 3x3 kernel -> 3x3 output
        let c = uniform(&mut rng, 2 * 3 * 3 * 3, -1.0, 1.0);
        cases.push(FdCase {
            name: "conv2d",
            param_shapes: vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            init: vec![x, w, b],
            const_shapes: vec![vec![2, 3, 3, 3]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.conv2d(p[0], p[1], p[2], 2, 1)?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 54.0)
            },
        });
    }
    {
        let mut rng = r("fd-conv-transpose2d");
        let x = uniform(&mut rng, 2 * 2 * 3 * 3, -1.0, 1.0);
        let w = uniform(&mut rng, 2 * 3 * 4 * 4, -0.5, 0.5);
        let b = uniform(&mut rng, 3, -0.2, 0.2);
        // (3-1)*2 + 4 - 2*1 = 6x6 output
        let c = uniform(&mut rng, 2 * 3 * 6 * 6, -1.0, 1.0);
        cases.push(FdCase {
            name: "conv_transpose2d",
            param_shapes: vec![vec![2, 2, 3, 3], vec![2, 3, 4, 4], vec![3]],
            init: vec![x, w, b],
            const_shapes: vec![vec![2, 3, 6, 6]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.conv_transpose2d(p[0], p[1], p[2], 2, 1)?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 216.0)
            },
        });
    }
    {
        let mut rng = r("fd-maxpool2d");
        // Spread the values so no two entries of a pooling window sit
        // within 2h of each other: offsets dominate the random jitter.
        let n = 2 * 3 * 4 * 4;
        let base = uniform(&mut rng, n, -0.004, 0.004);
        let x: Vec<f32> = base
            .iter()
            .enumerate()
            .map(|(i, &v)| v + (i % 16) as f32 * 0.05)
            .collect();
        let c = uniform(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
        cases.push(FdCase {
            name: "maxpool2d",
            param_shapes: vec![vec![2, 3, 4, 4]],
            init: vec![x],
            const_shapes: vec![vec![2, 3, 2, 2]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.maxpool2d(p[0], 2)?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 24.0)
            },
        });
    }

    // ---- shape plumbing ----
    {
        let mut rng = r("fd-concat-channels");
        let a = uniform(&mut rng, 2 * 2 * 3 * 3, -1.0, 1.0);
        let b = uniform(&mut rng, 2 * 3 * 3, -1.0, 1.0);
        let c = uniform(&mut rng, 2 * 3 * 3 * 3, -1.0, 1.0);
        cases.push(FdCase {
            name: "concat_channels",
            param_shapes: vec![vec![2, 2, 3, 3], vec![2, 1, 3, 3]],
            init: vec![a, b],
            const_shapes: vec![vec![2, 3, 3, 3]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.concat_channels(p[0], p[1])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 54.0)
            },
        });
    }
    {
        let mut rng = r("fd-flatten");
        let x = uniform(&mut rng, 2 * 3 * 4, -1.0, 1.0);
        let c = uniform(&mut rng, 2 * 12, -1.0, 1.0);
        cases.push(FdCase {
            name: "flatten",
            param_shapes: vec![vec![2, 3, 4]],
            init: vec![x],
            const_shapes: vec![vec![2, 12]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.flatten(p[0])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 24.0)
            },
        });
    }
    {
        let mut rng = r("fd-reshape");
        let x = uniform(&mut rng, 24, -1.0, 1.0);
        let c = uniform(&mut rng, 24, -1.0, 1.0);
        cases.push(FdCase {
            name: "reshape",
            param_shapes: vec![vec![4, 6]],
            init: vec![x],
            const_shapes: vec![vec![2, 3, 4]],
            consts: vec![c],
            build: |t, p, c| {
                let y = t.reshape(p[0], &[2, 3, 4])?;
                let l = t.l2_loss(y, c[0])?;
                t.scale(l, 1.0 / 24.0)
            },
        });
    }

    // ---- reductions and losses ----
    {
        let mut rng = r("fd-mean");
        let x = uniform(&mut rng, 12, -1.0, 1.0);
        cases.push(FdCase {
            name: "mean",
            param_shapes: vec![vec![3, 4]],
            init: vec![x],
            const_shapes: vec![],
            consts: vec![],
            build: |t, p, _| t.mean(p[0]),
        });
    }
    {
        let mut rng = r("fd-l1-loss");
        let a = uniform(&mut rng, 12, -1.0, 1.0);
        // keep |a - b| > 0.05 so the sign is stable under the nudge
        let b: Vec<f32> = a
            .iter()
            .map(|&v| {
                let off = rng.gen_range(0.06..0.4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                v + off
            })
            .collect();
        cases.push(FdCase {
            name: "l1_loss",
            param_shapes: vec![vec![3, 4], vec![3, 4]],
            init: vec![a, b],
            const_shapes: vec![],
            consts: vec![],
            build: |t, p, _| t.l1_loss(p[0], p[1]),
        });
    }
    {
        let mut rng = r("fd-l2-loss");
        let a = uniform(&mut rng, 12, -1.0, 1.0);
        let b = uniform(&mut rng, 12, -1.0, 1.0);
        cases.push(FdCase {
            name: "l2_loss",
            param_shapes: vec![vec![3, 4], vec![3, 4]],
            init: vec![a, b],
            const_shapes: vec![],
            consts: vec![],
            build: |t, p, _| t.l2_loss(p[0], p[1]),
        });
    }
    {
        let mut rng = r("fd-bce-loss");
        let p = uniform(&mut rng, 12, 0.1, 0.9);
        cases.push(FdCase {
            name: "bce_loss",
            param_shapes: vec![vec![3, 4]],
            init: vec![p],
            const_shapes: vec![],
            consts: vec![],
            build: |t, p, _| t.bce_loss(p[0], 1.0),
        });
    }
    {
        let mut rng = r("fd-softmax-ce");
        let logits = uniform(&mut rng, 15, -1.5, 1.5);
        cases.push(FdCase {
            name: "softmax_cross_entropy",
            param_shapes: vec![vec![3, 5]],
            init: vec![logits],
            const_shapes: vec![],
            consts: vec![],
            build: |t, p, _| t.softmax_cross_entropy(p[0], &[1, 0, 4]),
        });
    }

    // ---- composite: conv -> relu -> pool -> linear -> softmax CE ----
    {
        let mut rng = r("fd-two-layer-net");
        // Smooth operating point by construction: a ramp image with strictly
        // positive weights and biases keeps every relu input above 0.5 and
        // makes each pooling window's winner decisive by a margin far larger
        // than any single-coordinate nudge, so no central-difference step
        // crosses a nondifferentiable point.
        let x: Vec<f32> = (0..2 * 36)
            .map(|i| 0.08 + 0.8 * (i % 36) as f32 / 36.0 + rng.gen_range(-0.005..0.005))
            .collect();
        let w1 = uniform(&mut rng, 4 * 1 * 3 * 3, 0.02, 0.12);
        let b1 = uniform(&mut rng, 4, 0.5, 0.9);
        let w2 = uniform(&mut rng, 36 * 3, -0.15, 0.15);
        let b2 = uniform(&mut rng, 3, -0.2, 0.2);
        cases.push(FdCase {
            name: "two_layer_net",
            param_shapes: vec![
                vec![4, 1, 3, 3],
                vec![4],
                vec![36, 3],
                vec![3],
            ],
            init: vec![w1, b1, w2, b2],
            const_shapes: vec![vec![2, 1, 6, 6]],
            consts: vec![x],
            build: |t, p, c| {
                let h = t.conv2d(c[0], p[0], p[1], 1, 1)?;
                let h = t.relu(h)?;
                let h = t.maxpool2d(h, 2)?;
                let h = t.flatten(h)?;
                let logits = t.linear(h, p[2], p[3])?;
                t.softmax_cross_entropy(logits, &[0, 2])
            },
        });
    }

    cases
}
