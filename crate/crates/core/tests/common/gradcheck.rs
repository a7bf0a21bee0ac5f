//! Central finite-difference oracle for tape gradients (64-bit).

use bdfa::tensor::{Tape, Tensor, Var};
use bdfa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-5;

/// Builds a scalar loss from the given input leaves.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

pub fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.item(loss).unwrap()
}

/// Largest element-wise `|autodiff - fd| / (|fd| + 1e-8)` over every
/// tracked input.
pub fn max_relative_error(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        if !input.is_tracked() {
            continue;
        }
        let analytic = tape.grad(vars[idx]).expect("tracked leaf has a gradient").to_vec();
        for j in 0..input.numel() {
            let mut probe = inputs.to_vec();
            probe[idx].data_mut()[j] += FD_EPS;
            let up = eval(build, &probe);
            probe[idx].data_mut()[j] -= 2.0 * FD_EPS;
            let down = eval(build, &probe);
            let fd = (up - down) / (2.0 * FD_EPS);
            let rel = (analytic[j] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], tracked: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().requires_grad(tracked)
}

/// Values bounded away from zero so ReLU kinks sit well outside the FD probe.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], tracked: bool) -> Tensor<f64> {
    let mut t = normal_tensor(rng, shape, tracked);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 - v.abs() } else { 0.05 + v.abs() };
        }
    }
    t
}

/// Distinct values spaced 0.1 apart so max-pool winners never change under a
/// 1e-4 probe.
pub fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize], tracked: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let data = order.into_iter().map(|k| k as f64 * 0.1 - n as f64 * 0.05).collect();
    Tensor::new(shape.to_vec(), data).unwrap().requires_grad(tracked)
}

/// Projects a tensor-valued op to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let shape = tape.shape(y).to_vec();
    let weights = normal_tensor(&mut r, &shape, false);
    let w = tape.constant(weights)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

pub struct Case {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build<'static>>,
}

/// Every op kind the tape supports, instantiated with random shapes drawn
/// from `seed`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    let dim = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.random_range(lo..=hi);

    let (m, k, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 4));
    cases.push(Case {
        op: "matmul",
        inputs: vec![normal_tensor(&mut r, &[m, k], true), normal_tensor(&mut r, &[k, n], true)],
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        }),
    });

    let (b, i, o) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 4));
    cases.push(Case {
        op: "linear",
        inputs: vec![
            normal_tensor(&mut r, &[b, i], true),
            normal_tensor(&mut r, &[o, i], true),
            normal_tensor(&mut r, &[o], true),
        ],
        build: Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        }),
    });

    let (n, c, h, w) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 3, 5), dim(&mut r, 3, 5));
    let (oc, kk) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let stride = dim(&mut r, 1, 2);
    let pad = dim(&mut r, 0, 1);
    cases.push(Case {
        op: "conv2d",
        inputs: vec![
            normal_tensor(&mut r, &[n, c, h, w], true),
            normal_tensor(&mut r, &[oc, c, kk, kk], true),
            normal_tensor(&mut r, &[oc], true),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        }),
    });

    let bn_shape = [dim(&mut r, 2, 3), dim(&mut r, 1, 3), dim(&mut r, 2, 3), dim(&mut r, 2, 3)];
    let ch = bn_shape[1];
    cases.push(Case {
        op: "batchnorm2d_train",
        inputs: vec![
            normal_tensor(&mut r, &bn_shape, true),
            normal_tensor(&mut r, &[ch], true),
            normal_tensor(&mut r, &[ch], true),
        ],
        build: Box::new(move |t, v| {
            let (y, _) = t.batchnorm2d_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        }),
    });

    let run_mean: Vec<f64> = (0..ch).map(|_| r.random_range(-1.0..1.0)).collect();
    let run_var: Vec<f64> = (0..ch).map(|_| r.random_range(0.2..2.0)).collect();
    cases.push(Case {
        op: "batchnorm2d_eval",
        inputs: vec![
            normal_tensor(&mut r, &bn_shape, true),
            normal_tensor(&mut r, &[ch], true),
            normal_tensor(&mut r, &[ch], true),
        ],
        build: Box::new(move |t, v| {
            let y = t.batchnorm2d_eval(v[0], v[1], v[2], &run_mean, &run_var, 1e-5)?;
            project(t, y, seed)
        }),
    });

    let s = [dim(&mut r, 1, 3), dim(&mut r, 1, 6)];
    cases.push(Case {
        op: "relu",
        inputs: vec![away_from_zero(&mut r, &s, true)],
        build: Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        }),
    });

    let (pk, ps) = (dim(&mut r, 1, 2), dim(&mut r, 1, 2));
    let pshape = [dim(&mut r, 1, 2), dim(&mut r, 1, 2), dim(&mut r, 2, 5), dim(&mut r, 2, 5)];
    cases.push(Case {
        op: "maxpool2d",
        inputs: vec![well_separated(&mut r, &pshape, true)],
        build: Box::new(move |t, v| {
            let y = t.maxpool2d(v[0], pk, ps)?;
            project(t, y, seed)
        }),
    });
    cases.push(Case {
        op: "avgpool2d",
        inputs: vec![normal_tensor(&mut r, &pshape, true)],
        build: Box::new(move |t, v| {
            let y = t.avgpool2d(v[0], pk, ps)?;
            project(t, y, seed)
        }),
    });

    let es = [dim(&mut r, 1, 3), dim(&mut r, 1, 4)];
    for op in ["add", "sub", "mul", "mse"] {
        cases.push(Case {
            op,
            inputs: vec![normal_tensor(&mut r, &es, true), normal_tensor(&mut r, &es, true)],
            build: Box::new(move |t, v| match op {
                "add" => {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, seed)
                }
                "sub" => {
                    let y = t.sub(v[0], v[1])?;
                    project(t, y, seed)
                }
                "mul" => {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, seed)
                }
                _ => t.mse(v[0], v[1]),
            }),
        });
    }

    let c = r.random_range(-2.0..2.0);
    cases.push(Case {
        op: "scalar_ops",
        inputs: vec![normal_tensor(&mut r, &es, true)],
        build: Box::new(move |t, v| {
            let a = t.scale(v[0], c)?;
            let b = t.add_scalar(a, 0.7)?;
            let sq = t.square(b)?;
            let m = t.mean(sq)?;
            let s = t.sum(b)?;
            t.add(m, s)
        }),
    });

    cases.push(Case {
        op: "sqrt",
        inputs: vec![{
            let mut x = normal_tensor(&mut r, &es, true);
            x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
            x
        }],
        build: Box::new(move |t, v| {
            let y = t.sqrt(v[0])?;
            project(t, y, seed)
        }),
    });

    let cs = [dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
    cases.push(Case {
        op: "channel_stats",
        inputs: vec![normal_tensor(&mut r, &cs, true)],
        build: Box::new(move |t, v| {
            let m = t.channel_mean(v[0])?;
            let var = t.channel_var(v[0])?;
            let pm = project(t, m, seed)?;
            let pv = project(t, var, seed + 1)?;
            t.add(pm, pv)
        }),
    });

    cases.push(Case {
        op: "flatten",
        inputs: vec![normal_tensor(&mut r, &cs, true)],
        build: Box::new(move |t, v| {
            let y = t.flatten(v[0])?;
            project(t, y, seed)
        }),
    });

    let (rows, classes) = (dim(&mut r, 1, 5), dim(&mut r, 2, 6));
    let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
    cases.push(Case {
        op: "softmax_cross_entropy",
        inputs: vec![normal_tensor(&mut r, &[rows, classes], true)],
        build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
    });

    cases
}
