//! Test-only oracles shared by the integration suites.

#![allow(dead_code)]

use menan::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Floor on the relative-error denominator so near-zero gradients are
/// compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of any library distribution.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 0.5 + rng.random::<f64>() * 1.5).collect()).unwrap()
}

/// An op under test: builds the op's output from differentiable input leaves.
pub type OpFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Scalar probe `sum(op(inputs) ⊙ weights)` evaluated on a fresh graph.
fn probe(op: &OpFn, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = op(&mut g, &vars);
    g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Maximum relative error between the analytic gradient of every input and
/// central finite differences, scaled by `analytic_scale` (−coeff for the
/// reversal op, 1 otherwise).
pub fn max_grad_error(op: &OpFn, inputs: &[Tensor], seed: u64, analytic_scale: f64) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = op(&mut g, &vars);
    let weights = randn(&mut r, g.value(y).shape());
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (probe(op, &plus, &weights) - probe(op, &minus, &weights)) / (2.0 * FD_STEP);
            let expected = analytic_scale * numeric;
            let a = analytic[i];
            let err = (a - expected).abs() / a.abs().max(expected.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    /// Builds the random inputs for instance `i`.
    pub inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    pub op: Box<OpFn<'static>>,
    pub analytic_scale: f64,
}

/// One case per autodiff op kind.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name, inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, op: Box<OpFn<'static>>| {
        cases.push(OpCase {
            name,
            inputs,
            op,
            analytic_scale: 1.0,
        })
    };
    add(
        "matmul",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])]),
        Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
    );
    add(
        "linear",
        Box::new(|r| vec![randn(r, &[2, 3, 5]), randn(r, &[4, 5]), randn(r, &[4])]),
        Box::new(|g, v| g.linear(v[0], v[1], v[2]).unwrap()),
    );
    add(
        "conv1d",
        Box::new(|r| vec![randn(r, &[2, 11, 3]), randn(r, &[4, 3, 3]), randn(r, &[4])]),
        Box::new(|g, v| g.conv1d(v[0], v[1], v[2], 2).unwrap()),
    );
    add(
        "gru",
        Box::new(|r| {
            vec![
                randn(r, &[2, 5, 3]),
                randn(r, &[12, 3]),
                randn(r, &[12, 4]),
                randn(r, &[12]),
                randn(r, &[12]),
            ]
        }),
        Box::new(|g, v| g.gru(v[0], v[1], v[2], v[3], v[4]).unwrap()),
    );
    add(
        "prelu",
        Box::new(|r| vec![randn(r, &[3, 4]), Tensor::new(vec![1], vec![0.25 + r.random::<f64>() * 0.5]).unwrap()]),
        Box::new(|g, v| g.prelu(v[0], v[1]).unwrap()),
    );
    add(
        "add",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
    );
    add(
        "sub",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
    );
    add(
        "mul",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
    );
    add(
        "scale",
        Box::new(|r| vec![randn(r, &[5])]),
        Box::new(|g, v| g.scale(v[0], -1.7).unwrap()),
    );
    add("exp", Box::new(|r| vec![randn(r, &[2, 3])]), Box::new(|g, v| g.exp(v[0]).unwrap()));
    add("log", Box::new(|r| vec![rand_pos(r, &[2, 3])]), Box::new(|g, v| g.log(v[0]).unwrap()));
    add(
        "softmax",
        Box::new(|r| vec![randn(r, &[3, 5])]),
        Box::new(|g, v| g.softmax(v[0]).unwrap()),
    );
    add(
        "log_softmax",
        Box::new(|r| vec![randn(r, &[3, 5])]),
        Box::new(|g, v| g.log_softmax(v[0]).unwrap()),
    );
    add(
        "mean_entropy",
        Box::new(|r| vec![randn(r, &[3, 5])]),
        Box::new(|g, v| {
            let lp = g.log_softmax(v[0]).unwrap();
            g.mean_entropy(lp).unwrap()
        }),
    );
    add(
        "mean_entropy_raw",
        Box::new(|r| vec![randn(r, &[2, 4])]),
        Box::new(|g, v| g.mean_entropy(v[0]).unwrap()),
    );
    add(
        "mean_time",
        Box::new(|r| vec![randn(r, &[2, 6, 3])]),
        Box::new(|g, v| g.mean_time(v[0]).unwrap()),
    );
    add(
        "std_time",
        Box::new(|r| vec![randn(r, &[2, 6, 3])]),
        Box::new(|g, v| g.std_time(v[0]).unwrap()),
    );
    add(
        "max_time",
        Box::new(|r| vec![randn(r, &[2, 6, 3])]),
        Box::new(|g, v| g.max_time(v[0]).unwrap()),
    );
    add(
        "concat",
        Box::new(|r| vec![randn(r, &[2, 3]), randn(r, &[2, 1]), randn(r, &[2, 4])]),
        Box::new(|g, v| g.concat(v).unwrap()),
    );
    add("sum", Box::new(|r| vec![randn(r, &[4, 2])]), Box::new(|g, v| g.sum(v[0]).unwrap()));
    add(
        "nll",
        Box::new(|r| vec![randn(r, &[4, 3])]),
        Box::new(|g, v| {
            let lp = g.log_softmax(v[0]).unwrap();
            g.nll(lp, &[0, 2, 1, 2]).unwrap()
        }),
    );
    cases.push(OpCase {
        name: "grad_reverse",
        inputs: Box::new(|r| vec![randn(r, &[3, 2])]),
        op: Box::new(|g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.grad_reverse(sq, 0.5).unwrap()
        }),
        analytic_scale: -0.5,
    });
    cases
}

/// Brute-force DFT power spectrum, `|X_k|²` for `k = 0..=n/2`.
pub fn dft_power(x: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Brute-force NCCF over `lags`, with comparison window `w` starting at 0.
pub fn nccf_bruteforce(frame: &[f64], w: usize, lags: std::ops::RangeInclusive<usize>) -> Vec<f64> {
    lags.map(|l| {
        let mut num = 0.0;
        let mut e0 = 0.0;
        let mut el = 0.0;
        for n in 0..w {
            num += frame[n] * frame[n + l];
            e0 += frame[n] * frame[n];
            el += frame[n + l] * frame[n + l];
        }
        let d = (e0 * el).sqrt();
        if d > 0.0 {
            (num / d).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
    .collect()
}

pub fn sine(freq: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
        .collect()
}

/// Random `t × 43` feature matrix with values in [-1, 1).
pub fn random_features(rng: &mut ChaCha8Rng, t: usize) -> menan::dsp::FeatureMatrix {
    let data = (0..t * menan::dsp::N_CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
    menan::dsp::FeatureMatrix::new(t, data).unwrap()
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
