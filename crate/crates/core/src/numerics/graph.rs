//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]; nodes are therefore
//! stored in topological order and [`Graph::backward`] simply walks them in
//! reverse. The op set is closed: exactly what the encoder, the two
//! classifier heads and the training losses need.
//!
//! Sequence tensors use the `[batch, time, channels]` layout throughout.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Epsilon inside the square root of standard-deviation pooling.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug)]
struct GruCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Gru {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        cache: GruCache,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Entropy(Var),
    MeanTime(Var),
    StdTime(Var),
    MaxTime {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    GradReverse {
        x: Var,
        coeff: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter as a leaf. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: !store.is_frozen(id),
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(name.to_owned()));
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn seq_dims(&self, op: &str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [b, t, c] => Ok((b, t, c)),
            ref s => Err(Error::Dimension(format!("{op}: expected [batch, time, channels], got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}"))),
        };
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · wᵀ + b` applied over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (o, i) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::Dimension(format!("linear: weight shape {s:?}"))),
        };
        let xs = self.shape(x);
        if xs.last() != Some(&i) || self.shape(b) != [o] {
            return Err(Error::Dimension(format!(
                "linear: input {xs:?}, weight [{o}, {i}], bias {:?}",
                self.shape(b)
            )));
        }
        let rows = self.value(x).len() / i;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(rows * o);
        for r in 0..rows {
            let xr = &xd[r * i..(r + 1) * i];
            for (oi, &bias) in bd.iter().enumerate() {
                out.push(bias + dot(xr, &wd[oi * i..(oi + 1) * i]));
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = o;
        self.push("linear", shape, out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Valid (unpadded) 1-D convolution over time. `x` is `[B, T, C]`, `w` is
    /// `[O, K, C]`, `b` is `[O]`; output is `[B, (T-K)/stride + 1, O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (bs, t, c) = self.seq_dims("conv1d", x)?;
        let (o, k) = match *self.shape(w) {
            [o, k, c2] if c2 == c => (o, k),
            ref s => return Err(Error::Dimension(format!("conv1d: weight {s:?} for {c} input channels"))),
        };
        if self.shape(b) != [o] || stride == 0 {
            return Err(Error::Dimension(format!("conv1d: bias {:?}, stride {stride}", self.shape(b))));
        }
        if t < k {
            return Err(Error::Dimension(format!("conv1d: {t} steps shorter than kernel {k}")));
        }
        let t_out = (t - k) / stride + 1;
        let span = k * c;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(bs * t_out * o);
        for bi in 0..bs {
            let xb = &xd[bi * t * c..(bi + 1) * t * c];
            for ti in 0..t_out {
                let win = &xb[ti * stride * c..ti * stride * c + span];
                for (oi, &bias) in bd.iter().enumerate() {
                    out.push(bias + dot(win, &wd[oi * span..(oi + 1) * span]));
                }
            }
        }
        self.push("conv1d", vec![bs, t_out, o], out, Op::Conv1d { x, w, b, stride }, &[x, w, b])
    }

    /// Single-layer unidirectional GRU from a zero initial state, returning
    /// the hidden state at every step. Gate order in the stacked weights is
    /// reset, update, candidate.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var> {
        let (bs, t, i) = self.seq_dims("gru", x)?;
        let h = match *self.shape(w_hh) {
            [g, h] if g == 3 * h => h,
            ref s => return Err(Error::Dimension(format!("gru: recurrent weight {s:?}"))),
        };
        if self.shape(w_ih) != [3 * h, i] || self.shape(b_ih) != [3 * h] || self.shape(b_hh) != [3 * h] {
            return Err(Error::Dimension(format!(
                "gru: input weight {:?}, biases {:?} {:?} for input {i}, hidden {h}",
                self.shape(w_ih),
                self.shape(b_ih),
                self.shape(b_hh)
            )));
        }
        let (xd, wi, wh, bi_, bh) = (
            self.data(x),
            self.data(w_ih),
            self.data(w_hh),
            self.data(b_ih),
            self.data(b_hh),
        );
        let n_state = bs * t * h;
        let mut out = vec![0.0; n_state];
        let mut cache = GruCache {
            r: vec![0.0; n_state],
            z: vec![0.0; n_state],
            n: vec![0.0; n_state],
            hn: vec![0.0; n_state],
        };
        let zero = vec![0.0; h];
        let mut gx = vec![0.0; 3 * h];
        let mut gh = vec![0.0; 3 * h];
        for b in 0..bs {
            for ti in 0..t {
                let xt = &xd[(b * t + ti) * i..(b * t + ti + 1) * i];
                let base = (b * t + ti) * h;
                let hp: Vec<f64> = if ti == 0 {
                    zero.clone()
                } else {
                    out[base - h..base].to_vec()
                };
                for g in 0..3 * h {
                    gx[g] = bi_[g] + dot(xt, &wi[g * i..(g + 1) * i]);
                    gh[g] = bh[g] + dot(&hp, &wh[g * h..(g + 1) * h]);
                }
                for j in 0..h {
                    let r = sigmoid(gx[j] + gh[j]);
                    let z = sigmoid(gx[h + j] + gh[h + j]);
                    let hn = gh[2 * h + j];
                    let n = (gx[2 * h + j] + r * hn).tanh();
                    out[base + j] = (1.0 - z) * n + z * hp[j];
                    cache.r[base + j] = r;
                    cache.z[base + j] = z;
                    cache.n[base + j] = n;
                    cache.hn[base + j] = hn;
                }
            }
        }
        let op = Op::Gru {
            x,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            cache,
        };
        self.push("gru", vec![bs, t, h], out, op, &[x, w_ih, w_hh, b_ih, b_hh])
    }

    /// Parametric ReLU with a single learned slope for negative inputs.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::Dimension(format!("prelu: slope shape {:?}", self.shape(slope))));
        }
        let a = self.data(slope)[0];
        let out = self.data(x).iter().map(|&v| if v > 0.0 { v } else { a * v }).collect();
        let shape = self.shape(x).to_vec();
        self.push("prelu", shape, out, Op::Prelu { x, slope }, &[x, slope])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push("sub", shape, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push("exp", shape, out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push("log", shape, out, Op::Log(x), &[x])
    }

    fn last_dim(&self, op: &str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::Dimension(format!("{op}: shape {:?}", self.shape(x)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(c) {
            let lse = logsumexp(row);
            out.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("log_softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(c) {
            let lse = logsumexp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Mean over rows of the entropy of `softmax(x)`; for log-probability
    /// rows this is `−Σ_j p_j log p_j`. Uniform rows give exactly `ln K`.
    pub fn mean_entropy(&mut self, x: Var) -> Result<Var> {
        let c = self.last_dim("mean_entropy", x)?;
        let mut mean = 0.0;
        for (i, row) in self.data(x).chunks(c).enumerate() {
            let h = row_entropy(row);
            mean += (h - mean) / (i + 1) as f64;
        }
        self.push("mean_entropy", Vec::new(), vec![mean], Op::Entropy(x), &[x])
    }

    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let (b, t, c) = self.seq_dims("mean_time", x)?;
        let out = pool_mean(self.data(x), b, t, c);
        self.push("mean_time", vec![b, c], out, Op::MeanTime(x), &[x])
    }

    /// Population standard deviation over time, `sqrt(var + STD_EPS)`.
    pub fn std_time(&mut self, x: Var) -> Result<Var> {
        let (b, t, c) = self.seq_dims("std_time", x)?;
        let xd = self.data(x);
        let mean = pool_mean(xd, b, t, c);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let d = xd[(bi * t + ti) * c + ci] - mean[bi * c + ci];
                    out[bi * c + ci] += d * d;
                }
            }
        }
        for v in &mut out {
            *v = (*v / t as f64 + STD_EPS).sqrt();
        }
        self.push("std_time", vec![b, c], out, Op::StdTime(x), &[x])
    }

    pub fn max_time(&mut self, x: Var) -> Result<Var> {
        let (b, t, c) = self.seq_dims("max_time", x)?;
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let idx = (bi * t + ti) * c + ci;
                    if xd[idx] > out[bi * c + ci] {
                        out[bi * c + ci] = xd[idx];
                        argmax[bi * c + ci] = idx;
                    }
                }
            }
        }
        self.push("max_time", vec![b, c], out, Op::MaxTime { x, argmax }, &[x])
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::Dimension(format!("concat: {:?} vs {s:?}", self.shape(first))));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(xs.to_vec()), xs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = match *self.shape(logp) {
            [b, c] => (b, c),
            ref s => return Err(Error::Dimension(format!("nll: expected [batch, classes], got {s:?}"))),
        };
        if labels.len() != b {
            return Err(Error::Dimension(format!("nll: {} labels for batch {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label(format!("class {bad} outside 0..{c}")));
        }
        if b == 0 {
            return Err(Error::Dimension("nll: empty batch".into()));
        }
        let d = self.data(logp);
        let s: f64 = labels.iter().enumerate().map(|(i, &l)| -d[i * c + l]).sum();
        let op = Op::Nll {
            logp,
            labels: labels.to_vec(),
        };
        self.push("nll", Vec::new(), vec![s / b as f64], op, &[logp])
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-coeff` on the backward pass.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Result<Var> {
        let out = self.data(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push("grad_reverse", shape, out, Op::GradReverse { x, coeff }, &[x])
    }

    /// Propagates d(loss)/d(node) back through the graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward on non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("backward".into()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of parameter leaves into the store's grad buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), true) = (node.param, node.requires_grad) {
                if let Some(g) = grads.grads[i].as_deref() {
                    store.accumulate_grad(pid, g)?;
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    // g[m,n] · bᵀ[n,k]
                    let bd = self.data(b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            ga[i * k + kk] = dot(&g[i * n..(i + 1) * n], &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                    self.acc(grads, a, ga);
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            axpy(ad[i * k + kk], &g[i * n..(i + 1) * n], &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            &Op::Linear { x, w, b } => {
                let (o, i) = (self.shape(w)[0], self.shape(w)[1]);
                let rows = g.len() / o;
                if self.needs(x) {
                    let wd = self.data(w);
                    let mut gx = vec![0.0; rows * i];
                    for r in 0..rows {
                        let gxr = &mut gx[r * i..(r + 1) * i];
                        for oi in 0..o {
                            axpy(g[r * o + oi], &wd[oi * i..(oi + 1) * i], gxr);
                        }
                    }
                    self.acc(grads, x, gx);
                }
                if self.needs(w) {
                    let xd = self.data(x);
                    let mut gw = vec![0.0; o * i];
                    for r in 0..rows {
                        let xr = &xd[r * i..(r + 1) * i];
                        for oi in 0..o {
                            axpy(g[r * o + oi], xr, &mut gw[oi * i..(oi + 1) * i]);
                        }
                    }
                    self.acc(grads, w, gw);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.acc(grads, b, gb);
                }
            }
            &Op::Conv1d { x, w, b, stride } => {
                let (bs, t, c) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (o, k) = (self.shape(w)[0], self.shape(w)[1]);
                let t_out = self.shape(Var(id))[1];
                let span = k * c;
                if self.needs(x) {
                    let wd = self.data(w);
                    let mut gx = vec![0.0; bs * t * c];
                    for bi in 0..bs {
                        for ti in 0..t_out {
                            let off = bi * t * c + ti * stride * c;
                            let gwin = &mut gx[off..off + span];
                            for oi in 0..o {
                                axpy(g[(bi * t_out + ti) * o + oi], &wd[oi * span..(oi + 1) * span], gwin);
                            }
                        }
                    }
                    self.acc(grads, x, gx);
                }
                if self.needs(w) {
                    let xd = self.data(x);
                    let mut gw = vec![0.0; o * span];
                    for bi in 0..bs {
                        for ti in 0..t_out {
                            let off = bi * t * c + ti * stride * c;
                            let win = &xd[off..off + span];
                            for oi in 0..o {
                                axpy(g[(bi * t_out + ti) * o + oi], win, &mut gw[oi * span..(oi + 1) * span]);
                            }
                        }
                    }
                    self.acc(grads, w, gw);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::Gru {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                cache,
            } => {
                let (x, w_ih, w_hh, b_ih, b_hh) = (*x, *w_ih, *w_hh, *b_ih, *b_hh);
                let (bs, t, i) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let h = self.shape(w_hh)[1];
                let (xd, wi, wh) = (self.data(x), self.data(w_ih), self.data(w_hh));
                let mut gx = vec![0.0; bs * t * i];
                let mut gwi = vec![0.0; 3 * h * i];
                let mut gwh = vec![0.0; 3 * h * h];
                let mut gbi = vec![0.0; 3 * h];
                let mut gbh = vec![0.0; 3 * h];
                let zero = vec![0.0; h];
                let mut dgx = vec![0.0; 3 * h];
                let mut dgh = vec![0.0; 3 * h];
                for b in 0..bs {
                    // dh carries the gradient flowing into h_t from step t+1.
                    let mut dh = vec![0.0; h];
                    for ti in (0..t).rev() {
                        let base = (b * t + ti) * h;
                        let hp = if ti == 0 { &zero[..] } else { &y[base - h..base] };
                        let mut dh_prev = vec![0.0; h];
                        for j in 0..h {
                            let dht = dh[j] + g[base + j];
                            let (r, z, n, hn) = (cache.r[base + j], cache.z[base + j], cache.n[base + j], cache.hn[base + j]);
                            let dn = dht * (1.0 - z);
                            let dz = dht * (hp[j] - n);
                            dh_prev[j] = dht * z;
                            let dn_pre = dn * (1.0 - n * n);
                            let dr = dn_pre * hn;
                            let dr_pre = dr * r * (1.0 - r);
                            let dz_pre = dz * z * (1.0 - z);
                            dgx[j] = dr_pre;
                            dgx[h + j] = dz_pre;
                            dgx[2 * h + j] = dn_pre;
                            dgh[j] = dr_pre;
                            dgh[h + j] = dz_pre;
                            dgh[2 * h + j] = dn_pre * r;
                        }
                        let xt = &xd[(b * t + ti) * i..(b * t + ti + 1) * i];
                        let gxt = &mut gx[(b * t + ti) * i..(b * t + ti + 1) * i];
                        for gi in 0..3 * h {
                            let (ax, ah) = (dgx[gi], dgh[gi]);
                            gbi[gi] += ax;
                            gbh[gi] += ah;
                            axpy(ax, &wi[gi * i..(gi + 1) * i], gxt);
                            axpy(ax, xt, &mut gwi[gi * i..(gi + 1) * i]);
                            axpy(ah, &wh[gi * h..(gi + 1) * h], &mut dh_prev);
                            axpy(ah, hp, &mut gwh[gi * h..(gi + 1) * h]);
                        }
                        dh = dh_prev;
                    }
                }
                self.acc(grads, x, gx);
                self.acc(grads, w_ih, gwi);
                self.acc(grads, w_hh, gwh);
                self.acc(grads, b_ih, gbi);
                self.acc(grads, b_hh, gbh);
            }
            &Op::Prelu { x, slope } => {
                let a = self.data(slope)[0];
                let xd = self.data(x);
                if self.needs(x) {
                    let gx = xd.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { a * gv }).collect();
                    self.acc(grads, x, gx);
                }
                if self.needs(slope) {
                    let ga = xd.iter().zip(g).filter(|(&v, _)| v <= 0.0).map(|(v, gv)| v * gv).sum();
                    self.acc(grads, slope, vec![ga]);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.acc(grads, a, g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect());
                }
                if self.needs(b) {
                    self.acc(grads, b, g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(x, c) => self.acc(grads, x, g.iter().map(|v| v * c).collect()),
            &Op::Exp(x) => self.acc(grads, x, g.iter().zip(y).map(|(a, b)| a * b).collect()),
            &Op::Log(x) => self.acc(grads, x, g.iter().zip(self.data(x)).map(|(a, b)| a / b).collect()),
            &Op::Softmax(x) => {
                let c = *self.shape(x).last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let s = dot(gr, yr);
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - s)));
                }
                self.acc(grads, x, gx);
            }
            &Op::LogSoftmax(x) => {
                let c = *self.shape(x).last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
                }
                self.acc(grads, x, gx);
            }
            &Op::Entropy(x) => {
                let c = *self.shape(x).last().unwrap();
                let rows = self.value(x).len() / c;
                let scale = g[0] / rows as f64;
                let mut gx = Vec::with_capacity(rows * c);
                for row in self.data(x).chunks(c) {
                    let (p, shifted) = softmax_row(row);
                    let mean: f64 = p.iter().zip(&shifted).map(|(a, b)| a * b).sum();
                    gx.extend(p.iter().zip(&shifted).map(|(pk, dk)| -scale * pk * (dk - mean)));
                }
                self.acc(grads, x, gx);
            }
            &Op::MeanTime(x) => {
                let (b, t, c) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let mut gx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in 0..t {
                        for ci in 0..c {
                            gx[(bi * t + ti) * c + ci] = g[bi * c + ci] / t as f64;
                        }
                    }
                }
                self.acc(grads, x, gx);
            }
            &Op::StdTime(x) => {
                let (b, t, c) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let xd = self.data(x);
                let mean = pool_mean(xd, b, t, c);
                let mut gx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in 0..t {
                        for ci in 0..c {
                            let k = bi * c + ci;
                            let idx = (bi * t + ti) * c + ci;
                            gx[idx] = g[k] * (xd[idx] - mean[k]) / (t as f64 * y[k]);
                        }
                    }
                }
                self.acc(grads, x, gx);
            }
            Op::MaxTime { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (k, &idx) in argmax.iter().enumerate() {
                    gx[idx] += g[k];
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&v| *self.shape(v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(&widths) {
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, v, gv);
                    }
                    off += w;
                }
            }
            &Op::Sum(x) => self.acc(grads, x, vec![g[0]; self.value(x).len()]),
            Op::Nll { logp, labels } => {
                let c = self.shape(*logp)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gx = vec![0.0; self.value(*logp).len()];
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] = -scale;
                }
                self.acc(grads, *logp, gx);
            }
            &Op::GradReverse { x, coeff } => self.acc(grads, x, g.iter().map(|v| -coeff * v).collect()),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler keep independent add chains in flight.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let j = 4 * k;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax normalized by division, and the max-shifted inputs.
fn softmax_row(row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let d: Vec<f64> = row.iter().map(|v| v - m).collect();
    let e: Vec<f64> = d.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    (e.into_iter().map(|v| v / z).collect(), d)
}

/// `ln z − Σ p_j d_j` with `d = x − max x`, i.e. `lse(x) − Σ p_j x_j`.
fn row_entropy(row: &[f64]) -> f64 {
    let (p, d) = softmax_row(row);
    let z: f64 = d.iter().map(|v| v.exp()).sum();
    let terms: Vec<f64> = p.iter().zip(&d).map(|(pk, dk)| if *pk > 0.0 { pk * dk } else { 0.0 }).collect();
    z.ln() - pairwise_sum(&terms)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], row);
        }
    }
    out
}

fn pool_mean(x: &[f64], b: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                out[bi * c + ci] += x[(bi * t + ti) * c + ci];
            }
        }
    }
    for v in &mut out {
        *v /= t as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn prelu_piecewise() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-2.0, 3.0]));
        let a = g.constant(t(&[1], &[0.25]));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = g.scale(w, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
        let big = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(big), Err(Error::Numeric(_))));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", "enc", t(&[2], &[1.0, -1.0]));
        let v = store.add("v", "sc", t(&[2], &[0.5, 0.5]));
        store.set_frozen("sc", true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let vv = g.param(&store, v);
        let p = g.mul(wv, vv).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(vv).is_none());
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        assert!(store.grad(v).is_none());
        assert_eq!(store.grad(w).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn constant_sequence_has_epsilon_std() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 5, 2], &[3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0]));
        let s = g.std_time(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - STD_EPS.sqrt()).abs() < 1e-15);
        }
    }
}
