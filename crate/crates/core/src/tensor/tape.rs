use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-channel batch mean and population variance seen by a training-mode
/// batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// `[N, C, rest...]` viewed as (batch, channels, inner extent).
#[derive(Clone, Copy, Debug)]
struct ChannelLayout {
    n: usize,
    c: usize,
    inner: usize,
}

impl ChannelLayout {
    fn of(op: &'static str, shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape(op, format!("expected [N,C,...], got {shape:?}")));
        }
        Ok(ChannelLayout { n: shape[0], c: shape[1], inner: shape[2..].iter().product() })
    }

    fn per_channel(&self) -> f64 {
        (self.n * self.inner) as f64
    }

    /// Calls `f(channel, flat_index)` over every element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for n in 0..self.n {
            for c in 0..self.c {
                let base = (n * self.c + c) * self.inner;
                for i in base..base + self.inner {
                    f(c, i);
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    /// Result of an op none of whose inputs are tracked.
    Constant,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, batch: usize, inp: usize, out: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, layout: ChannelLayout },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, layout: ChannelLayout },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeometry },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Square { x: Var },
    Sqrt { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    ChannelMean { x: Var, layout: ChannelLayout },
    ChannelVar { x: Var, mean: Vec<T>, layout: ChannelLayout },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T>, k: usize },
    Mse { a: Var, b: Var },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | Mse { a, b } => vec![*a, *b],
            Linear { x, w, b, .. } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNormTrain { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Relu { x }
            | MaxPool { x, .. }
            | AvgPool { x, .. }
            | Scale { x, .. }
            | AddScalar { x }
            | Square { x }
            | Sqrt { x }
            | Sum { x }
            | Mean { x }
            | ChannelMean { x, .. }
            | ChannelVar { x, .. }
            | Reshape { x } => vec![*x],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Wengert list for one forward pass.
///
/// Nodes are appended in evaluation order, so the list is topologically
/// sorted by construction and backward is a single reverse sweep.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes an input. It participates in backward iff
    /// `tensor.is_tracked()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        tensor.clear_grad();
        let tracked = tensor.is_tracked();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Pushes an untracked input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    /// Gradient of the last backward pass, for tracked leaves.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    /// Clears every stored gradient and re-arms [`Tape::backward`].
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.backward_done = false;
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        let tracked = op.parents().iter().any(|p| self.nodes[p.0].tracked);
        let op = if tracked { op } else { Op::Constant };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn param_len(&self, op: &'static str, what: &str, v: Var, len: usize) -> Result<()> {
        if self.value(v).numel() != len {
            return Err(Error::shape(
                op,
                format!("{what} has {} elements, expected {len}", self.value(v).numel()),
            ));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape("matmul", format!("expected 2-d operands, got {:?} and {:?}", self.shape(a), self.shape(b))));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} and {k2} differ")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    /// Fully connected layer: `x [B,in]`, `w [out,in]`, `b [out]` -> `[B,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (&[batch, inp], &[out, inp2]) = (self.shape(x), self.shape(w)) else {
            return Err(Error::shape("linear", format!("expected x [B,in] and w [out,in], got {:?} and {:?}", self.shape(x), self.shape(w))));
        };
        if inp != inp2 {
            return Err(Error::shape("linear", format!("input has {inp} features, weight expects {inp2}")));
        }
        if let Some(b) = b {
            self.param_len("linear", "bias", b, out)?;
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let mut y = vec![T::zero(); batch * out];
        for r in 0..batch {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = bd.map_or(T::zero(), |b| b[o]);
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += *xv * *wv;
                }
                y[r * out + o] = acc;
            }
        }
        self.push("linear", vec![batch, out], y, Op::Linear { x, w, b, batch, inp, out })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            self.param_len("conv2d", "bias", b, geom.o)?;
        }
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        self.push("conv2d", geom.out_shape(), out, Op::Conv2d { x, w, b, geom })
    }

    // ---- normalization --------------------------------------------------

    fn channel_moments(&self, x: Var, layout: &ChannelLayout) -> (Vec<f64>, Vec<f64>) {
        let xd = self.data(x);
        let m = layout.per_channel();
        let mut mean = vec![0.0f64; layout.c];
        layout.for_each(|c, i| mean[c] += xd[i].as_f64());
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0f64; layout.c];
        layout.for_each(|c, i| {
            let d = xd[i].as_f64() - mean[c];
            var[c] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= m);
        (mean, var)
    }

    fn check_bn(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<ChannelLayout> {
        let layout = ChannelLayout::of(op, self.shape(x))?;
        self.param_len(op, "gamma", gamma, layout.c)?;
        self.param_len(op, "beta", beta, layout.c)?;
        Ok(layout)
    }

    /// Training-mode batch norm: normalizes with the batch's own per-channel
    /// mean and population variance, which are returned alongside.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let layout = self.check_bn("batchnorm2d", x, gamma, beta)?;
        let (mean, var) = self.channel_moments(x, &layout);
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        layout.for_each(|c, i| {
            let h = (xd[i] - mean_t[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = gd[c] * h + bd[c];
        });
        let stats = BatchStats { mean: mean_t, var: var.iter().map(|&v| T::of(v)).collect() };
        let shape = self.shape(x).to_vec();
        let v = self.push("batchnorm2d", shape, y, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std, layout })?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let layout = self.check_bn("batchnorm2d", x, gamma, beta)?;
        if running_mean.len() != layout.c || running_var.len() != layout.c {
            return Err(Error::shape("batchnorm2d", format!("running stats must have {} channels", layout.c)));
        }
        let inv_std: Vec<T> = running_var.iter().map(|v| T::of(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut y = vec![T::zero(); xd.len()];
        layout.for_each(|c, i| y[i] = gd[c] * (xd[i] - running_mean[c]) * inv_std[c] + bd[c]);
        let shape = self.shape(x).to_vec();
        let mean = running_mean.to_vec();
        self.push("batchnorm2d", shape, y, Op::BatchNormEval { x, gamma, beta, mean, inv_std, layout })
    }

    /// Per-channel mean over batch and spatial axes: `[N,C,...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let layout = ChannelLayout::of("channel_mean", self.shape(x))?;
        let (mean, _) = self.channel_moments(x, &layout);
        let data = mean.into_iter().map(T::of).collect();
        self.push("channel_mean", vec![layout.c], data, Op::ChannelMean { x, layout })
    }

    /// Per-channel population variance: `[N,C,...] -> [C]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let layout = ChannelLayout::of("channel_var", self.shape(x))?;
        let (mean, var) = self.channel_moments(x, &layout);
        let data = var.into_iter().map(T::of).collect();
        let mean = mean.into_iter().map(T::of).collect();
        self.push("channel_var", vec![layout.c], data, Op::ChannelVar { x, mean, layout })
    }

    // ---- element-wise ---------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, y, Op::Relu { x })
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let y = self.data(a).iter().zip(self.data(b)).map(|(&u, &v)| f(u, v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, y, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |u, v| u + v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |u, v| u - v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |u, v| u * v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, y, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, y, Op::AddScalar { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push("square", shape, y, Op::Square { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v < T::zero()) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let y = self.data(x).iter().map(|&v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        self.push("sqrt", shape, y, Op::Sqrt { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: T = d.iter().copied().sum();
        let m = s / T::of(d.len() as f64);
        self.push("mean", vec![1], vec![m], Op::Mean { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let y = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), y, Op::Reshape { x })
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    // ---- pooling --------------------------------------------------------

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeometry::new("maxpool2d", self.shape(x), kernel, stride)?;
        let (y, argmax) = kernels::maxpool_forward(self.data(x), &geom);
        self.push("maxpool2d", geom.out_shape(), y, Op::MaxPool { x, argmax })
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeometry::new("avgpool2d", self.shape(x), kernel, stride)?;
        let y = kernels::avgpool_forward(self.data(x), &geom);
        self.push("avgpool2d", geom.out_shape(), y, Op::AvgPool { x, geom })
    }

    // ---- losses ---------------------------------------------------------

    /// Mean softmax cross-entropy of `logits [N,K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::shape("softmax_cross_entropy", format!("expected [N,K], got {:?}", self.shape(logits))));
        };
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &ld[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            total += (max + z.ln() - row[labels[r]]).as_f64();
        }
        let loss = T::of(total / n as f64);
        let labels = labels.to_vec();
        self.push("softmax_cross_entropy", vec![1], vec![loss], Op::SoftmaxCrossEntropy { logits, labels, probs, k })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let s: T = ad.iter().zip(bd).map(|(&u, &v)| (u - v) * (u - v)).sum();
        let m = s / T::of(ad.len() as f64);
        self.push("mse", vec![1], vec![m], Op::Mse { a, b })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Populates the gradient of every
    /// tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("already run on this tape; call zero_grad first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if nodes[v.0].tracked {
                    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                    f(buf);
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            let g = &g[..];
            match &node.op {
                Op::Leaf => {
                    if node.value.is_tracked() {
                        leaf_grads.push((i, g.to_vec()));
                    }
                }
                Op::Constant => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (ad, bd) = (val(*a), val(*b));
                    acc(*a, &mut |da| {
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for c in 0..n {
                                    s += g[r * n + c] * bd[p * n + c];
                                }
                                da[r * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &mut |db| {
                        for r in 0..m {
                            for p in 0..k {
                                let av = ad[r * k + p];
                                for c in 0..n {
                                    db[p * n + c] += av * g[r * n + c];
                                }
                            }
                        }
                    });
                }
                Op::Linear { x, w, b, batch, inp, out } => {
                    let (batch, inp, out) = (*batch, *inp, *out);
                    let (xd, wd) = (val(*x), val(*w));
                    acc(*x, &mut |dx| {
                        for r in 0..batch {
                            for o in 0..out {
                                let go = g[r * out + o];
                                for (d, &wv) in dx[r * inp..(r + 1) * inp].iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                                    *d += go * wv;
                                }
                            }
                        }
                    });
                    acc(*w, &mut |dw| {
                        for r in 0..batch {
                            for o in 0..out {
                                let go = g[r * out + o];
                                for (d, &xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(&xd[r * inp..(r + 1) * inp]) {
                                    *d += go * xv;
                                }
                            }
                        }
                    });
                    if let Some(b) = b {
                        acc(*b, &mut |db| {
                            for r in 0..batch {
                                for o in 0..out {
                                    db[o] += g[r * out + o];
                                }
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (xd, wd) = (val(*x), val(*w));
                    let want_x = nodes[x.0].tracked;
                    let want_w = nodes[w.0].tracked;
                    if want_x || want_w {
                        let mut dx = want_x.then(|| vec![T::zero(); xd.len()]);
                        let mut dw = want_w.then(|| vec![T::zero(); wd.len()]);
                        kernels::conv2d_backward(xd, wd, g, geom, dx.as_deref_mut(), dw.as_deref_mut());
                        if let Some(dx) = dx {
                            acc(*x, &mut |buf| add_into(buf, &dx));
                        }
                        if let Some(dw) = dw {
                            acc(*w, &mut |buf| add_into(buf, &dw));
                        }
                    }
                    if let Some(b) = b {
                        let plane = geom.oh * geom.ow;
                        acc(*b, &mut |db| {
                            for (j, chunk) in g.chunks(plane).enumerate() {
                                db[j % geom.o] += chunk.iter().copied().sum();
                            }
                        });
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std, layout } => {
                    let gd = val(*gamma);
                    let mut sum_dy = vec![T::zero(); layout.c];
                    let mut sum_dy_xhat = vec![T::zero(); layout.c];
                    layout.for_each(|c, i| {
                        sum_dy[c] += g[i];
                        sum_dy_xhat[c] += g[i] * xhat[i];
                    });
                    let m = T::of(layout.per_channel());
                    acc(*x, &mut |dx| {
                        layout.for_each(|c, i| {
                            dx[i] += gd[c] * inv_std[c] / m * (m * g[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
                        });
                    });
                    acc(*gamma, &mut |dg| add_into(dg, &sum_dy_xhat));
                    acc(*beta, &mut |db| add_into(db, &sum_dy));
                }
                Op::BatchNormEval { x, gamma, beta, mean, inv_std, layout } => {
                    let (xd, gd) = (val(*x), val(*gamma));
                    acc(*x, &mut |dx| layout.for_each(|c, i| dx[i] += g[i] * gd[c] * inv_std[c]));
                    acc(*gamma, &mut |dg| layout.for_each(|c, i| dg[c] += g[i] * (xd[i] - mean[c]) * inv_std[c]));
                    acc(*beta, &mut |db| layout.for_each(|c, i| db[c] += g[i]));
                }
                Op::Relu { x } => {
                    let xd = val(*x);
                    acc(*x, &mut |dx| {
                        for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                            if xv > T::zero() {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::MaxPool { x, argmax } => acc(*x, &mut |dx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }),
                Op::AvgPool { x, geom } => acc(*x, &mut |dx| kernels::avgpool_backward(g, geom, dx)),
                Op::Add { a, b } => {
                    acc(*a, &mut |d| add_into(d, g));
                    acc(*b, &mut |d| add_into(d, g));
                }
                Op::Sub { a, b } => {
                    acc(*a, &mut |d| add_into(d, g));
                    acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (val(*a), val(*b));
                    acc(*a, &mut |d| {
                        for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                            *d += gv * bv;
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((d, &gv), &av) in d.iter_mut().zip(g).zip(ad) {
                            *d += gv * av;
                        }
                    });
                }
                Op::Scale { x, c } => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += *c * gv)),
                Op::AddScalar { x } | Op::Reshape { x } => acc(*x, &mut |d| add_into(d, g)),
                Op::Square { x } => {
                    let xd = val(*x);
                    let two = T::of(2.0);
                    acc(*x, &mut |d| {
                        for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                            *d += two * xv * gv;
                        }
                    });
                }
                Op::Sqrt { x } => {
                    let yd = node.value.data();
                    let half = T::of(0.5);
                    acc(*x, &mut |d| {
                        for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(yd) {
                            *d += gv * half / yv;
                        }
                    });
                }
                Op::Sum { x } => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Mean { x } => acc(*x, &mut |d| {
                    let s = g[0] / T::of(d.len() as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }),
                Op::ChannelMean { x, layout } => {
                    let m = T::of(layout.per_channel());
                    acc(*x, &mut |dx| layout.for_each(|c, i| dx[i] += g[c] / m));
                }
                Op::ChannelVar { x, mean, layout } => {
                    let xd = val(*x);
                    let two_over_m = T::of(2.0 / layout.per_channel());
                    acc(*x, &mut |dx| layout.for_each(|c, i| dx[i] += g[c] * two_over_m * (xd[i] - mean[c])));
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs, k } => {
                    let n = labels.len();
                    let s = g[0] / T::of(n as f64);
                    acc(*logits, &mut |d| {
                        for r in 0..n {
                            for c in 0..*k {
                                let onehot = if labels[r] == c { T::one() } else { T::zero() };
                                d[r * k + c] += s * (probs[r * k + c] - onehot);
                            }
                        }
                    });
                }
                Op::Mse { a, b } => {
                    let (ad, bd) = (val(*a), val(*b));
                    let s = T::of(2.0) * g[0] / T::of(ad.len() as f64);
                    acc(*a, &mut |d| {
                        for ((d, &u), &v) in d.iter_mut().zip(ad).zip(bd) {
                            *d += s * (u - v);
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((d, &u), &v) in d.iter_mut().zip(ad).zip(bd) {
                            *d -= s * (u - v);
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Backward(format!("non-finite gradient for node {i}")));
            }
            self.nodes[i].value.set_grad(g);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_conv() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9])).unwrap();
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn uniform_softmax_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 4], &[0.0; 4])).unwrap();
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.item(l).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((tape.item(l).unwrap() - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, -2.0]).requires_grad(true)).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let y = tape.leaf(t(&[3], &[0.5, 1.5, -2.0]).requires_grad(true)).unwrap();
        let target = tape.constant(t(&[3], &[0.5, 1.5, -2.0])).unwrap();
        let l = tape.mse(y, target).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]).requires_grad(true)).unwrap();
        let y = tape.scale(w, 3.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Backward(_))));
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = tape.leaf(t(&[2, 3], &[0.0; 6])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains('3') && detail.contains('2'), "{detail}");
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(tape.leaf(t(&[2], &[1.0, f64::NAN])), Err(Error::NonFinite { .. })));
        let x = tape.leaf(t(&[1], &[1e300])).unwrap();
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn untracked_graph_records_no_backward_work() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.square(x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn train_batchnorm_reports_population_variance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 3.0, 3.0])).unwrap();
        let g = tape.leaf(t(&[1], &[1.0])).unwrap();
        let b = tape.leaf(t(&[1], &[0.0])).unwrap();
        let (_, stats) = tape.batchnorm2d_train(x, g, b, 1e-5).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }
}
