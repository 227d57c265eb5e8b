use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Sign,
    Clamp(Var, T, T),
    Abs(Var),
    Sqrt(Var),
    LeakyRelu(Var, T),
    Mean(Var),
    Sum(Var),
    SumPerSample(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics computed by a train-mode batch-norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is always
/// topologically sorted and `backward` is a single reverse sweep.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if `v` is not on a path to the
    /// output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_or_scalar(op: &'static str, a: &[usize], b: &[usize], na: usize, nb: usize) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, format!("{a:?} vs {b:?}")))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = same_or_scalar(name, va.shape(), vb.shape(), va.numel(), vb.numel())?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let (sa, sb) = (da.len() == 1 && n != 1, db.len() == 1 && n != 1);
        let data = (0..n)
            .map(|i| f(da[if sa { 0 } else { i }], db[if sb { 0 } else { i }]))
            .collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated stably. `-ln(sigmoid(z)) == softplus(-z)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Elementwise sign with `sign(0) = 0`. Its derivative is zero.
    pub fn sign(&mut self, x: Var) -> Var {
        self.unary(x, sign, Op::Sign)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sums all but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let n = v.batch();
        let data = (0..n).map(|i| v.sample(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![n], data).expect("per-sample shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SumPerSample(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, KH, KW]`,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW kernel, got {xs:?} and {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if hp < ws[2] || wp < ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} larger than padded input {hp}x{wp}", &ws[2..]),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            oh: (hp - ws[2]) / stride + 1,
            ow: (wp - ws[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// 2x2 max pooling, stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2", format!("input {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::lit(1.0 / hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", format!("input {s0:?}")));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[b * len..(b + 1) * len]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// `x: [N, IN]`, `w: [OUT, IN]`, `b: [OUT]` gives `x w^T + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("dense", format!("bias {:?}", self.shape(b))));
            }
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{c} channels but gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        dims: (usize, usize, usize),
    ) -> (Vec<T>, Vec<T>) {
        let (n, c, inner) = dims;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        (xhat, out)
    }

    /// Train-mode batch normalization over all axes but the channel axis.
    /// Returns the output and the batch statistics for running-stat updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let dims @ (n, c, inner) = self.bn_check(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::invalid("batch_norm in train mode needs a batch of at least 2"));
        }
        let xv = self.value(x).data();
        let m = n * inner;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * inner;
                s += xv[off..off + inner].iter().copied().sum::<T>();
            }
            mean[ch] = s / T::lit(m as f64);
            let mut q = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * inner;
                for &v in &xv[off..off + inner] {
                    let d = v - mean[ch];
                    q += d * d;
                }
            }
            var[ch] = q / T::lit(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, dims);
        let unbiased = T::lit(m as f64 / (m as f64 - 1.0));
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims @ (_, c, _) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, dims);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let xv = self.value(x).data();
        if index.len() != n || index.iter().flatten().any(|&i| i >= xv.len()) {
            return Err(Error::shape("gather", "index map does not match shapes"));
        }
        let data = index.iter().map(|i| i.map_or(T::zero(), |i| xv[i])).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[label];
        }
        let n = T::lit(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `output`. Marks the tape consumed.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_value = &self.nodes[output.0].value;
        if out_value.numel() != 1 {
            return Err(Error::NotScalar(out_value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // only leaves keep their adjoints
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, g, grads, |_| T::one());
                self.acc_broadcast(*b, g, grads, |_| T::one());
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, g, grads, |_| T::one());
                self.acc_broadcast(*b, g, grads, |_| -T::one());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(*a, g, grads, |k| vb[if vb.len() == 1 { 0 } else { k }]);
                self.acc_broadcast(*b, g, grads, |k| va[if va.len() == 1 { 0 } else { k }]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let at = |v: &[T], k: usize| v[if v.len() == 1 { 0 } else { k }];
                self.acc_broadcast(*a, g, grads, |k| T::one() / at(vb, k));
                self.acc_broadcast(*b, g, grads, |k| {
                    let d = at(vb, k);
                    -at(va, k) / (d * d)
                });
            }
            Op::Scale(x, s) => self.acc_map(*x, grads, |k| g[k] * *s),
            Op::Sigmoid(x) => self.acc_map(*x, grads, |k| g[k] * val[k] * (T::one() - val[k])),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.acc_map(*x, grads, |k| g[k] * sigmoid(xv[k]))
            }
            Op::Sign => {}
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.acc_map(
                    *x,
                    grads,
                    |k| {
                        if xv[k] >= *lo && xv[k] <= *hi {
                            g[k]
                        } else {
                            T::zero()
                        }
                    },
                )
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc_map(*x, grads, |k| g[k] * sign(xv[k]))
            }
            Op::Sqrt(x) => self.acc_map(*x, grads, |k| {
                if val[k] > T::zero() {
                    g[k] / (T::lit(2.0) * val[k])
                } else {
                    T::zero()
                }
            }),
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc_map(*x, grads, |k| if xv[k] >= T::zero() { g[k] } else { g[k] * *slope })
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                let gv = g[0] / n;
                self.acc_map(*x, grads, |_| gv)
            }
            Op::Sum(x) => self.acc_map(*x, grads, |_| g[0]),
            Op::SumPerSample(x) => {
                let per = self.value(*x).sample_len();
                self.acc_map(*x, grads, |k| g[k / per])
            }
            Op::Reshape(x) => self.acc_map(*x, grads, |k| g[k]),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(d) = dx {
                    self.acc_vec(*x, d, grads);
                }
                if let Some(d) = dw {
                    self.acc_vec(*w, d, grads);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.acc_vec(*b, d, grads);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.requires_grad(*x) {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    for (k, &src) in argmax.iter().enumerate() {
                        d[src] += g[k];
                    }
                    self.acc_vec(*x, d, grads);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::lit(1.0 / hw as f64);
                self.acc_map(*x, grads, |k| g[k / hw] * inv)
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let inner: usize = node.value.shape()[2..].iter().product();
                let total_c = node.value.shape()[1];
                let mut c_off = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let start = (b * total_c + c_off) * inner;
                            d.extend_from_slice(&g[start..start + c * inner]);
                        }
                        self.acc_vec(*p, d, grads);
                    }
                    c_off += c;
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, k) = (xs[0], xs[1]);
                let m = self.shape(*w)[0];
                if self.requires_grad(*x) {
                    let mut d = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g, false, self.value(*w).data(), false, T::zero(), &mut d);
                    self.acc_vec(*x, d, grads);
                }
                if self.requires_grad(*w) {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, true, self.value(*x).data(), false, T::zero(), &mut d);
                    self.acc_vec(*w, d, grads);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut d = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (dd, &gv) in d.iter_mut().zip(row) {
                                *dd += gv;
                            }
                        }
                        self.acc_vec(*b, d, grads);
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.bn_backward(*x, *gamma, *beta, xhat, inv_std, g, grads, true),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.bn_backward(*x, *gamma, *beta, xhat, inv_std, g, grads, false),
            Op::Gather { x, index } => {
                if self.requires_grad(*x) {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    for (k, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            d[*s] += g[k];
                        }
                    }
                    self.acc_vec(*x, d, grads);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                self.acc_map(*logits, grads, |idx| {
                    let onehot = if labels[idx / k] == idx % k {
                        T::one()
                    } else {
                        T::zero()
                    };
                    (probs[idx] - onehot) * scale
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        batch_stats: bool,
    ) {
        let s = self.shape(x);
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let m = T::lit((n * inner) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                }
            }
        }
        if self.requires_grad(gamma) {
            self.acc_vec(gamma, sum_gx.clone(), grads);
        }
        if self.requires_grad(beta) {
            self.acc_vec(beta, sum_g.clone(), grads);
        }
        if self.requires_grad(x) {
            let gm = self.value(gamma).data();
            let mut d = vec![T::zero(); g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    let k = gm[ch] * inv_std[ch];
                    for i in off..off + inner {
                        d[i] = if batch_stats {
                            k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            self.acc_vec(x, d, grads);
        }
    }

    fn acc_vec(&self, v: Var, d: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }

    fn acc_map(&self, v: Var, grads: &mut [Option<Vec<T>>], f: impl Fn(usize) -> T) {
        if !self.requires_grad(v) {
            return;
        }
        let n = self.value(v).numel();
        match &mut grads[v.0] {
            Some(existing) => {
                for (k, e) in existing.iter_mut().enumerate() {
                    *e += f(k);
                }
            }
            slot @ None => *slot = Some((0..n).map(f).collect()),
        }
    }

    /// Accumulates `g[k] * local(k)` into `v`, reducing when `v` was
    /// broadcast from a single element.
    fn acc_broadcast(&self, v: Var, g: &[T], grads: &mut [Option<Vec<T>>], local: impl Fn(usize) -> T) {
        if !self.requires_grad(v) {
            return;
        }
        if self.value(v).numel() == g.len() {
            self.acc_map(v, grads, |k| g[k] * local(k));
        } else {
            let s = g.iter().enumerate().map(|(k, &gk)| gk * local(k)).sum::<T>();
            self.acc_vec(v, vec![s], grads);
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let y = tape.leaf(Tensor::scalar(5.0f64), true);
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!((g.wrt(x).item(), g.wrt(y).item()), (5.0, 2.0));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert!(!g.reached(unused));
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-2.0, 0.0, 5.0]));
        let s = tape.sign(x);
        assert_eq!(tape.value(s).data(), &[-1.0, 0.0, 1.0]);
        let c = tape.constant(Tensor::scalar(1.3));
        let c = tape.clamp(c, 0.0, 1.0);
        assert_eq!(tape.value(c).item(), 1.0);
        let z = tape.constant(Tensor::scalar(0.0));
        let z = tape.sigmoid(z);
        assert_eq!(tape.value(z).item(), 0.5);
    }

    #[test]
    fn leaky_relu_values_and_slope() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -1.0, -3.0]), true);
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data()[..2], [1.0, -0.2]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data()[2], 0.2);
    }

    #[test]
    fn conv_identity_and_summation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64));
        let k = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let k2 = tape.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let y2 = tape.conv2d(ones, k2, None, 1, 0).unwrap();
        assert_eq!(tape.value(y2).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y2).item(), 4.0);
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 1), Err(Error::Shape { .. })));
        let k = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(tape.conv2d(x, k, None, 0, 1).is_err());
    }

    #[test]
    fn binary_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.add(a, b).is_err());
        let s = tape.constant(Tensor::scalar(1.0));
        let c = tape.add(a, s).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0; 6]);
    }

    #[test]
    fn batch_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let x1 = tape.constant(Tensor::ones(vec![1, 2, 2, 2]));
        let gamma = tape.constant(Tensor::ones(vec![2]));
        let beta = tape.constant(Tensor::full(vec![2], 0.25));
        assert!(tape.batch_norm_train(x1, gamma, beta, 1e-5).is_err());

        let constant = tape.constant(Tensor::full(vec![3, 2, 2, 2], 7.0));
        let (y, stats) = tape.batch_norm_train(constant, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_eq!(stats.mean, vec![7.0, 7.0]);

        // zero-mean, unit-variance per channel
        let vals: Vec<f64> = (0..8).map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = tape.constant(Tensor::new(vec![4, 2, 1, 1], vals).unwrap());
        let zero_beta = tape.constant(Tensor::zeros(vec![2]));
        let (y, _) = tape.batch_norm_train(x, gamma, zero_beta, 1e-5).unwrap();
        let diff = tape.value(y).max_abs_diff(tape.value(x));
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(vec![2, 4]), true);
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(ce).unwrap();
        let gl = g.wrt(l);
        assert!((gl.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(tape.cross_entropy(l, &[0, 4]).is_err());
    }
}
