use std::collections::HashMap;

use super::kernels::{self, ConvGeom, MatmulGeom};
use super::{numel, resolve_axis, split_at_axis, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: given the inputs, the output and the
/// output adjoint, returns one gradient buffer per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum BnStats<T> {
    /// Current batch statistics (training mode).
    Batch,
    /// Externally supplied running statistics (eval mode).
    Running { mean: Vec<T>, var: Vec<T> },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var, MatmulGeom),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    /// Keeps `Φ(x)` from the forward pass.
    Gelu(Var, Vec<T>),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    DwConv(Var, Var, Var),
    Patchify(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        smoothing: T,
    },
    Custom(Vec<Var>, CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between passes.
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Linear record of operations, replayed in reverse by [`Tape::backward`].
///
/// Single-threaded by construction. Leaf gradients accumulate across
/// repeated `backward` calls until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of a batch-norm node together with the statistics it used.
pub struct BatchNormOut<T> {
    pub out: Var,
    pub mean: Vec<T>,
    /// Biased per-channel variance of the batch (or the running variance).
    pub var: Vec<T>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            named: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable leaf once per tape; later calls with the same
    /// name return the existing handle.
    pub fn named_leaf(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
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

    /// Accumulated gradient of a leaf, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn named_grad(&self, name: &str) -> Option<&[T]> {
        self.lookup(name).and_then(|v| self.grad(v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- elementwise --------------------------------------------------

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.len();
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks(nb) {
            data.extend(chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        }
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    /// `a + b`, where `b`'s shape must equal `a`'s or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let cdf: Vec<T> = self.value(a).data().iter().map(|&x| kernels::normal_cdf(x)).collect();
        let data = self.value(a).data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Gelu(a, cdf))
    }

    // ----- linear algebra -----------------------------------------------

    /// `a[..., m, k] · b[..., k, n]` with broadcast leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] · b[..., n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let geom = MatmulGeom::new(self.shape(a), self.shape(b), trans_b)?;
        let data = geom.forward(self.value(a).data(), self.value(b).data());
        let out = Tensor {
            shape: geom.out_shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Matmul(a, b, geom)))
    }

    /// `x · wᵀ + bias` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ----- layout -------------------------------------------------------

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape("permute", &shape, axes));
        }
        let (out_shape, src) = kernels::permute_strides(&shape, axes);
        let input = self.value(a).data();
        let mut data = vec![T::zero(); input.len()];
        kernels::for_each_permuted(&out_shape, &src, |o, i| data[o] = input[i]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, rg, Op::Permute(a, axes.to_vec())))
    }

    /// Swaps two axes (negative indices count from the end).
    pub fn transpose(&mut self, a: Var, d0: isize, d1: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        let (d0, d1) = (resolve_axis(d0, r, &shape)?, resolve_axis(d1, r, &shape)?);
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let ax = resolve_axis(axis, base.len(), &base)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != ax && d != base[i]) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[ax];
        }
        let mut shape = base.clone();
        shape[ax] = total;
        let (outer, _, inner) = split_at_axis(&shape, ax);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[ax] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, rg, Op::Concat(parts.to_vec(), ax)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(axis, shape.len(), &shape)?;
        if len == 0 || start + len > shape[ax] {
            return Err(Error::shape("narrow", &shape, &[start, len]));
        }
        let (outer, full, inner) = split_at_axis(&shape, ax);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[ax] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, rg, Op::Narrow(a, ax, start)))
    }

    pub fn split(&mut self, a: Var, axis: isize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        let shape = self.shape(a);
        let ax = resolve_axis(axis, shape.len(), shape)?;
        if start != shape[ax] {
            return Err(Error::shape("split", shape, sizes));
        }
        Ok(out)
    }

    /// Gathers rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("embedding", &shape, indices));
        }
        let dim = shape[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), dim],
                data,
            },
            rg,
            Op::Embedding(table, indices.to_vec()),
        ))
    }

    // ----- reductions ---------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(axis, shape.len(), &shape)?;
        let (o, l, i) = split_at_axis(&shape, ax);
        let data = kernels::softmax_forward(self.value(a).data(), o, l, i);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Softmax(a, ax)))
    }

    fn reduce(&mut self, a: Var, axis: isize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = resolve_axis(axis, shape.len(), &shape)?;
        let (outer, len, inner) = split_at_axis(&shape, ax);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::of_usize(len);
            data.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(ax);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[a]);
        let op = if mean { Op::Mean(a, ax) } else { Op::Sum(a, ax) };
        Ok(self.push(Tensor { shape: out_shape, data }, rg, op))
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: isize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    // ----- fused layers -------------------------------------------------

    /// Normalizes over the last axis with `eps` inside the square root.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [dim] {
                return Err(Error::shape("layernorm", &shape, self.shape(p)));
            }
        }
        let rows = numel(&shape) / dim;
        let (data, means, rstds) = kernels::layernorm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            rows,
            dim,
            eps,
        );
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
        ))
    }

    /// Per-channel normalization of `x: [B, C, H, W]`.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<T>, eps: T) -> Result<BatchNormOut<T>> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batchnorm2d", &shape, &[4]));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batchnorm2d", &shape, self.shape(p)));
            }
        }
        let batch_stats = matches!(stats, BnStats::Batch);
        let (mean, var) = match stats {
            BnStats::Batch => {
                if b * hw <= 1 {
                    return Err(Error::DegenerateStatistics(b * hw));
                }
                kernels::channel_stats(self.value(x).data(), b, c, hw)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d", &shape, &[mean.len(), var.len()]));
                }
                (mean, var)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xs, g, be) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut data = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, r, gg, bb) = (mean[ci], rstd[ci], g[ci], be[ci]);
                for i in base..base + hw {
                    data[i] = (xs[i] - m) * r * gg + bb;
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(
            Tensor { shape, data },
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                rstd,
                batch_stats,
            },
        );
        Ok(BatchNormOut { out, mean, var })
    }

    /// Depth-wise 2D cross-correlation: `x: [B, C, H, W]`, `w: [C, k, k]`,
    /// `bias: [C]`, stride 1, zero padding `(k-1)/2`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if shape.len() != 4 || ws.len() != 3 || ws[0] != shape[1] || ws[1] != ws[2] || self.shape(bias) != [shape[1]] {
            return Err(Error::shape("depthwise_conv2d", &shape, &ws));
        }
        if ws[1].is_multiple_of(2) {
            return Err(Error::config(
                "kernel_size",
                format!("depth-wise kernel must be odd, got {}", ws[1]),
            ));
        }
        let g = ConvGeom {
            batch: shape[0],
            channels: shape[1],
            h: shape[2],
            w: shape[3],
            k: ws[1],
        };
        let data = kernels::dwconv_forward(&g, self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(Tensor { shape, data }, rg, Op::DwConv(x, w, bias)))
    }

    /// Cuts `[B, C, H, W]` into `[B, (H/p)(W/p), C·p·p]` patch vectors;
    /// patches in row-major grid order, features ordered `(c, py, px)`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || p == 0 || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
            return Err(Error::config(
                "patch_size",
                format!("image {shape:?} is not divisible into {p}x{p} patches"),
            ));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let tokens = (h / p) * (w / p);
        let feat = c * p * p;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for bi in 0..b {
            for t in 0..tokens {
                for f in 0..feat {
                    data.push(src[kernels::patch_source_index(bi, t, f, (c, h, w), p)]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, tokens, feat],
                data,
            },
            rg,
            Op::Patchify(x, p),
        ))
    }

    /// Mean cross-entropy of `logits: [B, C]` against class labels,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                shape[1]
            )));
        }
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits).data(), labels, shape[1], smoothing);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                smoothing,
            },
        ))
    }

    /// Records an externally computed value with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, rg, Op::Custom(inputs.to_vec(), backward))
    }

    // ----- reverse pass -------------------------------------------------

    /// Propagates d(loss)/d(node) back to every leaf.
    ///
    /// Leaves that require gradients but are not reachable from `loss`
    /// end up with an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut adj: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..end).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for n in &mut self.nodes[..end] {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Lazily allocated adjoint buffer for an input.
        fn slot<'a, T: Element>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }
        fn take<T: Element>(adj: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Vec<T> {
            adj[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()])
        }
        // Adds `g` into the adjoint of `v`, copying when it is the first writer.
        fn accumulate<T: Element>(adj: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
            match &mut adj[v.0] {
                Some(d) => d.iter_mut().zip(g).for_each(|(d, &x)| *d += x),
                None => adj[v.0] = Some(g.to_vec()),
            }
        }
        let reduce_suffix = |acc: &mut Vec<T>, g: &[T], sign: T| {
            let n = acc.len();
            for chunk in g.chunks(n) {
                for (a, &x) in acc.iter_mut().zip(chunk) {
                    *a += sign * x;
                }
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if wants(*a) {
                    accumulate(adj, *a, g);
                }
                if wants(*b) {
                    reduce_suffix(slot(adj, nodes, *b), g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let nb = vb.len();
                if wants(*a) {
                    let da = slot(adj, nodes, *a);
                    for (dc, gc) in da.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((d, &x), &bv) in dc.iter_mut().zip(gc).zip(vb) {
                            *d += x * bv;
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(adj, nodes, *b);
                    for (gc, ac) in g.chunks(nb).zip(va.chunks(nb)) {
                        for ((d, &x), &av) in db.iter_mut().zip(gc).zip(ac) {
                            *d += x * av;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * s);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(adj, *a, g);
            }
            Op::Gelu(a, cdf) => {
                let va = nodes[a.0].value.data();
                let da = slot(adj, nodes, *a);
                for (((d, &x), &v), &c) in da.iter_mut().zip(g).zip(va).zip(cdf) {
                    *d += x * kernels::gelu_grad_with_cdf(v, c);
                }
            }
            Op::Matmul(a, b, geom) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let mut da = take(adj, nodes, *a);
                    geom.backward(va, vb, g, Some(&mut da), None);
                    adj[a.0] = Some(da);
                }
                if wants(*b) {
                    let mut db = take(adj, nodes, *b);
                    geom.backward(va, vb, g, None, Some(&mut db));
                    adj[b.0] = Some(db);
                }
            }
            Op::Permute(a, axes) => {
                let in_shape = nodes[a.0].value.shape();
                let (out_shape, src) = kernels::permute_strides(in_shape, axes);
                let da = slot(adj, nodes, *a);
                kernels::for_each_permuted(&out_shape, &src, |o, s| da[s] += g[o]);
            }
            Op::Softmax(a, ax) => {
                let (o, l, inn) = split_at_axis(nodes[i].value.shape(), *ax);
                let y = nodes[i].value.data();
                kernels::softmax_backward(y, g, slot(adj, nodes, *a), o, l, inn);
            }
            Op::Sum(a, ax) | Op::Mean(a, ax) => {
                let (outer, len, inner) = split_at_axis(nodes[a.0].value.shape(), *ax);
                let scale = if matches!(nodes[i].op, Op::Mean(..)) {
                    T::one() / T::of_usize(len)
                } else {
                    T::one()
                };
                let da = slot(adj, nodes, *a);
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut da[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &x) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += x * scale;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g[0];
                slot(adj, nodes, *a).iter_mut().for_each(|d| *d += s);
            }
            Op::Concat(parts, ax) => {
                let (outer, _, inner) = split_at_axis(nodes[i].value.shape(), *ax);
                let mut offset = 0;
                let total = nodes[i].value.shape()[*ax] * inner;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*ax] * inner;
                    if wants(p) {
                        let dp = slot(adj, nodes, p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, &x) in dp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, ax, start) => {
                let in_shape = nodes[a.0].value.shape();
                let (outer, full, inner) = split_at_axis(in_shape, *ax);
                let len = nodes[i].value.shape()[*ax];
                let da = slot(adj, nodes, *a);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    for (d, &x) in da[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += x;
                    }
                }
            }
            Op::Embedding(table, indices) => {
                let dim = nodes[table.0].value.shape()[1];
                let dt = slot(adj, nodes, *table);
                for (r, &idx) in indices.iter().enumerate() {
                    for (d, &x) in dt[idx * dim..(idx + 1) * dim]
                        .iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                    {
                        *d += x;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let dim = nodes[gamma.0].value.len();
                let (vx, vg) = (nodes[x.0].value.data(), nodes[gamma.0].value.data());
                let run = |dx: Option<&mut [T]>, dg: Option<&mut [T]>, db: Option<&mut [T]>| {
                    kernels::layernorm_backward(vx, vg, means, rstds, g, dx, dg, db, dim)
                };
                if wants(*x) {
                    let mut d = take(adj, nodes, *x);
                    run(Some(&mut d), None, None);
                    adj[x.0] = Some(d);
                }
                if wants(*gamma) {
                    let mut d = take(adj, nodes, *gamma);
                    run(None, Some(&mut d), None);
                    adj[gamma.0] = Some(d);
                }
                if wants(*beta) {
                    let mut d = take(adj, nodes, *beta);
                    run(None, None, Some(&mut d));
                    adj[beta.0] = Some(d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            } => {
                let shape = nodes[x.0].value.shape();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let (vx, vg) = (nodes[x.0].value.data(), nodes[gamma.0].value.data());
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for j in base..base + hw {
                            sum_dy[ci] += g[j];
                            sum_dy_xhat[ci] += g[j] * (vx[j] - mean[ci]) * rstd[ci];
                        }
                    }
                }
                if wants(*gamma) {
                    slot(adj, nodes, *gamma)
                        .iter_mut()
                        .zip(&sum_dy_xhat)
                        .for_each(|(d, &s)| *d += s);
                }
                if wants(*beta) {
                    slot(adj, nodes, *beta)
                        .iter_mut()
                        .zip(&sum_dy)
                        .for_each(|(d, &s)| *d += s);
                }
                if wants(*x) {
                    let n = T::of_usize(b * hw);
                    let dx = slot(adj, nodes, *x);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let k = vg[ci] * rstd[ci];
                            for j in base..base + hw {
                                if *batch_stats {
                                    let xhat = (vx[j] - mean[ci]) * rstd[ci];
                                    dx[j] += k * (g[j] - sum_dy[ci] / n - xhat * sum_dy_xhat[ci] / n);
                                } else {
                                    dx[j] += k * g[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::DwConv(x, w, bias) => {
                let shape = nodes[x.0].value.shape();
                let geom = ConvGeom {
                    batch: shape[0],
                    channels: shape[1],
                    h: shape[2],
                    w: shape[3],
                    k: nodes[w.0].value.shape()[1],
                };
                let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                let run = |dx: Option<&mut [T]>, dw: Option<&mut [T]>, db: Option<&mut [T]>| {
                    kernels::dwconv_backward(&geom, vx, vw, g, dx, dw, db)
                };
                if wants(*x) {
                    let mut d = take(adj, nodes, *x);
                    run(Some(&mut d), None, None);
                    adj[x.0] = Some(d);
                }
                if wants(*w) {
                    let mut d = take(adj, nodes, *w);
                    run(None, Some(&mut d), None);
                    adj[w.0] = Some(d);
                }
                if wants(*bias) {
                    let mut d = take(adj, nodes, *bias);
                    run(None, None, Some(&mut d));
                    adj[bias.0] = Some(d);
                }
            }
            Op::Patchify(x, p) => {
                let shape = nodes[x.0].value.shape();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let tokens = (h / p) * (w / p);
                let feat = c * p * p;
                let dx = slot(adj, nodes, *x);
                let mut o = 0;
                for bi in 0..b {
                    for t in 0..tokens {
                        for f in 0..feat {
                            dx[kernels::patch_source_index(bi, t, f, (c, h, w), *p)] += g[o];
                            o += 1;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                smoothing,
            } => {
                let classes = nodes[logits.0].value.shape()[1];
                let rows = labels.len();
                let off = *smoothing / T::of_usize(classes);
                let on = T::one() - *smoothing + off;
                let scale = g[0] / T::of_usize(rows);
                let dl = slot(adj, nodes, *logits);
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let q = if c == label { on } else { off };
                        dl[r * classes + c] += (probs[r * classes + c] - q) * scale;
                    }
                }
            }
            Op::Custom(inputs, backward) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let grads = backward(&ins, &nodes[i].value, g);
                for (v, gv) in inputs.iter().zip(grads) {
                    if wants(*v) {
                        slot(adj, nodes, *v).iter_mut().zip(&gv).for_each(|(d, &x)| *d += x);
                    }
                }
            }
        }
    }
}
