//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every op appends one node holding its forward value plus whatever the
//! backward rule needs. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeom};
use crate::tensor::{numel, strides, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

thread_local! {
    static SIGN_FLIP_FAULT: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Negates the backward rule of the named op on this thread.
///
/// Only used to prove that the gradient checker catches a broken rule.
pub fn inject_backward_sign_flip(op: Option<&str>) {
    SIGN_FLIP_FAULT.with(|f| *f.borrow_mut() = op.map(str::to_owned));
}

fn fault_active(op: &str) -> bool {
    SIGN_FLIP_FAULT.with(|f| f.borrow().as_deref() == Some(op))
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleBy(Var, Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
        batch_stats: bool,
    },
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Flip {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    SoftThreshold {
        x: Var,
        tau: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    name: &'static str,
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Float = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
    check_finite: bool,
}

impl<S: Float> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For every output element of a permutation, its offset in the input.
fn permute_offsets(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(&out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<S: Float> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: true,
        }
    }

    /// Toggle the per-op non-finite output check (on by default).
    pub fn set_finite_check(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Inserts a tensor; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            name: "leaf",
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, mut t: Tensor<S>) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            return Err(Error::NonFinite {
                op: if inputs_finite { name } else { "input" },
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
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

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        self.unary("scalar_mul", a, |x| x * c, Op::Scale(a, c))
    }

    /// Multiplies `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", format!("scale has shape {:?}", self.shape(s))));
        }
        let c = self.data(s)[0];
        self.unary("scale_by", a, |x| x * c, Op::ScaleBy(a, s))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| S::one() / (S::one() + (-x).exp()), Op::Sigmoid(a))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&c) = shape.last() else {
            return Err(Error::dim("softmax", "empty last dimension"));
        };
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(a), &[a])
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layer_norm", "rank 0 input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("affine shape {:?} for input {shape:?}", self.shape(p)),
                ));
            }
        }
        let eps = S::of(eps);
        let inv_c = S::one() / S::of(c as f64);
        let rows = self.value(x).len() / c;
        let mut xhat = vec![S::zero(); rows * c];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * c];
        let (g, b) = (self.data(gain), self.data(bias));
        for (r, row) in self.data(x).chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor::new(shape, out)?, op, &[x, gain, bias])
    }

    fn channel_layout(&self, op: &'static str, x: Var, gain: Var, bias: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::dim(op, format!("need [N, C, ...] input, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let l = shape[2..].iter().product();
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::dim(op, format!("affine shape {:?} for {c} channels", self.shape(p))));
            }
        }
        Ok((n, c, l))
    }

    /// Batch normalization using the statistics of this batch (channel axis 1).
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, BatchStats<S>)> {
        let (n, c, l) = self.channel_layout("batch_norm", x, gain, bias)?;
        let m = n * l;
        let inv_m = S::one() / S::of(m as f64);
        let xs = self.data(x);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut s = S::zero();
            for b in 0..n {
                s = s + xs[(b * c + ch) * l..(b * c + ch + 1) * l].iter().copied().sum::<S>();
            }
            let mu = s * inv_m;
            let mut v = S::zero();
            for b in 0..n {
                v = v + xs[(b * c + ch) * l..(b * c + ch + 1) * l]
                    .iter()
                    .map(|&t| (t - mu) * (t - mu))
                    .sum::<S>();
            }
            mean[ch] = mu;
            var[ch] = v * inv_m;
        }
        let rstd: Vec<S> = var.iter().map(|&v| S::one() / (v + S::of(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gain, bias, &mean, &rstd, n, c, l);
        let unbiased = if m > 1 {
            let f = S::of(m as f64 / (m as f64 - 1.0));
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
            batch_stats: true,
        };
        let y = self.push("batch_norm", Tensor::new(shape, out)?, op, &[x, gain, bias])?;
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gain: Var, bias: Var, mean: &[S], var: &[S], eps: f64) -> Result<Var> {
        let (n, c, l) = self.channel_layout("batch_norm", x, gain, bias)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics length mismatch"));
        }
        let rstd: Vec<S> = var.iter().map(|&v| S::one() / (v + S::of(eps)).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gain, bias, mean, &rstd, n, c, l);
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
            batch_stats: false,
        };
        self.push("batch_norm", Tensor::new(shape, out)?, op, &[x, gain, bias])
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, x: Var, gain: Var, bias: Var, mean: &[S], rstd: &[S], n: usize, c: usize, l: usize) -> (Vec<S>, Vec<S>) {
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![S::zero(); xs.len()];
        let mut xhat = vec![S::zero(); xs.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * l;
                for i in base..base + l {
                    let h = (xs[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        (out, xhat)
    }

    /// `[M×K] · [K×N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched `[G×M×K] · [G×K×N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            kernels::gemm_nn(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push("bmm", Tensor::new(vec![g, m, n], out)?, Op::Bmm(a, b), &[a, b])
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let shape: Vec<usize> = axes.iter().map(|&i| self.shape(a)[i]).collect();
        let offs = permute_offsets(self.shape(a), &axes);
        let src = self.data(a);
        let out = offs.iter().map(|&o| src[o]).collect();
        self.push("transpose", Tensor::new(shape, out)?, Op::TransposeLast2(a), &[a])
    }

    fn conv(
        &mut self,
        name: &'static str,
        x: Var,
        k: Var,
        batch: usize,
        c_in: usize,
        input: [usize; 3],
        geom: ConvGeom,
        out_shape: impl FnOnce(usize, [usize; 3]) -> Vec<usize>,
    ) -> Result<Var> {
        let ks = self.shape(k);
        let xs = self.shape(x);
        let (c_out, k_cin) = (ks[0], ks[1]);
        if k_cin != c_in {
            return Err(Error::dim(
                name,
                format!("input {xs:?} has {c_in} channels, kernel {ks:?} expects {k_cin}"),
            ));
        }
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] = kernels::conv_out_extent(input[i], geom.kernel[i], geom.stride[i], geom.padding[i])
                .ok_or_else(|| {
                    Error::dim(
                        name,
                        format!(
                            "kernel {ks:?} larger than padded input {xs:?} (padding {:?})",
                            geom.padding
                        ),
                    )
                })?;
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            input,
            output,
        };
        let out = kernels::conv_forward(self.data(x), self.data(k), &dims, &geom);
        let shape = out_shape(c_out, output);
        let op = Op::Conv { x, k, geom, dims };
        self.push(name, Tensor::new(shape, out)?, op, &[x, k])
    }

    /// 2-D convolution of `[C, H, W]` or `[N, C, H, W]` with `[C_out, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: [usize; 2], padding: [usize; 2]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if !(xs.len() == 3 || xs.len() == 4) || ks.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        let batched = xs.len() == 4;
        let n = if batched { xs[0] } else { 1 };
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let geom = ConvGeom {
            kernel: [1, ks[2], ks[3]],
            stride: [1, stride[0], stride[1]],
            padding: [0, padding[0], padding[1]],
        };
        self.conv("conv2d", x, k, n, xs[xs.len() - 3], [1, h, w], geom, |co, o| {
            if batched {
                vec![n, co, o[1], o[2]]
            } else {
                vec![co, o[1], o[2]]
            }
        })
    }

    /// 3-D convolution of `[C, T, H, W]` or `[N, C, T, H, W]`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if !(xs.len() == 4 || xs.len() == 5) || ks.len() != 5 {
            return Err(Error::dim("conv3d", format!("input {xs:?}, kernel {ks:?}")));
        }
        let batched = xs.len() == 5;
        let n = if batched { xs[0] } else { 1 };
        let r = xs.len();
        let input = [xs[r - 3], xs[r - 2], xs[r - 1]];
        let geom = ConvGeom {
            kernel: [ks[2], ks[3], ks[4]],
            stride,
            padding,
        };
        self.conv("conv3d", x, k, n, xs[r - 4], input, geom, |co, o| {
            if batched {
                vec![n, co, o[0], o[1], o[2]]
            } else {
                vec![co, o[0], o[1], o[2]]
            }
        })
    }

    /// 1-D convolution of `[N, C, L]` with `[C_out, C, k]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 3 {
            return Err(Error::dim("conv1d", format!("input {xs:?}, kernel {ks:?}")));
        }
        let n = xs[0];
        let geom = ConvGeom {
            kernel: [1, 1, ks[2]],
            stride: [1, 1, stride],
            padding: [0, 0, padding],
        };
        self.conv("conv1d", x, k, n, xs[1], [1, 1, xs[2]], geom, |co, o| vec![n, co, o[2]])
    }

    /// Max pooling over the last two axes of `[N, C, H, W]`, no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("max_pool2d", format!("need [N, C, H, W], got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let oh = kernels::conv_out_extent(h, kernel, stride, 0)
            .ok_or_else(|| Error::dim("max_pool2d", format!("window {kernel} exceeds {xs:?}")))?;
        let ow = kernels::conv_out_extent(w, kernel, stride, 0)
            .ok_or_else(|| Error::dim("max_pool2d", format!("window {kernel} exceeds {xs:?}")))?;
        let planes = xs[0] * xs[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for a in 0..kernel {
                        for b in 0..kernel {
                            let idx = base + (i * stride + a) * w + j * stride + b;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![xs[0], xs[1], oh, ow];
        self.push("max_pool2d", Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean over the last two axes; keeps them as extent 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("global_avg_pool", format!("need [.., H, W], got {xs:?}")));
        }
        let r = xs.len();
        let plane = xs[r - 2] * xs[r - 1];
        let inv = S::one() / S::of(plane as f64);
        let out = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<S>() * inv)
            .collect();
        let mut shape = xs.clone();
        shape[r - 2] = 1;
        shape[r - 1] = 1;
        self.push("global_avg_pool", Tensor::new(shape, out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs.len() < 2 {
            return Err(Error::dim("mean_axis", format!("axis {axis} for shape {xs:?}")));
        }
        let (outer, ext, inner) = around(&xs, axis);
        let inv = S::one() / S::of(ext as f64);
        let src = self.data(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = xs;
        shape.remove(axis);
        self.push("mean_axis", Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = S::of(self.value(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<S>() / n;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let mut value = value;
        value.set_requires_grad(false);
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {xs:?}")));
        }
        let offs = permute_offsets(&xs, axes);
        let src = self.data(x);
        let out = offs.iter().map(|&o| src[o]).collect();
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let op = Op::Permute { x, axes: axes.to_vec() };
        self.push("permute", Tensor::new(shape, out)?, op, &[x])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, ext, inner) = around(&xs, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        self.push("narrow", Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, &[x])
    }

    /// Reverse the order of elements along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim("flip", format!("axis {axis} for shape {xs:?}")));
        }
        let out = flip_axis(self.data(x), &xs, axis);
        self.push("flip", Tensor::new(xs, out)?, Op::Flip { x, axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} does not stack with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let ext = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let op = Op::Concat { xs: xs.to_vec(), axis };
        self.push("concat", Tensor::new(shape, out)?, op, xs)
    }

    /// Adds a `[C]` vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::dim("add_bias", "rank 0"))?;
        if self.shape(bias) != [c] {
            return Err(Error::dim("add_bias", format!("bias {:?} for input {xs:?}", self.shape(bias))));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v = *v + bb);
        }
        self.push("add_bias", Tensor::new(xs, out)?, Op::AddBias { x, bias }, &[x, bias])
    }

    /// `sign(x)·max(|x| − τ, 0)` with one threshold per leading channel.
    ///
    /// `tau` covers a leading block of `x`'s axes (trailing unit axes allowed),
    /// e.g. `[N, C]` or `[N, C, 1, 1]` against `[N, C, H, W]`.
    pub fn soft_threshold(&mut self, x: Var, tau: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ts = self.shape(tau).to_vec();
        let mut lead = ts.clone();
        while lead.len() > 1 && lead.last() == Some(&1) {
            lead.pop();
        }
        if lead.len() > xs.len() || xs[..lead.len()] != lead[..] {
            return Err(Error::dim("soft_threshold", format!("threshold {ts:?} for input {xs:?}")));
        }
        let t = self.data(tau);
        if let Some(bad) = t.iter().find(|&&v| v < S::zero()) {
            return Err(Error::contract("soft_threshold", format!("negative threshold {bad}")));
        }
        let l = self.value(x).len() / t.len();
        let out: Vec<S> = self
            .data(x)
            .chunks(l)
            .zip(t)
            .flat_map(|(row, &th)| row.iter().map(move |&v| shrink(v, th)))
            .collect();
        self.push("soft_threshold", Tensor::new(xs, out)?, Op::SoftThreshold { x, tau }, &[x, tau])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x, mask }, &[x])
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            ));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                num_classes: k,
            });
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = S::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            loss = loss + (lse - row[y]);
            softmax_in_place(row);
        }
        loss = loss / S::of(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populates gradients of every differentiable node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward", "called twice without reset_grads"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            let mut contribs = self.node_backward(i, &g);
            if fault_active(self.nodes[i].name) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(&g, &y)| g * y).collect()),
                    (*b, g.iter().zip(da).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::ScaleBy(a, s) => {
                let c = self.data(*s)[0];
                let gs = kernels::dot(g, self.data(*a));
                vec![(*a, g.iter().map(|&v| v * c).collect()), (*s, vec![gs])]
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        if x > S::zero() {
                            g
                        } else if x < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                vec![(*a, gx)]
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                vec![(*a, g.iter().zip(x).map(|(&g, &x)| if x > S::zero() { g } else { S::zero() }).collect())]
            }
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(y).map(|(&g, &s)| g * s * (S::one() - s)).collect())],
            Op::Softmax(a) => {
                let c = *node.value.shape().last().unwrap();
                let mut gx = vec![S::zero(); y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gain)[0];
                let gn = self.data(*gain);
                let mut gx = vec![S::zero(); xhat.len()];
                let mut gg = vec![S::zero(); c];
                let mut gb = vec![S::zero(); c];
                let inv_c = S::one() / S::of(c as f64);
                for r in 0..rstd.len() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..c {
                        let gh = gr[j] * gn[j];
                        s1 = s1 + gh;
                        s2 = s2 + gh * hr[j];
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gb[j] = gb[j] + gr[j];
                    }
                    for j in 0..c {
                        let gh = gr[j] * gn[j];
                        gx[r * c + j] = rstd[r] * (gh - s1 * inv_c - hr[j] * s2 * inv_c);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let l: usize = xs[2..].iter().product();
                let gn = self.data(*gain);
                let mut gx = vec![S::zero(); xhat.len()];
                let mut gg = vec![S::zero(); c];
                let mut gb = vec![S::zero(); c];
                let inv_m = S::one() / S::of((n * l) as f64);
                for ch in 0..c {
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * l;
                        for i in base..base + l {
                            s1 = s1 + g[i];
                            s2 = s2 + g[i] * xhat[i];
                        }
                    }
                    gb[ch] = s1;
                    gg[ch] = s2;
                    let k = gn[ch] * rstd[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * l;
                        for i in base..base + l {
                            gx[i] = if *batch_stats {
                                k * (g[i] - s1 * inv_m - xhat[i] * s2 * inv_m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    kernels::gemm_nt(m, k, n, g, self.data(*b), &mut ga);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.data(*a), g, &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![S::zero(); bt * m * k];
                let mut gb = vec![S::zero(); bt * k * n];
                for t in 0..bt {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    kernels::gemm_nt(m, k, n, gt, &db[t * k * n..(t + 1) * k * n], &mut ga[t * m * k..(t + 1) * m * k]);
                    kernels::gemm_tn(k, m, n, &da[t * m * k..(t + 1) * m * k], gt, &mut gb[t * k * n..(t + 1) * k * n]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::TransposeLast2(a) => {
                let xs = self.shape(*a);
                let r = xs.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                vec![(*a, scatter_permuted(g, xs, &axes))]
            }
            Op::Conv { x, k, geom, dims } => {
                let (gx, gk) = kernels::conv_backward(
                    self.data(*x),
                    self.data(*k),
                    g,
                    dims,
                    geom,
                    self.rg(*x),
                    self.rg(*k),
                );
                let mut out = Vec::new();
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gk) = gk {
                    out.push((*k, gk));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] = gx[idx] + gv;
                }
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool(a) => {
                let xs = self.shape(*a);
                let r = xs.len();
                let plane = xs[r - 2] * xs[r - 1];
                let inv = S::one() / S::of(plane as f64);
                let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                vec![(*a, gx)]
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x);
                let (outer, ext, inner) = around(xs, *axis);
                let inv = S::one() / S::of(ext as f64);
                let mut gx = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    for _ in 0..ext {
                        gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / S::of(n as f64); n])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute { x, axes } => vec![(*x, scatter_permuted(g, self.shape(*x), axes))],
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, ext, inner) = around(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![S::zero(); outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Flip { x, axis } => vec![(*x, flip_axis(g, self.shape(*x), *axis))],
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = around(shape, *axis);
                let mut parts: Vec<Vec<S>> = xs.iter().map(|&v| Vec::with_capacity(self.value(v).len())).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (p, &v) in parts.iter_mut().zip(xs) {
                        let ext = self.shape(v)[*axis];
                        p.extend_from_slice(&g[off..off + ext * inner]);
                        off += ext * inner;
                    }
                }
                xs.iter().copied().zip(parts).collect()
            }
            Op::AddBias { x, bias } => {
                let c = self.shape(*bias)[0];
                let mut gb = vec![S::zero(); c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::SoftThreshold { x, tau } => {
                let xd = self.data(*x);
                let t = self.data(*tau);
                let l = xd.len() / t.len();
                let mut gx = vec![S::zero(); xd.len()];
                let mut gt = vec![S::zero(); t.len()];
                for (c, &th) in t.iter().enumerate() {
                    for i in c * l..(c + 1) * l {
                        let v = xd[i];
                        if v.abs() > th {
                            gx[i] = g[i];
                            gt[c] = gt[c] - g[i] * v.signum();
                        }
                    }
                }
                vec![(*x, gx), (*tau, gt)]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())],
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / S::of(labels.len() as f64);
                let mut gx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (b, &y) in labels.iter().enumerate() {
                    gx[b * k + y] = gx[b * k + y] - scale;
                }
                vec![(*logits, gx)]
            }
        }
    }
}

#[inline]
pub(crate) fn shrink<S: Float>(v: S, th: S) -> S {
    let m = v.abs() - th;
    if m > S::zero() {
        v.signum() * m
    } else {
        S::zero()
    }
}

pub(crate) fn softmax_in_place<S: Float>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn flip_axis<S: Float>(src: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, ext, inner) = around(shape, axis);
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for e in (0..ext).rev() {
            let base = (o * ext + e) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    out
}

fn scatter_permuted<S: Float>(g: &[S], in_shape: &[usize], axes: &[usize]) -> Vec<S> {
    let offs = permute_offsets(in_shape, axes);
    let mut gx = vec![S::zero(); g.len()];
    for (&o, &v) in offs.iter().zip(g) {
        gx[o] = v;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 7.0]);

        let id = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let d = tape.matmul(id, a).unwrap();
        assert_eq!(tape.data(d), tape.data(a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_sum_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 3, 3]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = tape.conv2d(x, k, [1, 1], [0, 0]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[9.0]);

        let xv: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 4, 5], &xv));
        let mut kd = vec![0.0; 2 * 2 * 9];
        kd[4] = 1.0; // out 0 <- in 0 center
        kd[3 * 9 + 4] = 1.0; // out 1 <- in 1 center
        let k = tape.constant(t(&[2, 2, 3, 3], &kd));
        let y = tape.conv2d(x, k, [1, 1], [1, 1]).unwrap();
        assert_eq!(tape.data(y), &xv[..]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 2]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, [1, 1], [0, 0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv3d_sum_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 2, 2]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
        let y = tape.conv3d(x, k, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.data(y), &[8.0]);

        let xv: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.11).cos()).collect();
        let x = tape.constant(t(&[1, 3, 4, 5], &xv));
        let mut kd = vec![0.0; 27];
        kd[13] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3, 3], &kd));
        let y = tape.conv3d(x, k, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(tape.data(y), &xv[..]);
    }

    #[test]
    fn gap_hand_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 3., 5., 7.]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[4.0]);
    }

    #[test]
    fn sigmoid_and_single_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
        let x = tape.constant(t(&[3, 1], &[-4.0, 0.0, 17.0]));
        let p = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.data(p), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_and_mean_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[1., -2., 3., 0.5]).with_requires_grad());
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let xv = [1., -2., 3., 0.5];
        let x = tape.leaf(t(&[4], &xv).with_requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.mean_all(sq).unwrap();
        tape.backward(l).unwrap();
        let expect: Vec<f64> = xv.iter().map(|v| 2.0 * v / 4.0).collect();
        assert_eq!(tape.grad(x).unwrap(), &expect[..]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_requires_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract { .. })));
        tape.reset_grads();
        tape.backward(l).unwrap();
    }

    #[test]
    fn cross_entropy_label_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(tape.cross_entropy_logits(x, &[3]), Err(Error::Label { .. })));
        let l = tape.cross_entropy_logits(x, &[2]).unwrap();
        assert!((tape.data(l)[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_threshold_values_and_negative_tau() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.5, -0.1, -0.7]));
        let tau = tape.constant(t(&[1], &[0.2]));
        let y = tape.soft_threshold(x, tau).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.3).abs() < 1e-15 && d[1] == 0.0 && (d[2] + 0.5).abs() < 1e-15);
        let neg = tape.constant(t(&[1], &[-0.2]));
        assert!(matches!(tape.soft_threshold(x, neg), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[1e300]));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &v));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(back), &v[..]);
    }
}
