//! Recorded-tape reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced while evaluating a
//! model. Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and [`Graph::backward`] can walk it once in reverse.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the upstream
/// gradient, and returns one optional gradient per input (same order as the
/// inputs passed to [`Graph::custom`]).
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar {
        x: Var,
        s: Var,
    },
    AddChannel {
        x: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        g: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        k: Var,
        h: usize,
        w: usize,
        c: usize,
        ks: usize,
    },
    Upsample2x {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    AvgPool {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
        c: usize,
    },
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    LogSigmoid {
        x: Var,
        eps: f64,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        f: Box<dyn Function>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddChannel { .. } => "add_channel",
            Op::MulChannel { .. } => "mul_channel",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "conv2d_depthwise",
            Op::Upsample2x { .. } => "upsample2x",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Custom { f, .. } => f.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::AddChannel { x, b } => vec![*x, *b],
            Op::MulChannel { x, g } => vec![*x, *g],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Depthwise { x, k, .. } => vec![*x, *k],
            Op::Scale(x, _)
            | Op::Transpose { a: x, .. }
            | Op::Reshape(x)
            | Op::GatherRows { x, .. }
            | Op::Upsample2x { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool { x, .. }
            | Op::Silu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::LeakyRelu(x, _)
            | Op::LogSigmoid { x, .. }
            | Op::SoftmaxRows { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Dynamic computation graph. Confined to one thread from recording to
/// [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
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

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = match &op {
            Op::Leaf => false,
            op => op.inputs().iter().any(|v| nodes[v.0].tracked),
        };
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    /// Leaf node; `tracked` leaves receive gradients.
    pub fn leaf(&self, value: Tensor, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Untracked copy of `v`'s current value.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// First node (in evaluation order) holding a NaN or infinity, with the
    /// name of the operation that produced it.
    /// Which side of every kink the recorded piecewise ops landed on: the
    /// sign of each leaky-ReLU input and the clamp region of each clamped
    /// log-sigmoid. Two evaluations with equal patterns lie on the same
    /// smooth piece.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match node.op {
                Op::LeakyRelu(x, _) => {
                    out.extend(nodes[x.0].value.data().iter().map(|&v| u8::from(v >= 0.0)));
                }
                Op::LogSigmoid { x, eps } => {
                    out.extend(nodes[x.0].value.data().iter().map(|&v| {
                        let p = sigmoid(v);
                        if p <= eps {
                            0
                        } else if p >= 1.0 - eps {
                            2
                        } else {
                            1
                        }
                    }));
                }
                _ => {}
            }
        }
        out
    }

    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value_ref(x).map(f);
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, &sa, &sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.push(self.zip(a, b, |x, y| x + y), Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(self.zip(a, b, |x, y| x - y), Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(self.zip(a, b, |x, y| x * y), Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// `s * x` where `s` is a one-element tensor.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let s_shape = self.shape(s);
        if s_shape.iter().product::<usize>() != 1 {
            return Err(Error::dim("mul_scalar", &self.shape(x), &s_shape));
        }
        let sv = self.value_ref(s).data()[0];
        Ok(self.unary(x, |v| v * sv, Op::MulScalar { x, s }))
    }

    fn channel_broadcast(&self, op: &'static str, x: Var, c: Var) -> Result<usize> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        let channels = *sx.last().expect("non-empty shape");
        if sc.iter().product::<usize>() != channels || sc.last() != Some(&channels) {
            return Err(Error::dim(op, &sx, &sc));
        }
        Ok(channels)
    }

    /// Adds a per-channel vector along the last axis.
    pub fn add_channel(&self, x: Var, b: Var) -> Result<Var> {
        let c = self.channel_broadcast("add_channel", x, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let bv = nodes[b.0].value.data();
            let mut out = nodes[x.0].value.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += bv[i % c];
            }
            out
        };
        Ok(self.push(value, Op::AddChannel { x, b }))
    }

    /// Multiplies by a per-channel vector along the last axis.
    pub fn mul_channel(&self, x: Var, g: Var) -> Result<Var> {
        let c = self.channel_broadcast("mul_channel", x, g)?;
        let value = {
            let nodes = self.nodes.borrow();
            let gv = nodes[g.0].value.data();
            let mut out = nodes[x.0].value.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= gv[i % c];
            }
            out
        };
        Ok(self.push(value, Op::MulChannel { x, g }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let data = {
            let nodes = self.nodes.borrow();
            kernels::matmul(nodes[a.0].value.data(), nodes[b.0].value.data(), m, k, n)
        };
        let value = Tensor::new([m, n], data)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let [rows, cols] = sa[..] else {
            return Err(Error::dim("transpose", &sa, &[]));
        };
        let data = kernels::transpose(self.value_ref(a).data(), rows, cols);
        let value = Tensor::new([cols, rows], data)?;
        Ok(self.push(value, Op::Transpose { a, rows, cols }))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value_ref(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Row `t` of the output is row `index[t]` of the `[R, C]` input.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let [rows, cols] = sx[..] else {
            return Err(Error::dim("gather_rows", &sx, &[index.len()]));
        };
        if index.iter().any(|&i| i >= rows) || index.is_empty() {
            return Err(Error::dim("gather_rows", &sx, &[index.len()]));
        }
        let value = {
            let src = self.value_ref(x);
            let mut data = Vec::with_capacity(index.len() * cols);
            for &r in index {
                data.extend_from_slice(&src.data()[r * cols..(r + 1) * cols]);
            }
            Tensor::new([index.len(), cols], data)?
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
                cols,
            },
        ))
    }

    /// Square-kernel convolution of `[H, W, C_in]` with weights
    /// `[k, k, C_in, C_out]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (h, wd, cin, k, k2, wcin, cout) = match (&sx[..], &sw[..]) {
            ([h, wd, cin], [k, k2, wcin, cout]) => (*h, *wd, *cin, *k, *k2, *wcin, *cout),
            _ => return Err(Error::dim("conv2d", &sx, &sw)),
        };
        if k != k2 || cin != wcin {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            height: h,
            width: wd,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            pad,
        };
        let Some((ho, wo)) = geom.output_extent() else {
            return Err(Error::Config(format!(
                "conv2d kernel {k} stride {stride} pad {pad} does not fit input {sx:?}"
            )));
        };
        let data = {
            let nodes = self.nodes.borrow();
            kernels::conv2d(nodes[x.0].value.data(), nodes[w.0].value.data(), &geom)
        };
        let value = Tensor::new([ho, wo, cout], data)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }))
    }

    /// Same-padded per-channel convolution with kernels `[k, k, C]`, `k` odd.
    pub fn conv2d_depthwise(&self, x: Var, kernels: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernels));
        let (h, w, c, ks, ks2, kc) = match (&sx[..], &sk[..]) {
            ([h, w, c], [ks, ks2, kc]) => (*h, *w, *c, *ks, *ks2, *kc),
            _ => return Err(Error::dim("conv2d_depthwise", &sx, &sk)),
        };
        if ks % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {ks}")));
        }
        if ks != ks2 || kc != c {
            return Err(Error::dim("conv2d_depthwise", &sx, &sk));
        }
        let data = {
            let nodes = self.nodes.borrow();
            kernels::depthwise(nodes[x.0].value.data(), nodes[kernels.0].value.data(), h, w, c, ks)
        };
        let value = Tensor::new([h, w, c], data)?;
        Ok(self.push(
            value,
            Op::Depthwise {
                x,
                k: kernels,
                h,
                w,
                c,
                ks,
            },
        ))
    }

    fn hwc(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        match sx[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::dim(op, &sx, &[])),
        }
    }

    /// Nearest-neighbour x2 upsampling of `[H, W, C]`.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let (h, w, c) = self.hwc("upsample2x", x)?;
        let data = kernels::upsample2x(self.value_ref(x).data(), h, w, c);
        let value = Tensor::new([2 * h, 2 * w, c], data)?;
        Ok(self.push(value, Op::Upsample2x { x, h, w, c }))
    }

    pub fn avg_pool(&self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.hwc("avg_pool", x)?;
        if factor == 0 {
            return Err(Error::Config("pooling factor must be positive".into()));
        }
        let data = kernels::avg_pool(self.value_ref(x).data(), h, w, c, factor);
        let value = Tensor::new([h.div_ceil(factor), w.div_ceil(factor), c], data)?;
        Ok(self.push(value, Op::AvgPool { x, h, w, c, factor }))
    }

    /// Per-channel spatial mean, `[H, W, C] -> [1, 1, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (h, w, c) = self.hwc("global_avg_pool", x)?;
        let value = {
            let src = self.value_ref(x);
            let mut out = vec![0.0; c];
            for (i, v) in src.data().iter().enumerate() {
                out[i % c] += v;
            }
            let n = (h * w) as f64;
            out.iter_mut().for_each(|v| *v /= n);
            Tensor::new([1, 1, c], out)?
        };
        Ok(self.push(value, Op::GlobalAvgPool { x, c }))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// `ln(clamp(sigmoid(x), eps, 1 - eps))`. The gradient is zero where the
    /// clamp is active.
    pub fn log_sigmoid_clamped(&self, x: Var, eps: f64) -> Var {
        let lo = eps.ln();
        let hi = (-eps).ln_1p();
        self.unary(
            x,
            move |v| {
                let p = sigmoid(v);
                if p <= eps {
                    lo
                } else if p >= 1.0 - eps {
                    hi
                } else {
                    log_sigmoid(v)
                }
            },
            Op::LogSigmoid { x, eps },
        )
    }

    /// Softmax over the last axis of a `[R, C]` matrix.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let [_, cols] = sx[..] else {
            return Err(Error::dim("softmax_rows", &sx, &[]));
        };
        let mut value = self.value(x);
        for row in value.data_mut().chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(value, Op::SoftmaxRows { x, cols }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value_ref(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let t = self.value_ref(x);
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        self.push(Tensor::scalar(value), Op::Mean(x))
    }

    /// Records an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&self, inputs: &[Var], value: Tensor, f: Box<dyn Function>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
        )
    }

    /// Reverse pass from a one-element output. Every node is visited at most
    /// once; untracked nodes receive no gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape();
        if nodes[output.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[output.0].tracked {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            for (input, g) in backprop(&nodes, node, &gy) {
                if !nodes[input.0].tracked {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn elementwise(gy: &[f64], x: &[f64], d: impl Fn(f64) -> f64) -> Vec<f64> {
    gy.iter().zip(x).map(|(g, &v)| g * d(v)).collect()
}

/// Gradient contributions of one node to its inputs.
fn backprop(nodes: &[Node], node: &Node, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
        Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|g| -g).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            vec![
                (*a, gy.iter().zip(bv).map(|(g, y)| g * y).collect()),
                (*b, gy.iter().zip(av).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::Scale(x, f) => vec![(*x, gy.iter().map(|g| g * f).collect())],
        Op::MulScalar { x, s } => {
            let sv = val(*s)[0];
            let xv = val(*x);
            let gs: f64 = gy.iter().zip(xv).map(|(g, v)| g * v).sum();
            vec![(*x, gy.iter().map(|g| g * sv).collect()), (*s, vec![gs])]
        }
        Op::AddChannel { x, b } => {
            let c = nodes[b.0].value.numel();
            let mut gb = vec![0.0; c];
            for (i, g) in gy.iter().enumerate() {
                gb[i % c] += g;
            }
            vec![(*x, gy.to_vec()), (*b, gb)]
        }
        Op::MulChannel { x, g } => {
            let gv = val(*g);
            let xv = val(*x);
            let c = gv.len();
            let mut gg = vec![0.0; c];
            let mut gx = vec![0.0; gy.len()];
            for (i, grad) in gy.iter().enumerate() {
                gx[i] = grad * gv[i % c];
                gg[i % c] += grad * xv[i];
            }
            vec![(*x, gx), (*g, gg)]
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            // dA = dY B^T, dB = A^T dY
            let bt = kernels::transpose(bv, *k, *n);
            let at = kernels::transpose(av, *m, *k);
            vec![
                (*a, kernels::matmul(gy, &bt, *m, *n, *k)),
                (*b, kernels::matmul(&at, gy, *k, *m, *n)),
            ]
        }
        Op::Transpose { a, rows, cols } => {
            vec![(*a, kernels::transpose(gy, *cols, *rows))]
        }
        Op::Reshape(x) => vec![(*x, gy.to_vec())],
        Op::GatherRows { x, index, cols } => {
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (t, &r) in index.iter().enumerate() {
                for c in 0..*cols {
                    gx[r * cols + c] += gy[t * cols + c];
                }
            }
            vec![(*x, gx)]
        }
        Op::Conv2d { x, w, geom } => {
            let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), gy, geom);
            vec![(*x, gx), (*w, gw)]
        }
        Op::Depthwise { x, k, h, w, c, ks } => {
            let (gx, gk) = kernels::depthwise_backward(val(*x), val(*k), gy, *h, *w, *c, *ks);
            vec![(*x, gx), (*k, gk)]
        }
        Op::Upsample2x { x, h, w, c } => {
            vec![(*x, kernels::upsample2x_backward(gy, *h, *w, *c))]
        }
        Op::AvgPool { x, h, w, c, factor } => {
            vec![(*x, kernels::avg_pool_backward(gy, *h, *w, *c, *factor))]
        }
        Op::GlobalAvgPool { x, c } => {
            let n = nodes[x.0].value.numel();
            let sites = (n / c) as f64;
            vec![(*x, (0..n).map(|i| gy[i % c] / sites).collect())]
        }
        Op::Silu(x) => vec![(
            *x,
            elementwise(gy, val(*x), |v| {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            }),
        )],
        Op::Tanh(x) => {
            let y = node.value.data();
            vec![(*x, gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect())]
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            vec![(*x, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())]
        }
        Op::LeakyRelu(x, slope) => vec![(*x, elementwise(gy, val(*x), |v| if v >= 0.0 { 1.0 } else { *slope }))],
        Op::LogSigmoid { x, eps } => vec![(
            *x,
            elementwise(gy, val(*x), |v| {
                let p = sigmoid(v);
                if p <= *eps || p >= 1.0 - eps {
                    0.0
                } else {
                    sigmoid(-v)
                }
            }),
        )],
        Op::SoftmaxRows { x, cols } => {
            let y = node.value.data();
            let mut gx = vec![0.0; y.len()];
            for ((grow, yrow), out) in gy.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                for ((o, g), p) in out.iter_mut().zip(grow).zip(yrow) {
                    *o = p * (g - dot);
                }
            }
            vec![(*x, gx)]
        }
        Op::Sum(x) => vec![(*x, vec![gy[0]; nodes[x.0].value.numel()])],
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            vec![(*x, vec![gy[0] / n as f64; n])]
        }
        Op::Custom { inputs, f } => {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            f.backward(&values, &node.value, gy)
                .into_iter()
                .zip(inputs)
                .filter_map(|(g, v)| g.map(|g| (*v, g)))
                .collect()
        }
    }
}
