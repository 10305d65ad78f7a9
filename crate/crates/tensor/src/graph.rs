//! Append-only differentiation tape.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! read. Inputs always precede outputs, so a single reverse sweep over node
//! indices is a valid backward traversal.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, Conv2dGeom};
use crate::tensor::{numel, Tensor};
use crate::weights::ModelWeights;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// `backward` receives the input values, the output value and the gradient of
/// the output, and returns one optional gradient per input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Affine(Var, f64),
    DivScalar(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Gather(Var, Arc<Vec<usize>>),
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Unary(Unary, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, shape: [usize; 4], train: bool },
    Conv { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom, transpose: bool },
    AvgPool { x: Var, k: usize },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Affine(a, _) => vec![*a],
            Op::DivScalar(a, s) => vec![*a, *s],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Gather(a, _) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Unary(_, a) | Op::Softmax(a, _) | Op::LogSoftmax(a, _) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::AvgPool { x, .. } => vec![*x],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Statistics used by a batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with tracked running mean and variance.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Result of a batch-norm forward pass in batch mode.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    buffer_updates: Vec<(String, Vec<f64>)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Stores gradients of all bound trainable parameters into `weights`.
    pub fn write_to(&self, graph: &Graph, weights: &mut ModelWeights) -> Result<()> {
        for name in &graph.param_order {
            let v = graph.params[name];
            let t = weights
                .get_mut(name)
                .ok_or_else(|| TensorError::MissingParam(name.clone()))?;
            if t.requires_grad {
                t.grad = Some(self.get_or_zeros(graph, v));
            }
        }
        Ok(())
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        None => *slot = Some(g),
    }
}

/// True when `small` broadcasts against `big` by repetition over leading axes.
fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    numel(small) == 1 || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Gelu => gelu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Adds a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Adds a leaf that tracks gradients regardless of the tensor's flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.requires_grad = true;
        self.leaf(&t)
    }

    /// Copies `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = Node {
            op: Op::Leaf,
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Binds the named parameter of `weights` as a leaf; repeated binds of
    /// the same name return the same node.
    pub fn param(&mut self, weights: &ModelWeights, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = weights
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order.iter().map(|n| (n.as_str(), self.params[n]))
    }

    /// Queues a replacement value for a non-trainable buffer (e.g. running
    /// statistics), applied later with [`Graph::take_buffer_updates`].
    pub fn queue_buffer_update(&mut self, name: String, values: Vec<f64>) {
        self.buffer_updates.push((name, values));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcast(&sa, &sb) {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let inner = bv.len();
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % inner];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(Op::Binary(kind, a, b), sa, data))
    }

    /// `a + b`, where `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `a * scale`.
    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * scale).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Affine(a, scale), shape, data)
    }

    /// `a / s` for a single-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(invalid("div_scalar", "divisor must hold one element"));
        }
        let d = self.value(s)[0];
        let data = self.value(a).iter().map(|x| x / d).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::DivScalar(a, s), shape, data))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| kind.apply(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Unary(kind, a), shape, data)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[..., m, k] x b[k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, shape, out))
    }

    /// Batched `a[..., m, k] x b[..., k, n]` with identical leading axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            kernels::matmul_acc(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        Ok(self.push(Op::Bmm { a, b, batch, m, k, n }, shape, out))
    }

    // ---- shape manipulation -------------------------------------------

    /// Output element `i` is `a[map[i]]`.
    pub fn gather(&mut self, a: Var, map: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != map.len() {
            return Err(invalid("gather", "index map does not match output shape"));
        }
        let src = self.value(a);
        if map.iter().any(|&i| i >= src.len()) {
            return Err(invalid("gather", "index out of range"));
        }
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(Op::Gather(a, map), shape, data))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let map: Vec<usize> = (0..numel(&shape)).collect();
        self.gather(a, Arc::new(map), shape)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {}", shape.len())));
        }
        let map = kernels::permute_map(&shape, axes);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        self.gather(a, Arc::new(map), out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose_last", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid("slice", format!("range {start}+{len} on axis {axis} of {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for s in start..start + len {
                let base = (o * shape[axis] + s) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, Arc::new(map), out_shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", "axis out of range"));
        }
        let outer = numel(&first[..axis]);
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            let w = numel(&s[axis..]);
            widths.push(w);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            shape,
            data,
        ))
    }

    /// `(N, C·r², H, W) -> (N, C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(invalid("pixel_shuffle", format!("channels of {s:?} not divisible by {}", r * r)));
        }
        let c = s[1] / (r * r);
        let map = kernels::pixel_shuffle_map(s[0], c, s[2], s[3], r);
        self.gather(a, Arc::new(map), vec![s[0], c, s[2] * r, s[3] * r])
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(invalid("pixel_unshuffle", format!("spatial extent of {s:?} not divisible by {r}")));
        }
        let (h, w) = (s[2] / r, s[3] / r);
        let fwd = kernels::pixel_shuffle_map(s[0], s[1], h, w, r);
        let mut inv = vec![0; fwd.len()];
        for (out_idx, &src) in fwd.iter().enumerate() {
            inv[src] = out_idx;
        }
        self.gather(a, Arc::new(inv), vec![s[0], s[1] * r * r, h, w])
    }

    /// Nearest-neighbour upsampling of an NCHW map by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(invalid("upsample_nearest", "expects NCHW input and factor >= 1"));
        }
        let (oh, ow) = (s[2] * factor, s[3] * factor);
        let mut map = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for nc in 0..s[0] * s[1] {
            for y in 0..oh {
                for x in 0..ow {
                    map.push((nc * s[2] + y / factor) * s[3] + x / factor);
                }
            }
        }
        self.gather(a, Arc::new(map), vec![s[0], s[1], oh, ow])
    }

    /// Non-overlapping `k x k` average pooling of an NCHW map.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(invalid("avg_pool", format!("{s:?} not divisible by window {k}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let x = self.value(a);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        for nc in 0..s[0] * s[1] {
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    out[(nc * oh + y / k) * ow + xx / k] += x[(nc * s[2] + y) * s[3] + xx] * norm;
                }
            }
        }
        Ok(self.push(Op::AvgPool { x: a, k }, vec![s[0], s[1], oh, ow], out))
    }

    // ---- probability ------------------------------------------------

    /// Softmax over the last axis. `mask`, when given, marks excluded
    /// positions (`true`); its length must equal the product of a suffix of
    /// the input shape and it repeats over the leading axes. Excluded entries
    /// come out exactly zero and do not enter the normalization.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let x = self.value(a);
        if let Some(m) = mask {
            let mut ok = false;
            let mut p = 1;
            for d in shape.iter().rev() {
                p *= d;
                if p == m.len() {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(invalid("softmax", format!("mask of length {} does not fit {shape:?}", m.len())));
            }
        }
        let mut out = vec![0.0; x.len()];
        for (r, (row, orow)) in x.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| !m[(r * c + j) % m.len()]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    mx = mx.max(v);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(invalid("softmax", "every position of a row is masked"));
            }
            let mut z = 0.0;
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (v - mx).exp();
                    z += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        Ok(self.push(Op::Softmax(a, c), shape, out))
    }

    /// `softmax(a / tau)` with a learnable or constant single-element `tau`.
    pub fn softmax_with_temperature(&mut self, a: Var, tau: Var, mask: Option<&[bool]>) -> Result<Var> {
        if self.value(tau).len() != 1 || self.value(tau)[0] <= 0.0 {
            return Err(invalid("softmax_with_temperature", "temperature must be a positive scalar"));
        }
        let scaled = self.div_scalar(a, tau)?;
        self.softmax(scaled, mask)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (row, orow) in x.chunks(c).zip(out.chunks_mut(c)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(Op::LogSoftmax(a, c), shape, out)
    }

    // ---- normalization ----------------------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, shape, out))
    }

    /// Batch normalization of an NCHW map. In [`NormStats::Batch`] mode the
    /// per-channel batch moments are returned so callers can track running
    /// statistics.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm2d",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let count = (n * hw) as f64;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(stats, NormStats::Batch);
        match stats {
            NormStats::Batch => {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        mean[ch] += xv[base..base + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        var[ch] += xv[base..base + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
            }
            NormStats::Running { mean: m, var: v } => {
                if m.len() != c || v.len() != c {
                    return Err(invalid("batch_norm2d", "running statistics do not match channel count"));
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xv[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * gv[ch] + bv[ch];
                }
            }
        }
        let moments = train.then(|| BatchMoments {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect(),
        });
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                shape: [n, c, s[2], s[3]],
                train,
            },
            s,
            out,
        );
        Ok((v, moments))
    }

    // ---- convolution --------------------------------------------------

    /// 2-D cross-correlation. `x: [N,C,H,W]`, `w: [O,C,Kh,Kw]`, optional
    /// bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if sw[2] > sx[2] + 2 * pad || sw[3] > sx[3] + 2 * pad {
            return Err(invalid("conv2d", format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[2..])));
        }
        let geom = Conv2dGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            out_h: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            out_w: (sx[3] + 2 * pad - sw[3]) / stride + 1,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let mut out = kernels::corr_forward(&geom, self.value(x), self.value(w));
        self.add_channel_bias(&mut out, b, geom.batch, geom.out_ch, geom.out_h * geom.out_w)?;
        let shape = vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        Ok(self.push(Op::Conv { x, w, b, geom, transpose: false }, shape, out))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`].
    /// `x: [N,Ci,H,W]`, `w: [Ci,Co,Kh,Kw]`; output extent per axis is
    /// `(H-1)·stride - 2·pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let full_h = (sx[2] - 1) * stride + sw[2];
        let full_w = (sx[3] - 1) * stride + sw[3];
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(invalid("conv_transpose2d", "padding consumes the whole output"));
        }
        // viewed as the conv2d that maps the output back onto `x`
        let geom = Conv2dGeom {
            batch: sx[0],
            in_ch: sw[1],
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_ch: sw[0],
            out_h: sx[2],
            out_w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let mut out = kernels::corr_backward_data(&geom, self.value(x), self.value(w));
        self.add_channel_bias(&mut out, b, geom.batch, geom.in_ch, geom.in_h * geom.in_w)?;
        let shape = vec![geom.batch, geom.in_ch, geom.in_h, geom.in_w];
        Ok(self.push(Op::Conv { x, w, b, geom, transpose: true }, shape, out))
    }

    fn add_channel_bias(&self, out: &mut [f64], b: Option<Var>, n: usize, c: usize, hw: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv bias",
                    lhs: vec![c],
                    rhs: self.shape(b).to_vec(),
                });
            }
            let bv = self.value(b);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    out[base..base + hw].iter_mut().for_each(|o| *o += bv[ch]);
                }
            }
        }
        Ok(())
    }

    /// Appends an operation whose forward value was computed by the caller
    /// and whose backward rule is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, data: Vec<f64>, op: Box<dyn CustomOp>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                expected: numel(&shape),
                shape,
                actual: data.len(),
            });
        }
        Ok(self.push(Op::Custom(inputs.to_vec(), op), shape, data))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inner = bv.len();
                if self.wants(*a) {
                    let ga = acc(&mut grads[a.0], av.len());
                    match kind {
                        Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi),
                        Binary::Mul => {
                            for (i, x) in ga.iter_mut().enumerate() {
                                *x += g[i] * bv[i % inner];
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = acc(&mut grads[b.0], inner);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % inner] += match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[i],
                        };
                    }
                }
            }
            Op::Affine(a, s) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.iter().map(|v| v * s).collect());
                }
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s)[0];
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.iter().map(|v| v / d).collect());
                }
                if self.wants(*s) {
                    let av = self.value(*a);
                    let gs: f64 = g.iter().zip(av).map(|(gi, x)| -gi * x / (d * d)).sum();
                    add_into(&mut grads[s.0], vec![gs]);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    kernels::matmul_nt_acc(g, self.value(*b), ga, *m, *n, *k);
                }
                if self.wants(*b) {
                    let gb = acc(&mut grads[b.0], k * n);
                    kernels::matmul_tn_acc(self.value(*a), g, gb, *m, *k, *n);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let ga = acc(&mut grads[a.0], batch * m * k);
                    for i in 0..*batch {
                        kernels::matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let gb = acc(&mut grads[b.0], batch * k * n);
                    for i in 0..*batch {
                        kernels::matmul_tn_acc(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Gather(a, map) => {
                if self.wants(*a) {
                    let ga = acc(&mut grads[a.0], self.value(*a).len());
                    for (gi, &src) in g.iter().zip(map.iter()) {
                        ga[src] += gi;
                    }
                }
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.wants(v) {
                        let gv = acc(&mut grads[v.0], outer * w);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + w];
                            gv[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Unary(kind, a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x.iter().zip(&node.data))
                        .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                        .collect();
                    add_into(&mut grads[a.0], ga);
                }
            }
            Op::Softmax(a, c) => {
                if self.wants(*a) {
                    let mut ga = vec![0.0; g.len()];
                    for ((grow, yrow), garow) in g.chunks(*c).zip(node.data.chunks(*c)).zip(ga.chunks_mut(*c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..*c {
                            garow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], ga);
                }
            }
            Op::LogSoftmax(a, c) => {
                if self.wants(*a) {
                    let mut ga = vec![0.0; g.len()];
                    for ((grow, yrow), garow) in g.chunks(*c).zip(node.data.chunks(*c)).zip(ga.chunks_mut(*c)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..*c {
                            garow[j] = grow[j] - yrow[j].exp() * s;
                        }
                    }
                    add_into(&mut grads[a.0], ga);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let ga = acc(&mut grads[a.0], n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let gg = acc(&mut grads[gamma.0], c);
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % c] += gi * xhat[i];
                    }
                }
                if self.wants(*beta) {
                    let gb = acc(&mut grads[beta.0], c);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        let dxh: Vec<f64> = g[range.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxh.iter().sum();
                        let dot: f64 = dxh.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = rs / c as f64 * (c as f64 * dxh[j] - sum - xhat[r * c + j] * dot);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                shape,
                train,
            } => {
                let [n, c, h, w] = *shape;
                let hw = h * w;
                let gv = self.value(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], sum_gx.clone());
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], sum_g.clone());
                }
                if self.wants(*x) {
                    let count = (n * hw) as f64;
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gv[ch] * rstd[ch];
                            for i in base..base + hw {
                                gx[i] = if *train {
                                    k * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Conv { x, w, b, geom, transpose } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if !transpose {
                    if self.wants(*x) {
                        add_into(&mut grads[x.0], kernels::corr_backward_data(geom, g, wv));
                    }
                    if self.wants(*w) {
                        add_into(&mut grads[w.0], kernels::corr_backward_weight(geom, xv, g));
                    }
                } else {
                    if self.wants(*x) {
                        add_into(&mut grads[x.0], kernels::corr_forward(geom, g, wv));
                    }
                    if self.wants(*w) {
                        add_into(&mut grads[w.0], kernels::corr_backward_weight(geom, g, xv));
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let c = self.value(*b).len();
                        let n = node.shape[0];
                        let hw = node.shape[2] * node.shape[3];
                        let gb = acc(&mut grads[b.0], c);
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * hw;
                                gb[ch] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, k } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (oh, ow) = (s[2] / k, s[3] / k);
                    let norm = 1.0 / (k * k) as f64;
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for nc in 0..s[0] * s[1] {
                        for y in 0..s[2] {
                            for xx in 0..s[3] {
                                gx[(nc * s[2] + y) * s[3] + xx] = g[(nc * oh + y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&[f64]> = inputs.iter().map(|v| self.value(*v)).collect();
                let result = op.backward(&values, &node.data, g);
                for (v, gi) in inputs.iter().zip(result) {
                    if let Some(gi) = gi {
                        if self.wants(*v) {
                            add_into(&mut grads[v.0], gi);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![2.0, -1.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_path_contributes_zero() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![3.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        // only the tracked factor contributes: d(x*c)/dx = c
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
    }

    #[test]
    fn node_indices_increase_along_every_edge() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.gelu(x);
        let z = g.add(y, x).unwrap();
        for (i, node) in g.nodes.iter().enumerate() {
            assert!(node.op.inputs().iter().all(|v| v.0 < i));
        }
        assert!(z.0 > y.0 && y.0 > x.0);
    }

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.softmax(x, None).unwrap();
        // e^k / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, &v) in g.value(y).iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
        assert!((g.value(y)[0] - 0.0900).abs() < 5e-5);
        assert!((g.value(y)[1] - 0.2447).abs() < 5e-5);
        assert!((g.value(y)[2] - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn masked_softmax_forces_zero() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![5.0, 7.0]).unwrap();
        let y = g.softmax(x, Some(&[true, false])).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0]);
        assert!(g.softmax(x, Some(&[true, true])).is_err());
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![5.0, 7.0]).unwrap();
        let t = g.constant(vec![1], vec![0.0]).unwrap();
        assert!(g.softmax_with_temperature(x, t, None).is_err());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(vec![1], vec![0.0]).unwrap();
        let y = g.sigmoid(x);
        assert_eq!(g.item(y), 0.5);
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.item(y), 9.0);
    }

    #[test]
    fn conv_kernel_larger_than_padded_input_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let w = g.constant(vec![1, 1, 5, 5], vec![1.0; 25]).unwrap();
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
        assert!(g.conv2d(x, w, None, 1, 2).is_ok());
    }

    #[test]
    fn transpose_conv_doubles_extent() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3, 2, 2], vec![0.5; 12]).unwrap();
        let w = g.constant(vec![3, 5, 4, 4], vec![0.1; 240]).unwrap();
        let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 4, 4]);
    }

    #[test]
    fn pixel_shuffle_shapes() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 12, 16, 16], vec![0.0; 12 * 256]).unwrap();
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 32, 32]);
        let bad = g.constant(vec![1, 6, 2, 2], vec![0.0; 24]).unwrap();
        assert!(g.pixel_shuffle(bad, 2).is_err());
    }

    #[test]
    fn batch_norm_training_output_is_standardized() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 23) as f64 - 7.0) * 40.0).collect();
        let x = g.constant(vec![2, 3, 4, 4], data).unwrap();
        let gamma = g.constant(vec![3], vec![1.0; 3]).unwrap();
        let beta = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let (y, moments) = g.batch_norm2d(x, gamma, beta, NormStats::Batch, 1e-5).unwrap();
        assert!(moments.is_some());
        let v = g.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| v[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn concat_and_slice_are_consistent() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s), &[9.0, 8.0]);
    }
}
